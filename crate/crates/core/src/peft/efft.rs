use crate::autodiff::{NodeId, Tape};
use crate::error::{shape_err, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{core_slab, low_rank, slot_product, Role};

fn check_dims(d: usize, r1: usize, r2: usize) -> Result<()> {
    if d == 0 || r1 == 0 || r2 == 0 {
        return Err(shape_err!(
            "factor dimensions must be positive (d={d}, r1={r1}, r2={r2})"
        ));
    }
    Ok(())
}

fn check_scale<T: Scalar>(s: T) -> Result<()> {
    if !(s > T::zero() && s.is_finite()) {
        return Err(crate::error::contract_err!("scale must be positive, got {s}"));
    }
    Ok(())
}

/// Shared-across-layers delta `ΔW = s · Σ ×₂ U ×₃ V ∈ ℝ^{3 × 4d × d}`.
///
/// Slot 0 is `[W_q; W_k; W_v; W_o]` stacked vertically, slot 1 is `W_FFN1ᵀ`
/// and slot 2 is `W_FFN2`, so one `U ∈ ℝ^{4d × r₁}` serves all three.
#[derive(Debug, Clone, PartialEq)]
pub struct Efft1Factors<T> {
    /// `3 × r1 × r2`
    pub sigma: Tensor<T>,
    /// `4d × r1`
    pub u: Tensor<T>,
    /// `d × r2`, zero at initialization
    pub v: Tensor<T>,
    pub s: T,
    pub d: usize,
    pub r1: usize,
    pub r2: usize,
}

impl<T: Scalar> Efft1Factors<T> {
    pub fn init(d: usize, r1: usize, r2: usize, s: T, sigma_std: T, rng: &mut Rng) -> Result<Self> {
        check_dims(d, r1, r2)?;
        check_scale(s)?;
        Ok(Efft1Factors {
            sigma: Tensor::randn(&[3, r1, r2], sigma_std, rng)?,
            u: Tensor::randn(&[4 * d, r1], sigma_std, rng)?,
            v: Tensor::zeros(&[d, r2])?,
            s,
            d,
            r1,
            r2,
        })
    }

    /// `ΔW` as a `3 × 4d × d` tensor; slot `i` is `s · U · Σᵢ · Vᵀ`.
    pub fn materialize(&self) -> Result<Tensor<T>> {
        let slots = (0..3)
            .map(|i| slot_product(&self.u, &self.sigma.slab(i)?, &self.v, self.s))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&slots)
    }

    pub fn delta_for(&self, role: Role) -> Result<Tensor<T>> {
        let d = self.d;
        match role.attention_index() {
            Some(k) => slot_product(
                &self.u.slice_rows(k * d, (k + 1) * d)?,
                &self.sigma.slab(0)?,
                &self.v,
                self.s,
            ),
            None if role == Role::Ffn1 => slot_product(&self.u, &self.sigma.slab(1)?, &self.v, self.s)?.transpose(),
            None => slot_product(&self.u, &self.sigma.slab(2)?, &self.v, self.s),
        }
    }

    pub(crate) fn apply_on_tape(&self, tape: &mut Tape<T>, ids: &[NodeId], x: NodeId, role: Role) -> Result<NodeId> {
        let (sigma, u, v) = (ids[0], ids[1], ids[2]);
        let d = self.d;
        match role.attention_index() {
            Some(k) => {
                let u_k = tape.slice_rows(u, k * d, (k + 1) * d)?;
                let core = core_slab(tape, sigma, 0, self.r1)?;
                low_rank(tape, x, u_k, core, v, self.s)
            }
            None if role == Role::Ffn1 => {
                // x · (s U Σ₁ Vᵀ)ᵀ = s · ((x V) Σ₁ᵀ) Uᵀ
                let core = core_slab(tape, sigma, 1, self.r1)?;
                let core_t = tape.transpose(core)?;
                low_rank(tape, x, v, core_t, u, self.s)
            }
            None => {
                let core = core_slab(tape, sigma, 2, self.r1)?;
                low_rank(tape, x, u, core, v, self.s)
            }
        }
    }
}

/// Separately factorized attention and feed-forward deltas, shared across
/// layers: `ΔW₁ = s₁ · Σ₁ ×₂ U₁ ×₃ V₁ ∈ ℝ^{4 × d × d}` with slots Q, K, V, O
/// and `ΔW₂ = s₂ · Σ₂ ×₂ U₂ ×₃ V₂ ∈ ℝ^{2 × 4d × d}` with slots `W_FFN1ᵀ`,
/// `W_FFN2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Efft2Factors<T> {
    /// `4 × r1 × r2`
    pub sigma1: Tensor<T>,
    /// `d × r1`
    pub u1: Tensor<T>,
    /// `d × r2`, zero at initialization
    pub v1: Tensor<T>,
    /// `2 × r1 × r2`
    pub sigma2: Tensor<T>,
    /// `4d × r1`
    pub u2: Tensor<T>,
    /// `d × r2`, zero at initialization
    pub v2: Tensor<T>,
    pub s1: T,
    pub s2: T,
    pub d: usize,
    pub r1: usize,
    pub r2: usize,
}

impl<T: Scalar> Efft2Factors<T> {
    pub fn init(d: usize, r1: usize, r2: usize, s1: T, s2: T, sigma_std: T, rng: &mut Rng) -> Result<Self> {
        check_dims(d, r1, r2)?;
        check_scale(s1)?;
        check_scale(s2)?;
        Ok(Efft2Factors {
            sigma1: Tensor::randn(&[4, r1, r2], sigma_std, rng)?,
            u1: Tensor::randn(&[d, r1], sigma_std, rng)?,
            v1: Tensor::zeros(&[d, r2])?,
            sigma2: Tensor::randn(&[2, r1, r2], sigma_std, rng)?,
            u2: Tensor::randn(&[4 * d, r1], sigma_std, rng)?,
            v2: Tensor::zeros(&[d, r2])?,
            s1,
            s2,
            d,
            r1,
            r2,
        })
    }

    /// `(ΔW₁, ΔW₂)` with shapes `4 × d × d` and `2 × 4d × d`.
    pub fn materialize(&self) -> Result<(Tensor<T>, Tensor<T>)> {
        let attn = (0..4)
            .map(|i| slot_product(&self.u1, &self.sigma1.slab(i)?, &self.v1, self.s1))
            .collect::<Result<Vec<_>>>()?;
        let ffn = (0..2)
            .map(|i| slot_product(&self.u2, &self.sigma2.slab(i)?, &self.v2, self.s2))
            .collect::<Result<Vec<_>>>()?;
        Ok((Tensor::stack(&attn)?, Tensor::stack(&ffn)?))
    }

    pub fn delta_for(&self, role: Role) -> Result<Tensor<T>> {
        match role.attention_index() {
            Some(k) => slot_product(&self.u1, &self.sigma1.slab(k)?, &self.v1, self.s1),
            None if role == Role::Ffn1 => slot_product(&self.u2, &self.sigma2.slab(0)?, &self.v2, self.s2)?.transpose(),
            None => slot_product(&self.u2, &self.sigma2.slab(1)?, &self.v2, self.s2),
        }
    }

    pub(crate) fn apply_on_tape(&self, tape: &mut Tape<T>, ids: &[NodeId], x: NodeId, role: Role) -> Result<NodeId> {
        let (sigma1, u1, v1, sigma2, u2, v2) = (ids[0], ids[1], ids[2], ids[3], ids[4], ids[5]);
        match role.attention_index() {
            Some(k) => {
                let core = core_slab(tape, sigma1, k, self.r1)?;
                low_rank(tape, x, u1, core, v1, self.s1)
            }
            None if role == Role::Ffn1 => {
                let core = core_slab(tape, sigma2, 0, self.r1)?;
                let core_t = tape.transpose(core)?;
                low_rank(tape, x, v2, core_t, u2, self.s2)
            }
            None => {
                let core = core_slab(tape, sigma2, 1, self.r1)?;
                low_rank(tape, x, u2, core, v2, self.s2)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::{Factors, WeightRole};

    /// Entry-wise evaluation of `s · Σ_{t1,t2} Σ[i,t1,t2] U[j,t1] V[k,t2]`,
    /// summing over `t1` inside `t2`.
    fn brute_force(sigma: &Tensor<f64>, u: &Tensor<f64>, v: &Tensor<f64>, s: f64) -> Tensor<f64> {
        let (slots, r1, r2) = (sigma.shape()[0], sigma.shape()[1], sigma.shape()[2]);
        let (rows, cols) = (u.shape()[0], v.shape()[0]);
        let mut out = vec![0.0; slots * rows * cols];
        for i in 0..slots {
            for j in 0..rows {
                for k in 0..cols {
                    let mut acc = 0.0;
                    for t2 in 0..r2 {
                        let mut inner = 0.0;
                        for t1 in 0..r1 {
                            inner += u.at(j, t1) * sigma.data()[(i * r1 + t1) * r2 + t2];
                        }
                        acc += inner * v.at(k, t2);
                    }
                    out[(i * rows + j) * cols + k] = s * acc;
                }
            }
        }
        Tensor::new(&[slots, rows, cols], out).unwrap()
    }

    fn randomized_efft1(d: usize, r1: usize, r2: usize, s: f64, seed: u64) -> Efft1Factors<f64> {
        let mut rng = Rng::new(seed);
        let mut f = Efft1Factors::init(d, r1, r2, s, 1.0, &mut rng).unwrap();
        f.v = Tensor::randn(&[d, r2], 1.0, &mut rng).unwrap();
        f
    }

    #[test]
    fn init_is_zero_and_seed_dependent() {
        let a = Efft1Factors::<f64>::init(6, 2, 3, 10.0, 0.02, &mut Rng::new(1)).unwrap();
        let b = Efft1Factors::<f64>::init(6, 2, 3, 10.0, 0.02, &mut Rng::new(2)).unwrap();
        assert_ne!(a.u, b.u);
        let (ma, mb) = (a.materialize().unwrap(), b.materialize().unwrap());
        assert_eq!(ma.shape(), &[3, 24, 6]);
        assert!(ma.data().iter().all(|&x| x == 0.0));
        assert_eq!(ma, mb);
    }

    #[test]
    fn init_rejects_zero_rank() {
        assert!(Efft1Factors::<f64>::init(4, 0, 2, 1.0, 0.02, &mut Rng::new(0)).is_err());
        assert!(Efft2Factors::<f64>::init(0, 1, 2, 1.0, 1.0, 0.02, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn unit_factors_give_constant_delta() {
        let d = 3;
        let f = Efft1Factors {
            sigma: Tensor::ones(&[3, 1, 1]).unwrap(),
            u: Tensor::ones(&[4 * d, 1]).unwrap(),
            v: Tensor::ones(&[d, 1]).unwrap(),
            s: 2.0,
            d,
            r1: 1,
            r2: 1,
        };
        assert!(f.materialize().unwrap().data().iter().all(|&x| x == 2.0));
    }

    #[test]
    fn materialize_matches_brute_force_exactly() {
        for seed in 0..10 {
            let f = randomized_efft1(4, 2, 3, 0.7, seed);
            assert_eq!(f.materialize().unwrap(), brute_force(&f.sigma, &f.u, &f.v, f.s));
        }
    }

    #[test]
    fn efft2_matches_brute_force_exactly() {
        let mut rng = Rng::new(5);
        let mut f = Efft2Factors::init(5, 3, 2, 10.0, 0.1, 1.0, &mut rng).unwrap();
        f.v1 = Tensor::randn(&[5, 2], 1.0, &mut rng).unwrap();
        f.v2 = Tensor::randn(&[5, 2], 1.0, &mut rng).unwrap();
        let (w1, w2) = f.materialize().unwrap();
        assert_eq!(w1, brute_force(&f.sigma1, &f.u1, &f.v1, f.s1));
        assert_eq!(w2, brute_force(&f.sigma2, &f.u2, &f.v2, f.s2));
    }

    #[test]
    fn delta_layout() {
        let f = randomized_efft1(4, 2, 2, 1.0, 7);
        let full = f.materialize().unwrap();
        let slot0 = full.slab(0).unwrap();
        assert_eq!(f.delta_for(Role::Q).unwrap(), slot0.slice_rows(0, 4).unwrap());
        assert_eq!(f.delta_for(Role::O).unwrap(), slot0.slice_rows(12, 16).unwrap());
        let ffn1 = f.delta_for(Role::Ffn1).unwrap();
        assert_eq!(ffn1.shape(), &[4, 16]);
        assert_eq!(ffn1, full.slab(1).unwrap().transpose().unwrap());
        assert_eq!(f.delta_for(Role::Ffn2).unwrap(), full.slab(2).unwrap());

        let shared = Factors::Efft1(f);
        assert_eq!(
            shared.delta_for(WeightRole::new(Role::Q, 0)).unwrap(),
            shared.delta_for(WeightRole::new(Role::Q, 7)).unwrap()
        );
    }

    #[test]
    fn low_rank_path_matches_materialized() {
        let f = Factors::Efft1(randomized_efft1(8, 2, 2, 3.0, 9));
        let mut rng = Rng::new(10);
        for role in Role::ALL {
            let (d_in, _) = role.dims(8);
            let x = Tensor::randn(&[5, d_in], 1.0, &mut rng).unwrap();
            let w = WeightRole::new(role, 0);
            let fast = f.apply_delta(&x, w).unwrap();
            let slow = x.matmul(&f.delta_for(w).unwrap()).unwrap();
            assert!(fast.sub(&slow).unwrap().max_abs() < 1e-12, "{role}");
        }
    }

    #[test]
    fn identity_probe_recovers_delta() {
        let f = Factors::Efft1(randomized_efft1(6, 2, 2, 1.0, 11));
        let w = WeightRole::new(Role::Q, 3);
        let probe = f.apply_delta(&Tensor::eye(6).unwrap(), w).unwrap();
        assert!(probe.sub(&f.delta_for(w).unwrap()).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn parameter_counts() {
        for (d, r, expected) in [(768, 16, 62_208), (768, 32, 125_952)] {
            let f = Factors::Efft1(Efft1Factors::<f64>::init(d, r, r, 1.0, 0.02, &mut Rng::new(0)).unwrap());
            assert_eq!(f.count_params(), expected);
            assert_eq!(f.count_params(), 5 * d * r + 3 * r * r);
        }
        let f2 = Efft2Factors::<f64>::init(768, 16, 16, 1.0, 1.0, 0.02, &mut Rng::new(0)).unwrap();
        assert_eq!(Factors::Efft2(f2).count_params(), 87_552);
        let wide = Efft2Factors::<f64>::init(16, 8, 32, 1.0, 1.0, 0.02, &mut Rng::new(0)).unwrap();
        assert_eq!(wide.sigma1.shape(), &[4, 8, 32]);
        assert_eq!(wide.v2.shape(), &[16, 32]);
    }
}
