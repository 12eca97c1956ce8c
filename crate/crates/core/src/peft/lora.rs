use std::collections::BTreeMap;

use crate::autodiff::{NodeId, Tape};
use crate::error::{contract_err, shape_err, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{Role, WeightRole};

/// `ΔW = s · W_down · W_up` for a single weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair<T> {
    /// `d_in × r`, Gaussian
    pub w_down: Tensor<T>,
    /// `r × d_out`, zero at initialization
    pub w_up: Tensor<T>,
}

impl<T: Scalar> LoraPair<T> {
    pub fn init(d_in: usize, d_out: usize, r: usize, sigma_std: T, rng: &mut Rng) -> Result<Self> {
        if d_in == 0 || d_out == 0 || r == 0 {
            return Err(shape_err!("LoRA dimensions must be positive ({d_in}x{d_out}, r={r})"));
        }
        Ok(LoraPair {
            w_down: Tensor::randn(&[d_in, r], sigma_std, rng)?,
            w_up: Tensor::zeros(&[r, d_out])?,
        })
    }
}

/// Independent low-rank pairs for every targeted matrix of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors<T> {
    pub adapters: BTreeMap<WeightRole, LoraPair<T>>,
    pub s: T,
    pub r: usize,
    pub d: usize,
}

impl<T: Scalar> LoraFactors<T> {
    /// Pairs for `roles` in each of `layers` layers, drawn layer by layer.
    pub fn init(d: usize, layers: usize, roles: &[Role], r: usize, s: T, sigma_std: T, rng: &mut Rng) -> Result<Self> {
        if !(s > T::zero() && s.is_finite()) {
            return Err(contract_err!("scale must be positive, got {s}"));
        }
        let mut adapters = BTreeMap::new();
        for layer in 0..layers {
            for &role in roles {
                let (d_in, d_out) = role.dims(d);
                adapters.insert(
                    WeightRole::new(role, layer),
                    LoraPair::init(d_in, d_out, r, sigma_std, rng)?,
                );
            }
        }
        Ok(LoraFactors { adapters, s, r, d })
    }

    fn pair(&self, role: WeightRole) -> Result<(usize, &LoraPair<T>)> {
        self.adapters
            .iter()
            .enumerate()
            .find(|(_, (w, _))| **w == role)
            .map(|(i, (_, p))| (i, p))
            .ok_or_else(|| contract_err!("LoRA has no adapter for {} in layer {}", role.role, role.layer))
    }

    pub fn delta_for(&self, role: WeightRole) -> Result<Tensor<T>> {
        let (_, p) = self.pair(role)?;
        Ok(p.w_down.matmul(&p.w_up)?.scale(self.s))
    }

    pub(crate) fn apply_on_tape(
        &self,
        tape: &mut Tape<T>,
        ids: &[NodeId],
        x: NodeId,
        role: WeightRole,
    ) -> Result<NodeId> {
        let (i, _) = self.pair(role)?;
        let down = tape.matmul(x, ids[2 * i])?;
        let up = tape.matmul(down, ids[2 * i + 1])?;
        tape.scale(up, self.s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::Factors;

    #[test]
    fn zero_at_init() {
        let p = LoraPair::<f64>::init(8, 32, 4, 0.02, &mut Rng::new(1)).unwrap();
        let delta = p.w_down.matmul(&p.w_up).unwrap();
        assert_eq!(delta.shape(), &[8, 32]);
        assert!(delta.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn qv_rank8_vit_base_count() {
        // rank 8 on W_q and W_v of a 12-layer, d = 768 backbone
        let f = LoraFactors::<f64>::init(768, 12, &[Role::Q, Role::V], 8, 1.0, 0.02, &mut Rng::new(0)).unwrap();
        assert_eq!(Factors::Lora(f).count_params(), 294_912);
    }

    #[test]
    fn untargeted_role_is_contract_error() {
        let f = Factors::Lora(LoraFactors::<f64>::init(4, 2, &[Role::Q], 2, 1.0, 0.02, &mut Rng::new(0)).unwrap());
        assert!(f.covers(WeightRole::new(Role::Q, 1)));
        assert!(!f.covers(WeightRole::new(Role::K, 1)));
        assert!(f.delta_for(WeightRole::new(Role::K, 0)).is_err());
        assert!(f.delta_for(WeightRole::new(Role::Q, 2)).is_err());
    }

    #[test]
    fn apply_matches_materialized_per_layer() {
        let mut rng = Rng::new(4);
        let mut f = LoraFactors::<f64>::init(4, 2, &Role::ALL, 2, 2.0, 0.5, &mut rng).unwrap();
        for p in f.adapters.values_mut() {
            let shape = p.w_up.shape().to_vec();
            p.w_up = Tensor::randn(&shape, 1.0, &mut rng).unwrap();
        }
        let f = Factors::Lora(f);
        let q0 = f.delta_for(WeightRole::new(Role::Q, 0)).unwrap();
        let q1 = f.delta_for(WeightRole::new(Role::Q, 1)).unwrap();
        assert_ne!(q0, q1);
        for role in Role::ALL {
            let (d_in, _) = role.dims(4);
            let x = Tensor::randn(&[3, d_in], 1.0, &mut rng).unwrap();
            let w = WeightRole::new(role, 1);
            let fast = f.apply_delta(&x, w).unwrap();
            let slow = x.matmul(&f.delta_for(w).unwrap()).unwrap();
            assert!(fast.sub(&slow).unwrap().max_abs() < 1e-12);
        }
    }
}
