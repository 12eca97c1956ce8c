use crate::autodiff::{NodeId, Tape};
use crate::error::{contract_err, shape_err, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{core_slab, low_rank, slot_product, Role, WeightRole};

/// Slots per layer: Q, K, V, O, four `d × d` column blocks of `W_FFN1` and
/// four `d × d` row blocks of `W_FFN2`.
pub const SLOTS_PER_LAYER: usize = 12;

/// Tensor-train FacT baseline: `ΔW = s · Σ ×₂ U ×₃ V` with
/// `Σ ∈ ℝ^{12L × r₁ × r₂}` and `U, V` shared by all `d × d` slots.
#[derive(Debug, Clone, PartialEq)]
pub struct FactTtFactors<T> {
    /// `12L × r1 × r2`
    pub sigma: Tensor<T>,
    /// `d × r1`
    pub u: Tensor<T>,
    /// `d × r2`, zero at initialization
    pub v: Tensor<T>,
    pub s: T,
    pub d: usize,
    pub layers: usize,
    pub r1: usize,
    pub r2: usize,
}

impl<T: Scalar> FactTtFactors<T> {
    pub fn init(d: usize, layers: usize, r1: usize, r2: usize, s: T, sigma_std: T, rng: &mut Rng) -> Result<Self> {
        if d == 0 || layers == 0 || r1 == 0 || r2 == 0 {
            return Err(shape_err!(
                "FacT-TT dimensions must be positive (d={d}, L={layers}, r1={r1}, r2={r2})"
            ));
        }
        if !(s > T::zero() && s.is_finite()) {
            return Err(contract_err!("scale must be positive, got {s}"));
        }
        Ok(FactTtFactors {
            sigma: Tensor::randn(&[SLOTS_PER_LAYER * layers, r1, r2], sigma_std, rng)?,
            u: Tensor::randn(&[d, r1], sigma_std, rng)?,
            v: Tensor::zeros(&[d, r2])?,
            s,
            d,
            layers,
            r1,
            r2,
        })
    }

    /// All `12L` slots as a `12L × d × d` tensor.
    pub fn materialize(&self) -> Result<Tensor<T>> {
        let slots = (0..SLOTS_PER_LAYER * self.layers)
            .map(|i| slot_product(&self.u, &self.sigma.slab(i)?, &self.v, self.s))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&slots)
    }

    fn base(&self, role: WeightRole) -> Result<usize> {
        if role.layer >= self.layers {
            return Err(contract_err!(
                "layer {} outside the {} layers of this FacT-TT core",
                role.layer,
                self.layers
            ));
        }
        Ok(role.layer * SLOTS_PER_LAYER)
    }

    fn slot(&self, index: usize) -> Result<Tensor<T>> {
        slot_product(&self.u, &self.sigma.slab(index)?, &self.v, self.s)
    }

    pub fn delta_for(&self, role: WeightRole) -> Result<Tensor<T>> {
        let base = self.base(role)?;
        match role.role {
            Role::Q => self.slot(base),
            Role::K => self.slot(base + 1),
            Role::V => self.slot(base + 2),
            Role::O => self.slot(base + 3),
            Role::Ffn1 => {
                let blocks = (4..8).map(|c| self.slot(base + c)).collect::<Result<Vec<_>>>()?;
                Tensor::concat_cols(&blocks.iter().collect::<Vec<_>>())
            }
            Role::Ffn2 => {
                let blocks = (8..12).map(|c| self.slot(base + c)).collect::<Result<Vec<_>>>()?;
                Tensor::concat_rows(&blocks.iter().collect::<Vec<_>>())
            }
        }
    }

    pub(crate) fn apply_on_tape(
        &self,
        tape: &mut Tape<T>,
        ids: &[NodeId],
        x: NodeId,
        role: WeightRole,
    ) -> Result<NodeId> {
        let (sigma, u, v) = (ids[0], ids[1], ids[2]);
        let base = self.base(role)?;
        let slot_apply = |tape: &mut Tape<T>, input: NodeId, index: usize| {
            let core = core_slab(tape, sigma, index, self.r1)?;
            low_rank(tape, input, u, core, v, self.s)
        };
        match role.role {
            Role::Q => slot_apply(tape, x, base),
            Role::K => slot_apply(tape, x, base + 1),
            Role::V => slot_apply(tape, x, base + 2),
            Role::O => slot_apply(tape, x, base + 3),
            Role::Ffn1 => {
                let parts = (4..8)
                    .map(|c| slot_apply(tape, x, base + c))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_cols(&parts)
            }
            Role::Ffn2 => {
                let d = self.d;
                let mut acc: Option<NodeId> = None;
                for c in 0..4 {
                    let x_c = tape.slice_cols(x, c * d, (c + 1) * d)?;
                    let y = slot_apply(tape, x_c, base + 8 + c)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, y)?,
                        None => y,
                    });
                }
                Ok(acc.expect("four blocks"))
            }
        }
    }
}
