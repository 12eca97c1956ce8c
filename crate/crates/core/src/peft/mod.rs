//! Factorized additive weight deltas.
//!
//! Four parameterizations of `ΔW` share one interface through [`Factors`]:
//!
//! * [`Efft1Factors`]: a single `3 × 4d × d` tensor `s · Σ ×₂ U ×₃ V`
//!   holding the attention block (`[W_q; W_k; W_v; W_o]`), `W_FFN1ᵀ` and
//!   `W_FFN2`, shared by every tuned layer.
//! * [`Efft2Factors`]: the attention deltas (`4 × d × d`) and feed-forward
//!   deltas (`2 × 4d × d`) factorized separately, also shared across layers.
//! * [`LoraFactors`]: one `s · W_down · W_up` pair per tuned matrix.
//! * [`FactTtFactors`]: `12L` per-layer `d × d` slots from one core with
//!   shared `U` and `V`.
//!
//! All backbone weights are stored `d_in × d_out` and applied as `X · W`.
//! Every parameterization zero-initializes one factor, so the delta is
//! exactly zero before training.

mod efft;
mod fact_tt;
mod lora;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use efft::{Efft1Factors, Efft2Factors};
pub use fact_tt::FactTtFactors;
pub use lora::{LoraFactors, LoraPair};

use crate::autodiff::{Gradients, NodeId, Tape};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian factors at initialization.
pub const DEFAULT_SIGMA_STD: f64 = 0.02;

/// The six tunable weight matrices of a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Q,
    K,
    V,
    O,
    Ffn1,
    Ffn2,
}

impl Role {
    pub const ALL: [Role; 6] = [Role::Q, Role::K, Role::V, Role::O, Role::Ffn1, Role::Ffn2];

    pub fn block(self) -> Block {
        match self {
            Role::Q | Role::K | Role::V | Role::O => Block::Mhsa,
            Role::Ffn1 | Role::Ffn2 => Block::Ffn,
        }
    }

    /// `(d_in, d_out)` of the role's weight for hidden size `d`.
    pub fn dims(self, d: usize) -> (usize, usize) {
        match self {
            Role::Ffn1 => (d, 4 * d),
            Role::Ffn2 => (4 * d, d),
            _ => (d, d),
        }
    }

    /// Position of a Q/K/V/O matrix inside the stacked attention slot.
    fn attention_index(self) -> Option<usize> {
        match self {
            Role::Q => Some(0),
            Role::K => Some(1),
            Role::V => Some(2),
            Role::O => Some(3),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::O => "o",
            Role::Ffn1 => "ffn1",
            Role::Ffn2 => "ffn2",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown weight role `{s}`")))
    }
}

/// Transformer sub-block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    Mhsa,
    Ffn,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::Mhsa => "mhsa",
            Block::Ffn => "ffn",
        })
    }
}

impl FromStr for Block {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mhsa" => Ok(Block::Mhsa),
            "ffn" => Ok(Block::Ffn),
            _ => Err(Error::Config(format!("unknown block `{s}` (expected mhsa or ffn)"))),
        }
    }
}

/// A weight matrix of a specific layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct WeightRole {
    pub layer: usize,
    pub role: Role,
}

impl WeightRole {
    pub fn new(role: Role, layer: usize) -> Self {
        WeightRole { layer, role }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Efft1,
    Efft2,
    Lora,
    FactTt,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Efft1, Method::Efft2, Method::Lora, Method::FactTt];

    pub fn name(self) -> &'static str {
        match self {
            Method::Efft1 => "efft1",
            Method::Efft2 => "efft2",
            Method::Lora => "lora",
            Method::FactTt => "fact_tt",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}` (expected efft1, efft2, lora or fact_tt)")))
    }
}

/// Everything needed to allocate a factor set of a given shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSpec {
    pub method: Method,
    pub d: usize,
    /// Layer count; only LoRA and FacT-TT depend on it.
    pub layers: usize,
    pub r1: usize,
    pub r2: usize,
    pub s: f64,
    /// Feed-forward scale for EFFT₂; ignored elsewhere.
    pub s2: f64,
    /// Matrices receiving a LoRA pair in every layer.
    pub lora_roles: Vec<Role>,
}

impl FactorSpec {
    pub fn new(method: Method, d: usize, layers: usize, r: usize, s: f64) -> Self {
        FactorSpec {
            method,
            d,
            layers,
            r1: r,
            r2: r,
            s,
            s2: s,
            lora_roles: vec![Role::Q, Role::V],
        }
    }

    /// The unequal-rank configuration with `r2 = 4 · r1`.
    pub fn with_wide_r2(mut self) -> Self {
        self.r2 = 4 * self.r1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.r1 == 0 || self.r2 == 0 {
            return Err(shape_err!(
                "factor dimensions must be positive (d={}, r1={}, r2={})",
                self.d,
                self.r1,
                self.r2
            ));
        }
        if matches!(self.method, Method::Lora | Method::FactTt) && self.layers == 0 {
            return Err(shape_err!("{} needs at least one layer", self.method));
        }
        for (name, s) in [("s", self.s), ("s2", self.s2)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(contract_err!("scale {name} must be positive and finite, got {s}"));
            }
        }
        if self.method == Method::Lora && self.lora_roles.is_empty() {
            return Err(contract_err!("LoRA needs at least one target role"));
        }
        Ok(())
    }
}

/// One of the four parameterizations.
#[derive(Debug, Clone, PartialEq)]
pub enum Factors<T> {
    Efft1(Efft1Factors<T>),
    Efft2(Efft2Factors<T>),
    Lora(LoraFactors<T>),
    FactTt(FactTtFactors<T>),
}

/// Tape leaves of a bound factor set, in [`Factors::tensors`] order.
#[derive(Debug, Clone)]
pub struct FactorBinding {
    pub ids: Vec<NodeId>,
}

/// `s · ((x · a) · core) · bᵀ` on the tape.
pub(crate) fn low_rank<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    a: NodeId,
    core: NodeId,
    b: NodeId,
    s: T,
) -> Result<NodeId> {
    let xa = tape.matmul(x, a)?;
    let xac = tape.matmul(xa, core)?;
    let bt = tape.transpose(b)?;
    let y = tape.matmul(xac, bt)?;
    tape.scale(y, s)
}

/// `s · (u · core) · vᵀ`, with `s` applied last.
pub(crate) fn slot_product<T: Scalar>(u: &Tensor<T>, core: &Tensor<T>, v: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    Ok(u.matmul(core)?.matmul(&v.transpose()?)?.scale(s))
}

/// Core slab `i` of a `slots × r1 × r2` tensor registered on the tape as
/// `(slots·r1) × r2`.
pub(crate) fn core_slab<T: Scalar>(tape: &mut Tape<T>, core: NodeId, i: usize, r1: usize) -> Result<NodeId> {
    tape.slice_rows(core, i * r1, (i + 1) * r1)
}

fn check_input<T: Scalar>(x: &Tensor<T>, role: Role, d: usize) -> Result<()> {
    let (_, cols) = x.dims2()?;
    let (d_in, _) = role.dims(d);
    if cols != d_in {
        return Err(shape_err!("input with {cols} columns for role {role} expecting {d_in}"));
    }
    Ok(())
}

impl<T: Scalar> Factors<T> {
    /// Allocates a factor set with Gaussian factors and the zeroed factor.
    pub fn init(spec: &FactorSpec, sigma_std: T, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let (s, s2) = (T::lit(spec.s), T::lit(spec.s2));
        Ok(match spec.method {
            Method::Efft1 => Factors::Efft1(Efft1Factors::init(spec.d, spec.r1, spec.r2, s, sigma_std, rng)?),
            Method::Efft2 => Factors::Efft2(Efft2Factors::init(spec.d, spec.r1, spec.r2, s, s2, sigma_std, rng)?),
            Method::Lora => Factors::Lora(LoraFactors::init(
                spec.d,
                spec.layers,
                &spec.lora_roles,
                spec.r1,
                s,
                sigma_std,
                rng,
            )?),
            Method::FactTt => Factors::FactTt(FactTtFactors::init(
                spec.d,
                spec.layers,
                spec.r1,
                spec.r2,
                s,
                sigma_std,
                rng,
            )?),
        })
    }

    pub fn method(&self) -> Method {
        match self {
            Factors::Efft1(_) => Method::Efft1,
            Factors::Efft2(_) => Method::Efft2,
            Factors::Lora(_) => Method::Lora,
            Factors::FactTt(_) => Method::FactTt,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Factors::Efft1(f) => f.d,
            Factors::Efft2(f) => f.d,
            Factors::Lora(f) => f.d,
            Factors::FactTt(f) => f.d,
        }
    }

    /// Named trainable tensors, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        match self {
            Factors::Efft1(f) => vec![("sigma".into(), &f.sigma), ("u".into(), &f.u), ("v".into(), &f.v)],
            Factors::Efft2(f) => vec![
                ("sigma1".into(), &f.sigma1),
                ("u1".into(), &f.u1),
                ("v1".into(), &f.v1),
                ("sigma2".into(), &f.sigma2),
                ("u2".into(), &f.u2),
                ("v2".into(), &f.v2),
            ],
            Factors::Lora(f) => f
                .adapters
                .iter()
                .flat_map(|(w, p)| {
                    [
                        (format!("lora.{}.{}.down", w.layer, w.role), &p.w_down),
                        (format!("lora.{}.{}.up", w.layer, w.role), &p.w_up),
                    ]
                })
                .collect(),
            Factors::FactTt(f) => vec![("sigma".into(), &f.sigma), ("u".into(), &f.u), ("v".into(), &f.v)],
        }
    }

    /// Mutable access in the same order as [`Factors::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Factors::Efft1(f) => vec![&mut f.sigma, &mut f.u, &mut f.v],
            Factors::Efft2(f) => vec![&mut f.sigma1, &mut f.u1, &mut f.v1, &mut f.sigma2, &mut f.u2, &mut f.v2],
            Factors::Lora(f) => f
                .adapters
                .values_mut()
                .flat_map(|p| [&mut p.w_down, &mut p.w_up])
                .collect(),
            Factors::FactTt(f) => vec![&mut f.sigma, &mut f.u, &mut f.v],
        }
    }

    /// Exact number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Whether `role` receives a delta from this factor set.
    pub fn covers(&self, role: WeightRole) -> bool {
        match self {
            Factors::Efft1(_) | Factors::Efft2(_) => true,
            Factors::Lora(f) => f.adapters.contains_key(&role),
            Factors::FactTt(f) => role.layer < f.layers,
        }
    }

    /// The materialized delta for `role`, shaped like the backbone weight
    /// (`d_in × d_out`). EFFT deltas ignore the layer index.
    pub fn delta_for(&self, role: WeightRole) -> Result<Tensor<T>> {
        match self {
            Factors::Efft1(f) => f.delta_for(role.role),
            Factors::Efft2(f) => f.delta_for(role.role),
            Factors::Lora(f) => f.delta_for(role),
            Factors::FactTt(f) => f.delta_for(role),
        }
    }

    /// Registers every factor tensor as a leaf. Core tensors are flattened to
    /// `(slots·r1) × r2` on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Result<FactorBinding> {
        let ids = self
            .tensors()
            .into_iter()
            .map(|(_, t)| {
                let value = match t.shape() {
                    &[slots, r1, r2] => t.reshape(&[slots * r1, r2])?,
                    _ => t.clone(),
                };
                Ok(tape.leaf(value, trainable))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FactorBinding { ids })
    }

    /// Gradients of the bound leaves reshaped back to factor shapes.
    pub fn gradients(&self, binding: &FactorBinding, grads: &Gradients<T>) -> Result<Vec<Tensor<T>>> {
        self.tensors()
            .iter()
            .zip(&binding.ids)
            .map(|((name, t), id)| {
                grads
                    .get(*id)
                    .ok_or_else(|| contract_err!("no gradient for factor `{name}`"))?
                    .reshape(t.shape())
            })
            .collect()
    }

    /// `x · Δ(role)` along the low-rank path, recorded on `tape`.
    pub fn apply_on_tape(
        &self,
        tape: &mut Tape<T>,
        binding: &FactorBinding,
        x: NodeId,
        role: WeightRole,
    ) -> Result<NodeId> {
        check_input(tape.value(x), role.role, self.d())?;
        match self {
            Factors::Efft1(f) => f.apply_on_tape(tape, &binding.ids, x, role.role),
            Factors::Efft2(f) => f.apply_on_tape(tape, &binding.ids, x, role.role),
            Factors::Lora(f) => f.apply_on_tape(tape, &binding.ids, x, role),
            Factors::FactTt(f) => f.apply_on_tape(tape, &binding.ids, x, role),
        }
    }

    /// `x · Δ(role)` without materializing `Δ`.
    pub fn apply_delta(&self, x: &Tensor<T>, role: WeightRole) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let binding = self.bind(&mut tape, false)?;
        let xid = tape.constant(x.clone());
        let y = self.apply_on_tape(&mut tape, &binding, xid, role)?;
        Ok(tape.value(y).clone())
    }
}
