//! Toy pre-norm Vision Transformer with a frozen backbone.
//!
//! Each block computes `X ← X + MHSA(LN(X))` then `X ← X + FFN(LN(X))`,
//! where every linear map is `X · W₀` plus, for layers and blocks selected by
//! a [`TuningMask`], the factorized delta `X · ΔW`. A class token is
//! prepended to the patch embeddings and classified by a linear head.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{NodeId, Tape};
use crate::error::{shape_err, Error, Result};
use crate::peft::{Block, FactorBinding, Factors, Role, WeightRole};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// Patches per image; the sequence has one more token for the class token.
    pub n_patches: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub n_classes: usize,
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d", self.d),
            ("layers", self.layers),
            ("heads", self.heads),
            ("n_patches", self.n_patches),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("n_classes", self.n_classes),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        Ok(())
    }

    pub fn d_ffn(&self) -> usize {
        4 * self.d
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn tokens(&self) -> usize {
        self.n_patches + 1
    }
}

/// Which layers and sub-blocks receive deltas.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TuningMask {
    pub layers: BTreeSet<usize>,
    pub blocks: BTreeSet<Block>,
}

impl TuningMask {
    /// Every layer, both blocks.
    pub fn all(layers: usize) -> Self {
        TuningMask {
            layers: (0..layers).collect(),
            blocks: [Block::Mhsa, Block::Ffn].into(),
        }
    }

    pub fn none() -> Self {
        TuningMask::default()
    }

    pub fn new(layers: impl IntoIterator<Item = usize>, blocks: impl IntoIterator<Item = Block>) -> Self {
        TuningMask {
            layers: layers.into_iter().collect(),
            blocks: blocks.into_iter().collect(),
        }
    }

    pub fn contains(&self, layer: usize, block: Block) -> bool {
        self.layers.contains(&layer) && self.blocks.contains(&block)
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty() || self.blocks.is_empty()
    }
}

impl fmt::Display for TuningMask {
    /// `layers:blocks`, e.g. `0,1,2:mhsa+ffn`; `none` when empty.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("none");
        }
        let layers: Vec<String> = self.layers.iter().map(usize::to_string).collect();
        let blocks: Vec<String> = self.blocks.iter().map(Block::to_string).collect();
        write!(f, "{}:{}", layers.join(","), blocks.join("+"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    /// `d × 4d`
    pub w_ffn1: Tensor<T>,
    /// `4d × d`
    pub w_ffn2: Tensor<T>,
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
}

impl<T: Scalar> LayerWeights<T> {
    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 10] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w_ffn1", &self.w_ffn1),
            ("w_ffn2", &self.w_ffn2),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 10] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w_ffn1,
            &mut self.w_ffn2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    fn weight(&self, role: Role) -> &Tensor<T> {
        match role {
            Role::Q => &self.wq,
            Role::K => &self.wk,
            Role::V => &self.wv,
            Role::O => &self.wo,
            Role::Ffn1 => &self.w_ffn1,
            Role::Ffn2 => &self.w_ffn2,
        }
    }
}

/// Frozen backbone plus the trainable classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct ViTModel<T> {
    pub cfg: ViTConfig,
    /// `patch_dim × d`
    pub patch_embed: Tensor<T>,
    /// `(n_patches + 1) × d`
    pub pos_embed: Tensor<T>,
    /// `1 × d`
    pub cls_token: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    /// `d × n_classes`, trainable
    pub head_w: Tensor<T>,
    /// `1 × n_classes`, trainable
    pub head_b: Tensor<T>,
}

/// Tape leaves of one layer.
#[derive(Debug, Clone)]
struct LayerIds {
    weights: [NodeId; 6],
    ln1: (NodeId, NodeId),
    ln2: (NodeId, NodeId),
}

/// A model (and optionally a factor set) registered on a tape.
#[derive(Debug, Clone)]
pub struct ModelBinding {
    patch_embed: NodeId,
    pos_embed: NodeId,
    cls_token: NodeId,
    layers: Vec<LayerIds>,
    pub head_w: NodeId,
    pub head_b: NodeId,
    pub factors: Option<FactorBinding>,
    train_head: bool,
}

impl ModelBinding {
    /// Leaves updated by training: head weight and bias, then factor tensors.
    pub fn trainable_params(&self) -> Vec<NodeId> {
        let mut ids = Vec::new();
        if self.train_head {
            ids.extend([self.head_w, self.head_b]);
        }
        if let Some(fb) = &self.factors {
            ids.extend(fb.ids.iter().copied());
        }
        ids
    }
}

/// Splits an image `H × W × C` into non-overlapping `p × p` patches, each
/// flattened row-major (row, column, channel), ordered top-left to
/// bottom-right. Returns `n × (p·p·C)`.
pub fn patchify<T: Scalar>(image: &Tensor<T>, patch_size: usize) -> Result<Tensor<T>> {
    let [h, w, c] = image.shape()[..] else {
        return Err(shape_err!("patchify needs H×W×C, got {:?}", image.shape()));
    };
    let p = patch_size;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err!("{h}x{w} image is not divisible into {p}x{p} patches"));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(h * w * c);
    for pi in 0..gh {
        for pj in 0..gw {
            for y in 0..p {
                let row = pi * p + y;
                let start = (row * w + pj * p) * c;
                out.extend_from_slice(&image.data()[start..start + p * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, p * p * c], out)
}

impl<T: Scalar> ViTModel<T> {
    /// Gaussian backbone (σ = 0.02), unit LayerNorm gains, zero biases.
    pub fn build(cfg: &ViTConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let std = T::lit(INIT_STD);
        let d = cfg.d;
        let mut randn = |shape: &[usize]| Tensor::randn(shape, std, rng);
        let patch_embed = randn(&[cfg.patch_dim(), d])?;
        let pos_embed = randn(&[cfg.tokens(), d])?;
        let cls_token = randn(&[1, d])?;
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            layers.push(LayerWeights {
                wq: randn(&[d, d])?,
                wk: randn(&[d, d])?,
                wv: randn(&[d, d])?,
                wo: randn(&[d, d])?,
                w_ffn1: randn(&[d, 4 * d])?,
                w_ffn2: randn(&[4 * d, d])?,
                ln1_gain: Tensor::ones(&[1, d])?,
                ln1_bias: Tensor::zeros(&[1, d])?,
                ln2_gain: Tensor::ones(&[1, d])?,
                ln2_bias: Tensor::zeros(&[1, d])?,
            });
        }
        let head_w = randn(&[d, cfg.n_classes])?;
        Ok(ViTModel {
            cfg: cfg.clone(),
            patch_embed,
            pos_embed,
            cls_token,
            layers,
            head_w,
            head_b: Tensor::zeros(&[1, cfg.n_classes])?,
        })
    }

    /// Every frozen tensor with a stable name.
    pub fn backbone_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("patch_embed".to_string(), &self.patch_embed),
            ("pos_embed".to_string(), &self.pos_embed),
            ("cls_token".to_string(), &self.cls_token),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out
    }

    /// Backbone then head, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.backbone_tensors();
        out.push(("head_w".into(), &self.head_w));
        out.push(("head_b".into(), &self.head_b));
        out
    }

    /// Mutable access in [`ViTModel::tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.patch_embed, &mut self.pos_embed, &mut self.cls_token];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn count_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn head_params(&self) -> usize {
        self.head_w.len() + self.head_b.len()
    }

    /// SHA-256 over the little-endian f64 bits of every backbone tensor.
    pub fn backbone_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.backbone_tensors() {
            hasher.update(name.as_bytes());
            for &x in t.data() {
                hasher.update(x.as_f64().to_le_bytes());
            }
        }
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_factors(&self, factors: &Factors<T>) -> Result<()> {
        if factors.d() != self.cfg.d {
            return Err(Error::Config(format!(
                "factors built for d={} but the model has d={}",
                factors.d(),
                self.cfg.d
            )));
        }
        match factors {
            Factors::FactTt(f) if f.layers != self.cfg.layers => Err(Error::Config(format!(
                "FacT-TT core has {} layers, model has {}",
                f.layers, self.cfg.layers
            ))),
            Factors::Lora(f) => match f.adapters.keys().find(|w| w.layer >= self.cfg.layers) {
                Some(w) => Err(Error::Config(format!(
                    "LoRA adapter for layer {} beyond the model's {} layers",
                    w.layer, self.cfg.layers
                ))),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// Registers the model (backbone frozen) and optional factors on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>, factors: Option<&Factors<T>>, trainable: bool) -> Result<ModelBinding> {
        if let Some(f) = factors {
            self.check_factors(f)?;
        }
        let patch_embed = tape.constant(self.patch_embed.clone());
        let pos_embed = tape.constant(self.pos_embed.clone());
        let cls_token = tape.constant(self.cls_token.clone());
        let layers = self
            .layers
            .iter()
            .map(|lw| LayerIds {
                weights: Role::ALL.map(|r| tape.constant(lw.weight(r).clone())),
                ln1: (tape.constant(lw.ln1_gain.clone()), tape.constant(lw.ln1_bias.clone())),
                ln2: (tape.constant(lw.ln2_gain.clone()), tape.constant(lw.ln2_bias.clone())),
            })
            .collect();
        let head_w = tape.leaf(self.head_w.clone(), trainable);
        let head_b = tape.leaf(self.head_b.clone(), trainable);
        let factors = factors.map(|f| f.bind(tape, trainable)).transpose()?;
        Ok(ModelBinding {
            patch_embed,
            pos_embed,
            cls_token,
            layers,
            head_w,
            head_b,
            factors,
            train_head: trainable,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn linear(
        &self,
        tape: &mut Tape<T>,
        binding: &ModelBinding,
        factors: Option<&Factors<T>>,
        mask: &TuningMask,
        x: NodeId,
        layer: usize,
        role: Role,
    ) -> Result<NodeId> {
        let w0 = binding.layers[layer].weights[role as usize];
        let base = tape.matmul(x, w0)?;
        let target = WeightRole::new(role, layer);
        match (factors, &binding.factors) {
            (Some(f), Some(fb)) if mask.contains(layer, role.block()) && f.covers(target) => {
                let delta = f.apply_on_tape(tape, fb, x, target)?;
                tape.add(base, delta)
            }
            _ => Ok(base),
        }
    }

    fn attention(&self, tape: &mut Tape<T>, q: NodeId, k: NodeId, v: NodeId, batch: usize) -> Result<NodeId> {
        let t = self.cfg.tokens();
        let dh = self.cfg.head_dim();
        let inv_sqrt = T::one() / T::lit(dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
            let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
            let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
            let mut rows = Vec::with_capacity(batch);
            for b in 0..batch {
                let qb = tape.slice_rows(qh, b * t, (b + 1) * t)?;
                let kb = tape.slice_rows(kh, b * t, (b + 1) * t)?;
                let vb = tape.slice_rows(vh, b * t, (b + 1) * t)?;
                let kt = tape.transpose(kb)?;
                let scores = tape.matmul(qb, kt)?;
                let scaled = tape.scale(scores, inv_sqrt)?;
                let probs = tape.softmax_rows(scaled)?;
                rows.push(tape.matmul(probs, vb)?);
            }
            heads.push(tape.concat_rows(&rows)?);
        }
        if heads.len() == 1 {
            Ok(heads[0])
        } else {
            tape.concat_cols(&heads)
        }
    }

    /// Logits node (`B × n_classes`) for a batch of patch sequences
    /// `B × n_patches × patch_dim`.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        binding: &ModelBinding,
        factors: Option<&Factors<T>>,
        batch: &Tensor<T>,
        mask: &TuningMask,
    ) -> Result<NodeId> {
        let cfg = &self.cfg;
        let [b, n, pd] = batch.shape()[..] else {
            return Err(shape_err!("batch must be B×n×patch_dim, got {:?}", batch.shape()));
        };
        if n != cfg.n_patches || pd != cfg.patch_dim() {
            return Err(shape_err!(
                "batch of {n}x{pd} patches, model expects {}x{}",
                cfg.n_patches,
                cfg.patch_dim()
            ));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let t = cfg.tokens();

        let flat = tape.constant(batch.reshape(&[b * n, pd])?);
        let emb = tape.matmul(flat, binding.patch_embed)?;
        let mut seqs = Vec::with_capacity(b);
        for i in 0..b {
            let tokens = tape.slice_rows(emb, i * n, (i + 1) * n)?;
            let seq = tape.concat_rows(&[binding.cls_token, tokens])?;
            seqs.push(tape.add(seq, binding.pos_embed)?);
        }
        let mut x = tape.concat_rows(&seqs)?;

        for layer in 0..cfg.layers {
            let ids = &binding.layers[layer];
            let lin = |tape: &mut Tape<T>, input, role| self.linear(tape, binding, factors, mask, input, layer, role);

            let h = tape.layer_norm_rows(x, ids.ln1.0, ids.ln1.1, eps)?;
            let q = lin(tape, h, Role::Q)?;
            let k = lin(tape, h, Role::K)?;
            let v = lin(tape, h, Role::V)?;
            let attn = self.attention(tape, q, k, v, b)?;
            let o = lin(tape, attn, Role::O)?;
            x = tape.add(x, o)?;

            let h2 = tape.layer_norm_rows(x, ids.ln2.0, ids.ln2.1, eps)?;
            let f1 = lin(tape, h2, Role::Ffn1)?;
            let act = tape.gelu(f1)?;
            let f2 = lin(tape, act, Role::Ffn2)?;
            x = tape.add(x, f2)?;
        }

        let cls_rows = (0..b)
            .map(|i| tape.slice_rows(x, i * t, i * t + 1))
            .collect::<Result<Vec<_>>>()?;
        let cls = tape.concat_rows(&cls_rows)?;
        let logits = tape.matmul(cls, binding.head_w)?;
        let ones = tape.constant(Tensor::ones(&[b, 1])?);
        let bias = tape.matmul(ones, binding.head_b)?;
        tape.add(logits, bias)
    }

    /// Binds the model with nothing trainable and runs the forward pass.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        batch: &Tensor<T>,
        factors: Option<&Factors<T>>,
        mask: &TuningMask,
    ) -> Result<NodeId> {
        let binding = self.bind(tape, factors, false)?;
        self.forward_bound(tape, &binding, factors, batch, mask)
    }

    /// Logits as a plain tensor.
    pub fn logits(&self, batch: &Tensor<T>, factors: Option<&Factors<T>>, mask: &TuningMask) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch, factors, mask)?;
        Ok(tape.value(out).clone())
    }
}

/// Names of the tensors a training run updates: the head, then any factors.
/// A linear probe is the case `factors = None`.
pub fn trainable_params<T: Scalar>(factors: Option<&Factors<T>>) -> Vec<String> {
    let mut names = vec!["head_w".to_string(), "head_b".to_string()];
    if let Some(f) = factors {
        names.extend(f.tensors().into_iter().map(|(n, _)| n));
    }
    names
}
