//! Tape-based reverse-mode differentiation.
//!
//! Every primitive evaluates its forward value eagerly and appends a node to
//! the [`Tape`]. Because inputs must already exist, node order is a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//! Backward never mutates the tape, so repeated calls agree exactly.

use std::collections::BTreeMap;

use crate::error::{contract_err, shape_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// √(2/π), the GELU tanh-approximation constant.
const GELU_K: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the GELU tanh approximation.
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf {
        trainable: bool,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows {
        input: NodeId,
        start: usize,
        end: usize,
    },
    SoftmaxRows(NodeId),
    Gelu(NodeId),
    LayerNormRows {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: T,
    },
    Mean(NodeId),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

impl<T> Op<T> {
    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Transpose(a) | Op::SoftmaxRows(a) | Op::Gelu(a) | Op::Mean(a) => {
                vec![*a]
            }
            Op::ConcatRows(parts) => parts.clone(),
            Op::SliceRows { input, .. } => vec![*input],
            Op::LayerNormRows { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node<T> {
    pub op: Op<T>,
    pub value: Tensor<T>,
}

/// Gradients of the trainable leaves, keyed by leaf id.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn remove(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.grads.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn layer_norm_stats<T: Scalar>(x: &Tensor<T>, eps: T) -> Result<(Tensor<T>, Vec<T>)> {
    let (n, m) = x.dims2()?;
    let mf = T::lit(m as f64);
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().copied().sum::<T>() / mf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / mf;
        let inv = T::one() / (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            xhat.set(i, j, (v - mean) * inv);
        }
        inv_std.push(inv);
    }
    Ok((xhat, inv_std))
}

fn softmax_rows<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, _) = x.dims2()?;
    let mut out = x.clone();
    for i in 0..n {
        let row = x.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        for (j, &e) in exps.iter().enumerate() {
            out.set(i, j, e / total);
        }
    }
    Ok(out)
}

fn gelu<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    T::lit(0.5) * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_K);
    let c = T::lit(GELU_C);
    let th = (k * (x + c * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::lit(3.0) * c * x * x)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded node in evaluation order.
    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node<T> {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Ids of all leaves marked trainable, in creation order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { trainable: true }))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> NodeId {
        self.push(Op::Leaf { trainable }, value)
    }

    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let v = self.value(a).scale(c);
        Ok(self.push(Op::Scale(a, c), v))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), v))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&values)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v))
    }

    pub fn slice_rows(&mut self, input: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(input).slice_rows(start, end)?;
        Ok(self.push(Op::SliceRows { input, start, end }, v))
    }

    /// Columns `[start, end)` of a 2-D node, expressed through transposes.
    pub fn slice_cols(&mut self, input: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let t = self.transpose(input)?;
        let s = self.slice_rows(t, start, end)?;
        self.transpose(s)
    }

    /// Side-by-side concatenation of 2-D nodes, expressed through transposes.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let ts = parts.iter().map(|&p| self.transpose(p)).collect::<Result<Vec<_>>>()?;
        let c = self.concat_rows(&ts)?;
        self.transpose(c)
    }

    /// Row-wise softmax; each row is shifted by its maximum before exponentiation.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = softmax_rows(self.value(a))?;
        Ok(self.push(Op::SoftmaxRows(a), v))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(gelu);
        Ok(self.push(Op::Gelu(a), v))
    }

    /// Normalizes each row to zero mean and unit (biased) variance, then
    /// applies `gain` and `bias`, both `1 × cols`.
    pub fn layer_norm_rows(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: T) -> Result<NodeId> {
        let (_, m) = self.value(x).dims2()?;
        for (what, id) in [("gain", gain), ("bias", bias)] {
            if self.value(id).shape() != [1, m] {
                return Err(shape_err!(
                    "layer norm {what} has shape {:?}, expected [1, {m}]",
                    self.value(id).shape()
                ));
            }
        }
        let (xhat, _) = layer_norm_stats(self.value(x), eps)?;
        let (g, b) = (self.value(gain), self.value(bias));
        let mut v = xhat;
        let (n, _) = v.dims2()?;
        for i in 0..n {
            for j in 0..m {
                v.set(i, j, v.at(i, j) * g.data()[j] + b.data()[j]);
            }
        }
        Ok(self.push(Op::LayerNormRows { x, gain, bias, eps }, v))
    }

    /// Mean of all entries, as a `[1]` tensor.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / T::lit(t.len() as f64));
        Ok(self.push(Op::Mean(a), v))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let x = self.value(logits);
        let (n, c) = x.dims2()?;
        if labels.len() != n {
            return Err(shape_err!("{} labels for {n} logit rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(contract_err!("label {bad} out of range for {c} classes"));
        }
        if !x.all_finite() {
            return Err(Error::Numeric("cross entropy on non-finite logits".into()));
        }
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = x.row(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total = total + (lse - row[label]);
        }
        let v = Tensor::scalar(total / T::lit(n as f64));
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            v,
        ))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of trainable leaves.
    ///
    /// Contributions are accumulated in tape order, newest node first, so the
    /// result is deterministic.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                self.value(loss).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one())?);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf { trainable } = node.op {
                if trainable {
                    grads[idx] = Some(g);
                }
                continue;
            }
            for (input, contribution) in self.local_grads(node, &g)? {
                match &mut grads[input.0] {
                    Some(acc) => acc.accumulate(&contribution)?,
                    slot => *slot = Some(contribution),
                }
            }
        }

        let mut out = BTreeMap::new();
        for id in self.param_ids() {
            let g = match grads.get_mut(id.0).and_then(Option::take) {
                Some(g) => g,
                None => Tensor::zeros(self.value(id).shape())?,
            };
            out.insert(id, g);
        }
        Ok(Gradients { grads: out })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        Ok(match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::MatMul(a, b) => {
                let da = g.matmul(&self.value(*b).transpose()?)?;
                let db = self.value(*a).transpose()?.matmul(g)?;
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => vec![(*a, g.transpose()?)],
            Op::ConcatRows(parts) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(parts.len());
                for &p in parts {
                    let rows = self.value(p).shape()[0];
                    out.push((p, g.slice_rows(start, start + rows)?));
                    start += rows;
                }
                out
            }
            Op::SliceRows { input, start, end } => {
                let full = self.value(*input);
                let stride = full.len() / full.shape()[0];
                let mut d = Tensor::zeros(full.shape())?;
                d.data_mut()[start * stride..end * stride].copy_from_slice(g.data());
                vec![(*input, d)]
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (n, m) = y.dims2()?;
                let mut d = y.clone();
                for i in 0..n {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..m {
                        d.set(i, j, yr[j] * (gr[j] - dot));
                    }
                }
                vec![(*a, d)]
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                vec![(*a, x.map(gelu_grad).hadamard(g)?)]
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let (xhat, inv_std) = layer_norm_stats(self.value(*x), *eps)?;
                let gain_v = self.value(*gain).data();
                let (n, m) = xhat.dims2()?;
                let mf = T::lit(m as f64);
                let mut dgain = vec![T::zero(); m];
                let mut dbias = vec![T::zero(); m];
                let mut dx = xhat.clone();
                for (i, &inv) in inv_std.iter().enumerate().take(n) {
                    let gr = g.row(i);
                    let xr = xhat.row(i);
                    let dxhat: Vec<T> = (0..m).map(|j| gr[j] * gain_v[j]).collect();
                    let mean_d = dxhat.iter().copied().sum::<T>() / mf;
                    let mean_dx = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / mf;
                    for j in 0..m {
                        dgain[j] = dgain[j] + gr[j] * xr[j];
                        dbias[j] = dbias[j] + gr[j];
                        dx.set(i, j, inv * (dxhat[j] - mean_d - xr[j] * mean_dx));
                    }
                }
                vec![
                    (*x, dx),
                    (*gain, Tensor::new(&[1, m], dgain)?),
                    (*bias, Tensor::new(&[1, m], dbias)?),
                ]
            }
            Op::Mean(a) => {
                let shape = self.value(*a).shape();
                let n = T::lit(self.value(*a).len() as f64);
                vec![(*a, Tensor::full(shape, g.data()[0] / n)?)]
            }
            Op::CrossEntropy { logits, labels } => {
                let x = self.value(*logits);
                let mut d = softmax_rows(x)?;
                let n = T::lit(labels.len() as f64);
                let upstream = g.data()[0];
                for (i, &label) in labels.iter().enumerate() {
                    d.set(i, label, d.at(i, label) - T::one());
                }
                vec![(*logits, d.scale(upstream / n))]
            }
        })
    }
}

/// Outcome of [`finite_difference_check`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Coordinates probed per parameter tensor.
    pub probed: Vec<usize>,
}

/// Compares backward gradients against central differences.
///
/// `build_loss` receives a fresh tape with every tensor of `params` already
/// registered as a trainable leaf (ids in the same order) and must return a
/// scalar loss node. For each parameter tensor, up to `coords_per_param`
/// random coordinates (all of them for smaller tensors) are perturbed by
/// `±eps`. The error per coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<T, F>(
    params: &[Tensor<T>],
    eps: T,
    coords_per_param: usize,
    rng: &mut Rng,
    build_loss: F,
) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[NodeId]) -> Result<NodeId>,
{
    if eps.is_nan() || eps <= T::zero() {
        return Err(contract_err!("finite difference step must be positive"));
    }
    let eval = |values: &[Tensor<T>]| -> Result<(Tape<T>, NodeId, Vec<NodeId>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = values.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build_loss(&mut tape, &ids)?;
        Ok((tape, loss, ids))
    };

    let (tape, loss, ids) = eval(params)?;
    let grads = tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut probed = Vec::with_capacity(params.len());
    let mut work: Vec<Tensor<T>> = params.to_vec();
    for (p, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id).expect("trainable leaf has a gradient");
        let coords = rng.sample_indices(params[p].len(), coords_per_param);
        probed.push(coords.len());
        for &c in &coords {
            let orig = params[p].data()[c];
            work[p].data_mut()[c] = orig + eps;
            let (t_plus, l_plus, _) = eval(&work)?;
            work[p].data_mut()[c] = orig - eps;
            let (t_minus, l_minus, _) = eval(&work)?;
            work[p].data_mut()[c] = orig;

            let f_plus = t_plus.value(l_plus).data()[0].as_f64();
            let f_minus = t_minus.value(l_minus).data()[0].as_f64();
            let numeric = (f_plus - f_minus) / (2.0 * eps.as_f64());
            let a = analytic.data()[c].as_f64();
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        probed,
    })
}
