//! Fine-tuning loop, grid sweeps and ablations.
//!
//! Only the classification head and the factor tensors are ever updated;
//! the backbone is read through a frozen tape binding.

mod optim;
mod sweep;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use optim::{AdamW, Param};
pub use sweep::{
    ablation_run, default_layer_groups, sweep, AblationCell, AblationRow, AblationTable, ReportRow, SweepCell,
    SweepOutcome, ABLATION_BLOCKS,
};

use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{shape_err, Error, Result};
use crate::peft::{FactorSpec, Factors, DEFAULT_SIGMA_STD};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::{TuningMask, ViTModel};

/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

const EVAL_CHUNK: usize = 64;
const SHUFFLE_STREAM: u64 = 1;
const FACTOR_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Share of the data held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: 1e-3,
            batch_size: 64,
            epochs: 100,
            max_steps: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, v: f64| Error::Config(format!("train.{field} = {v} is out of range"));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr", self.lr));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        for (field, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(bad(field, v));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(bad("eps", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(bad("weight_decay", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(bad("val_fraction", self.val_fraction));
        }
        Ok(())
    }
}

/// Outcome of one training run. `wall_ms` is never serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Parameterization name, or `linear` for a head-only run.
    pub method: String,
    pub spec: Option<FactorSpec>,
    pub mask: String,
    pub hyper: TrainHyper,
    /// Factor scalars, excluding the head.
    pub params: usize,
    pub trainable_params: usize,
    pub epoch_loss: Vec<f64>,
    pub epoch_acc: Vec<f64>,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub steps: usize,
    pub diverged: bool,
    #[serde(skip)]
    pub wall_ms: u64,
}

impl RunReport {
    /// Validation accuracy when a split exists, training accuracy otherwise.
    pub fn score(&self) -> f64 {
        self.val_acc.unwrap_or(self.train_acc)
    }
}

/// Copies items `indices` of an `N × n × pd` patch tensor into a batch.
fn gather<T: Scalar>(patches: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
    let s = patches.shape();
    let item = s[1] * s[2];
    let mut data = Vec::with_capacity(indices.len() * item);
    for &i in indices {
        data.extend_from_slice(&patches.data()[i * item..(i + 1) * item]);
    }
    Tensor::new(&[indices.len(), s[1], s[2]], data)
}

fn argmax<T: Scalar>(row: &[T]) -> Option<usize> {
    if row.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let mut best = 0;
    for (j, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = j;
        }
    }
    Some(best)
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(logits.row(i)) == Some(y))
        .count()
}

fn patches_for<T: Scalar>(model: &ViTModel<T>, data: &Dataset<T>) -> Result<Tensor<T>> {
    let cfg = &model.cfg;
    let (h, w, c) = data.image_dims();
    if c != cfg.channels {
        return Err(Error::Config(format!(
            "images have {c} channels, model expects {}",
            cfg.channels
        )));
    }
    let patches = data.patches(cfg.patch_size)?;
    if patches.shape()[1] != cfg.n_patches {
        return Err(Error::Config(format!(
            "{h}x{w} images give {} patches of size {}, model expects {}",
            patches.shape()[1],
            cfg.patch_size,
            cfg.n_patches
        )));
    }
    if data.n_classes() > cfg.n_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model head has {}",
            data.n_classes(),
            cfg.n_classes
        )));
    }
    Ok(patches)
}

/// Predicted class per item (`None` for non-finite logits).
pub fn predict<T: Scalar>(
    model: &ViTModel<T>,
    factors: Option<&Factors<T>>,
    mask: &TuningMask,
    data: &Dataset<T>,
) -> Result<Vec<Option<usize>>> {
    let patches = patches_for(model, data)?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let chunks = indices
        .par_chunks(EVAL_CHUNK)
        .map(|idx| {
            let logits = model.logits(&gather(&patches, idx)?, factors, mask)?;
            Ok((0..idx.len()).map(|i| argmax(logits.row(i))).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chunks.concat())
}

/// Fraction of items classified correctly.
pub fn accuracy<T: Scalar>(
    model: &ViTModel<T>,
    factors: Option<&Factors<T>>,
    mask: &TuningMask,
    data: &Dataset<T>,
) -> Result<f64> {
    let preds = predict(model, factors, mask, data)?;
    let correct = preds.iter().zip(data.labels()).filter(|(p, &y)| **p == Some(y)).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Trains the head (and `factors`, when given) in place.
pub fn train<T: Scalar>(
    model: &mut ViTModel<T>,
    mut factors: Option<&mut Factors<T>>,
    mask: &TuningMask,
    train_set: &Dataset<T>,
    val_set: Option<&Dataset<T>>,
    hyper: &TrainHyper,
) -> Result<RunReport> {
    let start = Instant::now();
    hyper.validate()?;
    if train_set.is_empty() {
        return Err(shape_err!("empty training set"));
    }
    let patches = patches_for(model, train_set)?;
    let labels = train_set.labels();
    let factor_names: Vec<String> = factors
        .as_deref()
        .map(|f| f.tensors().into_iter().map(|(n, _)| n).collect())
        .unwrap_or_default();
    let params = factors.as_deref().map_or(0, Factors::count_params);

    let mut rng = Rng::derive(hyper.seed, SHUFFLE_STREAM);
    let mut opt = AdamW::new(hyper);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = RunReport {
        method: factors.as_deref().map_or("linear".into(), |f| f.method().to_string()),
        spec: None,
        mask: mask.to_string(),
        hyper: hyper.clone(),
        params,
        trainable_params: params + model.head_params(),
        epoch_loss: Vec::new(),
        epoch_acc: Vec::new(),
        train_acc: 0.0,
        val_acc: None,
        steps: 0,
        diverged: false,
        wall_ms: 0,
    };
    let budget = hyper.max_steps.unwrap_or(usize::MAX);

    'epochs: for _ in 0..hyper.epochs {
        if report.steps >= budget {
            break;
        }
        rng.shuffle(&mut order);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        for idx in order.chunks(hyper.batch_size) {
            if report.steps >= budget {
                break;
            }
            let batch = gather(&patches, idx)?;
            let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();

            let mut tape = Tape::new();
            let binding = model.bind(&mut tape, factors.as_deref(), true)?;
            let logits = model.forward_bound(&mut tape, &binding, factors.as_deref(), &batch, mask)?;
            if !tape.value(logits).all_finite() {
                report.diverged = true;
                break 'epochs;
            }
            let loss_id = tape.cross_entropy_logits(logits, &batch_labels)?;
            let loss = tape.value(loss_id).data()[0].as_f64();
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                report.diverged = true;
                break 'epochs;
            }
            correct += count_correct(tape.value(logits), &batch_labels);
            loss_sum += loss * idx.len() as f64;
            seen += idx.len();

            let mut grads = tape.backward(loss_id)?;
            let missing = |name: &str| Error::Contract(format!("no gradient for `{name}`"));
            let g_w = grads.remove(binding.head_w).ok_or_else(|| missing("head_w"))?;
            let g_b = grads.remove(binding.head_b).ok_or_else(|| missing("head_b"))?;
            let g_f = match (factors.as_deref(), &binding.factors) {
                (Some(f), Some(fb)) => f.gradients(fb, &grads)?,
                _ => Vec::new(),
            };
            drop(tape);

            let mut all: Vec<Param<'_, T>> = vec![
                Param {
                    name: "head_w",
                    value: &mut model.head_w,
                    decay: true,
                },
                Param {
                    name: "head_b",
                    value: &mut model.head_b,
                    decay: false,
                },
            ];
            if let Some(f) = factors.as_deref_mut() {
                for (name, value) in factor_names.iter().zip(f.tensors_mut()) {
                    all.push(Param {
                        name,
                        value,
                        decay: true,
                    });
                }
            }
            let mut grad_refs = vec![&g_w, &g_b];
            grad_refs.extend(g_f.iter());
            opt.step(&mut all, &grad_refs)?;
            report.steps += 1;
        }
        if seen > 0 {
            report.epoch_loss.push(loss_sum / seen as f64);
            report.epoch_acc.push(correct as f64 / seen as f64);
        }
    }

    let f = factors.as_deref();
    report.train_acc = accuracy(model, f, mask, train_set)?;
    report.val_acc = val_set.map(|v| accuracy(model, f, mask, v)).transpose()?;
    report.wall_ms = start.elapsed().as_millis() as u64;
    Ok(report)
}

/// A trained head and factor set.
#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    pub model: ViTModel<T>,
    pub factors: Option<Factors<T>>,
    pub report: RunReport,
}

/// Allocates factors from `spec` (none for a linear probe) on a stream
/// derived from `hyper.seed`, then trains a copy of `model`.
pub fn fit<T: Scalar>(
    model: &ViTModel<T>,
    spec: Option<&FactorSpec>,
    mask: &TuningMask,
    train_set: &Dataset<T>,
    val_set: Option<&Dataset<T>>,
    hyper: &TrainHyper,
) -> Result<FitOutcome<T>> {
    let mut model = model.clone();
    let mut factors = spec
        .map(|s| {
            let mut rng = Rng::derive(hyper.seed, FACTOR_STREAM);
            Factors::init(s, T::lit(DEFAULT_SIGMA_STD), &mut rng)
        })
        .transpose()?;
    let mut report = train(&mut model, factors.as_mut(), mask, train_set, val_set, hyper)?;
    report.spec = spec.cloned();
    Ok(FitOutcome { model, factors, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::peft::Method;
    use crate::vit::ViTConfig;

    fn setup() -> (ViTModel<f64>, Dataset<f64>) {
        let cfg = ViTConfig {
            d: 8,
            layers: 1,
            heads: 2,
            n_patches: 4,
            patch_size: 4,
            channels: 1,
            n_classes: 2,
        };
        let data = gen_synthetic(&SyntheticSpec {
            n_classes: 2,
            samples_per_class: 12,
            image_size: 8,
            ..Default::default()
        })
        .unwrap();
        (ViTModel::build(&cfg, &mut Rng::new(3)).unwrap(), data)
    }

    fn quick(seed: u64) -> TrainHyper {
        TrainHyper {
            batch_size: 8,
            epochs: 3,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_echo_initial_state() {
        let (model, data) = setup();
        let spec = FactorSpec::new(Method::Efft1, 8, 1, 2, 1.0);
        let hyper = TrainHyper { epochs: 0, ..quick(0) };
        let out = fit(&model, Some(&spec), &TuningMask::all(1), &data, None, &hyper).unwrap();
        assert_eq!(out.report.steps, 0);
        assert!(out.report.epoch_loss.is_empty());
        assert_eq!(out.model, model);
        let acc = accuracy(&model, None, &TuningMask::none(), &data).unwrap();
        assert_eq!(out.report.train_acc, acc);
    }

    #[test]
    fn backbone_is_untouched_and_runs_are_deterministic() {
        let (model, data) = setup();
        let digest = model.backbone_digest();
        let spec = FactorSpec::new(Method::Efft2, 8, 1, 2, 10.0);
        let mask = TuningMask::all(1);
        let a = fit(&model, Some(&spec), &mask, &data, None, &quick(4)).unwrap();
        let b = fit(&model, Some(&spec), &mask, &data, None, &quick(4)).unwrap();
        assert_eq!(a.model.backbone_digest(), digest);
        assert_ne!(a.model.head_w, model.head_w);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.report.epoch_loss), bits(&b.report.epoch_loss));
        assert_eq!(a.factors, b.factors);
        assert_eq!(a.report.steps, 9);
        assert!(a.report.epoch_loss.iter().all(|l| l.is_finite()));
        assert!((0.0..=1.0).contains(&a.report.train_acc));
    }

    #[test]
    fn max_steps_caps_mid_epoch() {
        let (model, data) = setup();
        let hyper = TrainHyper {
            max_steps: Some(2),
            ..quick(0)
        };
        let out = fit(&model, None, &TuningMask::none(), &data, None, &hyper).unwrap();
        assert_eq!(out.report.steps, 2);
        assert_eq!(out.report.epoch_loss.len(), 1);
        assert_eq!(out.report.method, "linear");
        assert_eq!(out.report.trainable_params, 8 * 2 + 2);
    }

    #[test]
    fn empty_mask_matches_linear_probe() {
        let (model, data) = setup();
        let spec = FactorSpec::new(Method::Efft1, 8, 1, 2, 10.0);
        let with = fit(&model, Some(&spec), &TuningMask::none(), &data, None, &quick(1)).unwrap();
        let probe = fit(&model, None, &TuningMask::none(), &data, None, &quick(1)).unwrap();
        assert_eq!(with.model.head_w, probe.model.head_w);
        assert_eq!(with.report.epoch_loss, probe.report.epoch_loss);
        assert_eq!(with.report.train_acc, probe.report.train_acc);
    }

    #[test]
    fn huge_scale_diverges() {
        let (model, data) = setup();
        let mut spec = FactorSpec::new(Method::Efft1, 8, 1, 2, 1e30);
        spec.s2 = 1e30;
        let out = fit(&model, Some(&spec), &TuningMask::all(1), &data, None, &quick(2)).unwrap();
        assert!(out.report.diverged);
        assert!(out.report.epoch_loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn geometry_mismatch_is_config_error() {
        let (model, _) = setup();
        let data = gen_synthetic(&SyntheticSpec {
            image_size: 16,
            ..Default::default()
        })
        .unwrap();
        let err = fit(&model, None, &TuningMask::none(), &data, None, &quick(0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn hyper_validation() {
        assert!(TrainHyper::default().validate().is_ok());
        assert!(TrainHyper {
            lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainHyper {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
