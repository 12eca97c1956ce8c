use std::cmp::Ordering;
use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::peft::{Block, FactorSpec};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::vit::{TuningMask, ViTModel};

use super::{fit, RunReport, TrainHyper};

/// Inclusive layer ranges used when no explicit sets are given.
const DEFAULT_LAYER_RANGES: [(usize, usize); 4] = [(0, 2), (2, 4), (5, 8), (9, 11)];

/// Block subsets compared by an ablation.
pub const ABLATION_BLOCKS: [&[Block]; 3] = [&[Block::Mhsa], &[Block::Ffn], &[Block::Mhsa, Block::Ffn]];

/// The default groups, truncated to `layers`; empty groups are dropped.
pub fn default_layer_groups(layers: usize) -> Vec<BTreeSet<usize>> {
    DEFAULT_LAYER_RANGES
        .iter()
        .map(|&(a, b)| (a..=b).filter(|&l| l < layers).collect::<BTreeSet<_>>())
        .filter(|g| !g.is_empty())
        .collect()
}

/// One CSV line per training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub d: usize,
    #[serde(rename = "L")]
    pub layers: usize,
    pub r1: usize,
    pub r2: usize,
    pub s: f64,
    pub mask: String,
    pub seed: u64,
    pub params: usize,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub steps: usize,
    pub wall_ms: u64,
}

impl ReportRow {
    pub fn new<T>(model: &ViTModel<T>, report: &RunReport) -> Self {
        let (r1, r2, s) = report.spec.as_ref().map_or((0, 0, 0.0), |sp| (sp.r1, sp.r2, sp.s));
        ReportRow {
            method: report.method.clone(),
            d: model.cfg.d,
            layers: model.cfg.layers,
            r1,
            r2,
            s,
            mask: report.mask.clone(),
            seed: report.hyper.seed,
            params: report.params,
            train_acc: report.train_acc,
            val_acc: report.val_acc,
            steps: report.steps,
            wall_ms: report.wall_ms,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub spec: FactorSpec,
    pub report: RunReport,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    /// Row-major over `ranks × scales`.
    pub cells: Vec<SweepCell>,
    /// Index of the selected cell; `None` if every cell diverged.
    pub best: Option<usize>,
}

impl SweepOutcome {
    pub fn best_cell(&self) -> Option<&SweepCell> {
        self.best.map(|i| &self.cells[i])
    }

    pub fn rows<T>(&self, model: &ViTModel<T>) -> Vec<ReportRow> {
        self.cells.iter().map(|c| ReportRow::new(model, &c.report)).collect()
    }
}

/// Higher score first, then fewer parameters, then smaller scale.
fn rank_cells(a: &SweepCell, b: &SweepCell) -> Ordering {
    b.report
        .score()
        .total_cmp(&a.report.score())
        .then(a.report.params.cmp(&b.report.params))
        .then(a.spec.s.total_cmp(&b.spec.s))
}

/// Trains every `(rank, scale)` cell of the grid on its own seed stream and
/// selects the best non-diverged cell. `base` provides the method, sizes and
/// LoRA targets; its ranks and scales are overwritten per cell.
#[allow(clippy::too_many_arguments)]
pub fn sweep<T: Scalar>(
    model: &ViTModel<T>,
    train_set: &Dataset<T>,
    val_set: Option<&Dataset<T>>,
    base: &FactorSpec,
    ranks: &[usize],
    scales: &[f64],
    mask: &TuningMask,
    hyper: &TrainHyper,
) -> Result<SweepOutcome> {
    if ranks.is_empty() || scales.is_empty() {
        return Err(Error::Config("sweep grid needs at least one rank and one scale".into()));
    }
    let wide = base.r2 != base.r1;
    let grid: Vec<FactorSpec> = ranks
        .iter()
        .flat_map(|&r| {
            scales.iter().map(move |&s| {
                let mut spec = FactorSpec {
                    r1: r,
                    r2: r,
                    s,
                    s2: s,
                    ..base.clone()
                };
                if wide {
                    spec = spec.with_wide_r2();
                }
                spec
            })
        })
        .collect();
    let cells = grid
        .into_par_iter()
        .enumerate()
        .map(|(i, spec)| {
            let cell_hyper = TrainHyper {
                seed: Rng::derive(hyper.seed, i as u64).next_u64(),
                ..hyper.clone()
            };
            let out = fit(model, Some(&spec), mask, train_set, val_set, &cell_hyper)?;
            Ok(SweepCell {
                spec,
                report: out.report,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let best = (0..cells.len())
        .filter(|&i| !cells[i].report.diverged)
        .min_by(|&a, &b| rank_cells(&cells[a], &cells[b]).then(a.cmp(&b)));
    Ok(SweepOutcome { cells, best })
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub mask: TuningMask,
    pub report: RunReport,
    /// Score minus the baseline score, in percentage points.
    pub delta_pct: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    /// All layers, both blocks.
    pub baseline: RunReport,
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub layers: String,
    pub blocks: String,
    pub params: usize,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub delta_pct: f64,
    pub steps: usize,
    pub wall_ms: u64,
}

impl AblationTable {
    pub fn rows(&self) -> Vec<AblationRow> {
        self.cells
            .iter()
            .map(|c| AblationRow {
                layers: c.mask.layers.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
                blocks: c.mask.blocks.iter().map(Block::to_string).collect::<Vec<_>>().join("+"),
                params: c.report.params,
                train_acc: c.report.train_acc,
                val_acc: c.report.val_acc,
                delta_pct: c.delta_pct,
                steps: c.report.steps,
                wall_ms: c.report.wall_ms,
            })
            .collect()
    }
}

/// Trains one cell per `(layer set, block set)` from the same initialization
/// and reports each score relative to the all-layers, both-blocks run.
pub fn ablation_run<T: Scalar>(
    model: &ViTModel<T>,
    train_set: &Dataset<T>,
    val_set: Option<&Dataset<T>>,
    spec: &FactorSpec,
    layer_sets: &[BTreeSet<usize>],
    block_sets: &[&[Block]],
    hyper: &TrainHyper,
) -> Result<AblationTable> {
    let layers = model.cfg.layers;
    if let Some(bad) = layer_sets.iter().flatten().find(|&&l| l >= layers) {
        return Err(Error::Config(format!("ablation layer {bad} outside [0, {layers})")));
    }
    let mut masks = vec![TuningMask::all(layers)];
    for set in layer_sets {
        for blocks in block_sets {
            masks.push(TuningMask::new(set.iter().copied(), blocks.iter().copied()));
        }
    }
    let mut reports = masks
        .par_iter()
        .map(|mask| fit(model, Some(spec), mask, train_set, val_set, hyper).map(|o| o.report))
        .collect::<Result<Vec<_>>>()?;
    let baseline = reports.remove(0);
    let base_score = baseline.score();
    let cells = masks
        .into_iter()
        .skip(1)
        .zip(reports)
        .map(|(mask, report)| AblationCell {
            delta_pct: 100.0 * (report.score() - base_score),
            mask,
            report,
        })
        .collect();
    Ok(AblationTable { baseline, cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticSpec};
    use crate::peft::Method;
    use crate::train::accuracy;
    use crate::vit::ViTConfig;

    fn setup() -> (ViTModel<f64>, Dataset<f64>, Option<Dataset<f64>>) {
        let cfg = ViTConfig {
            d: 8,
            layers: 2,
            heads: 2,
            n_patches: 4,
            patch_size: 4,
            channels: 1,
            n_classes: 2,
        };
        let data = gen_synthetic(&SyntheticSpec {
            n_classes: 2,
            samples_per_class: 10,
            image_size: 8,
            ..Default::default()
        })
        .unwrap();
        let (tr, va) = data.split(0.2, 0).unwrap();
        (ViTModel::build(&cfg, &mut Rng::new(3)).unwrap(), tr, va)
    }

    fn hyper() -> TrainHyper {
        TrainHyper {
            batch_size: 8,
            epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn default_groups() {
        let g = default_layer_groups(12);
        assert_eq!(g.len(), 4);
        assert_eq!(g[0], BTreeSet::from([0, 1, 2]));
        assert_eq!(g[2], BTreeSet::from([5, 6, 7, 8]));
        assert_eq!(default_layer_groups(2), vec![BTreeSet::from([0, 1])]);
    }

    #[test]
    fn single_cell_grid() {
        let (model, tr, va) = setup();
        let base = FactorSpec::new(Method::Efft1, 8, 2, 2, 1.0);
        let out = sweep(
            &model,
            &tr,
            va.as_ref(),
            &base,
            &[3],
            &[10.0],
            &TuningMask::all(2),
            &hyper(),
        )
        .unwrap();
        assert_eq!(out.cells.len(), 1);
        assert_eq!(out.best, Some(0));
        assert_eq!((out.cells[0].spec.r1, out.cells[0].spec.s), (3, 10.0));
        let rows = out.rows(&model);
        assert_eq!(rows[0].params, 4 * 8 * 3 + 8 * 3 + 27);
    }

    #[test]
    fn diverged_cell_never_selected() {
        let (model, tr, va) = setup();
        let base = FactorSpec::new(Method::Efft1, 8, 2, 2, 1.0);
        let out = sweep(
            &model,
            &tr,
            va.as_ref(),
            &base,
            &[2],
            &[1e30, 1.0],
            &TuningMask::all(2),
            &hyper(),
        )
        .unwrap();
        assert!(out.cells[0].report.diverged);
        assert_eq!(out.best, Some(1));

        let all_bad = sweep(
            &model,
            &tr,
            va.as_ref(),
            &base,
            &[2],
            &[1e30],
            &TuningMask::all(2),
            &hyper(),
        )
        .unwrap();
        assert_eq!(all_bad.best, None);
    }

    #[test]
    fn empty_grid_is_error() {
        let (model, tr, va) = setup();
        let base = FactorSpec::new(Method::Efft1, 8, 2, 2, 1.0);
        assert!(sweep(
            &model,
            &tr,
            va.as_ref(),
            &base,
            &[],
            &[1.0],
            &TuningMask::none(),
            &hyper()
        )
        .is_err());
    }

    #[test]
    fn tie_break_order() {
        let (model, tr, va) = setup();
        let base = FactorSpec::new(Method::Efft1, 8, 2, 2, 1.0);
        let mut out = sweep(
            &model,
            &tr,
            va.as_ref(),
            &base,
            &[2],
            &[1.0],
            &TuningMask::none(),
            &hyper(),
        )
        .unwrap();
        let template = out.cells[0].clone();
        let cell = |r1: usize, s: f64, params: usize, acc: f64| {
            let mut c = template.clone();
            c.spec.r1 = r1;
            c.spec.s = s;
            c.report.params = params;
            c.report.val_acc = Some(acc);
            c
        };
        out.cells = vec![
            cell(8, 10.0, 200, 0.9),
            cell(4, 100.0, 100, 0.9),
            cell(4, 1.0, 100, 0.9),
            cell(2, 1.0, 50, 0.8),
        ];
        let best = (0..4)
            .min_by(|&a, &b| rank_cells(&out.cells[a], &out.cells[b]))
            .unwrap();
        assert_eq!(best, 2);
    }

    #[test]
    fn ablation_baseline_and_empty_mask() {
        let (model, tr, va) = setup();
        let spec = FactorSpec::new(Method::Efft2, 8, 2, 2, 10.0);
        let sets = vec![BTreeSet::from([0, 1]), BTreeSet::from([1])];
        let table = ablation_run(&model, &tr, va.as_ref(), &spec, &sets, &ABLATION_BLOCKS, &hyper()).unwrap();
        assert_eq!(table.cells.len(), 6);
        let both_all = &table.cells[2];
        assert_eq!(both_all.mask, TuningMask::all(2));
        assert_eq!(both_all.delta_pct, 0.0);
        let rows = table.rows();
        assert_eq!((rows[0].layers.as_str(), rows[0].blocks.as_str()), ("0,1", "mhsa"));
        assert_eq!(rows[5].blocks, "mhsa+ffn");

        let none = ablation_run(
            &model,
            &tr,
            va.as_ref(),
            &spec,
            &[BTreeSet::new()],
            &ABLATION_BLOCKS[2..],
            &hyper(),
        )
        .unwrap();
        let probe = fit(&model, None, &TuningMask::none(), &tr, va.as_ref(), &hyper()).unwrap();
        assert_eq!(none.cells[0].report.val_acc, probe.report.val_acc);
        assert_eq!(
            none.cells[0].report.train_acc,
            accuracy(&probe.model, None, &TuningMask::none(), &tr).unwrap()
        );

        assert!(ablation_run(
            &model,
            &tr,
            va.as_ref(),
            &spec,
            &[BTreeSet::from([2])],
            &ABLATION_BLOCKS,
            &hyper()
        )
        .is_err());
    }
}
