//! Subspace similarity between factor matrices and benchmark score
//! aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Result};
use crate::linalg::{svd, SvdResult};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gaussian pairs averaged for the random baseline.
pub const DEFAULT_BASELINE_SEEDS: usize = 10;

/// Task counts per group: natural, specialized, structured.
pub const GROUP_SIZES: [usize; 3] = [7, 4, 8];

/// Left singular bases of two matrices, reusable across `(i, j)` pairs.
#[derive(Debug, Clone)]
pub struct SubspacePair<T> {
    a: SvdResult<T>,
    b: SvdResult<T>,
}

impl<T: Scalar> SubspacePair<T> {
    pub fn new(a: &Tensor<T>, b: &Tensor<T>) -> Result<Self> {
        let (ra, _) = a.dims2()?;
        let (rb, _) = b.dims2()?;
        if ra != rb {
            return Err(shape_err!("subspaces live in different spaces: {ra} vs {rb} rows"));
        }
        Ok(SubspacePair { a: svd(a)?, b: svd(b)? })
    }

    /// Available singular vectors of each matrix.
    pub fn bounds(&self) -> (usize, usize) {
        (self.a.s.len(), self.b.s.len())
    }

    /// `‖U_iᵀ U_j‖_F²`, before normalization.
    pub fn overlap(&self, i: usize, j: usize) -> Result<f64> {
        let ui = self.a.top_left(i)?;
        let uj = self.b.top_left(j)?;
        Ok(ui.transpose()?.matmul(&uj)?.frobenius_norm_sq().as_f64())
    }

    /// `‖U_iᵀ U_j‖_F² / min(i, j)`, clamped to `[0, 1]`.
    pub fn similarity(&self, i: usize, j: usize) -> Result<f64> {
        Ok((self.overlap(i, j)? / i.min(j) as f64).clamp(0.0, 1.0))
    }
}

/// Normalized overlap of the top-`i` left singular subspace of `a` and the
/// top-`j` subspace of `b`.
pub fn subspace_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, i: usize, j: usize) -> Result<f64> {
    SubspacePair::new(a, b)?.similarity(i, j)
}

fn baseline_pairs<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    seeds: usize,
    rng: &mut Rng,
) -> Result<Vec<SubspacePair<T>>> {
    (0..seeds)
        .map(|_| {
            let ga = Tensor::randn(a.shape(), T::one(), rng)?;
            let gb = Tensor::randn(b.shape(), T::one(), rng)?;
            SubspacePair::new(&ga, &gb)
        })
        .collect()
}

/// Similarity minus the mean similarity of `baseline_seeds` independent
/// Gaussian pairs of the same shapes, clamped at zero. With no baseline
/// pairs the raw value is returned.
pub fn adjusted_similarity<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    i: usize,
    j: usize,
    baseline_seeds: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let raw = subspace_similarity(a, b, i, j)?;
    if baseline_seeds == 0 {
        return Ok(raw);
    }
    let pairs = baseline_pairs(a, b, baseline_seeds, rng)?;
    let mut base = 0.0;
    for p in &pairs {
        base += p.similarity(i, j)?;
    }
    Ok((raw - base / baseline_seeds as f64).max(0.0))
}

/// Similarities for every `1 ≤ i ≤ i_max`, `1 ≤ j ≤ j_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityGrid {
    /// `values[i-1][j-1]`
    pub values: Vec<Vec<f64>>,
    pub label_a: String,
    pub label_b: String,
    /// Number of Gaussian baseline pairs subtracted; zero for raw values.
    pub baseline_seeds: usize,
    pub baseline_seed: Option<u64>,
}

impl SimilarityGrid {
    pub fn compute<T: Scalar>(
        a: &Tensor<T>,
        b: &Tensor<T>,
        i_max: usize,
        j_max: usize,
        baseline_seeds: usize,
        seed: u64,
    ) -> Result<Self> {
        let pair = SubspacePair::new(a, b)?;
        let (ka, kb) = pair.bounds();
        if i_max == 0 || j_max == 0 || i_max > ka || j_max > kb {
            return Err(contract_err!(
                "grid {i_max}×{j_max} exceeds available {ka}×{kb} singular vectors"
            ));
        }
        let baselines = baseline_pairs(a, b, baseline_seeds, &mut Rng::new(seed))?;
        let mut values = Vec::with_capacity(i_max);
        for i in 1..=i_max {
            let mut row = Vec::with_capacity(j_max);
            for j in 1..=j_max {
                let raw = pair.similarity(i, j)?;
                let v = if baselines.is_empty() {
                    raw
                } else {
                    let mut base = 0.0;
                    for p in &baselines {
                        base += p.similarity(i, j)?;
                    }
                    (raw - base / baselines.len() as f64).max(0.0)
                };
                row.push(v);
            }
            values.push(row);
        }
        Ok(SimilarityGrid {
            values,
            label_a: String::new(),
            label_b: String::new(),
            baseline_seeds,
            baseline_seed: (baseline_seeds > 0).then_some(seed),
        })
    }

    pub fn with_labels(mut self, a: impl Into<String>, b: impl Into<String>) -> Self {
        self.label_a = a.into();
        self.label_b = b.into();
        self
    }
}

/// Mean over all tasks and mean of the three group means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreSummary {
    pub overall: f64,
    pub group_avg: f64,
    pub group_means: [f64; 3],
}

/// Aggregates 19 per-task accuracies ordered natural (7), specialized (4),
/// structured (8).
pub fn aggregate_scores(per_task: &[f64]) -> Result<ScoreSummary> {
    let total: usize = GROUP_SIZES.iter().sum();
    if per_task.len() != total {
        return Err(contract_err!(
            "expected {total} task scores grouped {GROUP_SIZES:?}, got {}",
            per_task.len()
        ));
    }
    let mut group_means = [0.0; 3];
    let mut start = 0;
    for (g, &n) in GROUP_SIZES.iter().enumerate() {
        group_means[g] = per_task[start..start + n].iter().sum::<f64>() / n as f64;
        start += n;
    }
    Ok(ScoreSummary {
        overall: per_task.iter().sum::<f64>() / total as f64,
        group_avg: group_means.iter().sum::<f64>() / 3.0,
        group_means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn gauss(r: usize, c: usize, rng: &mut Rng) -> Tensor<f64> {
        Tensor::randn(&[r, c], 1.0, rng).unwrap()
    }

    #[test]
    fn self_and_orthogonal() {
        let mut rng = Rng::new(1);
        let a = gauss(10, 4, &mut rng);
        for k in 1..=4 {
            assert!((subspace_similarity(&a, &a, k, k).unwrap() - 1.0).abs() < 1e-10);
        }
        let mut left = Tensor::<f64>::zeros(&[6, 2]).unwrap();
        left.set(0, 0, 2.0);
        left.set(1, 1, -1.0);
        let mut right = Tensor::<f64>::zeros(&[6, 2]).unwrap();
        right.set(3, 0, 1.5);
        right.set(4, 1, 0.5);
        assert!(subspace_similarity(&left, &right, 2, 2).unwrap().abs() < 1e-10);
    }

    #[test]
    fn rank_bound_and_rows_checked() {
        let mut rng = Rng::new(2);
        let a = gauss(8, 3, &mut rng);
        assert!(subspace_similarity(&a, &a, 4, 1).is_err());
        assert!(subspace_similarity(&a, &a, 0, 1).is_err());
        assert!(subspace_similarity(&a, &gauss(7, 3, &mut rng), 1, 1).is_err());
    }

    #[test]
    fn random_baseline_matches_dimension_ratio() {
        let (d, k) = (64, 8);
        let mut rng = Rng::new(3);
        let trials = 100;
        let mean: f64 = (0..trials)
            .map(|_| subspace_similarity(&gauss(d, d, &mut rng), &gauss(d, d, &mut rng), k, k).unwrap())
            .sum::<f64>()
            / trials as f64;
        let expect = k as f64 / d as f64;
        assert!((mean - expect).abs() < 0.2 * expect, "{mean} vs {expect}");
    }

    #[test]
    fn adjusted_behaviour() {
        let mut rng = Rng::new(4);
        let a = gauss(32, 8, &mut rng);
        let raw = subspace_similarity(&a, &a, 4, 4).unwrap();
        let adj = adjusted_similarity(&a, &a, 4, 4, DEFAULT_BASELINE_SEEDS, &mut rng).unwrap();
        assert!(adj > 0.0 && adj < raw);
        assert!(adj > 1.0 - 0.3);

        let b = gauss(32, 8, &mut rng);
        assert_eq!(
            adjusted_similarity(&a, &b, 3, 5, 0, &mut rng).unwrap(),
            subspace_similarity(&a, &b, 3, 5).unwrap()
        );

        let trials = 20;
        let mean: f64 = (0..trials)
            .map(|_| {
                let (x, y) = (gauss(32, 8, &mut rng), gauss(32, 8, &mut rng));
                adjusted_similarity(&x, &y, 4, 4, DEFAULT_BASELINE_SEEDS, &mut rng).unwrap()
            })
            .sum::<f64>()
            / trials as f64;
        assert!(mean.abs() < 0.1, "{mean}");
    }

    #[test]
    fn grid_matches_pointwise() {
        let mut rng = Rng::new(5);
        let (a, b) = (gauss(12, 5, &mut rng), gauss(12, 4, &mut rng));
        let grid = SimilarityGrid::compute(&a, &b, 5, 4, 0, 0).unwrap();
        for i in 1..=5 {
            for j in 1..=4 {
                assert_eq!(grid.values[i - 1][j - 1], subspace_similarity(&a, &b, i, j).unwrap());
            }
        }
        let adj = SimilarityGrid::compute(&a, &b, 2, 2, 3, 9).unwrap();
        assert_eq!(
            adj.values[1][1],
            adjusted_similarity(&a, &b, 2, 2, 3, &mut Rng::new(9)).unwrap()
        );
        assert!(SimilarityGrid::compute(&a, &b, 6, 1, 0, 0).is_err());
    }

    #[test]
    fn aggregate_constant_and_counts() {
        let s = aggregate_scores(&[0.7; 19]).unwrap();
        assert!((s.overall - 0.7).abs() < 1e-15 && (s.group_avg - 0.7).abs() < 1e-15);
        assert!(aggregate_scores(&[1.0; 18]).is_err());
        assert!(aggregate_scores(&[1.0; 20]).is_err());
    }

    #[test]
    fn aggregate_weights_groups_equally() {
        let mut v = vec![0.0; 19];
        v[7..11].fill(3.0);
        let s = aggregate_scores(&v).unwrap();
        assert_eq!(s.group_means, [0.0, 3.0, 0.0]);
        assert!((s.group_avg - 1.0).abs() < 1e-15);
        assert!((s.overall - 12.0 / 19.0).abs() < 1e-15);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn bounded_symmetric_monotone(seed in any::<u64>(), rows in 4usize..10, ca in 1usize..5, cb in 1usize..5) {
            let mut rng = Rng::new(seed);
            let (a, b) = (gauss(rows, ca, &mut rng), gauss(rows, cb, &mut rng));
            let pair = SubspacePair::new(&a, &b).unwrap();
            let (ka, kb) = pair.bounds();
            for i in 1..=ka {
                for j in 1..=kb {
                    let v = pair.similarity(i, j).unwrap();
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            let k = ka.min(kb);
            let ab = subspace_similarity(&a, &b, k, k).unwrap();
            let ba = subspace_similarity(&b, &a, k, k).unwrap();
            prop_assert!((ab - ba).abs() < 1e-10);
            for j in 1..=kb {
                for i in 1..ka {
                    prop_assert!(pair.overlap(i + 1, j).unwrap() >= pair.overlap(i, j).unwrap() - 1e-12);
                }
            }
        }
    }
}
