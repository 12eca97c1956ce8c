use efft::analysis::{adjusted_similarity, aggregate_scores, subspace_similarity, SubspacePair};
use efft::{Rng, Tensor};

const EFFT2_LE32: [f64; 19] = [
    72.1, 92.9, 71.2, 99.1, 90.6, 89.6, 54.7, 85.4, 95.7, 84.4, 76.3, 81.6, 67.6, 50.4, 82.7, 79.2, 47.7, 34.9, 41.9,
];
const FACT_TK_LE32: [f64; 19] = [
    70.6, 90.6, 70.8, 99.1, 90.7, 88.6, 54.1, 84.8, 96.2, 84.5, 75.7, 82.6, 68.2, 49.8, 80.7, 80.8, 47.4, 33.2, 43.0,
];

#[test]
fn reference_rows_reproduce_averages() {
    for (row, overall, group) in [(EFFT2_LE32, 73.6, 75.9), (FACT_TK_LE32, 73.2, 75.6)] {
        let s = aggregate_scores(&row).unwrap();
        assert!((s.overall - overall).abs() <= 0.05, "{} vs {overall}", s.overall);
        assert!((s.group_avg - group).abs() <= 0.05, "{} vs {group}", s.group_avg);
    }
    assert!(aggregate_scores(&EFFT2_LE32[..18]).is_err());
    let flat = aggregate_scores(&[61.5; 19]).unwrap();
    assert!((flat.overall - 61.5).abs() < 1e-12 && (flat.group_avg - 61.5).abs() < 1e-12);
}

#[test]
fn similarity_bounds_on_random_pairs() {
    let mut rng = Rng::new(21);
    for trial in 0..1000 {
        let rows = 2 + trial % 9;
        let (ca, cb) = (1 + trial % 5, 1 + (trial / 5) % 5);
        let a = Tensor::randn(&[rows, ca], 1.0, &mut rng).unwrap();
        let b = Tensor::randn(&[rows, cb], 1.0, &mut rng).unwrap();
        let pair = SubspacePair::new(&a, &b).unwrap();
        let (ka, kb) = pair.bounds();
        let (i, j) = (1 + trial % ka, 1 + (trial / 3) % kb);
        let v = pair.similarity(i, j).unwrap();
        assert!((0.0..=1.0).contains(&v), "trial {trial}: {v}");
    }
}

#[test]
fn identical_and_orthogonal_subspaces() {
    let mut rng = Rng::new(22);
    for k in 1..=6 {
        let a = Tensor::randn(&[12, 6], 1.0, &mut rng).unwrap();
        assert!((subspace_similarity(&a, &a, k, k).unwrap() - 1.0).abs() < 1e-10);
    }
    // disjoint coordinate blocks, then a random rotation of both
    let mut a = Tensor::zeros(&[8, 3]).unwrap();
    let mut b = Tensor::zeros(&[8, 3]).unwrap();
    for c in 0..3 {
        for r in 0..4 {
            a.set(r, c, rng.normal());
            b.set(r + 4, c, rng.normal());
        }
    }
    let q = efft::linalg::svd(&Tensor::randn(&[8, 8], 1.0, &mut rng).unwrap())
        .unwrap()
        .u;
    let (a, b) = (q.matmul(&a).unwrap(), q.matmul(&b).unwrap());
    for i in 1..=3 {
        for j in 1..=3 {
            assert!(subspace_similarity(&a, &b, i, j).unwrap() < 1e-10);
        }
    }
}

#[test]
fn adjusted_similarity_of_independent_gaussians_is_small() {
    let mut rng = Rng::new(23);
    let mut total = 0.0;
    for _ in 0..20 {
        let a = Tensor::randn(&[32, 8], 1.0, &mut rng).unwrap();
        let b = Tensor::randn(&[32, 8], 1.0, &mut rng).unwrap();
        total += adjusted_similarity(&a, &b, 4, 4, 10, &mut rng).unwrap().abs();
    }
    assert!(total / 20.0 < 0.1, "{}", total / 20.0);
}
