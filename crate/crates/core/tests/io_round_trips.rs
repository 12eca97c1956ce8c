use efft::data::{gen_synthetic, load_idx, save_idx, SyntheticSpec};
use efft::io::{load_checkpoint, save_checkpoint, Checkpoint, ExperimentConfig};
use efft::train::{fit, train};
use efft::{FactorSpec, Factors, Method, Rng, Tensor, TrainHyper, TuningMask, ViTConfig, ViTModel};
use proptest::prelude::*;

fn small_model(seed: u64) -> ViTModel {
    let cfg = ViTConfig {
        d: 8,
        layers: 2,
        heads: 2,
        n_patches: 4,
        patch_size: 2,
        channels: 1,
        n_classes: 4,
    };
    ViTModel::build(&cfg, &mut Rng::new(seed)).unwrap()
}

#[test]
fn checkpoints_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(0);
    let mut rng = Rng::new(1);
    for trial in 0..100 {
        let method = Method::ALL[trial % 4];
        let spec = FactorSpec::new(method, 8, 2, 1 + trial % 3, 0.1 + rng.next_f64() * 10.0);
        let mut factors = Factors::init(&spec, 0.02, &mut rng).unwrap();
        for t in factors.tensors_mut() {
            let shape = t.shape().to_vec();
            *t = Tensor::randn(&shape, 1e3 * rng.next_f64(), &mut rng).unwrap();
        }
        let ckpt = Checkpoint {
            model: model.clone(),
            factors: Some(factors),
            spec: Some(spec),
            mask: TuningMask::new([trial % 2], [efft::Block::Ffn]),
            seed: trial as u64,
            report: None,
        };
        let path = dir.path().join(format!("{trial}.ckpt"));
        save_checkpoint(&path, &ckpt).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let bits = |c: &Checkpoint| -> Vec<u64> {
            c.factors
                .as_ref()
                .unwrap()
                .tensors()
                .iter()
                .flat_map(|(_, t)| t.data().iter().map(|x| x.to_bits()))
                .collect()
        };
        assert_eq!(bits(&back), bits(&ckpt));
        assert_eq!(back, ckpt);
    }
}

#[test]
fn resume_with_zero_steps_keeps_report() {
    let data = gen_synthetic(&SyntheticSpec {
        image_size: 4,
        samples_per_class: 5,
        ..Default::default()
    })
    .unwrap();
    let spec = FactorSpec::new(Method::Efft2, 8, 2, 2, 10.0);
    let hyper = TrainHyper {
        epochs: 2,
        batch_size: 8,
        ..Default::default()
    };
    let mask = TuningMask::all(2);
    let out = fit(&small_model(2), Some(&spec), &mask, &data, None, &hyper).unwrap();
    let ckpt = Checkpoint {
        model: out.model,
        factors: out.factors,
        spec: Some(spec),
        mask: mask.clone(),
        seed: 0,
        report: Some(out.report.clone()),
    };
    let mut back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    let report = back.report.clone().unwrap();
    assert_eq!(report.epoch_loss, out.report.epoch_loss);
    let resumed = train(
        &mut back.model,
        back.factors.as_mut(),
        &back.mask,
        &data,
        None,
        &TrainHyper { epochs: 0, ..hyper },
    )
    .unwrap();
    assert_eq!(resumed.train_acc, report.train_acc);
    assert_eq!(back.model, ckpt.model);
    assert_eq!(back.factors, ckpt.factors);
}

#[test]
fn idx_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_synthetic(&SyntheticSpec {
        image_size: 8,
        samples_per_class: 3,
        ..Default::default()
    })
    .unwrap();
    let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
    save_idx(&data, &img, &lab).unwrap();
    let back = load_idx(&img, &lab, None).unwrap();
    assert_eq!(back.labels(), data.labels());
    let err = back.images().sub(data.images()).unwrap().max_abs();
    assert!(err <= 0.5 / 255.0 + 1e-12);
    assert_eq!(load_idx(&img, &lab, Some(5)).unwrap().len(), 5);
    assert!(load_idx(&dir.path().join("missing"), &lab, None).is_err());
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
fn cholesky_solve(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            l[i][j] = if i == j {
                (a[i][i] - s).sqrt()
            } else {
                (a[i][j] - s) / l[j][j]
            };
        }
    }
    let cols = b[0].len();
    let mut x = vec![vec![0.0; cols]; n];
    for c in 0..cols {
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = (b[i][c] - (0..i).map(|k| l[i][k] * y[k]).sum::<f64>()) / l[i][i];
        }
        for i in (0..n).rev() {
            x[i][c] = (y[i] - (i + 1..n).map(|k| l[k][i] * x[k][c]).sum::<f64>()) / l[i][i];
        }
    }
    x
}

#[test]
fn gratings_are_linearly_separable() {
    let spec = SyntheticSpec {
        n_classes: 4,
        samples_per_class: 50,
        image_size: 16,
        noise_std: 0.1,
        ..Default::default()
    };
    let data = gen_synthetic(&spec).unwrap();
    let n = data.len();
    let p = 16 * 16 + 1;
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = data.image(i).into_data();
            r.push(1.0);
            r
        })
        .collect();
    let mut xtx = vec![vec![0.0; p]; p];
    let mut xty = vec![vec![0.0; 4]; p];
    for (row, &y) in rows.iter().zip(data.labels()) {
        for a in 0..p {
            for b in 0..p {
                xtx[a][b] += row[a] * row[b];
            }
            xty[a][y] += row[a];
        }
    }
    for (a, r) in xtx.iter_mut().enumerate() {
        r[a] += 1e-3;
    }
    let w = cholesky_solve(&xtx, &xty);
    let correct = rows
        .iter()
        .zip(data.labels())
        .filter(|(row, &y)| {
            let scores: Vec<f64> = (0..4).map(|c| (0..p).map(|a| row[a] * w[a][c]).sum()).collect();
            let best = (0..4).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
            best == y
        })
        .count();
    assert!(correct as f64 / n as f64 >= 0.8, "{correct}/{n}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_text_round_trips(
        d_heads in prop::sample::select(vec![(8usize, 1usize), (8, 2), (16, 4), (24, 3)]),
        layers in 1usize..6,
        kind in prop::option::of(prop::sample::select(Method::ALL.to_vec())),
        r1 in 1usize..40,
        r2 in 1usize..40,
        s in 1e-3f64..1e3,
        lr in 1e-6f64..1.0,
        steps in prop::option::of(1usize..10_000),
        seed in any::<u64>(),
        noise in 0.0f64..1.0,
        mask_layer in prop::option::of(0usize..6),
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.model.d = d_heads.0;
        cfg.model.heads = d_heads.1;
        cfg.model.layers = layers;
        cfg.method.kind = kind;
        cfg.method.r1 = r1;
        cfg.method.r2 = r2;
        cfg.method.s = s;
        cfg.method.s2 = s * 0.5;
        cfg.train.lr = lr;
        cfg.train.max_steps = steps;
        cfg.train.seed = seed;
        cfg.data = efft::io::DataSection::Synthetic { samples_per_class: 7, noise_std: noise };
        cfg.mask.layers = mask_layer.filter(|&l| l < layers).map(|l| [l].into());
        let text = cfg.to_string();
        prop_assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }
}
