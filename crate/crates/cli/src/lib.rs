//! The `efft` command-line driver.
//!
//! Exit status is 0 on success, 1 for usage errors and 2 when a command
//! fails at run time. Everything random derives from the config's
//! `train.seed`, which `--seed` overrides.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use efft::analysis::{adjusted_similarity, subspace_similarity, DEFAULT_BASELINE_SEEDS};
use efft::data::save_idx;
use efft::io::{load_checkpoint, load_config, save_checkpoint, save_csv, Checkpoint, ExperimentConfig};
use efft::train::{ablation_run, accuracy, default_layer_groups, fit, sweep, ReportRow, ABLATION_BLOCKS};
use efft::{Block, Factors, Rng, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Seed stream for the similarity baseline.
const BASELINE_STREAM: u64 = 201;

#[derive(Parser, Debug)]
#[command(name = "efft", version, about = "Factor-tune a frozen Vision Transformer")]
pub struct Cli {
    /// Overrides `train.seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct ConfigArg {
    /// Experiment config file.
    #[arg(short, long)]
    pub config: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train factors and head, then write a checkpoint.
    Train {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(short, long)]
        output: PathBuf,
        /// Also write the run as a one-row CSV report.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on the config's data.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Train every (rank, scale) cell and write the grid as CSV.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 1.0, 10.0, 100.0])]
        scales: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32])]
        ranks: Vec<usize>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train one cell per (layer set, block set) and write deltas as CSV.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Layer set such as `0-2` or `0,3,5`; repeat for more sets.
        #[arg(long)]
        layers: Vec<String>,
        /// Block set such as `mhsa`, `ffn` or `mhsa+ffn`; repeat for more.
        #[arg(long)]
        blocks: Vec<String>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Subspace similarity of one factor matrix from two checkpoints.
    Similarity {
        /// Exactly two checkpoints.
        #[arg(long, num_args = 1, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(short)]
        i: usize,
        #[arg(short)]
        j: usize,
        /// Subtract the mean similarity of random Gaussian pairs.
        #[arg(long)]
        adjust: bool,
        /// Factor tensor to compare, such as `u`, `v`, `u1` or `lora.0.q.down`.
        #[arg(long, default_value = "u")]
        matrix: String,
    },
    /// Number of factor parameters the config allocates.
    CountParams {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Write the config's dataset as IDX files.
    GenData {
        /// Config whose model and data sections describe the dataset.
        #[arg(long)]
        spec: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

/// Parses `argv` (including the program name), runs the command and
/// returns the exit status.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            EXIT_RUNTIME
        }
    }
}

/// The error chain, skipping causes already quoted by an outer message.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !text.contains(&msg) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&msg);
        }
    }
    text
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn execute(cli: &Cli) -> Result<(), Failure> {
    let config = |arg: &ConfigArg| -> Result<ExperimentConfig, Failure> {
        let mut cfg = load_config(&arg.config)?;
        if let Some(seed) = cli.seed {
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    };
    match &cli.command {
        Command::Train { cfg, output, csv } => train_cmd(&config(cfg)?, output, csv.as_deref()),
        Command::Eval { cfg, ckpt } => eval_cmd(&config(cfg)?, ckpt),
        Command::Sweep {
            cfg,
            scales,
            ranks,
            output,
        } => sweep_cmd(&config(cfg)?, scales, ranks, output),
        Command::Ablate {
            cfg,
            layers,
            blocks,
            output,
        } => ablate_cmd(&config(cfg)?, layers, blocks, output),
        Command::Similarity {
            ckpt,
            i,
            j,
            adjust,
            matrix,
        } => similarity_cmd(ckpt, *i, *j, *adjust, matrix, cli.seed.unwrap_or(0)),
        Command::CountParams { cfg } => {
            let cfg = config(cfg)?;
            let params = match cfg.factor_spec() {
                Some(spec) => Factors::init(&spec, 0.0, &mut Rng::new(0))?.count_params(),
                None => 0,
            };
            println!("{params}");
            Ok(())
        }
        Command::GenData { spec, output } => gen_data_cmd(&config(&ConfigArg { config: spec.clone() })?, output),
    }
}

fn report_wall(what: &str, start: Instant) {
    eprintln!("{what} took {} ms", start.elapsed().as_millis());
}

fn fmt_acc(acc: Option<f64>) -> String {
    acc.map_or("-".into(), |a| format!("{a:.4}"))
}

fn train_cmd(cfg: &ExperimentConfig, output: &Path, csv: Option<&Path>) -> Result<(), Failure> {
    let start = Instant::now();
    let model = cfg.build_model()?;
    let (train_set, val_set) = cfg.load_split()?;
    let spec = cfg.factor_spec();
    let mask = if spec.is_some() {
        cfg.tuning_mask()
    } else {
        efft::TuningMask::none()
    };
    let out = fit(&model, spec.as_ref(), &mask, &train_set, val_set.as_ref(), &cfg.train)?;
    let r = &out.report;
    println!(
        "{} params={} steps={} train_acc={} val_acc={}{}",
        r.method,
        r.params,
        r.steps,
        fmt_acc(Some(r.train_acc)),
        fmt_acc(r.val_acc),
        if r.diverged { " diverged" } else { "" }
    );
    if let Some(path) = csv {
        save_csv(path, &[ReportRow::new(&out.model, r)])?;
    }
    let ckpt = Checkpoint {
        model: out.model,
        factors: out.factors,
        spec,
        mask,
        seed: cfg.train.seed,
        report: Some(out.report),
    };
    save_checkpoint(output, &ckpt)?;
    report_wall("training", start);
    Ok(())
}

fn eval_cmd(cfg: &ExperimentConfig, ckpt: &Path) -> Result<(), Failure> {
    let ckpt = load_checkpoint(ckpt)?;
    if ckpt.model.cfg != cfg.vit_config() {
        return Err(anyhow!(
            "checkpoint model {:?} does not match the config's {:?}",
            ckpt.model.cfg,
            cfg.vit_config()
        )
        .into());
    }
    let (train_set, val_set) = cfg.load_split()?;
    let f = ckpt.factors.as_ref();
    println!(
        "train_acc={}",
        fmt_acc(Some(accuracy(&ckpt.model, f, &ckpt.mask, &train_set)?))
    );
    if let Some(val) = val_set {
        println!("val_acc={}", fmt_acc(Some(accuracy(&ckpt.model, f, &ckpt.mask, &val)?)));
    }
    Ok(())
}

fn sweep_cmd(cfg: &ExperimentConfig, scales: &[f64], ranks: &[usize], output: &Path) -> Result<(), Failure> {
    let start = Instant::now();
    let spec = cfg
        .factor_spec()
        .ok_or_else(|| usage("sweep needs a factor method, not a linear probe"))?;
    if scales.is_empty() || ranks.is_empty() {
        return Err(usage("--scales and --ranks must be non-empty"));
    }
    let model = cfg.build_model()?;
    let (train_set, val_set) = cfg.load_split()?;
    let out = sweep(
        &model,
        &train_set,
        val_set.as_ref(),
        &spec,
        ranks,
        scales,
        &cfg.tuning_mask(),
        &cfg.train,
    )?;
    save_csv(output, &out.rows(&model))?;
    match out.best_cell() {
        Some(best) => println!(
            "best r={} s={} score={:.4} params={}",
            best.spec.r1,
            best.spec.s,
            best.report.score(),
            best.report.params
        ),
        None => println!("every cell diverged"),
    }
    report_wall("sweep", start);
    Ok(())
}

/// `a-b` (inclusive) or a comma list.
fn parse_layer_set(text: &str) -> Result<BTreeSet<usize>, Failure> {
    let bad = || usage(format!("bad layer set `{text}`; expected `a-b` or `a,b,c`"));
    if let Some((a, b)) = text.split_once('-') {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    text.split(',').map(|t| t.trim().parse().map_err(|_| bad())).collect()
}

fn parse_block_set(text: &str) -> Result<Vec<Block>, Failure> {
    let set = text
        .split('+')
        .map(|t| {
            t.trim()
                .parse::<Block>()
                .map_err(|e| usage(format!("bad block set `{text}`: {e}")))
        })
        .collect::<Result<BTreeSet<_>, _>>()?;
    Ok(set.into_iter().collect())
}

fn ablate_cmd(cfg: &ExperimentConfig, layers: &[String], blocks: &[String], output: &Path) -> Result<(), Failure> {
    let start = Instant::now();
    let spec = cfg
        .factor_spec()
        .ok_or_else(|| usage("ablate needs a factor method, not a linear probe"))?;
    let layer_sets = if layers.is_empty() {
        default_layer_groups(cfg.model.layers)
    } else {
        layers.iter().map(|s| parse_layer_set(s)).collect::<Result<_, _>>()?
    };
    if let Some(bad) = layer_sets.iter().flatten().find(|&&l| l >= cfg.model.layers) {
        return Err(usage(format!("layer {bad} outside [0, {})", cfg.model.layers)));
    }
    let block_sets: Vec<Vec<Block>> = if blocks.is_empty() {
        ABLATION_BLOCKS.iter().map(|b| b.to_vec()).collect()
    } else {
        blocks.iter().map(|s| parse_block_set(s)).collect::<Result<_, _>>()?
    };
    let block_refs: Vec<&[Block]> = block_sets.iter().map(Vec::as_slice).collect();
    let model = cfg.build_model()?;
    let (train_set, val_set) = cfg.load_split()?;
    let table = ablation_run(
        &model,
        &train_set,
        val_set.as_ref(),
        &spec,
        &layer_sets,
        &block_refs,
        &cfg.train,
    )?;
    save_csv(output, &table.rows())?;
    println!("baseline score={:.4}", table.baseline.score());
    report_wall("ablation", start);
    Ok(())
}

fn factor_matrix(ckpt: &Checkpoint, path: &Path, name: &str) -> Result<Tensor, Failure> {
    let factors = ckpt
        .factors
        .as_ref()
        .ok_or_else(|| anyhow!("{} holds no factors", path.display()))?;
    let names: Vec<String> = factors.tensors().iter().map(|(n, _)| n.clone()).collect();
    let t = factors
        .tensors()
        .into_iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| {
            anyhow!(
                "{} has no factor `{name}`; available: {}",
                path.display(),
                names.join(", ")
            )
        })?;
    if t.shape().len() != 2 {
        return Err(anyhow!("factor `{name}` has shape {:?}, expected a matrix", t.shape()).into());
    }
    Ok(t)
}

fn similarity_cmd(ckpts: &[PathBuf], i: usize, j: usize, adjust: bool, matrix: &str, seed: u64) -> Result<(), Failure> {
    let [a, b] = ckpts else {
        return Err(usage(format!(
            "--ckpt must be given exactly twice, got {}",
            ckpts.len()
        )));
    };
    let load = |p: &PathBuf| load_checkpoint(p).with_context(|| format!("loading {}", p.display()));
    let (ca, cb) = (load(a)?, load(b)?);
    let (ma, mb) = (factor_matrix(&ca, a, matrix)?, factor_matrix(&cb, b, matrix)?);
    let value = if adjust {
        let mut rng = Rng::derive(seed, BASELINE_STREAM);
        adjusted_similarity(&ma, &mb, i, j, DEFAULT_BASELINE_SEEDS, &mut rng)?
    } else {
        subspace_similarity(&ma, &mb, i, j)?
    };
    println!("{value:.4}");
    Ok(())
}

fn gen_data_cmd(cfg: &ExperimentConfig, dir: &Path) -> Result<(), Failure> {
    if cfg.synthetic_spec().is_none() {
        return Err(usage("gen-data needs a synthetic data section"));
    }
    let data = cfg.load_dataset()?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    save_idx(&data, &dir.join("images.idx"), &dir.join("labels.idx"))?;
    println!("{} samples, {} classes", data.len(), data.n_classes());
    Ok(())
}
