//! Experiment configuration files.
//!
//! ```text
//! # comment
//! [model]
//! d = 16
//! layers = 2
//!
//! [method]
//! kind = efft1
//! r1 = 4
//! ```
//!
//! Sections are `model`, `method`, `train`, `data` and `mask`. Every key is
//! optional; missing keys take the defaults of [`ExperimentConfig::default`].
//! Unknown sections or keys are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{gen_synthetic, load_idx, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::peft::{Block, FactorSpec, Method, Role};
use crate::rng::Rng;
use crate::train::TrainHyper;
use crate::vit::{TuningMask, ViTConfig, ViTModel};

const MODEL_STREAM: u64 = 101;
const DATA_STREAM: u64 = 102;
const SPLIT_STREAM: u64 = 103;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    pub classes: usize,
}

/// `kind = None` is a head-only linear probe.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodSection {
    pub kind: Option<Method>,
    pub r1: usize,
    pub r2: usize,
    pub s: f64,
    pub s2: f64,
    pub lora_roles: Vec<Role>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSection {
    Synthetic {
        samples_per_class: usize,
        noise_std: f64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        max_samples: Option<usize>,
    },
}

/// `layers = None` selects every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSection {
    pub layers: Option<BTreeSet<usize>>,
    pub blocks: BTreeSet<Block>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub method: MethodSection,
    pub train: TrainHyper,
    pub data: DataSection,
    pub mask: MaskSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelSection {
                d: 16,
                layers: 2,
                heads: 2,
                patch_size: 4,
                image_size: 16,
                channels: 1,
                classes: 4,
            },
            method: MethodSection {
                kind: Some(Method::Efft1),
                r1: 4,
                r2: 4,
                s: 10.0,
                s2: 10.0,
                lora_roles: vec![Role::Q, Role::V],
            },
            train: TrainHyper::default(),
            data: DataSection::Synthetic {
                samples_per_class: 50,
                noise_std: 0.1,
            },
            mask: MaskSection {
                layers: None,
                blocks: [Block::Mhsa, Block::Ffn].into(),
            },
        }
    }
}

const KEYS: [(&str, &[&str]); 5] = [
    (
        "model",
        &[
            "d",
            "layers",
            "heads",
            "patch_size",
            "image_size",
            "channels",
            "classes",
        ],
    ),
    ("method", &["kind", "r1", "r2", "s", "s2", "lora_roles"]),
    (
        "train",
        &[
            "lr",
            "batch_size",
            "epochs",
            "max_steps",
            "beta1",
            "beta2",
            "eps",
            "weight_decay",
            "val_fraction",
            "seed",
        ],
    ),
    (
        "data",
        &[
            "source",
            "samples_per_class",
            "noise_std",
            "images",
            "labels",
            "max_samples",
        ],
    ),
    ("mask", &["layers", "blocks"]),
];

struct Entry {
    value: String,
    line: usize,
}

type Sections = BTreeMap<&'static str, BTreeMap<&'static str, Entry>>;

fn tokenize(text: &str) -> Result<Sections> {
    let mut sections = Sections::new();
    let mut current: Option<&'static str> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Config(format!("line {line}: {msg}"));
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(format!("malformed section header `{content}`")))?
                .trim();
            let (known, _) = KEYS
                .iter()
                .find(|(s, _)| *s == name)
                .ok_or_else(|| err(format!("unknown section `[{name}]`")))?;
            current = Some(known);
            sections.entry(known).or_default();
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, found `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        let section = current.ok_or_else(|| err(format!("key `{key}` outside any section")))?;
        let known_keys = KEYS.iter().find(|(s, _)| *s == section).map(|(_, k)| *k).unwrap_or(&[]);
        let known = known_keys
            .iter()
            .find(|k| **k == key)
            .ok_or_else(|| err(format!("unknown key `{section}.{key}`")))?;
        let table = sections.entry(section).or_default();
        if table.contains_key(known) {
            return Err(err(format!("duplicate key `{section}.{key}`")));
        }
        table.insert(
            known,
            Entry {
                value: value.to_string(),
                line,
            },
        );
    }
    Ok(sections)
}

struct Reader<'a> {
    sections: &'a Sections,
}

impl Reader<'_> {
    fn get<V: FromStr>(&self, section: &str, key: &str, default: V) -> Result<V> {
        match self.sections.get(section).and_then(|t| t.get(key)) {
            None => Ok(default),
            Some(e) => e
                .value
                .parse()
                .map_err(|_| Error::Config(format!("line {}: cannot parse {section}.{key} = `{}`", e.line, e.value))),
        }
    }

    fn raw(&self, section: &str, key: &str) -> Option<&Entry> {
        self.sections.get(section).and_then(|t| t.get(key))
    }

    fn list<V: FromStr>(&self, section: &str, key: &str, sep: char) -> Result<Option<Vec<V>>> {
        let Some(e) = self.raw(section, key) else {
            return Ok(None);
        };
        e.value
            .split(sep)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| Error::Config(format!("line {}: cannot parse `{s}` in {section}.{key}", e.line)))
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn optional<V: FromStr>(&self, section: &str, key: &str) -> Result<Option<V>> {
        match self.raw(section, key) {
            None => Ok(None),
            Some(e) if e.value == "none" => Ok(None),
            Some(e) => {
                e.value.parse().map(Some).map_err(|_| {
                    Error::Config(format!("line {}: cannot parse {section}.{key} = `{}`", e.line, e.value))
                })
            }
        }
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(Error::Config(format!("{field} must be positive")))
    } else {
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let sections = tokenize(text)?;
        let r = Reader { sections: &sections };
        let def = ExperimentConfig::default();

        let model = ModelSection {
            d: r.get("model", "d", def.model.d)?,
            layers: r.get("model", "layers", def.model.layers)?,
            heads: r.get("model", "heads", def.model.heads)?,
            patch_size: r.get("model", "patch_size", def.model.patch_size)?,
            image_size: r.get("model", "image_size", def.model.image_size)?,
            channels: r.get("model", "channels", def.model.channels)?,
            classes: r.get("model", "classes", def.model.classes)?,
        };

        let kind = match r.raw("method", "kind") {
            None => def.method.kind,
            Some(e) if e.value == "linear" => None,
            Some(e) => Some(
                e.value
                    .parse::<Method>()
                    .map_err(|err| Error::Config(format!("line {}: method.kind: {err}", e.line)))?,
            ),
        };
        let r1 = r.get("method", "r1", def.method.r1)?;
        let s = r.get("method", "s", def.method.s)?;
        let method = MethodSection {
            kind,
            r1,
            r2: r.get("method", "r2", r1)?,
            s,
            s2: r.get("method", "s2", s)?,
            lora_roles: r.list("method", "lora_roles", ',')?.unwrap_or(def.method.lora_roles),
        };

        let t = &def.train;
        let train = TrainHyper {
            lr: r.get("train", "lr", t.lr)?,
            batch_size: r.get("train", "batch_size", t.batch_size)?,
            epochs: r.get("train", "epochs", t.epochs)?,
            max_steps: r.optional("train", "max_steps")?,
            beta1: r.get("train", "beta1", t.beta1)?,
            beta2: r.get("train", "beta2", t.beta2)?,
            eps: r.get("train", "eps", t.eps)?,
            weight_decay: r.get("train", "weight_decay", t.weight_decay)?,
            val_fraction: r.get("train", "val_fraction", t.val_fraction)?,
            seed: r.get("train", "seed", t.seed)?,
        };

        let source: String = r.get("data", "source", "synthetic".to_string())?;
        let data = match source.as_str() {
            "synthetic" => {
                for key in ["images", "labels", "max_samples"] {
                    if let Some(e) = r.raw("data", key) {
                        return Err(Error::Config(format!(
                            "line {}: data.{key} only applies to source = idx",
                            e.line
                        )));
                    }
                }
                DataSection::Synthetic {
                    samples_per_class: r.get("data", "samples_per_class", 50)?,
                    noise_std: r.get("data", "noise_std", 0.1)?,
                }
            }
            "idx" => {
                for key in ["samples_per_class", "noise_std"] {
                    if let Some(e) = r.raw("data", key) {
                        return Err(Error::Config(format!(
                            "line {}: data.{key} only applies to source = synthetic",
                            e.line
                        )));
                    }
                }
                let path = |key: &str| -> Result<PathBuf> {
                    r.raw("data", key)
                        .map(|e| PathBuf::from(&e.value))
                        .ok_or_else(|| Error::Config(format!("data.{key} is required for source = idx")))
                };
                DataSection::Idx {
                    images: path("images")?,
                    labels: path("labels")?,
                    max_samples: r.optional("data", "max_samples")?,
                }
            }
            other => {
                return Err(Error::Config(format!(
                    "data.source must be synthetic or idx, got `{other}`"
                )))
            }
        };

        let layers = match r.raw("mask", "layers") {
            None => None,
            Some(e) if e.value == "all" => None,
            Some(e) if e.value == "none" => Some(BTreeSet::new()),
            Some(_) => r.list("mask", "layers", ',')?.map(|v| v.into_iter().collect()),
        };
        let blocks = match r.raw("mask", "blocks") {
            Some(e) if e.value == "none" => BTreeSet::new(),
            _ => r
                .list::<Block>("mask", "blocks", ',')?
                .map_or(def.mask.blocks, |v| v.into_iter().collect()),
        };

        let cfg = ExperimentConfig {
            model,
            method,
            train,
            data,
            mask: MaskSection { layers, blocks },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Re-checks every bound owned by the model, factor and training layers.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        for (field, v) in [
            ("model.d", m.d),
            ("model.layers", m.layers),
            ("model.heads", m.heads),
            ("model.patch_size", m.patch_size),
            ("model.image_size", m.image_size),
            ("model.channels", m.channels),
            ("model.classes", m.classes),
        ] {
            positive(field, v)?;
        }
        if !m.image_size.is_multiple_of(m.patch_size) {
            return Err(Error::Config(format!(
                "model.image_size {} is not a multiple of model.patch_size {}",
                m.image_size, m.patch_size
            )));
        }
        self.vit_config().validate()?;

        let me = &self.method;
        if me.kind.is_some() {
            positive("method.r1", me.r1)?;
            positive("method.r2", me.r2)?;
            for (field, v) in [("method.s", me.s), ("method.s2", me.s2)] {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("{field} must be positive and finite, got {v}")));
                }
            }
            if me.kind == Some(Method::Lora) && me.lora_roles.is_empty() {
                return Err(Error::Config("method.lora_roles must not be empty".into()));
            }
        }
        self.train.validate()?;
        if let DataSection::Synthetic {
            samples_per_class,
            noise_std,
        } = &self.data
        {
            positive("data.samples_per_class", *samples_per_class)?;
            if !(*noise_std >= 0.0 && noise_std.is_finite()) {
                return Err(Error::Config(format!(
                    "data.noise_std must be non-negative, got {noise_std}"
                )));
            }
        }
        if let DataSection::Idx {
            max_samples: Some(0), ..
        } = &self.data
        {
            return Err(Error::Config("data.max_samples must be positive".into()));
        }
        if let Some(bad) = self.mask.layers.iter().flatten().find(|&&l| l >= m.layers) {
            return Err(Error::Config(format!(
                "mask.layers entry {bad} outside [0, {})",
                m.layers
            )));
        }
        Ok(())
    }

    pub fn vit_config(&self) -> ViTConfig {
        let m = &self.model;
        let grid = m.image_size / m.patch_size.max(1);
        ViTConfig {
            d: m.d,
            layers: m.layers,
            heads: m.heads,
            n_patches: grid * grid,
            patch_size: m.patch_size,
            channels: m.channels,
            n_classes: m.classes,
        }
    }

    /// `None` for a linear probe.
    pub fn factor_spec(&self) -> Option<FactorSpec> {
        let me = &self.method;
        me.kind.map(|method| FactorSpec {
            method,
            d: self.model.d,
            layers: self.model.layers,
            r1: me.r1,
            r2: me.r2,
            s: me.s,
            s2: me.s2,
            lora_roles: me.lora_roles.clone(),
        })
    }

    pub fn tuning_mask(&self) -> TuningMask {
        let layers = self
            .mask
            .layers
            .clone()
            .unwrap_or_else(|| (0..self.model.layers).collect());
        TuningMask::new(layers, self.mask.blocks.iter().copied())
    }

    /// The frozen backbone for this config's seed.
    pub fn build_model(&self) -> Result<ViTModel<f64>> {
        ViTModel::build(&self.vit_config(), &mut Rng::derive(self.train.seed, MODEL_STREAM))
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match &self.data {
            DataSection::Synthetic {
                samples_per_class,
                noise_std,
            } => Some(SyntheticSpec {
                n_classes: self.model.classes,
                samples_per_class: *samples_per_class,
                image_size: self.model.image_size,
                channels: self.model.channels,
                noise_std: *noise_std,
                seed: Rng::derive(self.train.seed, DATA_STREAM).next_u64(),
            }),
            DataSection::Idx { .. } => None,
        }
    }

    /// Generates or reads the dataset and checks it against the model.
    pub fn load_dataset(&self) -> Result<Dataset<f64>> {
        let data = match &self.data {
            DataSection::Synthetic { .. } => gen_synthetic(&self.synthetic_spec().expect("synthetic source"))?,
            DataSection::Idx {
                images,
                labels,
                max_samples,
            } => load_idx(images, labels, *max_samples)?,
        };
        let (h, w, c) = data.image_dims();
        let m = &self.model;
        if (h, w, c) != (m.image_size, m.image_size, m.channels) {
            return Err(Error::Config(format!(
                "images are {h}x{w}x{c}, config expects {0}x{0}x{1}",
                m.image_size, m.channels
            )));
        }
        if data.n_classes() > m.classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model.classes = {}",
                data.n_classes(),
                m.classes
            )));
        }
        Ok(data)
    }

    /// Seeded `(train, validation)` split of [`ExperimentConfig::load_dataset`].
    pub fn load_split(&self) -> Result<(Dataset<f64>, Option<Dataset<f64>>)> {
        let seed = Rng::derive(self.train.seed, SPLIT_STREAM).next_u64();
        self.load_dataset()?.split(self.train.val_fraction, seed)
    }

    /// Resolves relative IDX paths against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DataSection::Idx { images, labels, .. } = &mut self.data {
            for p in [images, labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

impl FromStr for ExperimentConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentConfig::parse(s)
    }
}

fn join<I: IntoIterator<Item = D>, D: fmt::Display>(items: I, sep: &str) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

impl fmt::Display for ExperimentConfig {
    /// Writes every key explicitly, so parsing the output yields `self`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        let m = &self.model;
        let _ = writeln!(out, "[model]");
        for (k, v) in [
            ("d", m.d),
            ("layers", m.layers),
            ("heads", m.heads),
            ("patch_size", m.patch_size),
            ("image_size", m.image_size),
            ("channels", m.channels),
            ("classes", m.classes),
        ] {
            let _ = writeln!(out, "{k} = {v}");
        }

        let me = &self.method;
        let _ = writeln!(out, "\n[method]");
        let _ = writeln!(
            out,
            "kind = {}",
            me.kind.map_or("linear".to_string(), |k| k.to_string())
        );
        let _ = writeln!(out, "r1 = {}\nr2 = {}", me.r1, me.r2);
        let _ = writeln!(out, "s = {:?}\ns2 = {:?}", me.s, me.s2);
        let _ = writeln!(out, "lora_roles = {}", join(&me.lora_roles, ","));

        let t = &self.train;
        let _ = writeln!(out, "\n[train]");
        let _ = writeln!(
            out,
            "lr = {:?}\nbatch_size = {}\nepochs = {}",
            t.lr, t.batch_size, t.epochs
        );
        if let Some(n) = t.max_steps {
            let _ = writeln!(out, "max_steps = {n}");
        }
        let _ = writeln!(out, "beta1 = {:?}\nbeta2 = {:?}\neps = {:?}", t.beta1, t.beta2, t.eps);
        let _ = writeln!(
            out,
            "weight_decay = {:?}\nval_fraction = {:?}\nseed = {}",
            t.weight_decay, t.val_fraction, t.seed
        );

        let _ = writeln!(out, "\n[data]");
        match &self.data {
            DataSection::Synthetic {
                samples_per_class,
                noise_std,
            } => {
                let _ = writeln!(
                    out,
                    "source = synthetic\nsamples_per_class = {samples_per_class}\nnoise_std = {noise_std:?}"
                );
            }
            DataSection::Idx {
                images,
                labels,
                max_samples,
            } => {
                let _ = writeln!(
                    out,
                    "source = idx\nimages = {}\nlabels = {}",
                    images.display(),
                    labels.display()
                );
                if let Some(n) = max_samples {
                    let _ = writeln!(out, "max_samples = {n}");
                }
            }
        }

        let _ = writeln!(out, "\n[mask]");
        let layers = match &self.mask.layers {
            None => "all".to_string(),
            Some(l) if l.is_empty() => "none".to_string(),
            Some(l) => join(l, ","),
        };
        let blocks = if self.mask.blocks.is_empty() {
            "none".to_string()
        } else {
            join(&self.mask.blocks, ",")
        };
        let _ = writeln!(out, "layers = {layers}\nblocks = {blocks}");
        f.write_str(&out)
    }
}

/// Reads and validates a config file; relative IDX paths are taken from the
/// file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = ExperimentConfig::parse(&text)?;
    if let Some(dir) = path.parent() {
        cfg.resolve_paths(dir);
    }
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::write(path, cfg.to_string()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = ExperimentConfig::parse("[method]\nkind = efft2\n").unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.batch_size, 64);
        assert_eq!(cfg.method.kind, Some(Method::Efft2));
        assert_eq!(ExperimentConfig::parse("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn rejects_bad_values() {
        let err = |t: &str| match ExperimentConfig::parse(t) {
            Err(Error::Config(m)) => m,
            other => panic!("expected config error, got {other:?}"),
        };
        assert!(err("[method]\nkind = efft3").contains("line 2"));
        assert!(err("[method]\nr1 = 0").contains("method.r1"));
        assert!(err("[model]\nd = 16\nhdden = 3").contains("line 3"));
        assert!(err("[model]\nheads = 3").contains("divisible"));
        assert!(err("[modle]").contains("unknown section"));
        assert!(err("d = 3").contains("outside any section"));
        assert!(err("[train]\nlr = fast").contains("train.lr"));
        assert!(err("[train]\nlr = 1\nlr = 2").contains("duplicate"));
        assert!(err("[mask]\nlayers = 0,5").contains("mask.layers"));
        assert!(err("[data]\nsource = idx").contains("data.images"));
        assert!(err("[data]\nimages = a.idx").contains("source = idx"));
    }

    #[test]
    fn comments_and_lists() {
        let text =
            "# top\n[mask] # trailing\nlayers = 1\nblocks = ffn\n[method]\nkind = lora\nlora_roles = q, k, ffn1\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.tuning_mask(), TuningMask::new([1], [Block::Ffn]));
        assert_eq!(cfg.method.lora_roles, vec![Role::Q, Role::K, Role::Ffn1]);
        let none = ExperimentConfig::parse("[mask]\nlayers = none\n").unwrap();
        assert!(none.tuning_mask().is_empty());
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        assert_eq!(cfg.to_string().parse::<ExperimentConfig>().unwrap(), cfg);
        cfg.method.kind = None;
        cfg.train.max_steps = Some(300);
        cfg.train.lr = 0.1 + 0.2;
        cfg.method.r2 = 16;
        cfg.mask.layers = Some([0].into());
        cfg.data = DataSection::Idx {
            images: "/tmp/a b/img.idx".into(),
            labels: "lab.idx".into(),
            max_samples: Some(7),
        };
        assert_eq!(cfg.to_string().parse::<ExperimentConfig>().unwrap(), cfg);
    }

    #[test]
    fn derived_objects() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.vit_config().n_patches, 16);
        let spec = cfg.factor_spec().unwrap();
        assert_eq!((spec.d, spec.r1, spec.s), (16, 4, 10.0));
        assert_eq!(cfg.tuning_mask(), TuningMask::all(2));
        assert_eq!(cfg.build_model().unwrap(), cfg.build_model().unwrap());
        let (tr, va) = cfg.load_split().unwrap();
        assert_eq!((tr.len(), va.unwrap().len()), (160, 40));
    }
}
