//! Labelled image sets: synthetic gratings and IDX files.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::vit::patchify;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `N × H × W × C` with values in `[0, 1]` and labels in
/// `[0, n_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(shape_err!("images must be N×H×W×C, got {:?}", images.shape()));
        }
        if images.shape()[0] != labels.len() {
            return Err(shape_err!("{} images but {} labels", images.shape()[0], labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Format(format!("label {bad} outside [0, {n_classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    /// `(H, W, C)`
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn image(&self, i: usize) -> Tensor<T> {
        let (h, w, c) = self.image_dims();
        let n = h * w * c;
        Tensor::new(&[h, w, c], self.images.data()[i * n..(i + 1) * n].to_vec()).expect("image slice matches its shape")
    }

    /// The items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(shape_err!("empty subset"));
        }
        let (h, w, c) = self.image_dims();
        let n = h * w * c;
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len() {
                return Err(shape_err!("index {i} out of {} items", self.len()));
            }
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        Dataset::new(
            Tensor::new(&[indices.len(), h, w, c], data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.n_classes,
        )
    }

    /// Seeded split into `(train, validation)`. The validation part holds
    /// `round(len · fraction)` items and is `None` when that is zero.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Option<Self>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let n_val = (self.len() as f64 * fraction).round() as usize;
        if n_val == 0 {
            return Ok((self.clone(), None));
        }
        if n_val >= self.len() {
            return Err(Error::Config("validation split leaves no training items".into()));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        Rng::new(seed).shuffle(&mut order);
        let (val, train) = order.split_at(n_val);
        Ok((self.subset(train)?, Some(self.subset(val)?)))
    }

    /// All images as patch sequences, `N × n_patches × patch_dim`.
    pub fn patches(&self, patch_size: usize) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(self.images.len());
        let mut per_image = None;
        for i in 0..self.len() {
            let p = patchify(&self.image(i), patch_size)?;
            per_image = Some((p.shape()[0], p.shape()[1]));
            data.extend(p.into_data());
        }
        let (n, pd) = per_image.ok_or_else(|| shape_err!("empty dataset"))?;
        Tensor::new(&[self.len(), n, pd], data)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            images: self.images.cast(),
            labels: self.labels.clone(),
            n_classes: self.n_classes,
        }
    }
}

/// Parameters of the grating generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 4,
            samples_per_class: 50,
            image_size: 16,
            channels: 1,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_classes", self.n_classes),
            ("samples_per_class", self.samples_per_class),
            ("image_size", self.image_size),
            ("channels", self.channels),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("data.{name} must be positive")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!("data.noise_std = {} is invalid", self.noise_std)));
        }
        Ok(())
    }

    /// Noise-free template of class `c` at pixel `(y, x)`.
    ///
    /// Orientations are spread over half a turn and spatial frequencies cycle
    /// through 1, 2 and 3 periods per image.
    pub fn template(&self, class: usize, y: usize, x: usize) -> f64 {
        let theta = PI * class as f64 / self.n_classes as f64;
        let freq = 1.0 + (class % 3) as f64;
        let size = self.image_size as f64;
        let t = (x as f64 * theta.cos() + y as f64 * theta.sin()) / size;
        0.5 + 0.5 * (2.0 * PI * freq * t).sin()
    }
}

/// Class `k mod n_classes` for item `k`; pixels are the class template plus
/// Gaussian noise, clamped to `[0, 1]`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset<f64>> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let (n, size, ch) = (spec.n_classes * spec.samples_per_class, spec.image_size, spec.channels);
    let mut data = Vec::with_capacity(n * size * size * ch);
    let mut labels = Vec::with_capacity(n);
    for k in 0..n {
        let class = k % spec.n_classes;
        labels.push(class);
        for y in 0..size {
            for x in 0..size {
                let base = spec.template(class, y, x);
                for _ in 0..ch {
                    let noise = if spec.noise_std > 0.0 {
                        spec.noise_std * rng.normal()
                    } else {
                        0.0
                    };
                    data.push((base + noise).clamp(0.0, 1.0));
                }
            }
        }
    }
    Dataset::new(Tensor::new(&[n, size, size, ch], data)?, labels, spec.n_classes)
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'a str,
}

impl<'a> IdxReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Format(format!("{}: truncated header", self.what)))?;
        self.pos = end;
        Ok(u32::from_be_bytes(chunk.try_into().expect("four bytes")))
    }

    fn body(&self, len: usize) -> Result<&'a [u8]> {
        self.bytes.get(self.pos..self.pos + len).ok_or_else(|| {
            Error::Format(format!(
                "{}: truncated body, expected {len} bytes, found {}",
                self.what,
                self.bytes.len() - self.pos
            ))
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file (`u8`, `N × rows × cols`) and label file.
pub fn parse_idx(images: &[u8], labels: &[u8], max_samples: Option<usize>) -> Result<Dataset<f64>> {
    let mut img = IdxReader {
        bytes: images,
        pos: 0,
        what: "image file",
    };
    let magic = img.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "image file magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let (count, rows, cols) = (img.u32()? as usize, img.u32()? as usize, img.u32()? as usize);

    let mut lab = IdxReader {
        bytes: labels,
        pos: 0,
        what: "label file",
    };
    let magic = lab.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "label file magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let label_count = lab.u32()? as usize;
    if label_count != count {
        return Err(Error::Format(format!("{count} images but {label_count} labels")));
    }
    let n = max_samples.map_or(count, |m| m.min(count));
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format("IDX files hold no usable images".into()));
    }
    let pixels = img.body(count * rows * cols)?;
    let label_bytes = lab.body(count)?;
    let data = pixels[..n * rows * cols]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = label_bytes[..n].iter().map(|&b| usize::from(b)).collect();
    let n_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::new(&[n, rows, cols, 1], data)?, labels, n_classes)
}

pub fn load_idx(image_path: &Path, label_path: &Path, max_samples: Option<usize>) -> Result<Dataset<f64>> {
    parse_idx(&read_file(image_path)?, &read_file(label_path)?, max_samples)
}

/// Encodes a single-channel dataset as IDX image and label files. Pixels
/// are rounded to the nearest multiple of 1/255.
pub fn encode_idx(dataset: &Dataset<f64>) -> Result<(Vec<u8>, Vec<u8>)> {
    let (h, w, c) = dataset.image_dims();
    if c != 1 {
        return Err(shape_err!("IDX export needs one channel, dataset has {c}"));
    }
    if dataset.n_classes() > 256 {
        return Err(Error::Format("IDX labels are single bytes".into()));
    }
    let n = dataset.len() as u32;
    let mut images = Vec::with_capacity(16 + dataset.images().len());
    for word in [IDX_IMAGES_MAGIC, n, h as u32, w as u32] {
        images.extend(word.to_be_bytes());
    }
    images.extend(
        dataset
            .images()
            .data()
            .iter()
            .map(|&x| (x * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut labels = Vec::with_capacity(8 + dataset.len());
    labels.extend(IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend(n.to_be_bytes());
    labels.extend(dataset.labels().iter().map(|&l| l as u8));
    Ok((images, labels))
}

pub fn save_idx(dataset: &Dataset<f64>, image_path: &Path, label_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(dataset)?;
    fs::write(image_path, images).map_err(|e| Error::io(image_path, e))?;
    fs::write(label_path, labels).map_err(|e| Error::io(label_path, e))
}
