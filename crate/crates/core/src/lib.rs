//! Parameter-efficient fine-tuning of a frozen Vision Transformer with
//! factorized weight deltas shared across layers.
//!
//! The numeric core ([`tensor`], [`linalg`], [`autodiff`], [`peft`], [`vit`],
//! [`train`], [`analysis`]) is generic over [`Scalar`] (`f32` or `f64`).
//! The aliases below fix the scalar to `f64`, which is what the file formats
//! in [`io`] and [`data`] use.
//!
//! ```
//! use efft::{Factors, FactorSpec, Method, Rng, TuningMask, ViTConfig, ViTModel};
//!
//! let cfg = ViTConfig { d: 16, layers: 2, heads: 2, n_patches: 4, patch_size: 2, channels: 1, n_classes: 3 };
//! let model = ViTModel::build(&cfg, &mut Rng::new(0)).unwrap();
//! let spec = FactorSpec::new(Method::Efft1, 16, 2, 4, 10.0);
//! let factors = Factors::init(&spec, 0.02, &mut Rng::new(1)).unwrap();
//! assert_eq!(factors.count_params(), 4 * 16 * 4 + 16 * 4 + 3 * 4 * 4);
//!
//! let batch = efft::Tensor::zeros(&[2, 4, 4]).unwrap();
//! let logits = model.logits(&batch, Some(&factors), &TuningMask::all(2)).unwrap();
//! assert_eq!(logits.shape(), &[2, 3]);
//! ```

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod io;
pub mod linalg;
pub mod peft;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use peft::{Block, FactorSpec, Method, Role, WeightRole};
pub use rng::Rng;
pub use scalar::Scalar;
pub use train::TrainHyper;
pub use vit::{TuningMask, ViTConfig};

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type Factors = peft::Factors<f64>;
pub type Efft1Factors = peft::Efft1Factors<f64>;
pub type Efft2Factors = peft::Efft2Factors<f64>;
pub type LoraFactors = peft::LoraFactors<f64>;
pub type FactTtFactors = peft::FactTtFactors<f64>;
pub type ViTModel = vit::ViTModel<f64>;
pub type Dataset = data::Dataset<f64>;
pub type SvdResult = linalg::SvdResult<f64>;
