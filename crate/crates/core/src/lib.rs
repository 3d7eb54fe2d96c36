//! MWDCNN image denoising on a small reverse-mode autodiff engine.
//!
//! ```no_run
//! use mwdcnn::{data, model::Mwdcnn, ModelConfig};
//!
//! let model = Mwdcnn::<f32>::new(ModelConfig::toy(16)).unwrap();
//! let clean = data::synthetic_image(64, 64, 1, 7).to_tensor::<f32>();
//! let noisy = data::add_awgn_seeded(&clean, 25.0, 0, 0);
//! let restored = model.denoise(&noisy).unwrap();
//! ```

pub mod config;
pub mod data;
pub mod gradsuite;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod training;
pub mod wavelet;

pub use config::{ConfigError, ModelConfig, Precision};
pub use model::Mwdcnn;
pub use tensor::{Element, Graph, Tensor, TensorError, Var};
