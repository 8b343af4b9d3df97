//! Privileged information (PI) for learning with noisy labels.
//!
//! The crate builds small multilayer perceptrons on a define-by-run autodiff
//! tape and trains them with the PI methods studied for noisy labels:
//! two-headed training with stop-gradient routing (TRAM, TRAM++), approximate
//! full marginalization (AFM, AFM++), PI distillation, label smoothing, and a
//! sparse over-parameterization fine-tuning stage (TRAM+SOP). Datasets are
//! synthetic Gaussian clusters relabeled by an ensemble of annotator models.

pub mod autodiff;
pub mod csvio;
pub mod error;
pub mod methods;
pub mod models;
pub mod optim;
pub mod params;
pub mod pi;
pub mod relabel;
pub mod report;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
