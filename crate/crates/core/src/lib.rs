//! Mask-guided attention supervision toolkit.
//!
//! Batch-level Grad-CAM extraction on differentiable reference models, an
//! in-mask/out-of-mask attention regularizer, synthetic and on-disk masked
//! datasets, training under vanilla, mask-supervised and pseudo-mask
//! supervised objectives, and evaluation of attention alignment,
//! faithfulness and accuracy with nonparametric statistics.

pub mod attention;
pub mod autodiff;
pub mod backend;
pub mod bench;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod regularizers;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
