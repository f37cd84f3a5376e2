//! Person re-identification from WiFi channel state information.
//!
//! Raw CSI segments are calibrated ([`calibration`]), optionally augmented
//! ([`augment`]), padded into two-stream batches ([`batching`]) and embedded
//! by a transformer built on a small reverse-mode autodiff engine
//! ([`autodiff`], [`nn`]). Training combines a classification loss with a
//! metric loss ([`losses`]); retrieval quality is measured with the usual
//! ReID metrics ([`metrics`]). [`synth`] generates multipath data for desk
//! experiments and [`train`] ties everything together.

pub mod augment;
pub mod autodiff;
pub mod batching;
pub mod calibration;
pub mod checkpoint;
pub mod csi;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
