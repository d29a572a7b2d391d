//! Multi-scale mammography assessment: tissue patch classification,
//! sliding-window aggregation of local predictions, fully convolutional
//! heatmap regression and heatmap-gated entropy-gradient saliency.

pub mod aggregation;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod heatmap;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod saliency;
pub mod tissue;

pub use error::{Error, Result};
