//! Weakly-supervised grounding of report attributes in detector ROIs.
//!
//! The pipeline extracts a fixed set of attribute words from radiology
//! reports, embeds them with skip-gram vectors, and trains an ROI
//! weighting network with cross-attention so that, at inference time,
//! ROI weights alone select the region described by the report.

pub mod data;
pub mod embed;
pub mod error;
pub mod eval;
pub mod grad;
pub mod model;
pub mod text;
pub mod train;

pub use error::{Error, Result};
pub use grad::{Graph, Tensor, Var};
pub use model::{ModelConfig, ModelParams, Roi, RoiSet};
pub use text::{AttributeSet, AttributeVocabulary, Report};
