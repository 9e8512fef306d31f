//! Grounding network: ROI feature transform, ROI weighting, attribute
//! classifier, cross-attention similarity and the training losses.

mod check;
mod checkpoint;
mod forward;
mod params;
mod roi;

pub use check::{loss_gradient_check, tiny_config};
pub use checkpoint::{
    checkpoint_from_bytes, load_checkpoint, save_checkpoint, save_checkpoint_with_optimizer, MAGIC,
    VERSION,
};
pub use forward::{
    aggregate, aggregate_graph, alpha_graph, alpha_scores_graph, batch_loss_graph, bce_loss, bind,
    classify_attributes, classify_graph, cross_attention, cross_attention_graph,
    normalize_similarity, pooled_graph, pooled_similarities, roi_weights, total_loss,
    transform_graph, transform_roi, triplet_graph, triplet_loss, weights_from_vars, AttentionVars,
    BatchVars, ClassifierVars, CrossAttentionState, Example, LossBundle, Mode, SimilarityScores,
    SimilarityVars, BCE_EPS,
};
pub use params::{Affine, Dense, ModelConfig, ModelParams, RunningStats, Weights};
pub use roi::{Roi, RoiSet};
