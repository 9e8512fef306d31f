//! Finite-difference check of the full training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::grad::{gradient_check, Tensor, DEFAULT_STEP};

use super::forward::{batch_loss_graph, weights_from_vars, Example, Mode};
use super::params::{ModelConfig, ModelParams};
use super::roi::{Roi, RoiSet};

/// Small network used for gradient checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        joint_dim: 5,
        geom_dim: 3,
        score_dim: 2,
        alpha_hidden: vec![6, 4],
        classifier_hidden: vec![5, 4],
        ..ModelConfig::new(4)
    }
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, d: usize) -> RoiSet {
    RoiSet {
        image_id: "check".into(),
        rois: (0..n)
            .map(|_| {
                let x = rng.random_range(0.0..0.5);
                let y = rng.random_range(0.0..0.5);
                Roi {
                    feat: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    score: rng.random_range(0.0..1.0),
                    bbox: [
                        x,
                        y,
                        x + rng.random_range(0.1..0.5),
                        y + rng.random_range(0.1..0.5),
                    ],
                }
            })
            .collect(),
    }
}

/// Worst relative error between reverse-mode and finite-difference
/// gradients of the batch loss with respect to every trainable tensor.
/// The batch holds three images with `rois` ROIs and `attrs` attributes each.
pub fn loss_gradient_check(seed: u64, rois: usize, attrs: usize) -> Result<f64> {
    let cfg = tiny_config();
    let params = ModelParams::init(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut mat =
        |r: usize, c: usize| Tensor::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0));
    let attr_sets: Vec<(Tensor, Tensor)> = (0..3)
        .map(|_| (mat(attrs, cfg.joint_dim), mat(attrs, cfg.joint_dim)))
        .collect();
    let sets: Vec<(RoiSet, RoiSet)> = (0..3)
        .map(|_| {
            (
                random_set(&mut rng, rois, cfg.roi_dim),
                random_set(&mut rng, rois.max(2) - 1, cfg.roi_dim),
            )
        })
        .collect();
    let targets: Vec<Tensor> = (0..3)
        .map(|k| {
            Tensor::from_shape_fn((1, cfg.num_attributes), |(_, j)| {
                ((j + k) % 5 == 0) as u8 as f64
            })
        })
        .collect();
    let batch: Vec<Example> = (0..3)
        .map(|k| Example {
            rois: &sets[k].0,
            negative_rois: &sets[k].1,
            attrs: &attr_sets[k].0,
            negative_attrs: &attr_sets[k].1,
            target: &targets[k],
        })
        .collect();
    let point: Vec<Tensor> = params.weights.clone().into_vec();
    gradient_check(
        |g, vars| {
            let w = weights_from_vars(&params.weights, vars);
            Ok(batch_loss_graph(g, &w, &params, &batch, Mode::Train)?.total)
        },
        &point,
        DEFAULT_STEP,
    )
}
