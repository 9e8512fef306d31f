use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::text::NUM_ATTRIBUTES;

/// Architecture sizes and fixed hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub roi_dim: usize,
    /// Shared dimension of transformed ROI features and word vectors.
    pub joint_dim: usize,
    pub geom_dim: usize,
    pub score_dim: usize,
    pub alpha_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub num_attributes: usize,
    pub leaky_slope: f64,
    pub ln_eps: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Softmax sharpness for the text-attention weights.
    pub lambda_a: f64,
    /// Softmax sharpness for the ROI-attention weights.
    pub lambda_b: f64,
    /// Triplet margin.
    pub margin: f64,
}

impl ModelConfig {
    pub fn new(roi_dim: usize) -> Self {
        Self {
            roi_dim,
            joint_dim: 256,
            geom_dim: 32,
            score_dim: 32,
            alpha_hidden: vec![1024, 512],
            classifier_hidden: vec![512, 512, 256, 128],
            num_attributes: NUM_ATTRIBUTES,
            leaky_slope: 0.01,
            ln_eps: 1e-5,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            lambda_a: 1.0,
            lambda_b: 1.0,
            margin: 0.8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.roi_dim,
            self.joint_dim,
            self.geom_dim,
            self.score_dim,
            self.num_attributes,
        ];
        if dims.contains(&0)
            || self.alpha_hidden.contains(&0)
            || self.classifier_hidden.contains(&0)
        {
            return Err(Error::InvalidConfig(
                "all layer sizes must be positive".into(),
            ));
        }
        if !(self.lambda_a > 0.0 && self.lambda_b > 0.0) {
            return Err(Error::InvalidConfig(
                "attention sharpness must be > 0".into(),
            ));
        }
        if !(self.margin > 0.0 && self.margin < 2.0) {
            return Err(Error::InvalidConfig(format!(
                "triplet margin must lie in (0, 2), got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    pub weight: T,
    pub bias: T,
}

/// Per-feature gain and shift following a normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub gain: T,
    pub shift: T,
}

/// All trainable tensors. Generic so the same layout can hold values,
/// graph handles or gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub roi_proj: Dense<T>,
    pub geom_proj: Dense<T>,
    pub score_proj: Dense<T>,
    pub geom_norm: Affine<T>,
    pub score_norm: Affine<T>,
    pub fuse_proj: Dense<T>,
    pub alpha_mlp: Vec<Dense<T>>,
    pub classifier: Vec<Dense<T>>,
    pub classifier_norm: Vec<Affine<T>>,
}

impl<T> Weights<T> {
    /// Apply `f` to every tensor with its stable name, in canonical order.
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> Weights<U> {
        let mut dense = |name: &str, d: &'a Dense<T>| Dense {
            weight: f(&format!("{name}.weight"), &d.weight),
            bias: f(&format!("{name}.bias"), &d.bias),
        };
        let roi_proj = dense("roi_proj", &self.roi_proj);
        let geom_proj = dense("geom_proj", &self.geom_proj);
        let score_proj = dense("score_proj", &self.score_proj);
        let fuse_proj = dense("fuse_proj", &self.fuse_proj);
        let alpha_mlp = self
            .alpha_mlp
            .iter()
            .enumerate()
            .map(|(i, d)| dense(&format!("alpha_mlp.{i}"), d))
            .collect();
        let classifier = self
            .classifier
            .iter()
            .enumerate()
            .map(|(i, d)| dense(&format!("classifier.{i}"), d))
            .collect();
        let mut affine = |name: &str, a: &'a Affine<T>| Affine {
            gain: f(&format!("{name}.gain"), &a.gain),
            shift: f(&format!("{name}.shift"), &a.shift),
        };
        let geom_norm = affine("geom_norm", &self.geom_norm);
        let score_norm = affine("score_norm", &self.score_norm);
        let classifier_norm = self
            .classifier_norm
            .iter()
            .enumerate()
            .map(|(i, a)| affine(&format!("classifier_norm.{i}"), a))
            .collect();
        Weights {
            roi_proj,
            geom_proj,
            score_proj,
            geom_norm,
            score_norm,
            fuse_proj,
            alpha_mlp,
            classifier,
            classifier_norm,
        }
    }

    /// Tensors in the same canonical order as [`Weights::map`].
    pub fn into_vec(self) -> Vec<T> {
        let mut out = Vec::new();
        let dense = |d: Dense<T>, out: &mut Vec<T>| {
            out.push(d.weight);
            out.push(d.bias);
        };
        dense(self.roi_proj, &mut out);
        dense(self.geom_proj, &mut out);
        dense(self.score_proj, &mut out);
        dense(self.fuse_proj, &mut out);
        for d in self.alpha_mlp {
            dense(d, &mut out);
        }
        for d in self.classifier {
            dense(d, &mut out);
        }
        let affine = |a: Affine<T>, out: &mut Vec<T>| {
            out.push(a.gain);
            out.push(a.shift);
        };
        affine(self.geom_norm, &mut out);
        affine(self.score_norm, &mut out);
        for a in self.classifier_norm {
            affine(a, &mut out);
        }
        out
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        self.map(|n, t| (n.to_string(), t)).into_vec()
    }

    /// Mutable references in canonical order.
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = Vec::new();
        for d in [
            &mut self.roi_proj,
            &mut self.geom_proj,
            &mut self.score_proj,
            &mut self.fuse_proj,
        ] {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        for d in self.alpha_mlp.iter_mut().chain(self.classifier.iter_mut()) {
            out.push(&mut d.weight);
            out.push(&mut d.bias);
        }
        for a in [&mut self.geom_norm, &mut self.score_norm]
            .into_iter()
            .chain(self.classifier_norm.iter_mut())
        {
            out.push(&mut a.gain);
            out.push(&mut a.shift);
        }
        out
    }
}

/// Batch-norm running statistics for one classifier layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
    pub running: Vec<RunningStats>,
    /// Set once running statistics have seen at least one training batch.
    pub stats_initialized: bool,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..bound))
}

fn dense(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Dense<Tensor> {
    Dense {
        weight: xavier(rng, fan_in, fan_out),
        bias: Tensor::zeros((1, fan_out)),
    }
}

fn unit_affine(width: usize) -> Affine<Tensor> {
    Affine {
        gain: Tensor::ones((1, width)),
        shift: Tensor::zeros((1, width)),
    }
}

fn chain(
    rng: &mut ChaCha8Rng,
    input: usize,
    hidden: &[usize],
    output: usize,
) -> Vec<Dense<Tensor>> {
    let mut sizes = vec![input];
    sizes.extend_from_slice(hidden);
    sizes.push(output);
    sizes.windows(2).map(|w| dense(rng, w[0], w[1])).collect()
}

impl ModelParams {
    /// Xavier-uniform weights, zero biases, unit norm gains; seeded.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let weights = Weights {
            roi_proj: dense(&mut rng, c.roi_dim, c.joint_dim),
            geom_proj: dense(&mut rng, 4, c.geom_dim),
            score_proj: dense(&mut rng, 1, c.score_dim),
            geom_norm: unit_affine(c.geom_dim),
            score_norm: unit_affine(c.score_dim),
            fuse_proj: dense(&mut rng, c.geom_dim + c.score_dim, c.joint_dim),
            alpha_mlp: chain(&mut rng, c.joint_dim, &c.alpha_hidden, 1),
            classifier: chain(
                &mut rng,
                c.joint_dim,
                &c.classifier_hidden,
                c.num_attributes,
            ),
            classifier_norm: c
                .classifier_hidden
                .iter()
                .map(|&h| unit_affine(h))
                .collect(),
        };
        let running = c
            .classifier_hidden
            .iter()
            .map(|&h| RunningStats {
                mean: Tensor::zeros((1, h)),
                var: Tensor::ones((1, h)),
            })
            .collect();
        Ok(Self {
            config,
            weights,
            running,
            stats_initialized: false,
        })
    }

    pub fn num_trainable(&self) -> usize {
        self.weights.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .named()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
            && self
                .running
                .iter()
                .all(|r| r.mean.iter().chain(r.var.iter()).all(|v| v.is_finite()))
    }

    /// Fold one batch's pre-normalization activations into the running
    /// statistics (momentum update; unbiased variance).
    pub fn update_running_stats(&mut self, batch_inputs: &[Tensor]) {
        let m = self.config.bn_momentum;
        for (stats, x) in self.running.iter_mut().zip(batch_inputs) {
            let n = x.nrows() as f64;
            let mean = x
                .mean_axis(Axis(0))
                .expect("non-empty batch")
                .insert_axis(Axis(0));
            let centered = x - &mean;
            let denom = if n > 1.0 { n - 1.0 } else { 1.0 };
            let var = (&centered * &centered)
                .sum_axis(Axis(0))
                .insert_axis(Axis(0))
                / denom;
            stats.mean = &stats.mean * (1.0 - m) + &mean * m;
            stats.var = &stats.var * (1.0 - m) + &var * m;
        }
        self.stats_initialized = true;
    }
}
