//! Mini-batch training with negative mining, early stopping and
//! best-validation checkpoint selection.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::embed::{embed_attributes, negative_attribute, EmbeddingTable};
use crate::error::{Error, Result};
use crate::grad::{AdamConfig, AdamState, Graph, Tensor};
use crate::model::{batch_loss_graph, bind, Example, Mode, ModelParams, RoiSet};
use crate::text::{AttributeSet, AttributeVocabulary, NUM_ATTRIBUTES};

/// One training image: its ROIs, extracted attributes and their vectors.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image_id: String,
    pub roi_set: RoiSet,
    pub attrs: AttributeSet,
    /// `M × D` attribute vectors in vocabulary order.
    pub attr_embeds: Tensor,
    /// `1 × 22` indicator of `attrs`.
    pub target: Tensor,
}

impl Sample {
    pub fn new(
        roi_set: RoiSet,
        attrs: AttributeSet,
        vocab: &AttributeVocabulary,
        table: &EmbeddingTable,
    ) -> Result<Self> {
        if attrs.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "image `{}` has no attributes",
                roi_set.image_id
            )));
        }
        roi_set.validate()?;
        let attr_embeds = embed_attributes(&attrs, vocab, table)?;
        let target = Tensor::from_shape_vec((1, NUM_ATTRIBUTES), attrs.target_vector())
            .expect("target has vocabulary length");
        Ok(Self {
            image_id: roi_set.image_id.clone(),
            roi_set,
            attrs,
            attr_embeds,
            target,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    /// Epochs over which the validation loss must improve.
    pub early_stop_window: usize,
    /// Minimum relative improvement within the window.
    pub early_stop_min_improvement: f64,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Negative ROIs per image as a fraction of its ROI count (rounded up).
    pub negative_roi_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            batch_size: 10,
            max_epochs: 185,
            max_steps: None,
            early_stop_window: 10,
            early_stop_min_improvement: 1e-3,
            seed: 0,
            train_fraction: 0.90,
            val_fraction: 0.05,
            test_fraction: 0.05,
            negative_roi_fraction: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f))
            || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidConfig(format!(
                "split fractions {fr:?} must lie in [0, 1] and sum to 1"
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig(
                "lr and weight_decay must be non-negative".into(),
            ));
        }
        if !(self.negative_roi_fraction > 0.0 && self.negative_roi_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "negative_roi_fraction must be in (0, 1]".into(),
            ));
        }
        if self.early_stop_window == 0 {
            return Err(Error::InvalidConfig(
                "early_stop_window must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Negative ROI count for an image with `n` ROIs.
    pub fn negative_count(&self, n: usize) -> usize {
        ((n as f64 * self.negative_roi_fraction).ceil() as usize).clamp(1, n.max(1))
    }
}

/// Sample indices per partition.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle of `0..n` cut by the configured fractions.
pub fn split_dataset(n: usize, cfg: &TrainConfig) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ SPLIT_STREAM));
    let n_train = ((n as f64 * cfg.train_fraction).round() as usize).min(n);
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).min(n - n_train);
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Split {
        train: idx,
        val,
        test,
    }
}

const SPLIT_STREAM: u64 = 0x5EED_5917;

/// The `k` lowest-scoring ROIs, ordered by ascending score (ties by index).
pub fn make_negative_rois(roi_set: &RoiSet, k: usize) -> Result<RoiSet> {
    if k > roi_set.len() {
        return Err(Error::NotEnoughRois {
            requested: k,
            available: roi_set.len(),
        });
    }
    let mut order: Vec<usize> = (0..roi_set.len()).collect();
    order.sort_by(|&a, &b| {
        roi_set.rois[a]
            .score
            .total_cmp(&roi_set.rois[b].score)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(roi_set.subset(&order))
}

/// Row `j` is the vector of the nearest other word to attribute `j`.
pub fn make_negative_attributes(
    sample: &Sample,
    vocab: &AttributeVocabulary,
    table: &EmbeddingTable,
) -> Result<Tensor> {
    let mut out = Tensor::zeros((sample.attrs.len(), table.dim()));
    for (row, idx) in sample.attrs.indices().enumerate() {
        let neg = negative_attribute(vocab.word(idx), table)?;
        out.row_mut(row)
            .assign(&ndarray::ArrayView1::from(table.lookup(neg)?));
    }
    Ok(out)
}

/// Per-epoch loss summary; one CSV row.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_total: f64,
    pub train_trip: f64,
    pub train_bce: f64,
    /// `NaN` when there is no validation partition.
    pub val_total: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the best validation epoch (last epoch without validation data).
    pub params: ModelParams,
    pub trace: Vec<EpochStats>,
    pub split: Split,
    pub steps: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

pub fn loss_csv(trace: &[EpochStats]) -> String {
    let mut s = String::from("epoch,train_total,train_trip,train_bce,val_total\n");
    for r in trace {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch, r.train_total, r.train_trip, r.train_bce, r.val_total
        );
    }
    s
}

pub fn write_loss_csv(path: &Path, trace: &[EpochStats]) -> Result<()> {
    write_atomic(path, loss_csv(trace).as_bytes())
}

/// Prepared per-sample tensors that stay fixed during training.
struct Prepared {
    negative_rois: Vec<RoiSet>,
    negative_attrs: Vec<Tensor>,
}

fn prepare(samples: &[Sample], table: &EmbeddingTable, cfg: &TrainConfig) -> Result<Prepared> {
    let vocab = AttributeVocabulary::load();
    let mut negative_rois = Vec::with_capacity(samples.len());
    let mut negative_attrs = Vec::with_capacity(samples.len());
    for s in samples {
        negative_rois.push(make_negative_rois(
            &s.roi_set,
            cfg.negative_count(s.roi_set.len()),
        )?);
        negative_attrs.push(make_negative_attributes(s, &vocab, table)?);
    }
    Ok(Prepared {
        negative_rois,
        negative_attrs,
    })
}

fn examples<'a>(samples: &'a [Sample], prep: &'a Prepared, idx: &[usize]) -> Vec<Example<'a>> {
    idx.iter()
        .map(|&i| Example {
            rois: &samples[i].roi_set,
            negative_rois: &prep.negative_rois[i],
            attrs: &samples[i].attr_embeds,
            negative_attrs: &prep.negative_attrs[i],
            target: &samples[i].target,
        })
        .collect()
}

/// Size-weighted mean inference-mode loss over `idx`.
fn evaluate(
    samples: &[Sample],
    prep: &Prepared,
    idx: &[usize],
    params: &ModelParams,
    batch: usize,
) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sum = 0.0;
    for chunk in idx.chunks(batch) {
        let ex = examples(samples, prep, chunk);
        sum += crate::model::total_loss(&ex, params, Mode::Infer)?.total * chunk.len() as f64;
    }
    Ok(sum / idx.len() as f64)
}

/// True once the best loss of the last `window` epochs fails to improve on
/// the best before them by the configured relative margin.
fn plateaued(val: &[f64], cfg: &TrainConfig) -> bool {
    let w = cfg.early_stop_window;
    if val.len() <= w {
        return false;
    }
    let (before, recent) = val.split_at(val.len() - w);
    let best_before = before.iter().copied().fold(f64::INFINITY, f64::min);
    let best_recent = recent.iter().copied().fold(f64::INFINITY, f64::min);
    best_recent > best_before - cfg.early_stop_min_improvement * best_before.abs()
}

/// Train on the training partition of `samples`.
///
/// Mini-batches are drawn from a seeded shuffle each epoch; each batch's
/// mean loss is minimized with Adam and folded into the batch-norm running
/// statistics. Validation loss uses inference-mode batch norm.
pub fn train(
    samples: &[Sample],
    table: &EmbeddingTable,
    cfg: &TrainConfig,
    init: ModelParams,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let split = split_dataset(samples.len(), cfg);
    if split.train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let prep = prepare(samples, table, cfg)?;
    let mut params = init;
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = split.train.clone();
    let mut trace = Vec::new();
    let mut val_history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut steps = 0;
    let mut stopped_early = false;
    let step_cap = cfg.max_steps.unwrap_or(usize::MAX);

    'epochs: for epoch in 1..=cfg.max_epochs {
        if steps >= step_cap {
            break;
        }
        order.shuffle(&mut rng);
        let (mut tot, mut trip, mut bce, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let ex = examples(samples, &prep, chunk);
            let mut g = Graph::new();
            let w = bind(&mut g, &params);
            let out = batch_loss_graph(&mut g, &w, &params, &ex, Mode::Train)?;
            let total = g.scalar(out.total);
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let n = chunk.len() as f64;
            tot += total * n;
            trip += g.scalar(out.trip) * n;
            bce += g.scalar(out.bce) * n;
            seen += chunk.len();

            let grads = g.backward(out.total)?;
            let grad_list: Vec<Tensor> = w.into_vec().into_iter().map(|v| grads.wrt(v)).collect();
            let stats: Vec<Tensor> = out.bn_inputs.iter().map(|&v| g.value(v).clone()).collect();
            drop(g);
            adam.step(&mut params.weights.tensors_mut(), &grad_list)?;
            params.update_running_stats(&stats);
            steps += 1;
            if steps >= step_cap {
                let row = finish_epoch(
                    samples, &prep, &split, &params, cfg, epoch, tot, trip, bce, seen,
                )?;
                record(&mut trace, &mut val_history, &mut best, row, &params);
                break 'epochs;
            }
        }
        let row = finish_epoch(
            samples, &prep, &split, &params, cfg, epoch, tot, trip, bce, seen,
        )?;
        record(&mut trace, &mut val_history, &mut best, row, &params);
        if !val_history.is_empty() && plateaued(&val_history, cfg) {
            info!("validation loss plateaued at epoch {epoch}");
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, params) = match best {
        Some((_, e, p)) => (e, p),
        None => (trace.last().map_or(0, |r| r.epoch), params),
    };
    Ok(TrainOutcome {
        params,
        trace,
        split,
        steps,
        best_epoch,
        stopped_early,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    samples: &[Sample],
    prep: &Prepared,
    split: &Split,
    params: &ModelParams,
    cfg: &TrainConfig,
    epoch: usize,
    tot: f64,
    trip: f64,
    bce: f64,
    seen: usize,
) -> Result<EpochStats> {
    let n = seen.max(1) as f64;
    let val_total = evaluate(samples, prep, &split.val, params, cfg.batch_size)?;
    let row = EpochStats {
        epoch,
        train_total: tot / n,
        train_trip: trip / n,
        train_bce: bce / n,
        val_total,
    };
    debug!(
        "epoch {epoch}: train {:.5} (trip {:.5}, bce {:.5}) val {:.5}",
        row.train_total, row.train_trip, row.train_bce, row.val_total
    );
    Ok(row)
}

fn record(
    trace: &mut Vec<EpochStats>,
    val_history: &mut Vec<f64>,
    best: &mut Option<(f64, usize, ModelParams)>,
    row: EpochStats,
    params: &ModelParams,
) {
    trace.push(row);
    if row.val_total.is_nan() {
        return;
    }
    val_history.push(row.val_total);
    if best.as_ref().is_none_or(|(b, _, _)| row.val_total < *b) {
        *best = Some((row.val_total, row.epoch, params.clone()));
    }
}
