//! α-based ROI selection and evaluation metrics: IoU hit rates, attribute
//! accuracy / AUC, and cross-validated severity correlation.

use std::collections::HashMap;
use std::fmt::{self, Write as _};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::model::{
    aggregate, classify_attributes, roi_weights, transform_roi, Mode, ModelParams, RoiSet,
};
use crate::text::AttributeVocabulary;

pub type BBox = [f64; 4];

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];
pub const NMS_IOU: f64 = 0.5;

/// Selected boxes for one image, each as `[x1, y1, x2, y2, weight]`
/// sorted by descending weight, plus attribute probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: String,
    pub boxes: Vec<[f64; 5]>,
    pub attr_probs: Vec<f64>,
}

impl Detection {
    pub fn top_box(&self) -> Option<BBox> {
        self.boxes.first().map(|b| [b[0], b[1], b[2], b[3]])
    }
}

fn check_box(b: &BBox) -> Result<()> {
    if !(b[0] < b[2] && b[1] < b[3]) {
        return Err(Error::DegenerateBox(*b));
    }
    Ok(())
}

pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let area = |r: &BBox| (r[2] - r[0]) * (r[3] - r[1]);
    Ok(inter / (area(a) + area(b) - inter))
}

/// Greedy non-maximal suppression. Returns kept indices in selection
/// order (descending weight, ties by input index).
pub fn nms(boxes: &[BBox], weights: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != weights.len() {
        return Err(Error::shape("nms", (boxes.len(), 4), (weights.len(), 1)));
    }
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    'next: for i in order {
        for &k in &kept {
            if iou(&boxes[i], &boxes[k])? >= iou_threshold {
                continue 'next;
            }
        }
        kept.push(i);
    }
    Ok(kept)
}

/// Text-free inference: weight ROIs by `α`, keep those at or above the
/// uniform weight `1/N`, suppress overlaps, and classify attributes from
/// the pooled vector.
pub fn infer(roi_set: &RoiSet, params: &ModelParams) -> Result<Detection> {
    if !params.stats_initialized {
        return Err(Error::UninitializedRunningStats);
    }
    roi_set.validate()?;
    if roi_set.is_empty() {
        return Err(Error::NotEnoughRois {
            requested: 1,
            available: 0,
        });
    }
    let phi = transform_roi(roi_set, params)?;
    let alpha = roi_weights(&phi, params)?;
    let n = alpha.len() as f64;
    let mut pool: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] >= 1.0 / n).collect();
    if pool.is_empty() {
        let top = (0..alpha.len())
            .max_by(|&a, &b| alpha[a].total_cmp(&alpha[b]).then(b.cmp(&a)))
            .expect("non-empty ROI set");
        pool.push(top);
    }
    let boxes: Vec<BBox> = pool.iter().map(|&i| roi_set.rois[i].bbox).collect();
    let weights: Vec<f64> = pool.iter().map(|&i| alpha[i]).collect();
    let kept = nms(&boxes, &weights, NMS_IOU)?;
    let v = aggregate(&phi, &alpha)?;
    let v = Tensor::from_shape_vec((1, v.len()), v).expect("row vector");
    let probs = classify_attributes(&v, params, Mode::Infer)?;
    Ok(Detection {
        id: roi_set.image_id.clone(),
        boxes: kept
            .into_iter()
            .map(|k| {
                let b = boxes[k];
                [b[0], b[1], b[2], b[3], weights[k]]
            })
            .collect(),
        attr_probs: probs.iter().copied().collect(),
    })
}

/// Which predicted boxes count towards a localization hit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HitMode {
    /// Only the highest-weight box.
    #[default]
    Top1,
    /// Any returned box.
    Any,
}

impl fmt::Display for HitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HitMode::Top1 => "top1",
            HitMode::Any => "any",
        })
    }
}

impl std::str::FromStr for HitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(HitMode::Top1),
            "any" => Ok(HitMode::Any),
            other => Err(Error::InvalidConfig(format!("unknown hit mode `{other}`"))),
        }
    }
}

/// Fraction of images whose predicted box overlaps some ground-truth box
/// with IoU at least `t`, for each threshold `t`.
pub fn localization_metrics(
    detections: &[Detection],
    ground_truth: &HashMap<String, Vec<BBox>>,
    thresholds: &[f64],
    mode: HitMode,
) -> Result<Vec<(f64, f64)>> {
    let mut best = Vec::with_capacity(detections.len());
    for d in detections {
        let gt = ground_truth
            .get(&d.id)
            .filter(|g| !g.is_empty())
            .ok_or_else(|| Error::MissingGroundTruth(d.id.clone()))?;
        let candidates = match mode {
            HitMode::Top1 => &d.boxes[..d.boxes.len().min(1)],
            HitMode::Any => &d.boxes[..],
        };
        let mut m: f64 = 0.0;
        for c in candidates {
            let pb = [c[0], c[1], c[2], c[3]];
            for g in gt {
                m = m.max(iou(&pb, g)?);
            }
        }
        best.push(m);
    }
    let n = detections.len().max(1) as f64;
    Ok(thresholds
        .iter()
        .map(|&t| (t, best.iter().filter(|&&b| b >= t).count() as f64 / n))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// Macro average over attributes with both classes present; `NaN` if none.
    pub auc: f64,
    /// Attribute indices skipped for AUC because their targets are single-class.
    pub skipped: Vec<usize>,
}

/// Average 1-based ranks; ties share the mean of their positions.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Rank-based ROC AUC; `None` unless both classes occur.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let r = ranks(scores);
    let rank_sum: f64 = r
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

/// `probs[i][j]` and `targets[i][j]` for image `i`, attribute `j`.
pub fn classification_metrics(
    probs: &[Vec<f64>],
    targets: &[Vec<f64>],
) -> Result<ClassificationMetrics> {
    if probs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = probs[0].len();
    for (p, t) in probs.iter().zip(targets) {
        if p.len() != k || t.len() != k {
            return Err(Error::shape(
                "classification_metrics",
                (1, p.len()),
                (1, t.len()),
            ));
        }
    }
    if probs.len() != targets.len() {
        return Err(Error::shape(
            "classification_metrics",
            (probs.len(), k),
            (targets.len(), k),
        ));
    }
    let mut correct = 0usize;
    for (p, t) in probs.iter().zip(targets) {
        correct += p
            .iter()
            .zip(t)
            .filter(|(&p, &t)| (if p >= 0.5 { 1.0 } else { 0.0 }) == t)
            .count();
    }
    let accuracy = correct as f64 / (probs.len() * k) as f64;
    let mut aucs = Vec::new();
    let mut skipped = Vec::new();
    for j in 0..k {
        let s: Vec<f64> = probs.iter().map(|p| p[j]).collect();
        let l: Vec<bool> = targets.iter().map(|t| t[j] >= 0.5).collect();
        match roc_auc(&s, &l) {
            Some(a) => aucs.push(a),
            None => skipped.push(j),
        }
    }
    let auc = if aucs.is_empty() {
        f64::NAN
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    };
    Ok(ClassificationMetrics {
        accuracy,
        auc,
        skipped,
    })
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Pearson correlation; `NaN` when either input is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "pearson length mismatch");
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    sxy / (sxx * syy).sqrt()
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation across folds.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let m = mean(values);
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64
        } else {
            0.0
        };
        Self {
            mean: m,
            std: var.sqrt(),
        }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityStats {
    pub attribute: String,
    pub pearson: MeanStd,
    pub spearman: MeanStd,
    pub r2: MeanStd,
    pub mae: MeanStd,
    pub mse: MeanStd,
}

/// Seeded partition of `0..n` into `folds` near-equal parts.
pub fn kfold(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    (0..folds)
        .map(|f| {
            let (lo, hi) = (f * n / folds, (f + 1) * n / folds);
            idx[lo..hi].to_vec()
        })
        .collect()
}

/// Least-squares `y ≈ a + b·x`.
fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let (mx, my) = (mean(x), mean(y));
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let b = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - b * mx, b)
}

/// Cross-validated agreement between attribute probabilities and an
/// expert severity score, one entry per named probability series.
///
/// Severity is min-max scaled to `[0, 1]`. Each fold fits a line from
/// probability to scaled severity on the other folds and scores R², MAE
/// and MSE on the held-out fold; Pearson and Spearman use the held-out
/// probability/severity pairs directly.
pub fn severity_correlation(
    series: &[(&str, &[f64])],
    severity: &[f64],
    folds: usize,
    seed: u64,
) -> Result<Vec<SeverityStats>> {
    let n = severity.len();
    if folds < 2 || n < folds {
        return Err(Error::TooFewSamples {
            needed: folds.max(2),
            got: n,
        });
    }
    let (lo, hi) = severity
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let scaled: Vec<f64> = severity.iter().map(|v| (v - lo) / span).collect();
    let parts = kfold(n, folds, seed);

    let mut out = Vec::with_capacity(series.len());
    for &(name, p) in series {
        if p.len() != n {
            return Err(Error::shape("severity_correlation", (p.len(), 1), (n, 1)));
        }
        let mut stats: [Vec<f64>; 5] = Default::default();
        for test in &parts {
            let train: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
            let pick = |v: &[f64], ix: &[usize]| -> Vec<f64> { ix.iter().map(|&i| v[i]).collect() };
            let (a, b) = fit_line(&pick(p, &train), &pick(&scaled, &train));
            let xt = pick(p, test);
            let yt = pick(&scaled, test);
            let pred: Vec<f64> = xt.iter().map(|x| a + b * x).collect();
            let resid: Vec<f64> = pred.iter().zip(&yt).map(|(p, y)| y - p).collect();
            let my = mean(&yt);
            let ss_res: f64 = resid.iter().map(|r| r * r).sum();
            let ss_tot: f64 = yt.iter().map(|y| (y - my).powi(2)).sum();
            stats[0].push(pearson(&xt, &pick(severity, test)));
            stats[1].push(spearman(&xt, &pick(severity, test)));
            stats[2].push(if ss_tot > 0.0 {
                1.0 - ss_res / ss_tot
            } else if ss_res == 0.0 {
                1.0
            } else {
                f64::NAN
            });
            stats[3].push(mean(&resid.iter().map(|r| r.abs()).collect::<Vec<_>>()));
            stats[4].push(ss_res / yt.len() as f64);
        }
        out.push(SeverityStats {
            attribute: name.to_string(),
            pearson: MeanStd::of(&stats[0]),
            spearman: MeanStd::of(&stats[1]),
            r2: MeanStd::of(&stats[2]),
            mae: MeanStd::of(&stats[3]),
            mse: MeanStd::of(&stats[4]),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: usize,
    pub hit_mode: HitMode,
    /// `(threshold, hit rate)` pairs.
    pub iou_hit_rate: Vec<(f64, f64)>,
    pub attr_accuracy: f64,
    pub attr_auc: f64,
    pub skipped_attributes: Vec<String>,
    pub severity_stats: Vec<SeverityStats>,
}

impl EvalReport {
    pub fn new(
        images: usize,
        hit_mode: HitMode,
        iou_hit_rate: Vec<(f64, f64)>,
        cls: Option<&ClassificationMetrics>,
        severity_stats: Vec<SeverityStats>,
    ) -> Self {
        let vocab = AttributeVocabulary::load();
        Self {
            images,
            hit_mode,
            iou_hit_rate,
            attr_accuracy: cls.map_or(f64::NAN, |c| c.accuracy),
            attr_auc: cls.map_or(f64::NAN, |c| c.auc),
            skipped_attributes: cls
                .map(|c| {
                    c.skipped
                        .iter()
                        .map(|&j| vocab.word(j).to_string())
                        .collect()
                })
                .unwrap_or_default(),
            severity_stats,
        }
    }

    /// Plain-text tables: localization, classification, severity.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "Localization ({} images, hit mode {})",
            self.images, self.hit_mode
        );
        let header: Vec<String> = self
            .iou_hit_rate
            .iter()
            .map(|(t, _)| format!("IoU@{t}"))
            .collect();
        let values: Vec<String> = self
            .iou_hit_rate
            .iter()
            .map(|(_, r)| format!("{r:.3}"))
            .collect();
        let _ = writeln!(s, "  {}", header.join("  "));
        let _ = writeln!(s, "  {}", values.join("  "));
        let _ = writeln!(s, "Attribute classification");
        let _ = writeln!(
            s,
            "  accuracy {:.3}  macro AUC {:.3}",
            self.attr_accuracy, self.attr_auc
        );
        if !self.skipped_attributes.is_empty() {
            let _ = writeln!(
                s,
                "  AUC skipped (single class): {}",
                self.skipped_attributes.join(", ")
            );
        }
        if !self.severity_stats.is_empty() {
            let _ = writeln!(s, "Severity");
            let _ = writeln!(
                s,
                "  {:<10} {:>15} {:>15} {:>15} {:>15} {:>15}",
                "attribute", "Pearson CC", "Spearman CC", "R2", "MAE", "MSE"
            );
            for st in &self.severity_stats {
                let _ = writeln!(
                    s,
                    "  {:<10} {:>15} {:>15} {:>15} {:>15} {:>15}",
                    st.attribute,
                    st.pearson.to_string(),
                    st.spearman.to_string(),
                    st.r2.to_string(),
                    st.mae.to_string(),
                    st.mse.to_string()
                );
            }
        }
        s
    }
}
