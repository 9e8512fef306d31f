//! Forward pass of the grounding network on a [`Graph`].
//!
//! ROI features are projected into the word-vector space, weighted by a
//! small MLP (`α`), pooled into an image vector for attribute
//! classification, and matched against attribute vectors with two-way
//! cross-attention. The graph builders are used for training; the
//! value-level wrappers at the bottom serve inference and tests.

use crate::error::{Error, Result};
use crate::grad::{Axis2, Graph, Tensor, Var};

use super::params::{Affine, Dense, ModelConfig, ModelParams, Weights};
use super::roi::RoiSet;

/// Probability clamp for binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch-norm uses the statistics of the current batch.
    Train,
    /// Batch-norm uses the running statistics.
    Infer,
}

fn dense(g: &mut Graph, layer: &Dense<Var>, x: Var) -> Result<Var> {
    let y = g.matmul(x, layer.weight)?;
    g.add(y, layer.bias)
}

fn affine(g: &mut Graph, a: &Affine<Var>, x: Var) -> Result<Var> {
    let y = g.mul(x, a.gain)?;
    g.add(y, a.shift)
}

/// Bind every trainable tensor as a graph leaf.
pub fn bind(g: &mut Graph, params: &ModelParams) -> Weights<Var> {
    params.weights.map(|_, t| g.leaf(t.clone()))
}

/// Rebuild a handle layout from vars listed in canonical order.
pub fn weights_from_vars<X>(template: &Weights<X>, vars: &[Var]) -> Weights<Var> {
    let mut it = vars.iter().copied();
    template.map(|name, _| {
        it.next()
            .unwrap_or_else(|| panic!("missing var for {name}"))
    })
}

/// `φ = W1·r + W2·[LN(Wg·g) | LN(Ws·s)]`, one row per ROI.
pub fn transform_graph(
    g: &mut Graph,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    feats: Var,
    geom: Var,
    scores: Var,
) -> Result<Var> {
    let base = dense(g, &w.roi_proj, feats)?;
    let gp = dense(g, &w.geom_proj, geom)?;
    let gn = g.layer_norm(gp, cfg.ln_eps);
    let gn = affine(g, &w.geom_norm, gn)?;
    let sp = dense(g, &w.score_proj, scores)?;
    let sn = g.layer_norm(sp, cfg.ln_eps);
    let sn = affine(g, &w.score_norm, sn)?;
    let cat = g.concat(&[gn, sn], Axis2::Cols)?;
    let fused = dense(g, &w.fuse_proj, cat)?;
    g.add(base, fused)
}

/// Per-ROI sigmoid score from the α-MLP, `N × 1` (before the softmax over ROIs).
pub fn alpha_scores_graph(
    g: &mut Graph,
    w: &Weights<Var>,
    cfg: &ModelConfig,
    phi: Var,
) -> Result<Var> {
    let mut h = phi;
    let last = w.alpha_mlp.len() - 1;
    for (i, layer) in w.alpha_mlp.iter().enumerate() {
        h = dense(g, layer, h)?;
        if i < last {
            h = g.leaky_relu(h, cfg.leaky_slope);
        }
    }
    Ok(g.sigmoid(h))
}

/// Softmax of per-ROI scores across the ROIs of one image.
pub fn alpha_graph(g: &mut Graph, scores: Var) -> Var {
    g.softmax(scores, Axis2::Rows, 1.0)
}

/// `v = Σ α_i φ_i`, `1 × D`.
pub fn aggregate_graph(g: &mut Graph, phi: Var, alpha: Var) -> Result<Var> {
    let weighted = g.mul(phi, alpha)?;
    Ok(g.sum(weighted, Some(Axis2::Rows)))
}

pub struct ClassifierVars {
    /// `B × num_attributes` probabilities.
    pub probs: Var,
    /// Inputs to each batch-norm layer, for running-statistic updates.
    pub bn_inputs: Vec<Var>,
}

pub fn classify_graph(
    g: &mut Graph,
    w: &Weights<Var>,
    params: &ModelParams,
    v: Var,
    mode: Mode,
) -> Result<ClassifierVars> {
    let cfg = &params.config;
    if mode == Mode::Infer && !params.stats_initialized {
        return Err(Error::UninitializedRunningStats);
    }
    let mut h = v;
    let mut bn_inputs = Vec::new();
    let last = w.classifier.len() - 1;
    for (i, layer) in w.classifier.iter().enumerate() {
        h = dense(g, layer, h)?;
        if i == last {
            break;
        }
        h = g.leaky_relu(h, cfg.leaky_slope);
        bn_inputs.push(h);
        h = match mode {
            Mode::Train => g.batch_norm(h, cfg.bn_eps),
            Mode::Infer => {
                let stats = &params.running[i];
                let neg_mean = g.leaf(stats.mean.mapv(|m| -m));
                let inv_std = g.leaf(stats.var.mapv(|v| 1.0 / (v + cfg.bn_eps).sqrt()));
                let centered = g.add(h, neg_mean)?;
                g.mul(centered, inv_std)?
            }
        };
        h = affine(g, &w.classifier_norm[i], h)?;
    }
    Ok(ClassifierVars {
        probs: g.sigmoid(h),
        bn_inputs,
    })
}

/// Hinge then L2-normalize each attribute column over the ROIs.
/// Alternate similarity normalizations go here.
pub fn normalize_similarity(g: &mut Graph, raw: Var) -> Var {
    let hinged = g.relu(raw);
    g.l2_normalize(hinged, Axis2::Rows)
}

pub struct AttentionVars {
    /// Normalized ROI/attribute similarity, `N × M`.
    pub similarity: Var,
    /// Softmax over attributes (each row sums to one), `N × M`.
    pub text_attention: Var,
    /// Softmax over ROIs (each column sums to one), `N × M`.
    pub roi_attention: Var,
    /// `A_j = Σ_i α_i φ_i a_ij`, `M × D`.
    pub attended_rois: Var,
    /// `B_i = Σ_j m_j b_ij`, `N × D`.
    pub attended_attrs: Var,
}

pub fn cross_attention_graph(
    g: &mut Graph,
    phi: Var,
    alpha: Var,
    attrs: Var,
    lambda_a: f64,
    lambda_b: f64,
) -> Result<AttentionVars> {
    let pn = g.l2_normalize(phi, Axis2::Cols);
    let mn = g.l2_normalize(attrs, Axis2::Cols);
    let raw = g.matmul_t(pn, mn)?;
    let similarity = normalize_similarity(g, raw);
    let text_attention = g.softmax(similarity, Axis2::Cols, lambda_a);
    let roi_attention = g.softmax(similarity, Axis2::Rows, lambda_b);
    let weighted = g.mul(phi, alpha)?;
    let at = g.transpose(text_attention);
    let attended_rois = g.matmul(at, weighted)?;
    let attended_attrs = g.matmul(roi_attention, attrs)?;
    Ok(AttentionVars {
        similarity,
        text_attention,
        roi_attention,
        attended_rois,
        attended_attrs,
    })
}

pub struct SimilarityVars {
    pub r_text: Var,
    pub r_roi: Var,
    pub s_text: Var,
    pub s_roi: Var,
}

pub fn pooled_graph(
    g: &mut Graph,
    att: &AttentionVars,
    phi: Var,
    attrs: Var,
) -> Result<SimilarityVars> {
    let r_text = g.cosine_rows(att.attended_rois, attrs)?;
    let r_roi = g.cosine_rows(att.attended_attrs, phi)?;
    let s_text = g.mean(r_text, None);
    let s_roi = g.mean(r_roi, None);
    Ok(SimilarityVars {
        r_text,
        r_roi,
        s_text,
        s_roi,
    })
}

/// `max(β − S_roi⁺ + S_roi⁻, 0) + max(β − S_text⁺ + S_text⁻, 0)`.
pub fn triplet_graph(
    g: &mut Graph,
    s_roi_pos: Var,
    s_roi_neg: Var,
    s_text_pos: Var,
    s_text_neg: Var,
    margin: f64,
) -> Result<Var> {
    let d_roi = g.sub(s_roi_neg, s_roi_pos)?;
    let d_roi = g.offset(d_roi, margin);
    let h_roi = g.hinge(d_roi);
    let d_text = g.sub(s_text_neg, s_text_pos)?;
    let d_text = g.offset(d_text, margin);
    let h_text = g.hinge(d_text);
    g.add(h_roi, h_text)
}

/// One training example with its mined negatives.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub rois: &'a RoiSet,
    pub negative_rois: &'a RoiSet,
    /// `M × D` attribute vectors.
    pub attrs: &'a Tensor,
    /// `M × D` vectors of the matching negative words.
    pub negative_attrs: &'a Tensor,
    /// `1 × num_attributes` 0/1 targets.
    pub target: &'a Tensor,
}

pub struct BatchVars {
    pub total: Var,
    pub trip: Var,
    pub bce: Var,
    pub bn_inputs: Vec<Var>,
}

fn stack_rois<'a>(sets: impl Iterator<Item = &'a RoiSet> + Clone) -> (Tensor, Tensor, Tensor) {
    let n: usize = sets.clone().map(RoiSet::len).sum();
    let d = sets.clone().next().map_or(0, RoiSet::feature_dim);
    let mut feats = Tensor::zeros((n, d));
    let mut geom = Tensor::zeros((n, 4));
    let mut scores = Tensor::zeros((n, 1));
    let mut row = 0;
    for set in sets {
        for r in &set.rois {
            feats
                .row_mut(row)
                .assign(&ndarray::ArrayView1::from(&r.feat[..]));
            geom.row_mut(row)
                .assign(&ndarray::ArrayView1::from(&r.bbox[..]));
            scores[[row, 0]] = r.score;
            row += 1;
        }
    }
    (feats, geom, scores)
}

/// Build the mean-over-batch `L = L_trip + L_BCE` graph for `batch`.
///
/// All ROIs of the batch (positives and negatives) go through the feature
/// transform and α-MLP as one stacked matrix; the per-image softmax and
/// cross-attention then operate on row slices.
pub fn batch_loss_graph(
    g: &mut Graph,
    w: &Weights<Var>,
    params: &ModelParams,
    batch: &[Example<'_>],
    mode: Mode,
) -> Result<BatchVars> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = &params.config;
    let sets = batch.iter().flat_map(|e| [e.rois, e.negative_rois]);
    for s in sets.clone() {
        if s.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "image `{}` has no ROIs",
                s.image_id
            )));
        }
        if s.feature_dim() != cfg.roi_dim {
            return Err(Error::FeatureDimMismatch {
                expected: cfg.roi_dim,
                found: s.feature_dim(),
            });
        }
    }
    let (feats, geom, scores) = stack_rois(sets);
    let feats = g.leaf(feats);
    let geom = g.leaf(geom);
    let scores = g.leaf(scores);
    let phi_all = transform_graph(g, w, cfg, feats, geom, scores)?;
    let sig_all = alpha_scores_graph(g, w, cfg, phi_all)?;

    let mut offset = 0;
    let mut pooled = Vec::with_capacity(batch.len());
    let mut trips = Vec::with_capacity(batch.len());
    let mut targets = Tensor::zeros((batch.len(), cfg.num_attributes));
    for (k, ex) in batch.iter().enumerate() {
        if ex.attrs.nrows() == 0 || ex.attrs.dim() != ex.negative_attrs.dim() {
            return Err(Error::shape(
                "example attributes",
                ex.attrs.dim(),
                ex.negative_attrs.dim(),
            ));
        }
        if ex.target.dim() != (1, cfg.num_attributes) {
            return Err(Error::shape(
                "example target",
                ex.target.dim(),
                (1, cfg.num_attributes),
            ));
        }
        targets.row_mut(k).assign(&ex.target.row(0));

        let (np, nn) = (ex.rois.len(), ex.negative_rois.len());
        let phi = g.slice_rows(phi_all, offset, offset + np)?;
        let sig = g.slice_rows(sig_all, offset, offset + np)?;
        let phi_neg = g.slice_rows(phi_all, offset + np, offset + np + nn)?;
        let sig_neg = g.slice_rows(sig_all, offset + np, offset + np + nn)?;
        offset += np + nn;

        let alpha = alpha_graph(g, sig);
        let alpha_neg = alpha_graph(g, sig_neg);
        pooled.push(aggregate_graph(g, phi, alpha)?);

        let attrs = g.leaf(ex.attrs.clone());
        let neg_attrs = g.leaf(ex.negative_attrs.clone());

        let att = cross_attention_graph(g, phi, alpha, attrs, cfg.lambda_a, cfg.lambda_b)?;
        let pos = pooled_graph(g, &att, phi, attrs)?;
        let att = cross_attention_graph(g, phi_neg, alpha_neg, attrs, cfg.lambda_a, cfg.lambda_b)?;
        let neg_img = pooled_graph(g, &att, phi_neg, attrs)?;
        let att = cross_attention_graph(g, phi, alpha, neg_attrs, cfg.lambda_a, cfg.lambda_b)?;
        let neg_txt = pooled_graph(g, &att, phi, neg_attrs)?;

        trips.push(triplet_graph(
            g,
            pos.s_roi,
            neg_img.s_roi,
            pos.s_text,
            neg_txt.s_text,
            cfg.margin,
        )?);
    }

    let v = g.concat(&pooled, Axis2::Rows)?;
    let cls = classify_graph(g, w, params, v, mode)?;
    let bce_rows = g.bce(cls.probs, &targets, BCE_EPS)?;
    let bce = g.mean(bce_rows, None);
    let trip_rows = g.concat(&trips, Axis2::Rows)?;
    let trip = g.mean(trip_rows, None);
    let total = g.add(trip, bce)?;
    Ok(BatchVars {
        total,
        trip,
        bce,
        bn_inputs: cls.bn_inputs,
    })
}

// ---------------------------------------------------------------------------
// Value-level operations.

#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionState {
    pub similarity: Tensor,
    pub text_attention: Tensor,
    pub roi_attention: Tensor,
    pub attended_rois: Tensor,
    pub attended_attrs: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityScores {
    pub r_text: Vec<f64>,
    pub r_roi: Vec<f64>,
    pub s_text: f64,
    pub s_roi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBundle {
    pub trip: f64,
    pub bce: f64,
    pub total: f64,
}

fn column(t: &Tensor) -> Vec<f64> {
    t.iter().copied().collect()
}

fn as_column(values: &[f64]) -> Tensor {
    Tensor::from_shape_fn((values.len(), 1), |(i, _)| values[i])
}

/// Transformed ROI features `Φ`, `N × D`.
pub fn transform_roi(roi_set: &RoiSet, params: &ModelParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = bind(&mut g, params);
    let feats = g.leaf(roi_set.features());
    let geom = g.leaf(roi_set.geometry());
    let scores = g.leaf(roi_set.scores());
    let phi = transform_graph(&mut g, &w, &params.config, feats, geom, scores)?;
    Ok(g.value(phi).clone())
}

/// ROI weights `α` (sum to one).
pub fn roi_weights(phi: &Tensor, params: &ModelParams) -> Result<Vec<f64>> {
    if phi.nrows() == 0 {
        return Err(Error::shape(
            "roi_weights",
            phi.dim(),
            (1, params.config.joint_dim),
        ));
    }
    let mut g = Graph::new();
    let w = bind(&mut g, params);
    let phi = g.leaf(phi.clone());
    let s = alpha_scores_graph(&mut g, &w, &params.config, phi)?;
    let a = alpha_graph(&mut g, s);
    Ok(column(g.value(a)))
}

/// `v = Σ α_i φ_i`.
pub fn aggregate(phi: &Tensor, alpha: &[f64]) -> Result<Vec<f64>> {
    if phi.nrows() != alpha.len() {
        return Err(Error::shape("aggregate", phi.dim(), (alpha.len(), 1)));
    }
    let mut g = Graph::new();
    let p = g.leaf(phi.clone());
    let a = g.leaf(as_column(alpha));
    let v = aggregate_graph(&mut g, p, a)?;
    Ok(column(g.value(v)))
}

/// Attribute probabilities for a batch of pooled vectors (`B × D` → `B × 22`).
pub fn classify_attributes(vs: &Tensor, params: &ModelParams, mode: Mode) -> Result<Tensor> {
    if vs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("pooled ROI vector".into()));
    }
    let mut g = Graph::new();
    let w = bind(&mut g, params);
    let v = g.leaf(vs.clone());
    let out = classify_graph(&mut g, &w, params, v, mode)?;
    Ok(g.value(out.probs).clone())
}

pub fn cross_attention(
    phi: &Tensor,
    alpha: &[f64],
    attrs: &Tensor,
    params: &ModelParams,
) -> Result<CrossAttentionState> {
    if phi.nrows() == 0 || attrs.nrows() == 0 {
        return Err(Error::shape("cross_attention", phi.dim(), attrs.dim()));
    }
    if phi.nrows() != alpha.len() {
        return Err(Error::shape("cross_attention", phi.dim(), (alpha.len(), 1)));
    }
    let mut g = Graph::new();
    let p = g.leaf(phi.clone());
    let a = g.leaf(as_column(alpha));
    let m = g.leaf(attrs.clone());
    let cfg = &params.config;
    let att = cross_attention_graph(&mut g, p, a, m, cfg.lambda_a, cfg.lambda_b)?;
    Ok(CrossAttentionState {
        similarity: g.value(att.similarity).clone(),
        text_attention: g.value(att.text_attention).clone(),
        roi_attention: g.value(att.roi_attention).clone(),
        attended_rois: g.value(att.attended_rois).clone(),
        attended_attrs: g.value(att.attended_attrs).clone(),
    })
}

pub fn pooled_similarities(
    state: &CrossAttentionState,
    phi: &Tensor,
    attrs: &Tensor,
) -> Result<SimilarityScores> {
    let mut g = Graph::new();
    let a = g.leaf(state.attended_rois.clone());
    let b = g.leaf(state.attended_attrs.clone());
    let p = g.leaf(phi.clone());
    let m = g.leaf(attrs.clone());
    let r_text = g.cosine_rows(a, m)?;
    let r_roi = g.cosine_rows(b, p)?;
    let s_text = g.mean(r_text, None);
    let s_roi = g.mean(r_roi, None);
    Ok(SimilarityScores {
        r_text: column(g.value(r_text)),
        r_roi: column(g.value(r_roi)),
        s_text: g.scalar(s_text),
        s_roi: g.scalar(s_roi),
    })
}

pub fn triplet_loss(
    s_roi_pos: f64,
    s_roi_neg: f64,
    s_text_pos: f64,
    s_text_neg: f64,
    margin: f64,
) -> f64 {
    (margin - s_roi_pos + s_roi_neg).max(0.0) + (margin - s_text_pos + s_text_neg).max(0.0)
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(probs: &[f64], targets: &[f64]) -> f64 {
    assert_eq!(probs.len(), targets.len(), "bce_loss length mismatch");
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Full loss over a batch (a single example is a batch of one).
pub fn total_loss(batch: &[Example<'_>], params: &ModelParams, mode: Mode) -> Result<LossBundle> {
    let mut g = Graph::new();
    let w = bind(&mut g, params);
    let out = batch_loss_graph(&mut g, &w, params, batch, mode)?;
    let trip = g.scalar(out.trip);
    let bce = g.scalar(out.bce);
    Ok(LossBundle {
        trip,
        bce,
        total: g.scalar(out.total),
    })
}
