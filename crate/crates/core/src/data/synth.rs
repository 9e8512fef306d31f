//! Synthetic planted-correspondence data.
//!
//! Every image gets a few attributes and one planted ROI whose feature is a
//! fixed linear lift of the mean attribute vector plus Gaussian noise; the
//! other ROIs are pure Gaussian noise at the same sigma with lower detector
//! scores. The planted box is the ground truth for localization.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::io::Annotation;
use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::model::{Roi, RoiSet};
use crate::text::{AttributeSet, AttributeVocabulary, Report, ATTRIBUTE_WORDS, NUM_ATTRIBUTES};
use crate::train::Sample;

/// Non-attribute words used in generated report text.
pub const FILLER_WORDS: [&str; 8] = [
    "opacity",
    "consistent",
    "with",
    "pneumonia",
    "heart",
    "size",
    "is",
    "normal",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_images: usize,
    pub rois_per_image: usize,
    pub feat_dim: usize,
    pub attrs_per_image: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            rois_per_image: 20,
            feat_dim: 64,
            attrs_per_image: 2,
            noise_sigma: 0.1,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_images == 0
            || self.rois_per_image == 0
            || self.feat_dim == 0
            || self.attrs_per_image == 0
        {
            return Err(Error::InvalidConfig(
                "synthetic sizes must be positive".into(),
            ));
        }
        if self.attrs_per_image > NUM_ATTRIBUTES {
            return Err(Error::InvalidConfig(format!(
                "attrs_per_image {} exceeds the {NUM_ATTRIBUTES}-word vocabulary",
                self.attrs_per_image
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(
                "noise_sigma must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedRoi {
    pub image_id: String,
    pub index: usize,
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub samples: Vec<Sample>,
    pub reports: Vec<Report>,
    pub planted: Vec<PlantedRoi>,
    /// `D × D_roi` lift from attribute space to ROI-feature space.
    pub lift: Tensor,
}

impl SynthData {
    pub fn roi_sets(&self) -> Vec<RoiSet> {
        self.samples.iter().map(|s| s.roi_set.clone()).collect()
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.planted
            .iter()
            .map(|p| Annotation {
                id: p.image_id.clone(),
                boxes: vec![p.bbox],
            })
            .collect()
    }

    pub fn ground_truth(&self) -> HashMap<String, Vec<[f64; 4]>> {
        self.planted
            .iter()
            .map(|p| (p.image_id.clone(), vec![p.bbox]))
            .collect()
    }

    /// Noise-free planted feature for attribute vectors `attrs` (`M × D`).
    pub fn lifted(&self, attrs: &Tensor) -> Vec<f64> {
        let mean = attrs
            .mean_axis(ndarray::Axis(0))
            .expect("at least one attribute");
        mean.dot(&self.lift).to_vec()
    }
}

/// Seeded Gaussian vectors for the attribute vocabulary and the report
/// filler words.
pub fn synth_table(dim: usize, seed: u64) -> Result<EmbeddingTable> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = ATTRIBUTE_WORDS
        .iter()
        .chain(FILLER_WORDS.iter())
        .map(|w| {
            let v = (0..dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect();
            (w.to_string(), v)
        })
        .collect();
    EmbeddingTable::from_vectors(dim, entries)
}

/// Report text from which the attribute extractor recovers exactly `words`.
pub fn report_text(words: &[&str]) -> String {
    format!(
        "{} opacity consistent with pneumonia. Heart size is normal.",
        words.join(" ")
    )
}

fn random_box(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 4] {
    let w = rng.random_range(lo..hi);
    let h = rng.random_range(lo..hi);
    let x = rng.random_range(0.0..1.0 - w);
    let y = rng.random_range(0.0..1.0 - h);
    [x, y, x + w, y + h]
}

pub fn synth_generate(cfg: &SynthConfig, table: &EmbeddingTable) -> Result<SynthData> {
    cfg.validate()?;
    let vocab = AttributeVocabulary::load();
    let mut norms = Vec::with_capacity(NUM_ATTRIBUTES);
    for w in vocab.words() {
        let v = table.lookup(w)?;
        norms.push(v.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    let scale = norms.iter().sum::<f64>() / norms.len() as f64;
    if !(scale > 0.0) {
        return Err(Error::NonFinite("attribute vectors have zero norm".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = table.dim();
    let lift = Tensor::from_shape_simple_fn((d, cfg.feat_dim), || {
        rng.sample::<f64, _>(StandardNormal) / scale
    });

    let mut samples = Vec::with_capacity(cfg.num_images);
    let mut reports = Vec::with_capacity(cfg.num_images);
    let mut planted = Vec::with_capacity(cfg.num_images);
    let severe = vocab.index("severe").expect("severe is an attribute");
    for img in 0..cfg.num_images {
        let id = format!("synth{img:05}");
        let attrs =
            AttributeSet::from_indices(sample(&mut rng, NUM_ATTRIBUTES, cfg.attrs_per_image));
        let attr_vecs = crate::embed::embed_attributes(&attrs, &vocab, table)?;
        let mean = attr_vecs
            .mean_axis(ndarray::Axis(0))
            .expect("attrs non-empty");
        let clean = mean.dot(&lift);

        let target = rng.random_range(0..cfg.rois_per_image);
        let mut rois = Vec::with_capacity(cfg.rois_per_image);
        for i in 0..cfg.rois_per_image {
            let roi = if i == target {
                Roi {
                    feat: clean
                        .iter()
                        .map(|c| c + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                    score: rng.random_range(0.5..1.0),
                    bbox: random_box(&mut rng, 0.15, 0.35),
                }
            } else {
                Roi {
                    feat: (0..cfg.feat_dim)
                        .map(|_| cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                    score: rng.random_range(0.0..0.5),
                    bbox: random_box(&mut rng, 0.05, 0.5),
                }
            };
            rois.push(roi);
        }
        let bbox = rois[target].bbox;
        let severity = if attrs.contains(severe) {
            rng.random_range(5.0..8.0)
        } else {
            rng.random_range(0.0..4.0)
        };
        reports.push(Report {
            id: id.clone(),
            text: report_text(&attrs.words(&vocab)),
            severity: Some(severity),
        });
        planted.push(PlantedRoi {
            image_id: id.clone(),
            index: target,
            bbox,
        });
        samples.push(Sample::new(
            RoiSet { image_id: id, rois },
            attrs,
            &vocab,
            table,
        )?);
    }
    Ok(SynthData {
        samples,
        reports,
        planted,
        lift,
    })
}
