use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Tensor;

/// One detector region: feature vector, detector score and normalized
/// corner box `(x1, y1, x2, y2)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Roi {
    pub feat: Vec<f64>,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

/// Frozen detector output for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSet {
    #[serde(rename = "id")]
    pub image_id: String,
    pub rois: Vec<Roi>,
}

impl RoiSet {
    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.rois.first().map_or(0, |r| r.feat.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rois.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "image `{}` has no ROIs",
                self.image_id
            )));
        }
        let d = self.feature_dim();
        for r in &self.rois {
            if r.feat.len() != d {
                return Err(Error::FeatureDimMismatch {
                    expected: d,
                    found: r.feat.len(),
                });
            }
            if r.feat.iter().any(|v| !v.is_finite()) || !r.score.is_finite() {
                return Err(Error::NonFinite(format!(
                    "ROI values in image `{}`",
                    self.image_id
                )));
            }
            let [x1, y1, x2, y2] = r.bbox;
            if !(x1 < x2 && y1 < y2) {
                return Err(Error::DegenerateBox(r.bbox));
            }
        }
        Ok(())
    }

    /// `N × D_roi` feature matrix.
    pub fn features(&self) -> Tensor {
        let d = self.feature_dim();
        Tensor::from_shape_fn((self.len(), d), |(i, j)| self.rois[i].feat[j])
    }

    /// `N × 4` box matrix.
    pub fn geometry(&self) -> Tensor {
        Tensor::from_shape_fn((self.len(), 4), |(i, j)| self.rois[i].bbox[j])
    }

    /// `N × 1` detector scores.
    pub fn scores(&self) -> Tensor {
        Tensor::from_shape_fn((self.len(), 1), |(i, _)| self.rois[i].score)
    }

    pub fn subset(&self, indices: &[usize]) -> RoiSet {
        RoiSet {
            image_id: self.image_id.clone(),
            rois: indices.iter().map(|&i| self.rois[i].clone()).collect(),
        }
    }
}
