//! Flat `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; command-line flags are applied on top afterwards.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use xattn_core::data::SynthConfig;
use xattn_core::embed::SkipGramConfig;
use xattn_core::eval::HitMode;
use xattn_core::train::TrainConfig;
use xattn_core::ModelConfig;

pub const KEYS: &[&str] = &[
    "seed",
    // training
    "lr",
    "weight_decay",
    "batch_size",
    "epochs",
    "max_steps",
    "early_stop_window",
    "early_stop_min_improvement",
    "train_fraction",
    "val_fraction",
    "test_fraction",
    "negative_roi_fraction",
    // model
    "joint_dim",
    "geom_dim",
    "score_dim",
    "alpha_hidden",
    "classifier_hidden",
    "leaky_slope",
    "lambda_a",
    "lambda_b",
    "margin",
    // embeddings
    "embed_dim",
    "window",
    "negatives",
    "embed_epochs",
    "embed_lr",
    "subsample",
    // synthetic data
    "num_images",
    "rois_per_image",
    "feat_dim",
    "attrs_per_image",
    "noise_sigma",
    // evaluation
    "hit_mode",
    "thresholds",
    "disease_terms",
    "severity_attrs",
    "folds",
];

#[derive(Clone, Debug)]
pub struct Settings {
    pub seed: Option<u64>,
    pub train: TrainConfig,
    /// Model overrides; `roi_dim` is filled in from the data.
    pub model: BTreeMap<String, String>,
    pub embed: SkipGramConfig,
    pub synth: SynthConfig,
    pub hit_mode: HitMode,
    pub thresholds: Vec<f64>,
    pub disease_terms: Option<Vec<String>>,
    pub severity_attrs: Vec<String>,
    pub folds: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: None,
            train: TrainConfig::default(),
            model: BTreeMap::new(),
            embed: SkipGramConfig::default(),
            synth: SynthConfig::default(),
            hit_mode: HitMode::Top1,
            thresholds: xattn_core::eval::DEFAULT_THRESHOLDS.to_vec(),
            disease_terms: None,
            severity_attrs: vec!["severe".into(), "moderate".into()],
            folds: 5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value `{value}` for `{key}`"))
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        match key {
            "seed" => self.seed = Some(parse(key, v)?),
            "lr" => self.train.lr = parse(key, v)?,
            "weight_decay" => self.train.weight_decay = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "epochs" => self.train.max_epochs = parse(key, v)?,
            "max_steps" => self.train.max_steps = Some(parse(key, v)?),
            "early_stop_window" => self.train.early_stop_window = parse(key, v)?,
            "early_stop_min_improvement" => self.train.early_stop_min_improvement = parse(key, v)?,
            "train_fraction" => self.train.train_fraction = parse(key, v)?,
            "val_fraction" => self.train.val_fraction = parse(key, v)?,
            "test_fraction" => self.train.test_fraction = parse(key, v)?,
            "negative_roi_fraction" => self.train.negative_roi_fraction = parse(key, v)?,
            "joint_dim" | "geom_dim" | "score_dim" | "alpha_hidden" | "classifier_hidden"
            | "leaky_slope" | "lambda_a" | "lambda_b" | "margin" => {
                self.model.insert(key.to_string(), v.to_string());
            }
            "embed_dim" => self.embed.dim = parse(key, v)?,
            "window" => self.embed.window = parse(key, v)?,
            "negatives" => self.embed.negatives_per_target = parse(key, v)?,
            "embed_epochs" => self.embed.epochs = parse(key, v)?,
            "embed_lr" => self.embed.learning_rate = parse(key, v)?,
            "subsample" => self.embed.subsample_threshold = parse(key, v)?,
            "num_images" => self.synth.num_images = parse(key, v)?,
            "rois_per_image" => self.synth.rois_per_image = parse(key, v)?,
            "feat_dim" => self.synth.feat_dim = parse(key, v)?,
            "attrs_per_image" => self.synth.attrs_per_image = parse(key, v)?,
            "noise_sigma" => self.synth.noise_sigma = parse(key, v)?,
            "hit_mode" => {
                self.hit_mode = v.parse().map_err(|e: xattn_core::Error| e.to_string())?
            }
            "thresholds" => self.thresholds = parse_list(key, v)?,
            "disease_terms" => self.disease_terms = Some(parse_list(key, v)?),
            "severity_attrs" => self.severity_attrs = parse_list(key, v)?,
            "folds" => self.folds = parse(key, v)?,
            other => {
                return Err(format!(
                    "unknown config key `{other}` (known keys: {})",
                    KEYS.join(", ")
                ))
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut s = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            s.set(k.trim(), v)
                .map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(s)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, String> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| format!("cannot read {}: {e}", p.display()))?;
                Self::from_text(&text)
            }
        }
    }

    pub fn model_config(&self, roi_dim: usize) -> Result<ModelConfig, String> {
        let mut c = ModelConfig::new(roi_dim);
        for (k, v) in &self.model {
            match k.as_str() {
                "joint_dim" => c.joint_dim = parse(k, v)?,
                "geom_dim" => c.geom_dim = parse(k, v)?,
                "score_dim" => c.score_dim = parse(k, v)?,
                "alpha_hidden" => c.alpha_hidden = parse_list(k, v)?,
                "classifier_hidden" => c.classifier_hidden = parse_list(k, v)?,
                "leaky_slope" => c.leaky_slope = parse(k, v)?,
                "lambda_a" => c.lambda_a = parse(k, v)?,
                "lambda_b" => c.lambda_b = parse(k, v)?,
                "margin" => c.margin = parse(k, v)?,
                _ => unreachable!("model keys are filtered in Settings::set"),
            }
        }
        c.validate().map_err(|e| e.to_string())?;
        Ok(c)
    }
}
