//! Skip-gram word vectors with negative sampling, plus the lookups the
//! model needs: attribute embedding matrices and nearest-neighbour
//! "negative" attributes.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use log::warn;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::text::{AttributeSet, AttributeVocabulary, Token};

#[derive(Clone, Debug, PartialEq)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives_per_target: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub subsample_threshold: f64,
    pub seed: u64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            window: 5,
            negatives_per_target: 5,
            epochs: 5,
            learning_rate: 0.025,
            subsample_threshold: 1e-3,
            seed: 0,
        }
    }
}

impl SkipGramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.window == 0 || self.negatives_per_target == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig(
                "skip-gram dim, window, negatives and epochs must all be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(
                "skip-gram learning rate must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Trained word vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<Vec<f64>>,
    counts: Vec<u64>,
}

impl EmbeddingTable {
    pub fn from_vectors(dim: usize, entries: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut table = Self {
            dim,
            words: Vec::with_capacity(entries.len()),
            index: HashMap::with_capacity(entries.len()),
            vectors: Vec::with_capacity(entries.len()),
            counts: Vec::with_capacity(entries.len()),
        };
        for (w, v) in entries {
            table.push(w, v, 0)?;
        }
        Ok(table)
    }

    fn push(&mut self, word: String, vector: Vec<f64>, count: u64) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::FeatureDimMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding for `{word}`")));
        }
        if self.index.contains_key(&word) {
            return Err(Error::InvalidConfig(format!(
                "duplicate embedding word `{word}`"
            )));
        }
        self.index.insert(word.clone(), self.words.len());
        self.words.push(word);
        self.vectors.push(vector);
        self.counts.push(count);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn vector(&self, word: &str) -> Option<&[f64]> {
        self.index.get(word).map(|&i| self.vectors[i].as_slice())
    }

    pub fn count(&self, word: &str) -> Option<u64> {
        self.index.get(word).map(|&i| self.counts[i])
    }

    pub fn lookup(&self, word: &str) -> Result<&[f64]> {
        self.vector(word)
            .ok_or_else(|| Error::MissingWord(word.to_string()))
    }

    /// Write the text format: a `<vocab_size> <dim>` header, then one
    /// `word v1 .. vdim` line per word. Values are stored at single
    /// precision, which round-trips exactly through the shortest decimal form.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(buf, "{} {}", self.len(), self.dim)?;
        for (w, v) in self.words.iter().zip(&self.vectors) {
            write!(buf, "{w}")?;
            for x in v {
                write!(buf, " {}", *x as f32)?;
            }
            writeln!(buf)?;
        }
        write_atomic(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let header = header?;
        let mut parts = header.split_whitespace();
        let parse_usize = |s: Option<&str>| -> Result<usize> {
            s.and_then(|t| t.parse().ok()).ok_or(Error::Parse {
                line: 1,
                msg: format!("bad header `{header}`"),
            })
        };
        let n = parse_usize(parts.next())?;
        let dim = parse_usize(parts.next())?;
        let mut table = Self::from_vectors(dim, Vec::new())?;
        for (ln, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().unwrap_or_default().to_string();
            let vec = parts
                .map(|t| t.parse::<f32>().map(f64::from))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: ln + 1,
                    msg: e.to_string(),
                })?;
            table.push(word, vec, 0).map_err(|e| Error::Parse {
                line: ln + 1,
                msg: e.to_string(),
            })?;
        }
        if table.len() != n {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header declares {n} words, file has {}", table.len()),
            });
        }
        Ok(table)
    }
}

/// Train skip-gram vectors with negative sampling over `corpus`
/// (one token sequence per document; sentence markers bound the context
/// window).
pub fn train_embeddings(corpus: &[Vec<Token>], cfg: &SkipGramConfig) -> Result<EmbeddingTable> {
    cfg.validate()?;

    let mut index: HashMap<String, usize> = HashMap::new();
    let mut words: Vec<String> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    let mut sentences: Vec<Vec<usize>> = Vec::new();
    for doc in corpus {
        let mut cur = Vec::new();
        for tok in doc {
            match tok {
                Token::Word(w) => {
                    let id = *index.entry(w.clone()).or_insert_with(|| {
                        words.push(w.clone());
                        counts.push(0);
                        words.len() - 1
                    });
                    counts[id] += 1;
                    cur.push(id);
                }
                Token::Eos => {
                    if !cur.is_empty() {
                        sentences.push(std::mem::take(&mut cur));
                    }
                }
            }
        }
        if !cur.is_empty() {
            sentences.push(cur);
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    for w in AttributeVocabulary::load().words() {
        if !index.contains_key(w) {
            warn!("attribute word `{w}` does not occur in the embedding corpus");
        }
    }

    let dim = cfg.dim;
    let vocab_size = words.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut input: Vec<f64> = (0..vocab_size * dim)
        .map(|_| (rng.random::<f64>() - 0.5) / dim as f64)
        .collect();
    let mut output = vec![0.0f64; vocab_size * dim];

    let noise = WeightedIndex::new(counts.iter().map(|&c| (c as f64).powf(0.75)))
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;

    // Probability of keeping a token under frequent-word subsampling.
    let keep_prob: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if cfg.subsample_threshold <= 0.0 {
                return 1.0;
            }
            let f = c as f64 / total as f64;
            let t = cfg.subsample_threshold;
            ((f / t).sqrt() + 1.0) * t / f
        })
        .collect();

    let planned = (total as f64 * cfg.epochs as f64).max(1.0);
    let min_lr = cfg.learning_rate * 0.1;
    let mut processed = 0u64;
    let mut grad_in = vec![0.0f64; dim];

    for epoch in 0..cfg.epochs {
        for sentence in &sentences {
            let kept: Vec<usize> = sentence
                .iter()
                .copied()
                .filter(|&w| keep_prob[w] >= 1.0 || rng.random::<f64>() < keep_prob[w])
                .collect();
            for (pos, &center) in kept.iter().enumerate() {
                let progress = processed as f64 / planned;
                let lr = (cfg.learning_rate * (1.0 - progress)).max(min_lr);
                processed += 1;

                let reach = rng.random_range(1..=cfg.window);
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(kept.len() - 1);
                for ctx_pos in lo..=hi {
                    if ctx_pos == pos {
                        continue;
                    }
                    let context = kept[ctx_pos];
                    grad_in.iter_mut().for_each(|g| *g = 0.0);
                    let in_row = center * dim;
                    for k in 0..=cfg.negatives_per_target {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let t = noise.sample(&mut rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let out_row = target * dim;
                        let dot: f64 = (0..dim)
                            .map(|d| input[in_row + d] * output[out_row + d])
                            .sum();
                        let g = (label - sigmoid(dot)) * lr;
                        for d in 0..dim {
                            grad_in[d] += g * output[out_row + d];
                            output[out_row + d] += g * input[in_row + d];
                        }
                    }
                    for d in 0..dim {
                        input[in_row + d] += grad_in[d];
                    }
                }
            }
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "embedding vectors after epoch {epoch}"
            )));
        }
    }

    let mut table = EmbeddingTable::from_vectors(dim, Vec::new())?;
    for (id, w) in words.into_iter().enumerate() {
        table.push(w, input[id * dim..(id + 1) * dim].to_vec(), counts[id])?;
    }
    Ok(table)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(crate::grad::NORM_CLAMP)
}

/// `M × dim` matrix of attribute vectors, rows in vocabulary order.
pub fn embed_attributes(
    attrs: &AttributeSet,
    vocab: &AttributeVocabulary,
    table: &EmbeddingTable,
) -> Result<Tensor> {
    let mut out = Tensor::zeros((attrs.len(), table.dim()));
    for (row, idx) in attrs.indices().enumerate() {
        let v = table.lookup(vocab.word(idx))?;
        out.row_mut(row).assign(&ndarray::ArrayView1::from(v));
    }
    Ok(out)
}

/// Most cosine-similar other word in the table; ties go to the
/// lexicographically smallest word.
pub fn negative_attribute<'t>(attr: &str, table: &'t EmbeddingTable) -> Result<&'t str> {
    let query = table.lookup(attr)?;
    let mut best: Option<(&str, f64)> = None;
    for (w, v) in table.words.iter().zip(&table.vectors) {
        if w == attr {
            continue;
        }
        let s = cosine(query, v);
        let better = match best {
            None => true,
            Some((bw, bs)) => s > bs || (s == bs && w.as_str() < bw),
        };
        if better {
            best = Some((w, s));
        }
    }
    best.map(|(w, _)| w).ok_or_else(|| {
        Error::InvalidConfig("negative_attribute needs at least two words in the table".into())
    })
}
