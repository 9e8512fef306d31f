//! Report tokenization and rule-based attribute extraction.
//!
//! Extraction keeps vocabulary words that share a sentence with a disease
//! term, unless a negation cue precedes the disease term in that sentence.
//! This is a deliberately small stand-in for a full clinical labeler.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

/// The fixed attribute keywords, in index order.
pub const ATTRIBUTE_WORDS: [&str; 22] = [
    "left",
    "right",
    "lower",
    "middle",
    "upper",
    "lateral",
    "bilateral",
    "basal",
    "apical",
    "aspiration",
    "small",
    "large",
    "diffuse",
    "multifocal",
    "focal",
    "effusion",
    "atelectasis",
    "severe",
    "acute",
    "moderate",
    "positive",
    "uncertain",
];

pub const NUM_ATTRIBUTES: usize = ATTRIBUTE_WORDS.len();

pub const DEFAULT_DISEASE_TERMS: [&str; 4] =
    ["pneumonia", "consolidation", "infiltrate", "opacity"];

pub const NEGATION_CUES: [&str; 6] = ["no", "not", "without", "free", "negative", "clear"];

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Token {
    Word(String),
    /// Sentence boundary.
    Eos,
}

impl Token {
    pub fn as_word(&self) -> Option<&str> {
        match self {
            Token::Word(w) => Some(w),
            Token::Eos => None,
        }
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Word(w) => f.write_str(w),
            Token::Eos => f.write_str("."),
        }
    }
}

/// Lowercases, strips punctuation, splits on whitespace and hyphens, and
/// marks sentence ends at `.`, `!`, `?` and blank lines. Consecutive
/// boundaries collapse into one and a leading boundary is dropped.
pub fn tokenize(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut newlines = 0usize;

    fn flush(word: &mut String, out: &mut Vec<Token>) {
        if !word.is_empty() {
            out.push(Token::Word(std::mem::take(word)));
        }
    }
    fn boundary(out: &mut Vec<Token>) {
        if matches!(out.last(), Some(Token::Word(_))) {
            out.push(Token::Eos);
        }
    }

    for ch in text.chars() {
        if ch == '\n' {
            newlines += 1;
            flush(&mut word, &mut out);
            if newlines == 2 {
                boundary(&mut out);
            }
            continue;
        }
        if !ch.is_whitespace() {
            newlines = 0;
        }
        match ch {
            '.' | '!' | '?' => {
                flush(&mut word, &mut out);
                boundary(&mut out);
            }
            // In-word apostrophes vanish ("don't" -> "dont").
            '\'' | '\u{2019}' => {}
            c if c.is_alphanumeric() => word.extend(c.to_lowercase()),
            _ => flush(&mut word, &mut out),
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Split a token stream into sentences of words.
pub fn sentences(tokens: &[Token]) -> Vec<Vec<&str>> {
    tokens
        .split(|t| *t == Token::Eos)
        .filter(|s| !s.is_empty())
        .map(|s| s.iter().filter_map(Token::as_word).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttributeVocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl AttributeVocabulary {
    /// The built-in 22-word vocabulary.
    pub fn load() -> Self {
        let words: Vec<String> = ATTRIBUTE_WORDS.iter().map(|w| w.to_string()).collect();
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self { words, index }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, idx: usize) -> &str {
        &self.words[idx]
    }
}

impl Default for AttributeVocabulary {
    fn default() -> Self {
        Self::load()
    }
}

/// Convenience wrapper around [`AttributeVocabulary::load`].
pub fn load_vocabulary() -> AttributeVocabulary {
    AttributeVocabulary::load()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<f64>,
}

/// Indices into the attribute vocabulary, kept sorted.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct AttributeSet {
    present: BTreeSet<usize>,
}

impl AttributeSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        Self {
            present: indices
                .into_iter()
                .filter(|&i| i < NUM_ATTRIBUTES)
                .collect(),
        }
    }

    pub fn from_words<'a>(
        vocab: &AttributeVocabulary,
        words: impl IntoIterator<Item = &'a str>,
    ) -> Option<Self> {
        let mut set = Self::new();
        for w in words {
            set.present.insert(vocab.index(w)?);
        }
        Some(set)
    }

    pub fn insert(&mut self, idx: usize) {
        assert!(idx < NUM_ATTRIBUTES, "attribute index {idx} out of range");
        self.present.insert(idx);
    }

    pub fn contains(&self, idx: usize) -> bool {
        self.present.contains(&idx)
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    /// Indices in vocabulary order.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.present.iter().copied()
    }

    pub fn words<'v>(&self, vocab: &'v AttributeVocabulary) -> Vec<&'v str> {
        self.indices().map(|i| vocab.word(i)).collect()
    }

    /// 0/1 indicator over the whole vocabulary.
    pub fn target_vector(&self) -> Vec<f64> {
        (0..NUM_ATTRIBUTES)
            .map(|i| if self.contains(i) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Disease-term list used to decide which sentences carry attributes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DiseaseTerms(HashSet<String>);

impl DiseaseTerms {
    pub fn new<I, S>(terms: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self(
            terms
                .into_iter()
                .map(|s| s.as_ref().to_lowercase())
                .collect(),
        )
    }

    pub fn contains(&self, w: &str) -> bool {
        self.0.contains(w)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for DiseaseTerms {
    fn default() -> Self {
        Self::new(DEFAULT_DISEASE_TERMS)
    }
}

fn sentence_qualifies(sentence: &[&str], disease_terms: &DiseaseTerms) -> bool {
    let Some(first) = sentence.iter().position(|w| disease_terms.contains(w)) else {
        return false;
    };
    !sentence[..first].iter().any(|w| NEGATION_CUES.contains(w))
}

pub fn extract_from_text(
    text: &str,
    vocab: &AttributeVocabulary,
    disease_terms: &DiseaseTerms,
) -> AttributeSet {
    let tokens = tokenize(text);
    let mut set = AttributeSet::new();
    for sentence in sentences(&tokens) {
        if !sentence_qualifies(&sentence, disease_terms) {
            continue;
        }
        for w in &sentence {
            if let Some(i) = vocab.index(w) {
                set.insert(i);
            }
        }
    }
    set
}

pub fn extract_attributes(
    report: &Report,
    vocab: &AttributeVocabulary,
    disease_terms: &DiseaseTerms,
) -> AttributeSet {
    extract_from_text(&report.text, vocab, disease_terms)
}
