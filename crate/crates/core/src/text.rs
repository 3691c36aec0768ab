//! Tf-idf text encoding over comment and title vocabularies.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_MIN_COUNT: usize = 10;

/// Lowercases and splits on every non-alphabetic character. Tokens are
/// purely alphabetic, so anything with digits never survives.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .filter(|t| t.chars().all(char::is_alphabetic))
        .collect()
}

/// Token index with per-token document frequencies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TfIdfVocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
    document_frequency: Vec<usize>,
    total_documents: usize,
    min_count: usize,
}

/// On-disk layout of a vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
    indices: Vec<usize>,
    document_frequency: Vec<usize>,
    total_documents: usize,
    min_count: usize,
}

impl TfIdfVocabulary {
    /// Keeps every token occurring at least `min_count` times in total across
    /// `texts`. Indices follow lexicographic token order.
    pub fn build<S: AsRef<str>>(texts: &[S], min_count: usize) -> Result<Self> {
        if texts.is_empty() {
            return Err(Error::Validation("cannot build a vocabulary from no texts".into()));
        }
        let mut occurrences: BTreeMap<String, usize> = BTreeMap::new();
        let mut docs: HashMap<String, usize> = HashMap::new();
        for text in texts {
            let mut tokens = tokenize(text.as_ref());
            for t in &tokens {
                *occurrences.entry(t.clone()).or_default() += 1;
            }
            tokens.sort_unstable();
            tokens.dedup();
            for t in tokens {
                *docs.entry(t).or_default() += 1;
            }
        }
        let tokens: Vec<String> = occurrences
            .into_iter()
            .filter(|&(_, n)| n >= min_count)
            .map(|(t, _)| t)
            .collect();
        if tokens.is_empty() {
            return Err(Error::Validation(format!(
                "no token occurs at least {min_count} times"
            )));
        }
        let document_frequency = tokens.iter().map(|t| docs[t]).collect();
        Ok(Self::from_parts(tokens, document_frequency, texts.len(), min_count))
    }

    fn from_parts(
        tokens: Vec<String>,
        document_frequency: Vec<usize>,
        total_documents: usize,
        min_count: usize,
    ) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            index,
            tokens,
            document_frequency,
            total_documents,
            min_count,
        }
    }

    /// A vocabulary with no tokens; every text encodes to the empty vector.
    pub fn empty(total_documents: usize, min_count: usize) -> Self {
        Self::from_parts(Vec::new(), Vec::new(), total_documents, min_count)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn document_frequency(&self, token: &str) -> Option<usize> {
        self.index_of(token).map(|i| self.document_frequency[i])
    }

    pub fn total_documents(&self) -> usize {
        self.total_documents
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Smoothed inverse document frequency `ln((1+N)/(1+df)) + 1`.
    pub fn idf(&self, index: usize) -> f64 {
        let n = self.total_documents as f64;
        let df = self.document_frequency[index] as f64;
        ((1.0 + n) / (1.0 + df)).ln() + 1.0
    }

    /// Raw-count tf times smoothed idf, L2-normalized. Out-of-vocabulary
    /// tokens are ignored; a text with none in vocabulary gives the zero vector.
    pub fn encode(&self, text: &str) -> TextVector {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for t in tokenize(text) {
            if let Some(i) = self.index_of(&t) {
                *counts.entry(i).or_default() += 1;
            }
        }
        let mut weights: BTreeMap<usize, f64> = counts
            .into_iter()
            .map(|(i, tf)| (i, tf as f64 * self.idf(i)))
            .collect();
        let norm = weights.values().map(|w| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            weights.values_mut().for_each(|w| *w /= norm);
        }
        TextVector {
            dimension: self.len(),
            weights,
        }
    }

    fn to_file(&self) -> VocabularyFile {
        VocabularyFile {
            tokens: self.tokens.clone(),
            indices: (0..self.len()).collect(),
            document_frequency: self.document_frequency.clone(),
            total_documents: self.total_documents,
            min_count: self.min_count,
        }
    }

    fn from_file(file: VocabularyFile) -> std::result::Result<Self, String> {
        let n = file.tokens.len();
        if file.indices.len() != n || file.document_frequency.len() != n {
            return Err("tokens, indices and document_frequency differ in length".into());
        }
        let mut tokens = vec![String::new(); n];
        let mut df = vec![0; n];
        let mut filled = vec![false; n];
        for ((tok, &i), &d) in file.tokens.into_iter().zip(&file.indices).zip(&file.document_frequency) {
            if i >= n || filled[i] {
                return Err(format!("index {i} out of range or repeated"));
            }
            if tok.is_empty() || !tok.chars().all(|c| c.is_alphabetic() && !c.is_uppercase()) {
                return Err(format!("token {tok:?} is not lowercase alphabetic"));
            }
            filled[i] = true;
            tokens[i] = tok;
            df[i] = d;
        }
        Ok(Self::from_parts(tokens, df, file.total_documents, file.min_count))
    }
}

/// Sparse tf-idf vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TextVector {
    dimension: usize,
    weights: BTreeMap<usize, f64>,
}

impl TextVector {
    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn weights(&self) -> &BTreeMap<usize, f64> {
        &self.weights
    }

    pub fn get(&self, index: usize) -> f64 {
        self.weights.get(&index).copied().unwrap_or(0.0)
    }

    pub fn norm(&self) -> f64 {
        self.weights.values().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.weights.values().all(|&w| w == 0.0)
    }
}

/// Comment and title vocabularies. A sample encodes as the re-normalized
/// concatenation `[comment ; title]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextEncoder {
    pub comment: TfIdfVocabulary,
    pub title: TfIdfVocabulary,
}

#[derive(Serialize, Deserialize)]
struct EncoderFile {
    comment: VocabularyFile,
    title: VocabularyFile,
}

impl TextEncoder {
    /// Builds both vocabularies from aligned `(title, comment)` training texts.
    ///
    /// The comment vocabulary must be non-empty. Titles are short, so a title
    /// vocabulary with no token over the threshold is kept as an empty one.
    pub fn build<S: AsRef<str>>(titles: &[S], comments: &[S], min_count: usize) -> Result<Self> {
        let comment = TfIdfVocabulary::build(comments, min_count)?;
        let title = match TfIdfVocabulary::build(titles, min_count) {
            Ok(v) => v,
            Err(Error::Validation(_)) => TfIdfVocabulary::empty(titles.len(), min_count),
            Err(e) => return Err(e),
        };
        Ok(Self { comment, title })
    }

    pub fn dimension(&self) -> usize {
        self.comment.len() + self.title.len()
    }

    /// Dense joint encoding. Zero when neither text has an in-vocabulary token.
    pub fn encode<T: Scalar>(&self, title: &str, comment: &str) -> Tensor<T> {
        let c = self.comment.encode(comment);
        let t = self.title.encode(title);
        let offset = self.comment.len();
        let mut dense = vec![0.0f64; self.dimension()];
        for (&i, &w) in c.weights() {
            dense[i] = w;
        }
        for (&i, &w) in t.weights() {
            dense[offset + i] = w;
        }
        let norm = dense.iter().map(|w| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            dense.iter_mut().for_each(|w| *w /= norm);
        }
        Tensor::from_vec(dense.into_iter().map(T::lit).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&EncoderFile {
            comment: self.comment.to_file(),
            title: self.title.to_file(),
        })
        .expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        let file: EncoderFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Ok(Self {
            comment: TfIdfVocabulary::from_file(file.comment)?,
            title: TfIdfVocabulary::from_file(file.title)?,
        })
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_json().as_bytes()).into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|m| Error::format(path, m))
    }
}
