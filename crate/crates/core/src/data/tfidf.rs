use std::collections::BTreeMap;

use super::{DataError, Result};
use crate::models::Features;

/// Lowercased maximal alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// A frozen TF-IDF vocabulary. Term indices follow lexicographic order.
///
/// `tf = count / document length`, `idf = ln((1 + N) / (1 + df)) + 1`, and
/// each vector is scaled to unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TfIdf {
    vocab: BTreeMap<String, u32>,
    idf: Vec<f64>,
}

impl TfIdf {
    pub fn fit<S: AsRef<str>>(docs: &[S]) -> Result<Self> {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for d in docs {
            let mut toks = tokenize(d.as_ref());
            toks.sort_unstable();
            toks.dedup();
            for t in toks {
                *df.entry(t).or_insert(0) += 1;
            }
        }
        if df.is_empty() {
            return Err(DataError::EmptyVocabulary);
        }
        let n = docs.len() as f64;
        let mut vocab = BTreeMap::new();
        let mut idf = Vec::with_capacity(df.len());
        for (k, (term, count)) in df.into_iter().enumerate() {
            vocab.insert(term, k as u32);
            idf.push(((1.0 + n) / (1.0 + count as f64)).ln() + 1.0);
        }
        Ok(Self { vocab, idf })
    }

    pub fn len(&self) -> usize {
        self.idf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idf.is_empty()
    }

    pub fn index_of(&self, term: &str) -> Option<u32> {
        self.vocab.get(term).copied()
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.index_of(term).map(|i| self.idf[i as usize])
    }

    /// Sparse unit vector; all-zero when no token is in the vocabulary.
    pub fn transform(&self, doc: &str) -> Features {
        let toks = tokenize(doc);
        let len = toks.len() as f64;
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for t in &toks {
            if let Some(&i) = self.vocab.get(t) {
                *counts.entry(i).or_insert(0) += 1;
            }
        }
        let mut indices = Vec::with_capacity(counts.len());
        let mut values = Vec::with_capacity(counts.len());
        for (i, c) in counts {
            indices.push(i);
            values.push(c as f64 / len * self.idf[i as usize]);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            values.iter_mut().for_each(|v| *v /= norm);
        }
        Features::Sparse {
            dim: self.len(),
            indices,
            values,
        }
    }
}
