use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Fitted TF-IDF vocabulary with smoothed inverse document frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct TfidfModel {
    /// Term → column, columns in sorted term order.
    pub vocabulary: BTreeMap<String, usize>,
    pub idf: Vec<f64>,
    pub n_docs: usize,
}

impl TfidfModel {
    pub fn n_terms(&self) -> usize {
        self.idf.len()
    }

    /// L2-normalized tf·idf row of one document; unknown terms are ignored.
    pub fn transform(&self, doc: &[String]) -> Vec<f64> {
        let mut row = vec![0.0; self.n_terms()];
        if doc.is_empty() {
            return row;
        }
        let len = doc.len() as f64;
        for term in doc {
            if let Some(&c) = self.vocabulary.get(term) {
                row[c] += 1.0 / len;
            }
        }
        for (v, idf) in row.iter_mut().zip(&self.idf) {
            *v *= idf;
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
        row
    }
}

/// tf = count / document length, idf = ln((1 + N) / (1 + df)) + 1, rows
/// L2-normalized.
pub fn tfidf_fit_transform(docs: &[Vec<String>]) -> Result<(TfidfModel, Vec<Vec<f64>>)> {
    if docs.is_empty() {
        return Err(Error::contract("TF-IDF needs at least one document"));
    }
    let terms: BTreeSet<&String> = docs.iter().flatten().collect();
    let vocabulary: BTreeMap<String, usize> = terms
        .into_iter()
        .enumerate()
        .map(|(i, t)| (t.clone(), i))
        .collect();
    let mut df = vec![0usize; vocabulary.len()];
    for doc in docs {
        let unique: BTreeSet<usize> = doc.iter().map(|t| vocabulary[t]).collect();
        for c in unique {
            df[c] += 1;
        }
    }
    let n = docs.len() as f64;
    let idf = df
        .iter()
        .map(|&d| ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)
        .collect();
    let model = TfidfModel {
        vocabulary,
        idf,
        n_docs: docs.len(),
    };
    let matrix = docs.iter().map(|d| model.transform(d)).collect();
    Ok((model, matrix))
}
