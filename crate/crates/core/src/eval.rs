//! Exact cosine retrieval and Recall@K.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Rows whose Euclidean norm is below this cannot be ranked by cosine.
pub const MIN_NORM: f64 = 1e-12;

/// Unit-normalized embeddings with a label and an id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    rows: Vec<f64>,
    labels: Vec<usize>,
    ids: Vec<usize>,
}

fn normalize(row: &[f64]) -> Result<Vec<f64>> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm.is_nan() || norm < MIN_NORM {
        return Err(Error::NonFinite {
            what: format!("embedding norm {norm:e} (zero or non-finite row)"),
        });
    }
    Ok(row.iter().map(|v| v / norm).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl RetrievalIndex {
    /// `embeddings` is `[n, D]`. Ids must be unique.
    pub fn new(embeddings: &Tensor, labels: Vec<usize>, ids: Vec<usize>) -> Result<Self> {
        let &[n, dim] = embeddings.shape() else {
            return Err(Error::config(
                "embeddings",
                format!("expected [n, D], got {:?}", embeddings.shape()),
            ));
        };
        if labels.len() != n || ids.len() != n {
            return Err(Error::config(
                "index",
                format!("{n} rows, {} labels, {} ids", labels.len(), ids.len()),
            ));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("index", "ids must be unique"));
        }
        let mut rows = Vec::with_capacity(n * dim);
        for i in 0..n {
            rows.extend(normalize(embeddings.row(i))?);
        }
        Ok(Self {
            dim,
            rows,
            labels,
            ids,
        })
    }

    /// Ids default to row positions.
    pub fn from_rows(embeddings: &Tensor, labels: Vec<usize>) -> Result<Self> {
        let ids = (0..labels.len()).collect();
        Self::new(embeddings, labels, ids)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// `(position, similarity)` for every row except id `skip`, best first,
    /// ties broken by lower id. `unit` must be normalized.
    fn ranking(&self, unit: &[f64], skip: Option<usize>) -> Vec<(usize, f64)> {
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|&i| Some(self.ids[i]) != skip)
            .map(|i| (i, dot(unit, self.row(i))))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(Ordering::Equal)
                .then(self.ids[a.0].cmp(&self.ids[b.0]))
        });
        scored
    }
}

/// Top-`k` `(id, cosine similarity)` pairs for `query`, best first.
pub fn nearest(index: &RetrievalIndex, query: &[f64], k: usize) -> Result<Vec<(usize, f64)>> {
    if query.len() != index.dim {
        return Err(Error::config(
            "query",
            format!("dimension {} for a {}-d index", query.len(), index.dim),
        ));
    }
    if k == 0 || k > index.len() {
        return Err(Error::config(
            "k",
            format!("{k} outside 1..={}", index.len()),
        ));
    }
    let unit = normalize(query)?;
    Ok(index
        .ranking(&unit, None)
        .into_iter()
        .take(k)
        .map(|(i, s)| (index.ids[i], s))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub k_values: Vec<usize>,
    pub recall: BTreeMap<usize, f64>,
    pub n_queries: usize,
}

impl RecallReport {
    pub fn get(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,recall\n");
        for k in &self.k_values {
            out.push_str(&format!("{k},{}\n", self.recall[k]));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Fraction of queries whose `k` nearest index rows include a same-label
/// row, for each `k` in `ks` (strictly ascending). With `exclude_self` the
/// index row sharing the query's id is skipped, as in the protocol where
/// queries and index are the same set.
pub fn recall_at_k(
    queries: &RetrievalIndex,
    index: &RetrievalIndex,
    ks: &[usize],
    exclude_self: bool,
) -> Result<RecallReport> {
    if queries.is_empty() {
        return Err(Error::config("queries", "empty query set"));
    }
    if queries.dim != index.dim {
        return Err(Error::config("queries", "dimension differs from index"));
    }
    if ks.is_empty() || ks[0] == 0 || ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(
            "k",
            format!("{ks:?} must be positive and strictly ascending"),
        ));
    }
    let max_k = *ks.last().expect("non-empty");
    let available = index.len() - usize::from(exclude_self);
    if max_k > available {
        return Err(Error::config(
            "k",
            format!("k = {max_k} exceeds the {available} candidates"),
        ));
    }
    let mut hits = vec![0usize; ks.len()];
    for q in 0..queries.len() {
        let skip = exclude_self.then(|| queries.ids[q]);
        let ranked = queries_ranking(index, queries.row(q), skip);
        let label = queries.labels[q];
        let first = ranked
            .iter()
            .take(max_k)
            .position(|&i| index.labels[i] == label);
        if let Some(rank) = first {
            for (h, &k) in hits.iter_mut().zip(ks) {
                if rank < k {
                    *h += 1;
                }
            }
        }
    }
    let n = queries.len();
    Ok(RecallReport {
        k_values: ks.to_vec(),
        recall: ks
            .iter()
            .zip(&hits)
            .map(|(&k, &h)| (k, h as f64 / n as f64))
            .collect(),
        n_queries: n,
    })
}

fn queries_ranking(index: &RetrievalIndex, unit: &[f64], skip: Option<usize>) -> Vec<usize> {
    index
        .ranking(unit, skip)
        .into_iter()
        .map(|(i, _)| i)
        .collect()
}
