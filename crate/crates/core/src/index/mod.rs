//! Vector index over knowledge documents: approximate (HNSW) and exact
//! scan backends behind one trait, with a self-describing file format.

mod hnsw;
mod persist;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hnsw::{HnswIndex, HnswParams};
pub use persist::{load, persist, IndexFile, FORMAT_VERSION, MAGIC};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("vector has dimension {actual}, index expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vector contains a non-finite value")]
    NonFinite,
    #[error("index file format error: {0}")]
    Format(String),
    #[error("index io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Cosine,
    Dot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Hnsw,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDoc {
    pub doc_id: String,
    pub score: f64,
}

pub trait VectorIndex: Send + Sync {
    fn dimension(&self) -> usize;
    fn metric(&self) -> Metric;
    /// Number of live entries.
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Insert or replace the vector for `doc_id`.
    fn add(&mut self, doc_id: &str, vector: &[f32]) -> Result<(), IndexError>;
    /// Up to `k` hits by descending score, ties by ascending `doc_id`.
    fn search(&self, query: &[f32], k: usize) -> Result<Vec<ScoredDoc>, IndexError>;
}

/// Inner product with a fixed 16-lane summation order. Every code path
/// performs the same additions in the same order, so results are
/// bit-identical whichever path runs.
#[inline(always)]
fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 16];
    let (ca, cb) = (a.chunks_exact(16), b.chunks_exact(16));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..16 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let mut w = 16;
    while w > 1 {
        w /= 2;
        for j in 0..w {
            acc[j] += acc[j + w];
        }
    }
    acc[0] + tail
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn dot_avx2(a: &[f32], b: &[f32]) -> f32 {
    dot_lanes(a, b)
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the feature was detected at runtime.
            return unsafe { dot_avx2(a, b) };
        }
    }
    dot_lanes(a, b)
}

pub(crate) fn prepare(metric: Metric, dimension: usize, v: &[f32]) -> Result<Vec<f32>, IndexError> {
    if v.len() != dimension {
        return Err(IndexError::DimensionMismatch { expected: dimension, actual: v.len() });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(IndexError::NonFinite);
    }
    Ok(match metric {
        Metric::Dot => v.to_vec(),
        Metric::Cosine => {
            let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            if norm == 0.0 {
                v.to_vec()
            } else {
                v.iter().map(|&x| (x as f64 / norm) as f32).collect()
            }
        }
    })
}

pub(crate) fn finalize(mut hits: Vec<ScoredDoc>, k: usize) -> Vec<ScoredDoc> {
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.doc_id.cmp(&b.doc_id)));
    hits.truncate(k);
    hits
}

/// Brute-force scan; the reference the approximate index is judged against.
#[derive(Debug, Clone, Default)]
pub struct ExactIndex {
    dimension: usize,
    metric: Metric,
    entries: Vec<(String, Vec<f32>)>,
    by_doc: HashMap<String, usize>,
}

impl ExactIndex {
    pub fn new(dimension: usize, metric: Metric) -> Self {
        Self { dimension, metric, entries: Vec::new(), by_doc: HashMap::new() }
    }

    pub(crate) fn entries(&self) -> &[(String, Vec<f32>)] {
        &self.entries
    }

    /// Append an already-prepared vector (used when loading from disk).
    pub(crate) fn push_prepared(&mut self, doc_id: String, v: Vec<f32>) -> Result<(), IndexError> {
        if v.len() != self.dimension {
            return Err(IndexError::DimensionMismatch { expected: self.dimension, actual: v.len() });
        }
        if self.by_doc.insert(doc_id.clone(), self.entries.len()).is_some() {
            return Err(IndexError::Format(format!("duplicate doc_id {doc_id}")));
        }
        self.entries.push((doc_id, v));
        Ok(())
    }
}

impl VectorIndex for ExactIndex {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn metric(&self) -> Metric {
        self.metric
    }

    fn len(&self) -> usize {
        self.entries.len()
    }

    fn add(&mut self, doc_id: &str, vector: &[f32]) -> Result<(), IndexError> {
        let v = prepare(self.metric, self.dimension, vector)?;
        match self.by_doc.get(doc_id) {
            Some(&i) => self.entries[i].1 = v,
            None => {
                self.by_doc.insert(doc_id.to_string(), self.entries.len());
                self.entries.push((doc_id.to_string(), v));
            }
        }
        Ok(())
    }

    fn search(&self, query: &[f32], k: usize) -> Result<Vec<ScoredDoc>, IndexError> {
        let q = prepare(self.metric, self.dimension, query)?;
        let hits = self
            .entries
            .iter()
            .map(|(id, v)| ScoredDoc { doc_id: id.clone(), score: dot(&q, v) as f64 })
            .collect();
        Ok(finalize(hits, k))
    }
}

/// Either backend, selected by configuration.
#[derive(Debug, Clone)]
pub enum AnyIndex {
    Hnsw(HnswIndex),
    Exact(ExactIndex),
}

impl AnyIndex {
    pub fn new(backend: Backend, dimension: usize, metric: Metric, params: HnswParams) -> Self {
        match backend {
            Backend::Hnsw => AnyIndex::Hnsw(HnswIndex::new(dimension, metric, params)),
            Backend::Exact => AnyIndex::Exact(ExactIndex::new(dimension, metric)),
        }
    }

    pub fn backend(&self) -> Backend {
        match self {
            AnyIndex::Hnsw(_) => Backend::Hnsw,
            AnyIndex::Exact(_) => Backend::Exact,
        }
    }

    fn inner(&self) -> &dyn VectorIndex {
        match self {
            AnyIndex::Hnsw(i) => i,
            AnyIndex::Exact(i) => i,
        }
    }
}

impl VectorIndex for AnyIndex {
    fn dimension(&self) -> usize {
        self.inner().dimension()
    }
    fn metric(&self) -> Metric {
        self.inner().metric()
    }
    fn len(&self) -> usize {
        self.inner().len()
    }
    fn add(&mut self, doc_id: &str, vector: &[f32]) -> Result<(), IndexError> {
        match self {
            AnyIndex::Hnsw(i) => i.add(doc_id, vector),
            AnyIndex::Exact(i) => i.add(doc_id, vector),
        }
    }
    fn search(&self, query: &[f32], k: usize) -> Result<Vec<ScoredDoc>, IndexError> {
        self.inner().search(query, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_corpus() {
        for backend in [Backend::Hnsw, Backend::Exact] {
            let mut idx = AnyIndex::new(backend, 3, Metric::Cosine, HnswParams::default());
            idx.add("x", &[1.0, 0.0, 0.0]).unwrap();
            idx.add("y", &[0.0, 1.0, 0.0]).unwrap();
            idx.add("z", &[0.0, 0.0, 1.0]).unwrap();
            let hits = idx.search(&[0.0, 1.0, 0.0], 5).unwrap();
            assert_eq!(hits.len(), 3);
            assert_eq!(hits[0].doc_id, "y");
            assert_eq!(hits[0].score, 1.0);
            // remaining two tie at 0.0, so ascending doc_id
            assert_eq!(hits[1].doc_id, "x");
            assert_eq!(hits[2].doc_id, "z");
        }
    }

    #[test]
    fn empty_index_returns_nothing() {
        for backend in [Backend::Hnsw, Backend::Exact] {
            let idx = AnyIndex::new(backend, 4, Metric::Cosine, HnswParams::default());
            assert!(idx.search(&[1.0, 0.0, 0.0, 0.0], 3).unwrap().is_empty());
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut idx = AnyIndex::new(Backend::Hnsw, 4, Metric::Cosine, HnswParams::default());
        match idx.add("a", &[1.0, 2.0]) {
            Err(IndexError::DimensionMismatch { expected: 4, actual: 2 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ten_thousand_entries_counted() {
        let mut idx = AnyIndex::new(Backend::Hnsw, 8, Metric::Cosine, HnswParams { ef_construction: 32, ..Default::default() });
        for i in 0..10_000u32 {
            let v: Vec<f32> = (0..8).map(|j| ((i * 31 + j * 7) % 97) as f32 - 48.0).collect();
            idx.add(&i.to_string(), &v).unwrap();
        }
        assert_eq!(idx.len(), 10_000);
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f32> = (0..37).map(|i| i as f32 * 0.1).collect();
        let b: Vec<f32> = (0..37).map(|i| 1.0 - i as f32 * 0.05).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| (*x as f64) * (*y as f64)).sum();
        assert!((dot(&a, &b) as f64 - naive).abs() < 1e-4);
        assert_eq!(dot(&a, &b).to_bits(), dot_lanes(&a, &b).to_bits());
    }
}
