//! Knowledge base: document store plus vector index, queried by text.

use std::collections::HashMap;
use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, EmbedderSpec, SharedEmbedder};
use crate::index::{self, AnyIndex, Backend, HnswParams, IndexError, Metric, VectorIndex};
use crate::ingest::{read_documents, IngestError, KbDocument};

#[derive(Debug, Error)]
pub enum KbError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("index metadata: {0}")]
    Meta(String),
    #[error("index built with {built:?} but querying with {query:?}")]
    EmbedderMismatch { built: EmbedderSpec, query: EmbedderSpec },
    #[error("document `{0}` is indexed but missing from the document store")]
    MissingDocument(String),
    /// A failure reproduced from a recorded run.
    #[error("{0}")]
    Replayed(String),
}

/// A retrieved document, in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedDoc {
    pub doc_id: String,
    pub score: f64,
    pub text: String,
}

pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievedDoc>, KbError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    pub backend: Backend,
    pub metric: Metric,
    pub hnsw: HnswParams,
}

#[derive(Debug, Serialize, Deserialize)]
struct KbMeta {
    embedder: EmbedderSpec,
    documents: PathBuf,
    doc_count: usize,
}

#[derive(Debug)]
pub struct KnowledgeBase {
    embedder: SharedEmbedder,
    index: AnyIndex,
    docs: HashMap<String, String>,
}

impl KnowledgeBase {
    /// Embed every document (in parallel; order does not affect the result)
    /// and insert them in input order.
    pub fn build(docs: &[KbDocument], embedder: SharedEmbedder, cfg: &IndexConfig) -> Result<Self, KbError> {
        let vectors: Vec<_> = docs.par_iter().map(|d| embedder.embed(&d.text)).collect::<Result<_, _>>()?;
        let mut index = AnyIndex::new(cfg.backend, embedder.dimension(), cfg.metric, cfg.hnsw);
        for (d, v) in docs.iter().zip(&vectors) {
            index.add(&d.doc_id, v.values())?;
        }
        let docs = docs.iter().map(|d| (d.doc_id.clone(), d.text.clone())).collect();
        Ok(Self { embedder, index, docs })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn index(&self) -> &AnyIndex {
        &self.index
    }

    pub fn index_mut(&mut self) -> &mut AnyIndex {
        &mut self.index
    }

    /// Write the index to `index_path`, recording `documents` (the NDJSON
    /// file the documents came from) so [`open`](Self::open) can find them.
    pub fn save(&self, index_path: impl AsRef<Path>, documents: impl AsRef<Path>) -> Result<(), KbError> {
        let documents = fs::canonicalize(documents.as_ref()).unwrap_or_else(|_| documents.as_ref().to_path_buf());
        let meta = KbMeta { embedder: self.embedder.spec(), documents, doc_count: self.docs.len() };
        let meta = serde_json::to_value(&meta).map_err(|e| KbError::Meta(e.to_string()))?;
        index::persist(&self.index, &meta, index_path)?;
        Ok(())
    }

    /// The embedder spec an index file was built with.
    pub fn stored_spec(index_path: impl AsRef<Path>) -> Result<EmbedderSpec, KbError> {
        let file = index::load(index_path)?;
        let meta: KbMeta = serde_json::from_value(file.meta).map_err(|e| KbError::Meta(e.to_string()))?;
        Ok(meta.embedder)
    }

    /// Load an index and its documents. `documents` overrides the path
    /// stored at build time.
    pub fn open(index_path: impl AsRef<Path>, documents: Option<&Path>, embedder: SharedEmbedder) -> Result<Self, KbError> {
        let file = index::load(index_path.as_ref())?;
        let meta: KbMeta = serde_json::from_value(file.meta).map_err(|e| KbError::Meta(e.to_string()))?;
        if meta.embedder != embedder.spec() {
            return Err(KbError::EmbedderMismatch { built: meta.embedder, query: embedder.spec() });
        }
        let path = documents.map(Path::to_path_buf).unwrap_or(meta.documents);
        let reader = BufReader::new(fs::File::open(&path).map_err(IngestError::Io)?);
        let docs: HashMap<String, String> =
            read_documents(reader)?.into_iter().map(|d| (d.doc_id, d.text)).collect();
        Ok(Self { embedder, index: file.index, docs })
    }
}

impl Retriever for KnowledgeBase {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievedDoc>, KbError> {
        if k == 0 {
            return Err(KbError::ZeroK);
        }
        let q = self.embedder.embed(query)?;
        self.index
            .search(q.values(), k)?
            .into_iter()
            .map(|hit| {
                let text = self.docs.get(&hit.doc_id).ok_or_else(|| KbError::MissingDocument(hit.doc_id.clone()))?;
                Ok(RetrievedDoc { doc_id: hit.doc_id, score: hit.score, text: text.clone() })
            })
            .collect()
    }
}

/// Retriever that answers from a fixed table, used for replays and tests.
#[derive(Debug, Clone, Default)]
pub struct FixedRetriever {
    pub answers: HashMap<String, Vec<RetrievedDoc>>,
}

impl Retriever for FixedRetriever {
    fn retrieve(&self, query: &str, k: usize) -> Result<Vec<RetrievedDoc>, KbError> {
        if k == 0 {
            return Err(KbError::ZeroK);
        }
        let mut out = self.answers.get(query).cloned().unwrap_or_default();
        out.truncate(k);
        Ok(out)
    }
}
