//! On-disk index container.
//!
//! ```text
//! magic    8 bytes  "DSRFIDX\n"
//! version  u32 LE
//! hlen     u32 LE   length of the JSON header
//! header   JSON     backend, dimension, metric, params, entry, node_count, meta
//! nodes    node_count records:
//!            id_len u32, doc_id utf-8, deleted u8, layers u32,
//!            vector f32 x dimension,
//!            per layer: count u32, neighbor ids u32 x count
//! digest   32 bytes SHA-256 of everything above
//! ```

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::hnsw::Node;
use super::{AnyIndex, Backend, ExactIndex, HnswIndex, HnswParams, IndexError, Metric, VectorIndex};

pub const MAGIC: &[u8; 8] = b"DSRFIDX\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    backend: Backend,
    dimension: usize,
    metric: Metric,
    params: HnswParams,
    entry: Option<u32>,
    node_count: usize,
    #[serde(default)]
    meta: serde_json::Value,
}

/// A loaded index plus the caller metadata stored with it.
#[derive(Debug, Clone)]
pub struct IndexFile {
    pub index: AnyIndex,
    pub meta: serde_json::Value,
}

fn encode(index: &AnyIndex, meta: &serde_json::Value) -> Result<Vec<u8>, IndexError> {
    let (params, entry, nodes): (HnswParams, Option<u32>, Vec<(&str, bool, &[f32], &[Vec<u32>])>) = match index {
        AnyIndex::Hnsw(h) => (
            h.params,
            h.entry,
            h.nodes.iter().map(|n| (n.doc_id.as_str(), n.deleted, n.vector.as_slice(), n.links.as_slice())).collect(),
        ),
        AnyIndex::Exact(e) => (
            HnswParams::default(),
            None,
            e.entries().iter().map(|(id, v)| (id.as_str(), false, v.as_slice(), &[][..])).collect(),
        ),
    };
    let header = Header {
        backend: index.backend(),
        dimension: index.dimension(),
        metric: index.metric(),
        params,
        entry,
        node_count: nodes.len(),
        meta: meta.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| IndexError::Format(e.to_string()))?;

    let mut buf = Vec::new();
    buf.write_all(MAGIC)?;
    buf.write_u32::<LE>(FORMAT_VERSION)?;
    buf.write_u32::<LE>(header.len() as u32)?;
    buf.write_all(&header)?;
    for (doc_id, deleted, vector, links) in nodes {
        buf.write_u32::<LE>(doc_id.len() as u32)?;
        buf.write_all(doc_id.as_bytes())?;
        buf.write_u8(deleted as u8)?;
        buf.write_u32::<LE>(links.len() as u32)?;
        for &x in vector {
            buf.write_f32::<LE>(x)?;
        }
        for layer in links {
            buf.write_u32::<LE>(layer.len() as u32)?;
            for &l in layer {
                buf.write_u32::<LE>(l)?;
            }
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn persist(index: &AnyIndex, meta: &serde_json::Value, path: impl AsRef<Path>) -> Result<(), IndexError> {
    let bytes = encode(index, meta)?;
    let path = path.as_ref();
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

fn fmt_err(msg: impl Into<String>) -> IndexError {
    IndexError::Format(msg.into())
}

fn decode(bytes: &[u8]) -> Result<IndexFile, IndexError> {
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(fmt_err(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(fmt_err("bad magic header"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(fmt_err("checksum mismatch"));
    }
    let mut r = Cursor::new(&body[8..]);
    let version = r.read_u32::<LE>()?;
    if version != FORMAT_VERSION {
        return Err(fmt_err(format!("unsupported version {version}, expected {FORMAT_VERSION}")));
    }
    let hlen = r.read_u32::<LE>()? as usize;
    let mut hbuf = vec![0; hlen];
    r.read_exact(&mut hbuf).map_err(|_| fmt_err("truncated header"))?;
    let header: Header = serde_json::from_slice(&hbuf).map_err(|e| fmt_err(format!("header: {e}")))?;

    let trunc = |_| fmt_err("truncated node table");
    let mut nodes = Vec::with_capacity(header.node_count);
    for _ in 0..header.node_count {
        let len = r.read_u32::<LE>().map_err(trunc)? as usize;
        let mut id = vec![0; len];
        r.read_exact(&mut id).map_err(trunc)?;
        let doc_id = String::from_utf8(id).map_err(|_| fmt_err("doc_id not utf-8"))?;
        let deleted = r.read_u8().map_err(trunc)? != 0;
        let layers = r.read_u32::<LE>().map_err(trunc)? as usize;
        let mut vector = vec![0.0f32; header.dimension];
        r.read_f32_into::<LE>(&mut vector).map_err(trunc)?;
        let mut links = Vec::with_capacity(layers);
        for _ in 0..layers {
            let n = r.read_u32::<LE>().map_err(trunc)? as usize;
            let mut l = vec![0u32; n];
            r.read_u32_into::<LE>(&mut l).map_err(trunc)?;
            links.push(l);
        }
        nodes.push(Node { doc_id, vector, deleted, links });
    }
    if (r.position() as usize) != body.len() - 8 {
        return Err(fmt_err("trailing bytes after node table"));
    }

    let index = match header.backend {
        Backend::Hnsw => AnyIndex::Hnsw(HnswIndex::from_parts(
            header.dimension,
            header.metric,
            header.params,
            nodes,
            header.entry,
        )?),
        Backend::Exact => {
            let mut e = ExactIndex::new(header.dimension, header.metric);
            for n in nodes {
                e.push_prepared(n.doc_id, n.vector)?;
            }
            AnyIndex::Exact(e)
        }
    };
    Ok(IndexFile { index, meta: header.meta })
}

pub fn load(path: impl AsRef<Path>) -> Result<IndexFile, IndexError> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}
