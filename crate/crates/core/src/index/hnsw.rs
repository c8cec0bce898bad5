//! Hierarchical navigable small-world graph.
//!
//! Node levels come from a counter-keyed hash of the build seed, so the
//! same insertion sequence always yields the same graph. Re-adding a
//! `doc_id` tombstones the old node (it still routes searches but is never
//! returned) and inserts a fresh one.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};

use serde::{Deserialize, Serialize};

use super::{dot, finalize, prepare, IndexError, Metric, ScoredDoc, VectorIndex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Max links per node on upper layers; layer 0 allows twice this.
    pub m: usize,
    pub ef_construction: usize,
    pub ef_search: usize,
    pub seed: u64,
}

impl Default for HnswParams {
    fn default() -> Self {
        Self { m: 16, ef_construction: 100, ef_search: 1280, seed: 0x5EED }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Node {
    pub doc_id: String,
    pub vector: Vec<f32>,
    pub deleted: bool,
    /// `links[layer]` for `layer in 0..=level`.
    pub links: Vec<Vec<u32>>,
}

impl Node {
    fn level(&self) -> usize {
        self.links.len() - 1
    }
}

/// Max-heap key: higher similarity first, lower node id on ties.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Cand {
    sim: f32,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sim.total_cmp(&other.sim).then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Visited(Vec<u64>);

impl Visited {
    fn new(n: usize) -> Self {
        Self(vec![0; n.div_ceil(64)])
    }

    /// True if `id` was not yet marked.
    fn insert(&mut self, id: u32) -> bool {
        let (w, b) = ((id / 64) as usize, id % 64);
        let fresh = self.0[w] & (1 << b) == 0;
        self.0[w] |= 1 << b;
        fresh
    }
}

#[derive(Debug, Clone)]
pub struct HnswIndex {
    pub(crate) dimension: usize,
    pub(crate) metric: Metric,
    pub(crate) params: HnswParams,
    pub(crate) nodes: Vec<Node>,
    pub(crate) by_doc: HashMap<String, u32>,
    pub(crate) entry: Option<u32>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl HnswIndex {
    pub fn new(dimension: usize, metric: Metric, params: HnswParams) -> Self {
        assert!(params.m >= 2, "HNSW needs m >= 2");
        Self { dimension, metric, params, nodes: Vec::new(), by_doc: HashMap::new(), entry: None }
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
    }

    pub fn set_ef_search(&mut self, ef: usize) {
        self.params.ef_search = ef.max(1);
    }

    fn max_links(&self, layer: usize) -> usize {
        if layer == 0 {
            self.params.m * 2
        } else {
            self.params.m
        }
    }

    fn draw_level(&self, counter: u64) -> usize {
        let h = splitmix64(self.params.seed ^ splitmix64(counter));
        // uniform in (0, 1]
        let u = ((h >> 11) as f64 + 1.0) / (1u64 << 53) as f64;
        let ml = 1.0 / (self.params.m as f64).ln();
        ((-u.ln()) * ml).floor().min(32.0) as usize
    }

    fn sim(&self, q: &[f32], id: u32) -> f32 {
        dot(q, &self.nodes[id as usize].vector)
    }

    fn greedy_closest(&self, q: &[f32], mut cur: u32, layer: usize) -> u32 {
        let mut best = self.sim(q, cur);
        loop {
            let mut changed = false;
            for &nb in &self.nodes[cur as usize].links[layer] {
                let s = self.sim(q, nb);
                if s > best || (s == best && nb < cur) {
                    best = s;
                    cur = nb;
                    changed = true;
                }
            }
            if !changed {
                return cur;
            }
        }
    }

    /// Best-first beam search on one layer; returns up to `ef` candidates,
    /// best first.
    fn search_layer(&self, q: &[f32], entries: &[u32], ef: usize, layer: usize) -> Vec<Cand> {
        let mut visited = Visited::new(self.nodes.len());
        let mut frontier: BinaryHeap<Cand> = BinaryHeap::new();
        let mut found: BinaryHeap<Reverse<Cand>> = BinaryHeap::new();
        for &e in entries {
            if visited.insert(e) {
                let c = Cand { sim: self.sim(q, e), id: e };
                frontier.push(c);
                found.push(Reverse(c));
            }
        }
        while found.len() > ef {
            found.pop();
        }
        while let Some(c) = frontier.pop() {
            let worst = found.peek().map(|r| r.0).expect("non-empty");
            if c.sim < worst.sim && found.len() >= ef {
                break;
            }
            for &nb in &self.nodes[c.id as usize].links[layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let cand = Cand { sim: self.sim(q, nb), id: nb };
                let worst = found.peek().map(|r| r.0).expect("non-empty");
                if found.len() < ef || cand > worst {
                    frontier.push(cand);
                    found.push(Reverse(cand));
                    if found.len() > ef {
                        found.pop();
                    }
                }
            }
        }
        let mut out: Vec<Cand> = found.into_iter().map(|r| r.0).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    /// Neighbor-diversity heuristic: keep a candidate only if it is closer
    /// to the base than to every neighbor already kept; pad with the
    /// skipped ones if fewer than `limit` survive.
    fn select_neighbors(&self, sorted: &[Cand], limit: usize) -> Vec<u32> {
        let mut kept: Vec<Cand> = Vec::with_capacity(limit);
        let mut skipped = Vec::new();
        for &c in sorted {
            if kept.len() >= limit {
                break;
            }
            let vc = &self.nodes[c.id as usize].vector;
            let diverse = kept.iter().all(|k| dot(vc, &self.nodes[k.id as usize].vector) < c.sim);
            if diverse {
                kept.push(c);
            } else {
                skipped.push(c);
            }
        }
        for c in skipped {
            if kept.len() >= limit {
                break;
            }
            kept.push(c);
        }
        kept.into_iter().map(|c| c.id).collect()
    }

    fn shrink_links(&mut self, id: u32, layer: usize) {
        let limit = self.max_links(layer);
        if self.nodes[id as usize].links[layer].len() <= limit {
            return;
        }
        let base = self.nodes[id as usize].vector.clone();
        let mut cands: Vec<Cand> = self.nodes[id as usize].links[layer]
            .iter()
            .map(|&nb| Cand { sim: dot(&base, &self.nodes[nb as usize].vector), id: nb })
            .collect();
        cands.sort_by(|a, b| b.cmp(a));
        let chosen = self.select_neighbors(&cands, limit);
        self.nodes[id as usize].links[layer] = chosen;
    }

    fn insert_node(&mut self, doc_id: String, vector: Vec<f32>) -> u32 {
        let id = self.nodes.len() as u32;
        let level = self.draw_level(id as u64);
        self.nodes.push(Node { doc_id, vector, deleted: false, links: vec![Vec::new(); level + 1] });

        let Some(entry) = self.entry else {
            self.entry = Some(id);
            return id;
        };
        let q = self.nodes[id as usize].vector.clone();
        let top = self.nodes[entry as usize].level();
        let mut cur = entry;
        for layer in (level + 1..=top).rev() {
            cur = self.greedy_closest(&q, cur, layer);
        }
        let mut entries = vec![cur];
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&q, &entries, self.params.ef_construction, layer);
            let chosen = self.select_neighbors(&found, self.params.m);
            for &nb in &chosen {
                self.nodes[nb as usize].links[layer].push(id);
                self.shrink_links(nb, layer);
            }
            self.nodes[id as usize].links[layer] = chosen;
            entries = found.iter().map(|c| c.id).collect();
        }
        if level > top {
            self.entry = Some(id);
        }
        id
    }

    pub(crate) fn from_parts(
        dimension: usize,
        metric: Metric,
        params: HnswParams,
        nodes: Vec<Node>,
        entry: Option<u32>,
    ) -> Result<Self, IndexError> {
        let n = nodes.len() as u32;
        let mut by_doc = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.vector.len() != dimension {
                return Err(IndexError::Format(format!("node {i} has dimension {}", node.vector.len())));
            }
            if node.links.is_empty() || node.links.iter().flatten().any(|&l| l >= n) {
                return Err(IndexError::Format(format!("node {i} has invalid links")));
            }
            if !node.deleted && by_doc.insert(node.doc_id.clone(), i as u32).is_some() {
                return Err(IndexError::Format(format!("duplicate live doc_id {}", node.doc_id)));
            }
        }
        if entry.is_some_and(|e| e >= n) || (entry.is_none() && n > 0) {
            return Err(IndexError::Format("bad entry point".into()));
        }
        Ok(Self { dimension, metric, params, nodes, by_doc, entry })
    }
}

impl VectorIndex for HnswIndex {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn metric(&self) -> Metric {
        self.metric
    }

    fn len(&self) -> usize {
        self.by_doc.len()
    }

    fn add(&mut self, doc_id: &str, vector: &[f32]) -> Result<(), IndexError> {
        let v = prepare(self.metric, self.dimension, vector)?;
        if let Some(old) = self.by_doc.remove(doc_id) {
            self.nodes[old as usize].deleted = true;
        }
        let id = self.insert_node(doc_id.to_string(), v);
        self.by_doc.insert(doc_id.to_string(), id);
        Ok(())
    }

    fn search(&self, query: &[f32], k: usize) -> Result<Vec<ScoredDoc>, IndexError> {
        let q = prepare(self.metric, self.dimension, query)?;
        let Some(entry) = self.entry else {
            return Ok(Vec::new());
        };
        if k == 0 {
            return Ok(Vec::new());
        }
        let top = self.nodes[entry as usize].level();
        let mut cur = entry;
        for layer in (1..=top).rev() {
            cur = self.greedy_closest(&q, cur, layer);
        }
        let tombstones = self.nodes.len() - self.by_doc.len();
        let ef = self.params.ef_search.max(k) + tombstones.min(self.params.ef_search);
        let found = self.search_layer(&q, &[cur], ef, 0);
        let hits = found
            .into_iter()
            .filter(|c| !self.nodes[c.id as usize].deleted)
            .map(|c| ScoredDoc { doc_id: self.nodes[c.id as usize].doc_id.clone(), score: c.sim as f64 });
        Ok(finalize(hits.collect(), k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::ExactIndex;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
        let v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn self_match_ranks_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut idx = HnswIndex::new(32, Metric::Cosine, HnswParams::default());
        let vs: Vec<_> = (0..200).map(|_| random_unit(&mut rng, 32)).collect();
        for (i, v) in vs.iter().enumerate() {
            idx.add(&format!("d{i:03}"), v).unwrap();
        }
        for (i, v) in vs.iter().enumerate().step_by(17) {
            let hits = idx.search(v, 3).unwrap();
            assert_eq!(hits[0].doc_id, format!("d{i:03}"));
            assert!((hits[0].score - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn replace_hides_old_vector() {
        let mut idx = HnswIndex::new(3, Metric::Cosine, HnswParams::default());
        idx.add("a", &[1.0, 0.0, 0.0]).unwrap();
        idx.add("b", &[0.0, 1.0, 0.0]).unwrap();
        idx.add("a", &[0.0, 0.0, 1.0]).unwrap();
        assert_eq!(idx.len(), 2);
        let hits = idx.search(&[1.0, 0.0, 0.0], 5).unwrap();
        assert_eq!(hits.len(), 2);
        assert!(hits.iter().all(|h| h.score < 0.5));
        let hits = idx.search(&[0.0, 0.0, 1.0], 1).unwrap();
        assert_eq!(hits[0].doc_id, "a");
    }

    #[test]
    fn recall_on_1000_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let dim = 64;
        let mut idx = HnswIndex::new(dim, Metric::Cosine, HnswParams::default());
        let mut exact = ExactIndex::new(dim, Metric::Cosine);
        for i in 0..1000 {
            let v = random_unit(&mut rng, dim);
            idx.add(&format!("{i:04}"), &v).unwrap();
            exact.add(&format!("{i:04}"), &v).unwrap();
        }
        let mut hit = 0;
        let mut total = 0;
        for _ in 0..50 {
            let q = random_unit(&mut rng, dim);
            let want: HashSet<_> = exact.search(&q, 10).unwrap().into_iter().map(|h| h.doc_id).collect();
            let got = idx.search(&q, 10).unwrap();
            hit += got.iter().filter(|h| want.contains(&h.doc_id)).count();
            total += want.len();
        }
        let recall = hit as f64 / total as f64;
        assert!(recall >= 0.95, "recall {recall}");
    }

    #[test]
    fn build_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vs: Vec<_> = (0..300).map(|_| random_unit(&mut rng, 16)).collect();
        let build = || {
            let mut idx = HnswIndex::new(16, Metric::Cosine, HnswParams::default());
            for (i, v) in vs.iter().enumerate() {
                idx.add(&i.to_string(), v).unwrap();
            }
            idx
        };
        let (a, b) = (build(), build());
        assert_eq!(a.nodes, b.nodes);
        assert_eq!(a.search(&vs[3], 10).unwrap(), b.search(&vs[3], 10).unwrap());
    }
}
