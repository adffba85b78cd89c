//! Business embeddings: co-occurrence graph random-walk embeddings and a
//! deterministic structured-attribute featurizer, kept behind pluggable
//! per-modality maps.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LumError, Result};
use crate::tensor::sigmoid_f;
use crate::timestamp::TokenSequence;

/// behavior_id -> embedding vector.
pub type BusinessEmbedding = BTreeMap<String, Vec<f64>>;

// ---------------------------------------------------------------------------
// Co-occurrence graph
// ---------------------------------------------------------------------------

/// Undirected weighted behavior graph; weight counts (user, interval) pairs
/// in which both behaviors occurred.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CoOccurrenceGraph {
    pub nodes: Vec<String>,
    /// Edge weights keyed by (min_index, max_index).
    pub edges: BTreeMap<(usize, usize), u64>,
}

impl CoOccurrenceGraph {
    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.binary_search_by(|n| n.as_str().cmp(id)).ok()
    }

    pub fn neighbors(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (&(a, b), &w) in &self.edges {
            adj[a].push((b, w as f64));
            adj[b].push((a, w as f64));
        }
        for list in adj.iter_mut() {
            list.sort_by_key(|&(n, _)| n);
        }
        adj
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::new();
        for (&(a, b), &w) in &self.edges {
            out.push_str(&format!("{}\t{}\t{}\n", self.nodes[a], self.nodes[b], w));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Count behavior co-occurrences within the same (user, interval) pair.
pub fn build_cooccurrence_graph(sequences: &[(String, TokenSequence)]) -> CoOccurrenceGraph {
    let mut node_set: BTreeSet<String> = BTreeSet::new();
    for (_, seq) in sequences {
        for (id, _) in seq.behaviors() {
            node_set.insert(id.to_string());
        }
    }
    let nodes: Vec<String> = node_set.into_iter().collect();
    let index: BTreeMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut edges: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for (_, seq) in sequences {
        // Distinct behaviors per interval for this user.
        let mut per_interval: BTreeMap<u64, BTreeSet<usize>> = BTreeMap::new();
        for (id, tid) in seq.behaviors() {
            per_interval.entry(tid).or_default().insert(index[id]);
        }
        for members in per_interval.values() {
            let list: Vec<usize> = members.iter().copied().collect();
            for i in 0..list.len() {
                for j in (i + 1)..list.len() {
                    *edges.entry((list[i], list[j])).or_insert(0) += 1;
                }
            }
        }
    }
    CoOccurrenceGraph { nodes, edges }
}

// ---------------------------------------------------------------------------
// Biased random-walk embedding
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WalkConfig {
    pub dims: usize,
    pub walks_per_node: usize,
    pub walk_length: usize,
    pub window: usize,
    pub p: f64,
    pub q: f64,
    pub negatives: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for WalkConfig {
    fn default() -> WalkConfig {
        WalkConfig {
            dims: 32,
            walks_per_node: 10,
            walk_length: 40,
            window: 5,
            p: 1.0,
            q: 0.5,
            negatives: 5,
            epochs: 3,
            learning_rate: 0.025,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct WalkReport {
    pub isolated_nodes: Vec<String>,
}

/// One step of a second-order biased walk (return parameter p, in-out
/// parameter q). `prev` is None at the start of a walk.
pub(crate) fn biased_step(
    adj: &[Vec<(usize, f64)>],
    prev: Option<usize>,
    cur: usize,
    p: f64,
    q: f64,
    rng: &mut ChaCha8Rng,
) -> Option<usize> {
    let neigh = &adj[cur];
    if neigh.is_empty() {
        return None;
    }
    let weights: Vec<f64> = neigh
        .iter()
        .map(|&(x, w)| {
            let bias = match prev {
                None => 1.0,
                Some(t) if x == t => 1.0 / p,
                Some(t) => {
                    if adj[t].binary_search_by_key(&x, |&(n, _)| n).is_ok() {
                        1.0
                    } else {
                        1.0 / q
                    }
                }
            };
            w * bias
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if draw < *w {
            return Some(neigh[i].0);
        }
        draw -= w;
    }
    Some(neigh[neigh.len() - 1].0)
}

/// Skip-gram-with-negative-sampling embedding trained on biased random
/// walks. Deterministic under a fixed seed; isolated nodes keep their
/// initialization and are listed in the report.
pub fn random_walk_embed(
    graph: &CoOccurrenceGraph,
    cfg: &WalkConfig,
) -> Result<(BusinessEmbedding, WalkReport)> {
    if graph.nodes.is_empty() {
        return Err(LumError::Validation("empty graph".into()));
    }
    if cfg.p <= 0.0 || cfg.q <= 0.0 {
        return Err(LumError::Config("walk parameters p, q must be positive".into()));
    }
    let n = graph.nodes.len();
    let adj = graph.neighbors();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let bound = 0.5 / cfg.dims as f64;
    let mut emb_in: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..cfg.dims).map(|_| rng.gen_range(-bound..bound)).collect())
        .collect();
    let mut emb_out: Vec<Vec<f64>> = vec![vec![0.0; cfg.dims]; n];

    // Unigram^0.75 negative table over node degrees.
    let degree: Vec<f64> = adj.iter().map(|l| l.iter().map(|&(_, w)| w).sum::<f64>()).collect();
    let pow: Vec<f64> = degree.iter().map(|d| d.max(1e-12).powf(0.75)).collect();
    let pow_total: f64 = pow.iter().sum();

    let sample_negative = |rng: &mut ChaCha8Rng| -> usize {
        let mut draw = rng.gen_range(0.0..pow_total);
        for (i, w) in pow.iter().enumerate() {
            if draw < *w {
                return i;
            }
            draw -= w;
        }
        n - 1
    };

    for _epoch in 0..cfg.epochs {
        for start in 0..n {
            for _ in 0..cfg.walks_per_node {
                // Generate the walk.
                let mut walk = vec![start];
                let mut prev = None;
                let mut cur = start;
                for _ in 1..cfg.walk_length {
                    match biased_step(&adj, prev, cur, cfg.p, cfg.q, &mut rng) {
                        Some(next) => {
                            walk.push(next);
                            prev = Some(cur);
                            cur = next;
                        }
                        None => break,
                    }
                }
                // Skip-gram updates over the window.
                for (i, &center) in walk.iter().enumerate() {
                    let lo = i.saturating_sub(cfg.window);
                    let hi = (i + cfg.window + 1).min(walk.len());
                    for (j, &ctx) in walk.iter().enumerate().take(hi).skip(lo) {
                        if i == j {
                            continue;
                        }
                        sgns_update(
                            &mut emb_in,
                            &mut emb_out,
                            center,
                            ctx,
                            1.0,
                            cfg.learning_rate,
                        );
                        for _ in 0..cfg.negatives {
                            let neg = sample_negative(&mut rng);
                            if neg != ctx {
                                sgns_update(
                                    &mut emb_in,
                                    &mut emb_out,
                                    center,
                                    neg,
                                    0.0,
                                    cfg.learning_rate,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    let mut report = WalkReport::default();
    for (i, list) in adj.iter().enumerate() {
        if list.is_empty() {
            report.isolated_nodes.push(graph.nodes[i].clone());
        }
    }
    let emb: BusinessEmbedding = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, id)| (id.clone(), emb_in[i].clone()))
        .collect();
    for v in emb.values() {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(LumError::Validation("non-finite walk embedding".into()));
        }
    }
    Ok((emb, report))
}

fn sgns_update(
    emb_in: &mut [Vec<f64>],
    emb_out: &mut [Vec<f64>],
    center: usize,
    ctx: usize,
    label: f64,
    lr: f64,
) {
    let score: f64 = emb_in[center]
        .iter()
        .zip(&emb_out[ctx])
        .map(|(a, b)| a * b)
        .sum();
    let g = lr * (label - sigmoid_f(score));
    for d in 0..emb_in[center].len() {
        let ci = emb_in[center][d];
        let co = emb_out[ctx][d];
        emb_in[center][d] += g * co;
        emb_out[ctx][d] += g * ci;
    }
}

// ---------------------------------------------------------------------------
// Attribute table encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Num(f64),
    Cat(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ColumnKind {
    Categorical(Vec<String>),
    Numeric { min: f64, max: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableSchema {
    pub columns: Vec<ColumnSpec>,
}

pub type AttributeTable = BTreeMap<String, BTreeMap<String, AttrValue>>;

/// One-hot categoricals plus min-max-scaled numerics, linearly projected to
/// `dims` with a seed-fixed matrix. External vectors may be slotted in
/// unchanged instead.
pub fn encode_table(
    table: &AttributeTable,
    schema: &TableSchema,
    dims: usize,
    seed: u64,
    external: Option<&BusinessEmbedding>,
) -> Result<BusinessEmbedding> {
    if let Some(ext) = external {
        return Ok(ext.clone());
    }
    let width: usize = schema
        .columns
        .iter()
        .map(|c| match &c.kind {
            ColumnKind::Categorical(vocab) => vocab.len(),
            ColumnKind::Numeric { .. } => 1,
        })
        .sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = 1.0 / (width.max(1) as f64).sqrt();
    let proj: Vec<f64> = (0..width * dims).map(|_| rng.gen_range(-bound..bound)).collect();

    let mut out = BusinessEmbedding::new();
    for (id, record) in table {
        let mut feat = Vec::with_capacity(width);
        for col in &schema.columns {
            let value = record.get(&col.name).ok_or_else(|| {
                LumError::Schema(format!("record {id} missing column {}", col.name))
            })?;
            match (&col.kind, value) {
                (ColumnKind::Categorical(vocab), AttrValue::Cat(v)) => {
                    let pos = vocab.iter().position(|x| x == v).ok_or_else(|| {
                        LumError::Schema(format!(
                            "unknown value '{v}' for column {} in record {id}",
                            col.name
                        ))
                    })?;
                    for i in 0..vocab.len() {
                        feat.push(if i == pos { 1.0 } else { 0.0 });
                    }
                }
                (ColumnKind::Numeric { min, max }, AttrValue::Num(v)) => {
                    let span = (max - min).max(1e-12);
                    feat.push(((v - min) / span).clamp(0.0, 1.0));
                }
                _ => {
                    return Err(LumError::Schema(format!(
                        "type mismatch for column {} in record {id}",
                        col.name
                    )))
                }
            }
        }
        let vec: Vec<f64> = (0..dims)
            .map(|d| feat.iter().enumerate().map(|(w, f)| f * proj[w * dims + d]).sum())
            .collect();
        out.insert(id.clone(), vec);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Modality combination
// ---------------------------------------------------------------------------

/// Keep per-modality vectors separate as distinct cross-attention keys.
pub fn combine_modalities(
    catalog_ids: &[String],
    modalities: &[&BusinessEmbedding],
) -> Result<BTreeMap<String, Vec<Vec<f64>>>> {
    let mut missing = Vec::new();
    for id in catalog_ids {
        for m in modalities {
            if !m.contains_key(id) {
                missing.push(id.clone());
                break;
            }
        }
    }
    if !missing.is_empty() {
        return Err(LumError::Coverage(missing));
    }
    Ok(catalog_ids
        .iter()
        .map(|id| {
            (
                id.clone(),
                modalities.iter().map(|m| m[id].clone()).collect(),
            )
        })
        .collect())
}

pub fn save_embedding(emb: &BusinessEmbedding, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string(emb)?)?;
    Ok(())
}

pub fn load_embedding(path: &std::path::Path) -> Result<BusinessEmbedding> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
