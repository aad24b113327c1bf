//! Bounded per-target computation subgraphs: similarity-ranked history for
//! transaction nodes and typed fan-outs for everything else.
//!
//! Sampling preserves the relative edge order of the full graph, so when
//! fan-outs exceed true degrees the sampled subgraph reproduces full-graph
//! message passing bitwise at the target.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{HeteroGraph, NodeType, Relation, NODE_TYPES, REL_CAT_TXN, REL_HISTORY, REL_TXN_CAT};
use crate::tensor::{norm, Matrix, Real};

#[derive(Clone, Debug)]
pub struct FanoutConfig {
    /// Max in-neighbors per relation per hop (history relation excluded).
    pub per_relation: usize,
    /// Top-K similar historical transactions per transaction node.
    pub history_k: usize,
    /// Hops of expansion; matches the GNN layer count.
    pub num_hops: usize,
    /// Rank history by text-embedding similarity; false samples uniformly
    /// (the ablation arm).
    pub similarity_sampling: bool,
}

impl Default for FanoutConfig {
    fn default() -> Self {
        FanoutConfig {
            per_relation: 128,
            history_k: 16,
            num_hops: 2,
            similarity_sampling: true,
        }
    }
}

/// Exhaustive exact top-k by cosine similarity, descending; ties break by
/// ascending history index.
pub fn top_k_similar_history<T: Real>(
    target_emb: &[T],
    history_embs: &Matrix<T>,
    k: usize,
) -> Result<Vec<(usize, T)>> {
    assert!(k >= 1, "k must be >= 1");
    if norm(target_emb) == T::zero() {
        return Err(Error::ZeroNormEmbedding { row: 0 });
    }
    let mut scored = Vec::with_capacity(history_embs.rows());
    for i in 0..history_embs.rows() {
        let row = history_embs.row(i);
        let sim = crate::tensor::cosine(target_emb, row)
            .ok_or(Error::ZeroNormEmbedding { row: i })?;
        scored.push((i, sim));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k);
    Ok(scored)
}

/// Transactions with a category link (in either direction).
pub fn categorized_mask(g: &HeteroGraph) -> Vec<bool> {
    let mut mask = vec![false; g.node_count(NodeType::Transaction)];
    for &(t, _) in g.edge_list(REL_TXN_CAT) {
        mask[t as usize] = true;
    }
    for &(_, t) in g.edge_list(REL_CAT_TXN) {
        mask[t as usize] = true;
    }
    mask
}

/// Same-company categorized transactions strictly older than the target,
/// in chronological order.
pub fn history_candidates(g: &HeteroGraph, target: u32, categorized: &[bool]) -> Vec<u32> {
    g.company_peers(target)
        .iter()
        .copied()
        .filter(|&o| {
            o != target
                && categorized[o as usize]
                && g.txn_order[o as usize] < g.txn_order[target as usize]
        })
        .collect()
}

/// Pick this target's history in-neighbors, most relevant first. With
/// similarity sampling the ranking is exact cosine over text features;
/// otherwise a uniform draw keeps chronological order.
fn select_history(
    g: &HeteroGraph,
    target: u32,
    candidates: &[u32],
    fanout: &FanoutConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    if candidates.is_empty() {
        return Vec::new();
    }
    if fanout.similarity_sampling {
        let feats = &g.node_features[&NodeType::Transaction];
        let mut hist = Matrix::zeros(candidates.len(), feats.cols());
        for (r, &c) in candidates.iter().enumerate() {
            hist.row_mut(r).copy_from_slice(feats.row(c as usize));
        }
        let ranked = top_k_similar_history(feats.row(target as usize), &hist, fanout.history_k)
            .unwrap_or_default();
        ranked.into_iter().map(|(i, _)| candidates[i]).collect()
    } else if candidates.len() <= fanout.history_k {
        candidates.to_vec()
    } else {
        let mut picks: Vec<usize> = (0..candidates.len()).collect();
        picks.shuffle(rng);
        picks.truncate(fanout.history_k);
        picks.sort_unstable();
        picks.into_iter().map(|i| candidates[i]).collect()
    }
}

/// Materialize the history relation for every transaction node of the
/// training graph: per target, its selected history as (src, dst) edges in
/// relevance order. Returns a graph whose edge map carries the relation.
pub fn materialize_history_edges(g: &HeteroGraph, fanout: &FanoutConfig, rng_seed: u64) -> HeteroGraph {
    assert!(g.two_hop, "augment_two_hop must run first");
    let categorized = categorized_mask(g);
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut edges = Vec::new();
    for t in 0..g.node_count(NodeType::Transaction) as u32 {
        let candidates = history_candidates(g, t, &categorized);
        for src in select_history(g, t, &candidates, fanout, &mut rng) {
            edges.push((src, t));
        }
    }
    let mut out = g.clone();
    out.edges.insert(REL_HISTORY, std::sync::Arc::new(edges));
    out
}

/// In-adjacency lists per relation, in full edge-list order. Built once per
/// graph and shared across subgraph constructions.
pub struct InAdjacency {
    per_relation: BTreeMap<Relation, Vec<Vec<u32>>>,
}

impl InAdjacency {
    pub fn build(g: &HeteroGraph) -> Self {
        let mut per_relation = BTreeMap::new();
        for (&rel, pairs) in &g.edges {
            if rel == REL_HISTORY {
                continue; // expanded intensionally per target
            }
            let mut adj = vec![Vec::new(); g.node_count(rel.dst)];
            for &(s, d) in pairs.iter() {
                adj[d as usize].push(s);
            }
            per_relation.insert(rel, adj);
        }
        InAdjacency { per_relation }
    }

    fn in_neighbors(&self, rel: Relation, node: u32) -> &[u32] {
        self.per_relation
            .get(&rel)
            .map(|a| a[node as usize].as_slice())
            .unwrap_or(&[])
    }

    pub fn relations(&self) -> impl Iterator<Item = Relation> + '_ {
        self.per_relation.keys().copied()
    }
}

/// A computation subgraph around one target transaction, with node indices
/// remapped to local space.
pub struct EgoSubgraph {
    pub graph: HeteroGraph,
    /// local transaction index of the target
    pub target_local: u32,
    /// per node type, local index -> global index
    pub node_map: BTreeMap<NodeType, Vec<u32>>,
}

/// Expand `num_hops` of in-neighborhoods around the target. History edges
/// come from per-target similarity selection; other relations sample
/// uniformly up to the fan-out, preserving full-graph edge order. The
/// transaction -> category direction never appears (it is dropped upstream
/// and the expansion only follows existing relations).
pub fn build_ego_subgraph(
    g: &HeteroGraph,
    adj: &InAdjacency,
    target_txn: u32,
    fanout: &FanoutConfig,
    rng_seed: u64,
) -> EgoSubgraph {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let categorized = categorized_mask(g);

    // local node registry per type
    let mut locals: BTreeMap<NodeType, Vec<u32>> = BTreeMap::new();
    let mut lookup: BTreeMap<NodeType, HashMap<u32, u32>> = BTreeMap::new();
    for t in NODE_TYPES {
        locals.insert(t, Vec::new());
        lookup.insert(t, HashMap::new());
    }
    let register = |t: NodeType,
                        gidx: u32,
                        locals: &mut BTreeMap<NodeType, Vec<u32>>,
                        lookup: &mut BTreeMap<NodeType, HashMap<u32, u32>>|
     -> u32 {
        let map = lookup.get_mut(&t).unwrap();
        if let Some(&l) = map.get(&gidx) {
            return l;
        }
        let list = locals.get_mut(&t).unwrap();
        let l = list.len() as u32;
        list.push(gidx);
        map.insert(gidx, l);
        l
    };

    let target_local = register(NodeType::Transaction, target_txn, &mut locals, &mut lookup);
    let mut frontier: Vec<(NodeType, u32)> = vec![(NodeType::Transaction, target_txn)];
    let mut edges: BTreeMap<Relation, Vec<(u32, u32)>> = BTreeMap::new();
    let relations: Vec<Relation> = adj.relations().collect();

    for _hop in 0..fanout.num_hops {
        let mut next = Vec::new();
        for &(ntype, gnode) in &frontier {
            let dst_local = lookup[&ntype][&gnode];
            for &rel in relations.iter().filter(|r| r.dst == ntype) {
                let neigh = adj.in_neighbors(rel, gnode);
                let chosen: Vec<u32> = if neigh.len() <= fanout.per_relation {
                    neigh.to_vec()
                } else {
                    let mut picks: Vec<usize> = (0..neigh.len()).collect();
                    picks.shuffle(&mut rng);
                    picks.truncate(fanout.per_relation);
                    picks.sort_unstable();
                    picks.into_iter().map(|i| neigh[i]).collect()
                };
                for src in chosen {
                    let was_new = !lookup[&rel.src].contains_key(&src);
                    let src_local = register(rel.src, src, &mut locals, &mut lookup);
                    edges.entry(rel).or_default().push((src_local, dst_local));
                    if was_new {
                        next.push((rel.src, src));
                    }
                }
            }
            // intensional history relation
            if ntype == NodeType::Transaction && g.two_hop {
                let candidates = history_candidates(g, gnode, &categorized);
                for src in select_history(g, gnode, &candidates, fanout, &mut rng) {
                    let was_new = !lookup[&NodeType::Transaction].contains_key(&src);
                    let src_local = register(NodeType::Transaction, src, &mut locals, &mut lookup);
                    edges
                        .entry(REL_HISTORY)
                        .or_default()
                        .push((src_local, dst_local));
                    if was_new {
                        next.push((NodeType::Transaction, src));
                    }
                }
            }
        }
        frontier = next;
    }

    // subset features and metadata in local order
    let mut node_ids = BTreeMap::new();
    let mut node_features = BTreeMap::new();
    for t in NODE_TYPES {
        let list = &locals[&t];
        let ids = list
            .iter()
            .map(|&gidx| g.node_ids[&t][gidx as usize].clone())
            .collect();
        let full = &g.node_features[&t];
        let mut feats = Matrix::zeros(list.len(), full.cols());
        for (r, &gidx) in list.iter().enumerate() {
            feats.row_mut(r).copy_from_slice(full.row(gidx as usize));
        }
        node_ids.insert(t, ids);
        node_features.insert(t, std::sync::Arc::new(feats));
    }
    let txn_list = &locals[&NodeType::Transaction];
    let company_of = txn_list
        .iter()
        .map(|&gidx| {
            let gcomp = g.company_of[gidx as usize];
            lookup[&NodeType::Company].get(&gcomp).copied().unwrap_or(0)
        })
        .collect();
    let txn_order = txn_list
        .iter()
        .map(|&gidx| g.txn_order[gidx as usize])
        .collect();

    let graph = HeteroGraph {
        node_ids,
        node_features,
        edges: edges
            .into_iter()
            .map(|(k, v)| (k, std::sync::Arc::new(v)))
            .collect(),
        company_of,
        txn_order,
        company_txns: vec![Vec::new(); locals[&NodeType::Company].len()],
        two_hop: false,
    };
    EgoSubgraph {
        graph,
        target_local,
        node_map: locals,
    }
}
