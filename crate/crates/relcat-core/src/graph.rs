//! Conversion of the relational database into a typed heterogeneous graph,
//! plus the graph surgeries used for training and serving: same-company
//! transaction augmentation, dropping incoming category edges, and masking
//! supervision edges out of the message-passing structure.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::store::{self, RelationalDatabase};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeType {
    Transaction,
    Category,
    Code,
    Company,
}

pub const NODE_TYPES: [NodeType; 4] = [
    NodeType::Transaction,
    NodeType::Category,
    NodeType::Code,
    NodeType::Company,
];

impl NodeType {
    pub fn table_name(self) -> &'static str {
        match self {
            NodeType::Transaction => store::TABLE_TRANSACTION,
            NodeType::Category => store::TABLE_CATEGORY,
            NodeType::Code => store::TABLE_CODE,
            NodeType::Company => store::TABLE_COMPANY,
        }
    }

    pub fn from_table(name: &str) -> Option<NodeType> {
        NODE_TYPES.iter().copied().find(|t| t.table_name() == name)
    }
}

impl fmt::Display for NodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.table_name())
    }
}

/// Directed relation type: messages flow src -> dst.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Relation {
    pub src: NodeType,
    pub dst: NodeType,
}

impl Relation {
    pub const fn new(src: NodeType, dst: NodeType) -> Self {
        Relation { src, dst }
    }

    pub fn inverse(self) -> Self {
        Relation {
            src: self.dst,
            dst: self.src,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.src, self.dst)
    }
}

/// Transaction history relation introduced by the two-hop augmentation.
pub const REL_HISTORY: Relation = Relation::new(NodeType::Transaction, NodeType::Transaction);
/// Supervision relation (transaction -> category) and its inverse.
pub const REL_TXN_CAT: Relation = Relation::new(NodeType::Transaction, NodeType::Category);
pub const REL_CAT_TXN: Relation = Relation::new(NodeType::Category, NodeType::Transaction);

/// Positive-edge mask for one training epoch.
#[derive(Clone, Debug, Default)]
pub struct EdgeMask {
    /// (transaction index, category index) pairs whose edges are hidden.
    pub masked_pairs: Vec<(u32, u32)>,
}

#[derive(Clone)]
pub struct HeteroGraph {
    /// Per node type, the row pks in table order.
    pub node_ids: BTreeMap<NodeType, Vec<String>>,
    /// Per node type, row-aligned feature matrix.
    pub node_features: BTreeMap<NodeType, Arc<Matrix<f32>>>,
    /// Directed typed edge lists as (src index, dst index) pairs.
    pub edges: BTreeMap<Relation, Arc<Vec<(u32, u32)>>>,
    /// transaction index -> company index.
    pub company_of: Vec<u32>,
    /// transaction index -> chronological key (date string order, then pk).
    pub txn_order: Vec<u64>,
    /// Per company, its transaction indices in chronological order.
    pub company_txns: Vec<Vec<u32>>,
    /// Whether the same-company transaction relation is available. The pair
    /// set is kept intensional (via `company_txns`) and only materialized
    /// per target by the neighbor sampler, never as a full clique.
    pub two_hop: bool,
}

impl HeteroGraph {
    pub fn node_count(&self, t: NodeType) -> usize {
        self.node_ids[&t].len()
    }

    pub fn edge_list(&self, r: Relation) -> &[(u32, u32)] {
        self.edges.get(&r).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn total_edge_count(&self) -> usize {
        self.edges.values().map(|v| v.len()).sum()
    }

    pub fn node_index(&self, t: NodeType, pk: &str) -> Option<u32> {
        self.node_ids[&t]
            .iter()
            .position(|p| p == pk)
            .map(|i| i as u32)
    }

    /// The target's company transaction list in chronological order,
    /// regardless of augmentation (the nearest-neighbor path always sees
    /// company history). Callers exclude the target itself.
    pub fn company_peers(&self, txn: u32) -> &[u32] {
        &self.company_txns[self.company_of[txn as usize] as usize]
    }

    /// Same as [`Self::company_peers`] but empty until [`augment_two_hop`]
    /// enables the transaction-transaction relation. The implied ordered
    /// pair count for a company of n transactions is n * (n - 1).
    pub fn augmented_neighbors(&self, txn: u32) -> &[u32] {
        if !self.two_hop {
            return &[];
        }
        self.company_peers(txn)
    }

    /// Uncategorized = no category edge in either direction.
    pub fn categorized_pairs(&self) -> Vec<(u32, u32)> {
        if let Some(fwd) = self.edges.get(&REL_TXN_CAT) {
            fwd.as_ref().clone()
        } else {
            self.edge_list(REL_CAT_TXN)
                .iter()
                .map(|&(c, t)| (t, c))
                .collect()
        }
    }

    /// One text file per relation: `src_pk <TAB> dst_pk` lines.
    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (rel, pairs) in &self.edges {
            let path = dir.join(format!("{}__{}.tsv", rel.src, rel.dst));
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            for &(s, d) in pairs.iter() {
                writeln!(
                    f,
                    "{}\t{}",
                    self.node_ids[&rel.src][s as usize],
                    self.node_ids[&rel.dst][d as usize]
                )?;
            }
        }
        Ok(())
    }
}

/// Convert the database into a heterogeneous graph. For every non-null
/// foreign key both the forward edge and its inverse are created;
/// uncategorized transactions simply have no category edges.
pub fn build_graph(
    db: &RelationalDatabase,
    features: &BTreeMap<NodeType, Matrix<f32>>,
) -> Result<HeteroGraph> {
    let mut node_ids = BTreeMap::new();
    let mut node_features = BTreeMap::new();
    for t in NODE_TYPES {
        let table = &db.tables[t.table_name()];
        let ids: Vec<String> = table.rows.iter().map(|r| r.pk.clone()).collect();
        let feats = features
            .get(&t)
            .ok_or_else(|| Error::FeatureMisalignment {
                node_type: t.table_name().into(),
                feature_rows: 0,
                table_rows: ids.len(),
            })?;
        if feats.rows() != ids.len() {
            return Err(Error::FeatureMisalignment {
                node_type: t.table_name().into(),
                feature_rows: feats.rows(),
                table_rows: ids.len(),
            });
        }
        node_ids.insert(t, ids);
        node_features.insert(t, Arc::new(feats.clone()));
    }

    let mut edges: BTreeMap<Relation, Vec<(u32, u32)>> = BTreeMap::new();
    for t in NODE_TYPES {
        let table = &db.tables[t.table_name()];
        for (row_idx, row) in table.rows.iter().enumerate() {
            for (col, target) in &table.schema.foreign_keys {
                let Some(Some(value)) = row.fkeys.get(col).map(|v| v.as_ref()) else {
                    continue;
                };
                let tt = NodeType::from_table(target).expect("canonical schema");
                let dst_idx = db.tables[target]
                    .index_of_pk(value)
                    .expect("validated foreign key") as u32;
                let src_idx = row_idx as u32;
                edges
                    .entry(Relation::new(t, tt))
                    .or_default()
                    .push((src_idx, dst_idx));
                edges
                    .entry(Relation::new(tt, t))
                    .or_default()
                    .push((dst_idx, src_idx));
            }
        }
    }

    // company_of and chronological ordering for transactions
    let txns = store::transactions(db);
    let company_index: HashMap<&str, u32> = node_ids[&NodeType::Company]
        .iter()
        .enumerate()
        .map(|(i, pk)| (pk.as_str(), i as u32))
        .collect();
    let mut company_of = Vec::with_capacity(txns.len());
    for t in &txns {
        company_of.push(*company_index.get(t.company_fk.as_str()).unwrap_or(&0));
    }
    // chronological key: rank of (date, pk) across all transactions
    let mut order_key: Vec<usize> = (0..txns.len()).collect();
    order_key.sort_by(|&a, &b| {
        (&txns[a].date, &txns[a].pk).cmp(&(&txns[b].date, &txns[b].pk))
    });
    let mut txn_order = vec![0u64; txns.len()];
    for (rank, &i) in order_key.iter().enumerate() {
        txn_order[i] = rank as u64;
    }
    let mut company_txns = vec![Vec::new(); node_ids[&NodeType::Company].len()];
    for &i in &order_key {
        company_txns[company_of[i] as usize].push(i as u32);
    }

    Ok(HeteroGraph {
        node_ids,
        node_features,
        edges: edges.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        company_of,
        txn_order,
        company_txns,
        two_hop: false,
    })
}

/// Enable the same-company transaction relation. Idempotent; the pair set
/// {(v1, v2) | same company, v1 != v2} stays intensional.
pub fn augment_two_hop(g: &HeteroGraph) -> HeteroGraph {
    let mut out = g.clone();
    out.two_hop = true;
    out
}

/// Remove the transaction -> category message direction so category nodes
/// never receive transaction messages; category -> transaction stays.
pub fn drop_incoming_category_edges(g: &HeteroGraph) -> HeteroGraph {
    let mut out = g.clone();
    out.edges.remove(&REL_TXN_CAT);
    out
}

/// Hide both directions of every masked (transaction, category) pair.
/// Masking a pair with no edge in either direction signals a mismatch
/// between supervision and graph and is an error.
pub fn mask_edges(g: &HeteroGraph, mask: &EdgeMask) -> Result<HeteroGraph> {
    let masked: HashSet<(u32, u32)> = mask.masked_pairs.iter().copied().collect();
    let fwd = g.edges.get(&REL_TXN_CAT);
    let bwd = g.edges.get(&REL_CAT_TXN);
    for &(t, c) in &mask.masked_pairs {
        let in_fwd = fwd.map_or(false, |v| v.contains(&(t, c)));
        let in_bwd = bwd.map_or(false, |v| v.contains(&(c, t)));
        if !in_fwd && !in_bwd {
            return Err(Error::MaskMissingEdge {
                txn: t as usize,
                cat: c as usize,
            });
        }
    }
    let mut out = g.clone();
    if let Some(v) = fwd {
        let kept: Vec<(u32, u32)> = v
            .iter()
            .copied()
            .filter(|&(t, c)| !masked.contains(&(t, c)))
            .collect();
        out.edges.insert(REL_TXN_CAT, Arc::new(kept));
    }
    if let Some(v) = bwd {
        let kept: Vec<(u32, u32)> = v
            .iter()
            .copied()
            .filter(|&(c, t)| !masked.contains(&(t, c)))
            .collect();
        out.edges.insert(REL_CAT_TXN, Arc::new(kept));
    }
    Ok(out)
}

/// Uniformly sample ceil(fraction * |positives|) categorized pairs; the
/// sample doubles as the supervision set and the epoch's edge mask.
pub fn sample_epoch_positives(
    g: &HeteroGraph,
    fraction: f64,
    rng_seed: u64,
) -> Result<(EdgeMask, Vec<(u32, u32)>)> {
    assert!(fraction > 0.0 && fraction <= 1.0, "fraction in (0, 1]");
    let mut all = g.categorized_pairs();
    if all.is_empty() {
        return Err(Error::NoPositiveEdges);
    }
    let n = ((fraction * all.len() as f64).ceil() as usize).min(all.len());
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    all.shuffle(&mut rng);
    all.truncate(n);
    Ok((
        EdgeMask {
            masked_pairs: all.clone(),
        },
        all,
    ))
}
