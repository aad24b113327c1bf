//! End-to-end orchestration: corpus assembly, feature encoding, graph
//! preparation, model training, and the serving paths (cascade, GNN-only,
//! NN-only, zero-shot).

use std::collections::{BTreeMap, HashMap};

use crate::cascade::{
    complete_with_gnn, topk_nn_predict, CascadeResponse, HistoryMatch, Prediction,
};
use crate::config::{CandidateScope, Config};
use crate::encoder::{encode, format_transaction, train_encoder, EncoderModel};
use crate::error::Result;
use crate::eval::TestCase;
use crate::gnn::{rank_categories, target_embedding, train_gnn, GnnModel};
use crate::graph::{
    augment_two_hop, build_graph, drop_incoming_category_edges, HeteroGraph, NodeType,
};
use crate::metrics::{EncoderStepMetric, GnnEpochMetric};
use crate::sampler::{
    categorized_mask, history_candidates, materialize_history_edges, InAdjacency,
};
use crate::store::{transactions, RelationalDatabase, TABLE_CATEGORY, TABLE_CODE, TABLE_COMPANY};
use crate::tensor::{cosine, Matrix};
use crate::tokenizer::{train_wordpiece, Vocab};

/// Sentences the tokenizer and encoder train on: every transaction sentence
/// plus the name text of categories, codes, and companies.
pub fn sentence_corpus(db: &RelationalDatabase) -> Vec<String> {
    let mut corpus: Vec<String> = transactions(db)
        .iter()
        .map(format_transaction)
        .collect();
    for table in [TABLE_CATEGORY, TABLE_CODE, TABLE_COMPANY] {
        for row in &db.tables[table].rows {
            corpus.push(row.attributes["name"].clone());
        }
    }
    corpus
}

/// (transaction sentence, category name) pairs for categorized transactions.
pub fn training_pairs(db: &RelationalDatabase) -> Vec<(String, String)> {
    let cat_names: HashMap<&str, &str> = db.tables[TABLE_CATEGORY]
        .rows
        .iter()
        .map(|r| (r.pk.as_str(), r.attributes["name"].as_str()))
        .collect();
    transactions(db)
        .iter()
        .filter_map(|t| {
            t.category_fk.as_ref().map(|cat| {
                (
                    format_transaction(t),
                    cat_names[cat.as_str()].to_string(),
                )
            })
        })
        .collect()
}

/// Encode every table's rows to feature matrices: transactions by their
/// sentence, the other tables by their name text. Distinct texts are
/// encoded once.
pub fn encode_tables(
    model: &EncoderModel<f32>,
    vocab: &Vocab,
    db: &RelationalDatabase,
) -> BTreeMap<NodeType, Matrix<f32>> {
    let mut texts_by_type: BTreeMap<NodeType, Vec<String>> = BTreeMap::new();
    texts_by_type.insert(
        NodeType::Transaction,
        transactions(db).iter().map(format_transaction).collect(),
    );
    for (t, table) in [
        (NodeType::Category, TABLE_CATEGORY),
        (NodeType::Code, TABLE_CODE),
        (NodeType::Company, TABLE_COMPANY),
    ] {
        texts_by_type.insert(
            t,
            db.tables[table]
                .rows
                .iter()
                .map(|r| r.attributes["name"].clone())
                .collect(),
        );
    }

    // dedupe across all node types
    let mut distinct: Vec<String> = Vec::new();
    let mut index_of: HashMap<String, usize> = HashMap::new();
    for texts in texts_by_type.values() {
        for t in texts {
            if !index_of.contains_key(t) {
                index_of.insert(t.clone(), distinct.len());
                distinct.push(t.clone());
            }
        }
    }
    let embs = encode(model, vocab, &distinct);
    texts_by_type
        .into_iter()
        .map(|(t, texts)| {
            let mut m = Matrix::zeros(texts.len(), embs.cols());
            for (r, text) in texts.iter().enumerate() {
                m.row_mut(r).copy_from_slice(embs.row(index_of[text]));
            }
            (t, m)
        })
        .collect()
}

/// Drop incoming category edges, optionally augment with the same-company
/// relation and materialize per-target history edges.
pub fn prepare_graph(
    db: &RelationalDatabase,
    features: &BTreeMap<NodeType, Matrix<f32>>,
    config: &Config,
) -> Result<(HeteroGraph, InAdjacency)> {
    let g = build_graph(db, features)?;
    let g = drop_incoming_category_edges(&g);
    let g = if config.use_two_hop {
        let g = augment_two_hop(&g);
        materialize_history_edges(&g, &config.fanout, config.seed)
    } else {
        g
    };
    let adj = InAdjacency::build(&g);
    Ok((g, adj))
}

/// Everything needed to serve predictions over one training graph.
pub struct Pipeline {
    pub config: Config,
    pub vocab: Vocab,
    pub encoder: EncoderModel<f32>,
    pub gnn: GnnModel<f32>,
    pub graph: HeteroGraph,
    pub adj: InAdjacency,
    /// Final-layer category embeddings on the full training graph; category
    /// representations are stable because they receive no transaction
    /// messages.
    pub category_embeddings: Matrix<f32>,
    categorized: Vec<bool>,
    txn_category_pk: Vec<Option<String>>,
    txn_index: HashMap<String, u32>,
    company_categories: HashMap<u32, Vec<u32>>,
    category_names: Vec<String>,
}

pub struct TrainingArtifacts {
    pub pipeline: Pipeline,
    pub encoder_metrics: Vec<EncoderStepMetric>,
    pub gnn_metrics: Vec<GnnEpochMetric>,
}

/// Train tokenizer, encoder, and GNN on (an already split) training
/// database, then assemble the serving state.
pub fn train_pipeline(train_db: &RelationalDatabase, config: Config) -> Result<TrainingArtifacts> {
    let corpus = sentence_corpus(train_db);
    let vocab = train_wordpiece(
        &corpus,
        config.tokenizer_vocab_size,
        config.tokenizer_min_frequency,
    )?;
    let pairs = training_pairs(train_db);
    let (encoder, encoder_metrics) = train_encoder::<f32>(
        &pairs,
        &vocab,
        config.encoder.clone(),
        &config.encoder_train,
        config.seed,
    )?;
    let (gnn, gnn_metrics, graph, adj) = train_gnn_stage(train_db, &vocab, &encoder, &config)?;
    let pipeline = assemble(config, vocab, encoder, gnn, graph, adj, train_db)?;
    Ok(TrainingArtifacts {
        pipeline,
        encoder_metrics,
        gnn_metrics,
    })
}

/// The encoder training stage alone, reusing an existing vocabulary.
pub fn train_encoder_stage(
    train_db: &RelationalDatabase,
    vocab: &Vocab,
    config: &Config,
) -> Result<(EncoderModel<f32>, Vec<EncoderStepMetric>)> {
    let pairs = training_pairs(train_db);
    train_encoder::<f32>(
        &pairs,
        vocab,
        config.encoder.clone(),
        &config.encoder_train,
        config.seed,
    )
}

/// The GNN training stage alone, reusing an existing encoder.
pub fn train_gnn_stage(
    train_db: &RelationalDatabase,
    vocab: &Vocab,
    encoder: &EncoderModel<f32>,
    config: &Config,
) -> Result<(GnnModel<f32>, Vec<GnnEpochMetric>, HeteroGraph, InAdjacency)> {
    let features = encode_tables(encoder, vocab, train_db);
    let (graph, adj) = prepare_graph(train_db, &features, config)?;
    let mut gnn_cfg = config.gnn.clone();
    gnn_cfg.hidden_dim = encoder.config.embedding_dim();
    let (gnn, metrics) = train_gnn::<f32>(&graph, gnn_cfg, &config.gnn_train, config.seed)?;
    Ok((gnn, metrics, graph, adj))
}

/// Assemble serving state from trained components.
pub fn assemble(
    config: Config,
    vocab: Vocab,
    encoder: EncoderModel<f32>,
    gnn: GnnModel<f32>,
    graph: HeteroGraph,
    adj: InAdjacency,
    db: &RelationalDatabase,
) -> Result<Pipeline> {
    let category_embeddings = gnn.forward(&graph)?[&NodeType::Category].clone();
    let categorized = categorized_mask(&graph);
    let txns = transactions(db);
    let txn_category_pk = txns.iter().map(|t| t.category_fk.clone()).collect();
    let txn_index = txns
        .iter()
        .enumerate()
        .map(|(i, t)| (t.pk.clone(), i as u32))
        .collect();
    let mut company_categories: HashMap<u32, Vec<u32>> = HashMap::new();
    let company_ids = &graph.node_ids[&NodeType::Company];
    let company_idx: HashMap<&str, u32> = company_ids
        .iter()
        .enumerate()
        .map(|(i, pk)| (pk.as_str(), i as u32))
        .collect();
    let mut category_names = Vec::new();
    for (i, row) in db.tables[TABLE_CATEGORY].rows.iter().enumerate() {
        category_names.push(row.attributes["name"].clone());
        if let Some(Some(co)) = row.fkeys.get("company_fk") {
            if let Some(&ci) = company_idx.get(co.as_str()) {
                company_categories.entry(ci).or_default().push(i as u32);
            }
        }
    }
    Ok(Pipeline {
        config,
        vocab,
        encoder,
        gnn,
        graph,
        adj,
        category_embeddings,
        categorized,
        txn_category_pk,
        txn_index,
        company_categories,
        category_names,
    })
}

impl Pipeline {
    pub fn txn_index_of(&self, pk: &str) -> Option<u32> {
        self.txn_index.get(pk).copied()
    }

    pub fn category_pks(&self) -> &[String] {
        &self.graph.node_ids[&NodeType::Category]
    }

    /// All uncategorized transaction indices, in row order.
    pub fn uncategorized(&self) -> Vec<u32> {
        self.categorized
            .iter()
            .enumerate()
            .filter(|&(_, &c)| !c)
            .map(|(i, _)| i as u32)
            .collect()
    }

    fn candidate_set(&self, target: u32) -> Option<Vec<u32>> {
        match self.config.candidate_scope {
            CandidateScope::Global => None,
            CandidateScope::Company => {
                let company = self.graph.company_of[target as usize];
                Some(
                    self.company_categories
                        .get(&company)
                        .cloned()
                        .unwrap_or_default(),
                )
            }
        }
    }

    /// Text-similarity matches against the target's company history
    /// (strictly older categorized transactions).
    pub fn nn_matches(&self, target: u32) -> Vec<HistoryMatch> {
        let feats = &self.graph.node_features[&NodeType::Transaction];
        let target_row = feats.row(target as usize);
        let cat_pks = self.category_pks();
        let _ = cat_pks;
        history_candidates(&self.graph, target, &self.categorized)
            .into_iter()
            .filter_map(|h| {
                let sim = cosine(target_row, feats.row(h as usize))?;
                let cat = self.txn_category_pk[h as usize].clone()?;
                Some(HistoryMatch {
                    category_pk: cat,
                    similarity: sim as f64,
                })
            })
            .collect()
    }

    /// GNN ranking for one target over the configured candidate scope.
    pub fn gnn_candidates(&self, target: u32, k: usize) -> Result<Vec<Prediction>> {
        let emb = target_embedding(
            &self.gnn,
            &self.graph,
            &self.adj,
            target,
            &self.config.fanout,
            self.config.seed.wrapping_add(target as u64),
        )?;
        let cands = self.candidate_set(target);
        Ok(rank_categories(
            &emb,
            &self.category_embeddings,
            self.category_pks(),
            cands.as_deref(),
            k,
        ))
    }

    /// The full cascade for one transaction: NN early exit, GNN remainder.
    pub fn predict_one(&self, target: u32, k: usize) -> Result<CascadeResponse> {
        let pk = self.graph.node_ids[&NodeType::Transaction][target as usize].clone();
        let matches = self.nn_matches(target);
        let nn = topk_nn_predict(&matches, self.config.cascade_threshold, k);
        let mut gnn_err = None;
        let response = complete_with_gnn(
            &pk,
            nn,
            || match self.gnn_candidates(target, k + 8) {
                Ok(preds) => preds,
                Err(e) => {
                    gnn_err = Some(e);
                    Vec::new()
                }
            },
            k,
        );
        match gnn_err {
            Some(e) => Err(e),
            None => Ok(response),
        }
    }

    /// NN-stage-only response (may hold fewer than `k` predictions).
    pub fn predict_nn_only(&self, target: u32, k: usize) -> CascadeResponse {
        let pk = self.graph.node_ids[&NodeType::Transaction][target as usize].clone();
        let matches = self.nn_matches(target);
        let predictions = topk_nn_predict(&matches, self.config.cascade_threshold, k);
        CascadeResponse {
            transaction_pk: pk,
            nn_count: predictions.len(),
            gnn_invoked: false,
            predictions,
        }
    }

    /// GNN-only ranking response.
    pub fn predict_gnn_only(&self, target: u32, k: usize) -> Result<CascadeResponse> {
        let pk = self.graph.node_ids[&NodeType::Transaction][target as usize].clone();
        let mut predictions = self.gnn_candidates(target, k)?;
        for (i, p) in predictions.iter_mut().enumerate() {
            p.rank = (i + 1) as u32;
        }
        Ok(CascadeResponse {
            transaction_pk: pk,
            nn_count: 0,
            gnn_invoked: true,
            predictions,
        })
    }

    /// Zero-shot ranking by text similarity against every category row,
    /// with cached name embeddings (equal names share an embedding).
    pub fn predict_zero_shot(&self, targets: &[u32], k: usize) -> Vec<CascadeResponse> {
        let mut distinct: Vec<String> = Vec::new();
        let mut idx_of: HashMap<&str, usize> = HashMap::new();
        for name in &self.category_names {
            if !idx_of.contains_key(name.as_str()) {
                idx_of.insert(name.as_str(), distinct.len());
                distinct.push(name.clone());
            }
        }
        let name_embs = encode(&self.encoder, &self.vocab, &distinct);
        let feats = &self.graph.node_features[&NodeType::Transaction];
        let cat_pks = self.category_pks();
        targets
            .iter()
            .map(|&t| {
                let target_row = feats.row(t as usize);
                let mut scored: Vec<(f64, &str)> = (0..cat_pks.len())
                    .map(|c| {
                        let e = name_embs.row(idx_of[self.category_names[c].as_str()]);
                        let sim = cosine(target_row, e).map(|s| s as f64).unwrap_or(f64::MIN);
                        (sim, cat_pks[c].as_str())
                    })
                    .collect();
                scored.sort_by(|a, b| {
                    b.0.partial_cmp(&a.0)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then_with(|| a.1.cmp(b.1))
                });
                let predictions = scored
                    .into_iter()
                    .take(k)
                    .enumerate()
                    .map(|(rank, (score, pk))| Prediction {
                        category_pk: pk.to_string(),
                        score,
                        rank: (rank + 1) as u32,
                        source: crate::cascade::PredictionSource::ZeroShot,
                    })
                    .collect();
                CascadeResponse {
                    transaction_pk: self.graph.node_ids[&NodeType::Transaction][t as usize]
                        .clone(),
                    predictions,
                    nn_count: 0,
                    gnn_invoked: false,
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMethod {
    Cascade,
    GnnOnly,
    NnOnly,
    ZeroShot,
}

/// Predict for every test case with the given method.
pub fn predict_cases(
    pipeline: &Pipeline,
    cases: &[TestCase],
    method: EvalMethod,
    k: usize,
) -> Result<Vec<CascadeResponse>> {
    let targets: Vec<u32> = cases
        .iter()
        .map(|c| {
            pipeline.txn_index_of(&c.txn_pk).ok_or_else(|| {
                crate::Error::EvalMismatch(format!("unknown transaction {}", c.txn_pk))
            })
        })
        .collect::<Result<_>>()?;
    match method {
        EvalMethod::ZeroShot => Ok(pipeline.predict_zero_shot(&targets, k)),
        EvalMethod::Cascade => targets
            .iter()
            .map(|&t| pipeline.predict_one(t, k))
            .collect(),
        EvalMethod::GnnOnly => targets
            .iter()
            .map(|&t| pipeline.predict_gnn_only(t, k))
            .collect(),
        EvalMethod::NnOnly => Ok(targets
            .iter()
            .map(|&t| pipeline.predict_nn_only(t, k))
            .collect()),
    }
}

/// Response list keyed by transaction pk, as the evaluator expects.
pub fn responses_to_map(responses: &[CascadeResponse]) -> HashMap<String, Vec<Prediction>> {
    responses
        .iter()
        .map(|r| (r.transaction_pk.clone(), r.predictions.clone()))
        .collect()
}
