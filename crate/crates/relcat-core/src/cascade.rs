//! Early-exit prediction cascade: answer from near-duplicate history when
//! possible, fall back to GNN ranking for the rest of the top-k.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionSource {
    Nn,
    Gnn,
    ZeroShot,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Prediction {
    pub category_pk: String,
    pub score: f64,
    /// 1-based rank within the response.
    pub rank: u32,
    pub source: PredictionSource,
}

/// One history transaction compared against the target.
#[derive(Clone, Debug)]
pub struct HistoryMatch {
    pub category_pk: String,
    pub similarity: f64,
}

/// Full cascade output for one transaction. `nn_count` is the number of
/// leading predictions served by the nearest-neighbor stage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CascadeResponse {
    pub transaction_pk: String,
    pub predictions: Vec<Prediction>,
    pub nn_count: usize,
    pub gnn_invoked: bool,
}

/// Distinct categories from history above the similarity cutoff, most
/// similar first. The score of a category is the best similarity supporting
/// it. May return fewer than `k`.
pub fn topk_nn_predict(history: &[HistoryMatch], threshold: f64, k: usize) -> Vec<Prediction> {
    let mut order: Vec<usize> = (0..history.len())
        .filter(|&i| history[i].similarity > threshold)
        .collect();
    // descending similarity, ties by history position
    order.sort_by(|&a, &b| {
        history[b]
            .similarity
            .partial_cmp(&history[a].similarity)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.cmp(&b))
    });
    let mut out: Vec<Prediction> = Vec::new();
    for i in order {
        if out.len() == k {
            break;
        }
        let item = &history[i];
        if out.iter().any(|p| p.category_pk == item.category_pk) {
            continue;
        }
        out.push(Prediction {
            category_pk: item.category_pk.clone(),
            score: item.similarity,
            rank: (out.len() + 1) as u32,
            source: PredictionSource::Nn,
        });
    }
    out
}

/// Complete a response: keep the NN predictions in front and append
/// GNN-ranked candidates (skipping categories already present) until `k`
/// predictions or candidate exhaustion. `gnn_candidates` is consulted only
/// when the NN stage fell short; the flag in the response records that.
pub fn complete_with_gnn(
    transaction_pk: &str,
    nn: Vec<Prediction>,
    gnn_candidates: impl FnOnce() -> Vec<Prediction>,
    k: usize,
) -> CascadeResponse {
    let mut predictions = nn;
    predictions.truncate(k);
    let nn_count = predictions.len();
    let mut gnn_invoked = false;
    if predictions.len() < k {
        gnn_invoked = true;
        for cand in gnn_candidates() {
            if predictions.len() == k {
                break;
            }
            if predictions.iter().any(|p| p.category_pk == cand.category_pk) {
                continue;
            }
            predictions.push(Prediction {
                rank: (predictions.len() + 1) as u32,
                source: PredictionSource::Gnn,
                ..cand
            });
        }
    }
    CascadeResponse {
        transaction_pk: transaction_pk.to_string(),
        predictions,
        nn_count,
        gnn_invoked,
    }
}

/// Fraction of responses the NN stage alone could resolve at each depth
/// 1..=max_k (monotone non-increasing in k).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CascadeStats {
    /// index 0 holds the fraction for k = 1.
    pub resolved_without_gnn: Vec<f64>,
}

pub fn cascade_stats(responses: &[CascadeResponse], max_k: usize) -> Result<CascadeStats> {
    if responses.is_empty() {
        return Err(Error::EmptyResponses);
    }
    let n = responses.len() as f64;
    let resolved = (1..=max_k)
        .map(|k| responses.iter().filter(|r| r.nn_count >= k).count() as f64 / n)
        .collect();
    Ok(CascadeStats {
        resolved_without_gnn: resolved,
    })
}
