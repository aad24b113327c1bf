//! Train/test temporal splitting and accuracy evaluation.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeStats, Prediction};
use crate::error::{Error, Result};
use crate::store::{transactions, RelationalDatabase, TABLE_TRANSACTION};

/// A held-out transaction with its withheld label.
#[derive(Clone, Debug, PartialEq)]
pub struct TestCase {
    pub txn_pk: String,
    pub company_pk: String,
    pub truth_category_pk: String,
}

/// Withhold the `per_company_test_n` most recent categorized transactions of
/// every company: their category links are removed from the training copy
/// (the rows stay, uncategorized). Companies without more categorized
/// transactions than the requested count are excluded with a warning.
pub fn temporal_split(
    db: &RelationalDatabase,
    per_company_test_n: usize,
) -> (RelationalDatabase, Vec<TestCase>) {
    let txns = transactions(db);
    let mut by_company: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in txns.iter().enumerate() {
        if t.category_fk.is_some() {
            by_company.entry(t.company_fk.as_str()).or_default().push(i);
        }
    }
    let mut test = Vec::new();
    let mut withheld: HashSet<usize> = HashSet::new();
    if per_company_test_n > 0 {
        for (company, mut idxs) in by_company {
            if idxs.len() <= per_company_test_n {
                log::warn!(
                    "company {company} has only {} categorized transactions; excluded from the test split",
                    idxs.len()
                );
                continue;
            }
            idxs.sort_by(|&a, &b| {
                (&txns[a].date, &txns[a].pk).cmp(&(&txns[b].date, &txns[b].pk))
            });
            for &i in &idxs[idxs.len() - per_company_test_n..] {
                withheld.insert(i);
                test.push(TestCase {
                    txn_pk: txns[i].pk.clone(),
                    company_pk: company.to_string(),
                    truth_category_pk: txns[i].category_fk.clone().unwrap(),
                });
            }
        }
    }
    let mut train = db.clone();
    let table = train.tables.get_mut(TABLE_TRANSACTION).unwrap();
    for &i in &withheld {
        table.rows[i].fkeys.insert("category_fk".into(), None);
    }
    (train, test)
}

/// Per company, the set of category pks linked during the training period.
pub fn company_history_sets(train_db: &RelationalDatabase) -> BTreeMap<String, HashSet<String>> {
    let mut sets: BTreeMap<String, HashSet<String>> = BTreeMap::new();
    for t in transactions(train_db) {
        if let Some(cat) = t.category_fk {
            sets.entry(t.company_fk).or_default().insert(cat);
        }
    }
    sets
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1: f64,
    pub top2: f64,
    pub top5: f64,
    /// Top-1 accuracy on cases whose truth appears in the company's
    /// training-period links; absent when the subset is empty.
    pub hs_accuracy: Option<f64>,
    pub hu_accuracy: Option<f64>,
    pub hs_count: usize,
    pub hu_count: usize,
    pub total: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cascade: Option<CascadeStats>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "cases: {} (historical-seen {}, historical-unseen {})\n",
            self.total, self.hs_count, self.hu_count
        ));
        s.push_str(&format!(
            "top-1 {:.4}  top-2 {:.4}  top-5 {:.4}\n",
            self.top1, self.top2, self.top5
        ));
        match self.hs_accuracy {
            Some(a) => s.push_str(&format!("historical-seen top-1 {a:.4}\n")),
            None => s.push_str("historical-seen top-1: no cases\n"),
        }
        match self.hu_accuracy {
            Some(a) => s.push_str(&format!("historical-unseen top-1 {a:.4}\n")),
            None => s.push_str("historical-unseen top-1: no cases\n"),
        }
        if let Some(c) = &self.cascade {
            s.push_str("resolved without GNN by k: ");
            for (i, f) in c.resolved_without_gnn.iter().enumerate() {
                s.push_str(&format!("k={} {:.3}  ", i + 1, f));
            }
            s.push('\n');
        }
        s
    }
}

/// Top-k accuracies plus the historical seen/unseen breakdown at top-1.
pub fn evaluate(
    cases: &[TestCase],
    predictions: &HashMap<String, Vec<Prediction>>,
    company_histories: &BTreeMap<String, HashSet<String>>,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::EvalMismatch("no test cases".into()));
    }
    let mut hits = [0usize; 3]; // top1, top2, top5
    let mut hs_count = 0usize;
    let mut hu_count = 0usize;
    let mut hs_hits = 0usize;
    let mut hu_hits = 0usize;
    for case in cases {
        let preds = predictions.get(&case.txn_pk).ok_or_else(|| {
            Error::EvalMismatch(format!("no predictions for transaction {}", case.txn_pk))
        })?;
        let rank = preds
            .iter()
            .position(|p| p.category_pk == case.truth_category_pk);
        if let Some(r) = rank {
            if r < 1 {
                hits[0] += 1;
            }
            if r < 2 {
                hits[1] += 1;
            }
            if r < 5 {
                hits[2] += 1;
            }
        }
        let seen = company_histories
            .get(&case.company_pk)
            .map(|s| s.contains(&case.truth_category_pk))
            .unwrap_or(false);
        let top1_hit = rank == Some(0);
        if seen {
            hs_count += 1;
            hs_hits += top1_hit as usize;
        } else {
            hu_count += 1;
            hu_hits += top1_hit as usize;
        }
    }
    let n = cases.len() as f64;
    Ok(EvalReport {
        top1: hits[0] as f64 / n,
        top2: hits[1] as f64 / n,
        top5: hits[2] as f64 / n,
        hs_accuracy: (hs_count > 0).then(|| hs_hits as f64 / hs_count as f64),
        hu_accuracy: (hu_count > 0).then(|| hu_hits as f64 / hu_count as f64),
        hs_count,
        hu_count,
        total: cases.len(),
        cascade: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::PredictionSource;
    use crate::store::DbBuilder;

    fn db_with_history() -> RelationalDatabase {
        let mut b = DbBuilder::new();
        b.company("co1", "ACME").company("co2", "TINY");
        b.code("cd1", "Expenses");
        b.category("cat1", "co1", "cd1", "Fuel")
            .category("cat2", "co1", "cd1", "Meals")
            .category("cat3", "co2", "cd1", "Fuel");
        for i in 0..5 {
            b.txn(
                &format!("a{i}"),
                "co1",
                Some(if i == 4 { "cat2" } else { "cat1" }),
                &format!("EXXON {i}"),
                "-1.00",
                "",
                &format!("2023-01-0{}", i + 1),
            );
        }
        b.txn("z0", "co2", Some("cat3"), "SHELL", "-2.00", "", "2023-01-01");
        b.build()
    }

    #[test]
    fn split_withholds_most_recent_and_removes_links() {
        let db = db_with_history();
        let (train, test) = temporal_split(&db, 2);
        // co2 has a single categorized txn: excluded with a warning
        assert_eq!(test.len(), 2);
        assert_eq!(test[0].txn_pk, "a3");
        assert_eq!(test[1].txn_pk, "a4");
        assert_eq!(test[1].truth_category_pk, "cat2");
        let train_txns = transactions(&train);
        for t in &train_txns {
            if t.pk == "a3" || t.pk == "a4" {
                assert!(t.category_fk.is_none(), "withheld link removed");
            }
        }
        // no test transaction appears among the training category links
        let histories = company_history_sets(&train);
        assert!(histories["co1"].contains("cat1"));
        assert!(
            !histories["co1"].contains("cat2"),
            "cat2 only appeared in the withheld transaction"
        );
        // original untouched
        assert_eq!(
            transactions(&db).iter().filter(|t| t.category_fk.is_some()).count(),
            6
        );
    }

    #[test]
    fn zero_test_n_keeps_everything() {
        let db = db_with_history();
        let (train, test) = temporal_split(&db, 0);
        assert!(test.is_empty());
        assert_eq!(
            transactions(&train).iter().filter(|t| t.category_fk.is_some()).count(),
            6
        );
    }

    fn pred(pks: &[&str]) -> Vec<Prediction> {
        pks.iter()
            .enumerate()
            .map(|(i, pk)| Prediction {
                category_pk: pk.to_string(),
                score: 1.0 - 0.1 * i as f64,
                rank: (i + 1) as u32,
                source: PredictionSource::Gnn,
            })
            .collect()
    }

    #[test]
    fn evaluate_counts_ranks_and_subsets() {
        let cases = vec![
            TestCase {
                txn_pk: "x1".into(),
                company_pk: "co1".into(),
                truth_category_pk: "cat1".into(),
            },
            TestCase {
                txn_pk: "x2".into(),
                company_pk: "co1".into(),
                truth_category_pk: "cat2".into(),
            },
        ];
        let mut histories = BTreeMap::new();
        histories.insert(
            "co1".to_string(),
            HashSet::from(["cat1".to_string()]),
        );
        let mut predictions = HashMap::new();
        predictions.insert("x1".to_string(), pred(&["cat1", "a", "b", "c", "d"]));
        // truth at rank 3: counts toward top-5, not top-2
        predictions.insert("x2".to_string(), pred(&["a", "b", "cat2", "c", "d"]));
        let r = evaluate(&cases, &predictions, &histories).unwrap();
        assert_eq!(r.top1, 0.5);
        assert_eq!(r.top2, 0.5);
        assert_eq!(r.top5, 1.0);
        assert!(r.top1 <= r.top2 && r.top2 <= r.top5);
        assert_eq!(r.hs_count, 1);
        assert_eq!(r.hu_count, 1);
        assert_eq!(r.hs_accuracy, Some(1.0));
        assert_eq!(r.hu_accuracy, Some(0.0));
        // overall top-1 is the weighted mean of the subsets
        let weighted = (r.hs_accuracy.unwrap() * r.hs_count as f64
            + r.hu_accuracy.unwrap() * r.hu_count as f64)
            / r.total as f64;
        assert!((r.top1 - weighted).abs() < 1e-12);
    }

    #[test]
    fn perfect_predictor_and_empty_subset() {
        let cases = vec![TestCase {
            txn_pk: "x1".into(),
            company_pk: "co1".into(),
            truth_category_pk: "cat1".into(),
        }];
        let mut histories = BTreeMap::new();
        histories.insert("co1".to_string(), HashSet::from(["cat1".to_string()]));
        let mut predictions = HashMap::new();
        predictions.insert("x1".to_string(), pred(&["cat1", "a", "b", "c", "d"]));
        let r = evaluate(&cases, &predictions, &histories).unwrap();
        assert_eq!((r.top1, r.top2, r.top5), (1.0, 1.0, 1.0));
        assert_eq!(r.hu_count, 0);
        assert_eq!(r.hu_accuracy, None, "empty subset reported as absent");

        let missing = HashMap::new();
        assert!(matches!(
            evaluate(&cases, &missing, &histories),
            Err(Error::EvalMismatch(_))
        ));
    }
}
