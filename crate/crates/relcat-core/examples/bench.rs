//! Scratch benchmark runner: trains the full pipeline on the default
//! synthetic benchmark and prints accuracy for every method and ablation.
//! Used to calibrate the shipped defaults; the acceptance suite asserts the
//! same orderings.

use std::time::Instant;

use relcat_core::config::Config;
use relcat_core::eval::{company_history_sets, evaluate, temporal_split};
use relcat_core::pipeline::*;
use relcat_core::synth::generate_synthetic;

fn main() {
    let mut config = Config::default();
    for arg in std::env::args().skip(1) {
        if let Some((k, v)) = arg.split_once('=') {
            match k {
                "epochs" => config.gnn_train.epochs = v.parse().unwrap(),
                "steps" => config.encoder_train.steps = v.parse().unwrap(),
                "lr" => config.gnn_train.learning_rate = v.parse().unwrap(),
                "enc_lr" => config.encoder_train.learning_rate = v.parse().unwrap(),
                "hidden" => {
                    config.encoder.hidden_dim = v.parse().unwrap();
                    config.gnn.hidden_dim = config.encoder.hidden_dim;
                }
                "ff" => config.encoder.feedforward_dim = v.parse().unwrap(),
                "layers" => config.encoder.layers = v.parse().unwrap(),
                "seed" => {
                    config.seed = v.parse().unwrap();
                    config.synth.seed = config.seed;
                    config.encoder_train.seed = config.seed;
                    config.gnn_train.seed = config.seed;
                }
                "companies" => config.synth.num_companies = v.parse().unwrap(),
                "negp" => config.gnn_train.negatives_per_positive = v.parse().unwrap(),
                "vocab" => config.tokenizer_vocab_size = v.parse().unwrap(),
                "batch" => config.encoder_train.batch_size = v.parse().unwrap(),
                "temp" => config.encoder.learnable_temperature = v == "1",
                "div" => config.gnn_train.diversity_filtering = v == "1",
                other => panic!("unknown arg {other}"),
            }
        }
    }
    config.encoder_train.seed = config.seed;
    config.gnn_train.seed = config.seed;

    let t0 = Instant::now();
    let db = generate_synthetic(&config.synth);
    let n_txn = db.tables["transaction"].rows.len();
    let n_cat = db.tables["category"].rows.len();
    println!(
        "[{:>7.1?}] generated: {n_txn} txns, {n_cat} category rows, {} companies",
        t0.elapsed(),
        db.tables["company"].rows.len()
    );
    let (train_db, cases) = temporal_split(&db, config.test_per_company);
    println!("[{:>7.1?}] split: {} test cases", t0.elapsed(), cases.len());
    let histories = company_history_sets(&train_db);

    let artifacts = train_pipeline(&train_db, config.clone()).unwrap();
    let p = &artifacts.pipeline;
    println!(
        "[{:>7.1?}] trained: encoder final loss {:.4}, gnn final loss {:.4}",
        t0.elapsed(),
        artifacts.encoder_metrics.last().map(|m| m.loss).unwrap_or(f64::NAN),
        artifacts.gnn_metrics.last().map(|m| m.loss).unwrap_or(f64::NAN),
    );
    let el: Vec<f64> = artifacts.encoder_metrics.iter().map(|m| m.loss).collect();
    println!(
        "encoder loss curve: {:?}",
        el.iter().step_by((el.len() / 12).max(1)).map(|l| (l * 100.0).round() / 100.0).collect::<Vec<_>>()
    );
    let gl: Vec<f64> = artifacts.gnn_metrics.iter().map(|m| m.loss).collect();
    println!(
        "gnn loss curve: {:?}",
        gl.iter().step_by((gl.len() / 15).max(1)).map(|l| (l * 1000.0).round() / 1000.0).collect::<Vec<_>>()
    );

    // score-gap diagnostic: true row vs same-name other rows vs rest
    {
        use relcat_core::gnn::{score, target_embedding};
        use relcat_core::graph::NodeType;
        let cat_pks = p.category_pks();
        let names: Vec<&str> = p.graph.node_ids[&NodeType::Category]
            .iter()
            .enumerate()
            .map(|(i, _)| {
                let _ = i;
                ""
            })
            .collect();
        let _ = names;
        // category names via the train db
        let cat_names: std::collections::HashMap<&str, &str> = train_db.tables["category"]
            .rows
            .iter()
            .map(|r| (r.pk.as_str(), r.attributes["name"].as_str()))
            .collect();
        let cat_company: std::collections::HashMap<&str, &str> = train_db.tables["category"]
            .rows
            .iter()
            .map(|r| (r.pk.as_str(), r.fkeys["company_fk"].as_deref().unwrap_or("")))
            .collect();
        let (mut m_true, mut m_same, mut m_other, mut n) = (0.0, 0.0, 0.0, 0.0);
        for case in cases.iter().take(80) {
            let t = p.txn_index_of(&case.txn_pk).unwrap();
            let emb = target_embedding(
                &p.gnn,
                &p.graph,
                &p.adj,
                t,
                &config.fanout,
                config.seed.wrapping_add(t as u64),
            )
            .unwrap();
            let truth_name = cat_names[case.truth_category_pk.as_str()];
            let (mut s_true, mut s_same, mut s_other) = (f64::MIN, f64::MIN, f64::MIN);
            for (ci, pk) in cat_pks.iter().enumerate() {
                let s = score(&emb, p.category_embeddings.row(ci)) as f64;
                if *pk == case.truth_category_pk {
                    s_true = s;
                } else if cat_names[pk.as_str()] == truth_name
                    && cat_company[pk.as_str()] != case.company_pk
                {
                    s_same = s_same.max(s);
                } else {
                    s_other = s_other.max(s);
                }
            }
            if s_true > f64::MIN && s_same > f64::MIN && s_other > f64::MIN {
                m_true += s_true;
                m_same += s_same;
                m_other += s_other;
                n += 1.0;
            }
        }
        println!(
            "score gaps over {n} cases: true {:.4}  max-same-name-other-co {:.4}  max-other {:.4}",
            m_true / n,
            m_same / n,
            m_other / n
        );
    }

    let mut eval_method = |name: &str, p: &Pipeline, method: EvalMethod| {
        let t = Instant::now();
        let responses = predict_cases(p, &cases, method, 5).unwrap();
        let report = evaluate(&cases, &responses_to_map(&responses), &histories).unwrap();
        println!(
            "[{:>7.1?}] {name:<22} top1 {:.4} top2 {:.4} top5 {:.4}  hs {:?} ({})  hu {:?} ({})  [{:?}]",
            t0.elapsed(),
            report.top1,
            report.top2,
            report.top5,
            report.hs_accuracy.map(|a| (a * 1e4).round() / 1e4),
            report.hs_count,
            report.hu_accuracy.map(|a| (a * 1e4).round() / 1e4),
            report.hu_count,
            t.elapsed(),
        );
        (report, responses)
    };

    let (_, cascade_responses) = eval_method("cascade", p, EvalMethod::Cascade);
    eval_method("gnn-only", p, EvalMethod::GnnOnly);
    eval_method("nn-only", p, EvalMethod::NnOnly);
    eval_method("zero-shot", p, EvalMethod::ZeroShot);
    let stats = relcat_core::cascade::cascade_stats(&cascade_responses, 5).unwrap();
    println!("cascade resolved-without-gnn by k: {:?}", stats.resolved_without_gnn);

    // ablations: retrain the GNN stage with one mechanism disabled
    for (name, mutate) in [
        (
            "ablate two-hop",
            Box::new(|c: &mut Config| c.use_two_hop = false) as Box<dyn Fn(&mut Config)>,
        ),
        (
            "ablate sim-sampling",
            Box::new(|c: &mut Config| c.fanout.similarity_sampling = false),
        ),
        (
            "ablate diversity",
            Box::new(|c: &mut Config| c.gnn_train.diversity_filtering = false),
        ),
    ] {
        let mut cfg = config.clone();
        mutate(&mut cfg);
        let t = Instant::now();
        let (gnn, _, graph, adj) =
            train_gnn_stage(&train_db, &p.vocab, &p.encoder, &cfg).unwrap();
        let ablated = assemble(
            cfg,
            p.vocab.clone(),
            p.encoder.clone(),
            gnn,
            graph,
            adj,
            &train_db,
        )
        .unwrap();
        println!("[{:>7.1?}] retrained {name} in {:?}", t0.elapsed(), t.elapsed());
        eval_method(name, &ablated, EvalMethod::GnnOnly);
    }
    println!("[{:>7.1?}] done", t0.elapsed());
}
