//! End-to-end exercise of every subcommand on a miniature dataset.

use std::path::Path;
use std::process::Command;

fn relcat() -> Command {
    Command::new(env!("CARGO_BIN_EXE_relcat"))
}

fn run(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn relcat");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(
        out.status.success(),
        "command failed\nstdout:\n{stdout}\nstderr:\n{stderr}"
    );
    stdout
}

fn write_tiny_config(path: &Path) {
    std::fs::write(
        path,
        "seed = 13\n\
         synth.num_companies = 8\n\
         synth.num_merchants = 12\n\
         synth.txn_per_company_min = 10\n\
         synth.txn_per_company_max = 14\n\
         tokenizer.vocab_size = 512\n\
         tokenizer.min_frequency = 1\n\
         encoder.layers = 2\n\
         encoder.hidden_dim = 32\n\
         encoder.attention_heads = 4\n\
         encoder.feedforward_dim = 64\n\
         encoder.max_sequence_length = 24\n\
         encoder_train.steps = 40\n\
         encoder_train.batch_size = 12\n\
         encoder_train.learning_rate = 0.001\n\
         gnn_train.epochs = 5\n\
         gnn_train.positive_fraction = 0.3\n\
         gnn_train.negatives_per_positive = 4\n",
    )
    .unwrap();
}

#[test]
fn full_cli_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let config = dir.path().join("bench.cfg");
    write_tiny_config(&config);
    let cfg = config.to_str().unwrap();

    let out = run(relcat()
        .args(["generate", "--config", cfg, "--out"])
        .arg(&data));
    assert!(out.contains("generated"), "{out}");

    let out = run(relcat()
        .args(["train-tokenizer", "--config", cfg, "--data"])
        .arg(&data));
    assert!(out.contains("trained vocabulary"), "{out}");
    assert!(data.join("vocab.txt").exists());

    let out = run(relcat()
        .args(["train-encoder", "--config", cfg, "--data"])
        .arg(&data));
    assert!(out.contains("trained encoder"), "{out}");
    assert!(data.join("encoder.bin").exists());
    assert!(data.join("encoder.metrics.jsonl").exists());

    let out = run(relcat()
        .args(["train-gnn", "--config", cfg, "--data"])
        .arg(&data));
    assert!(out.contains("trained gnn"), "{out}");
    assert!(data.join("gnn.bin").exists());

    // The freshly generated dataset has no uncategorized rows; blank some
    // category links so predict has work to do.
    let txn_path = data.join("transactions.csv");
    let contents = std::fs::read_to_string(&txn_path).unwrap();
    let mut lines: Vec<String> = contents.lines().map(str::to_string).collect();
    let mut blanked = 0;
    for line in lines.iter_mut().skip(1) {
        if blanked == 3 {
            break;
        }
        // pk,company_fk,category_fk,...
        let mut parts: Vec<&str> = line.splitn(4, ',').collect();
        if parts.len() == 4 && !parts[2].is_empty() {
            parts[2] = "";
            *line = parts.join(",");
            blanked += 1;
        }
    }
    std::fs::write(&txn_path, lines.join("\n") + "\n").unwrap();

    let preds = dir.path().join("preds.jsonl");
    let out = run(relcat()
        .args(["predict", "--config", cfg, "--data"])
        .arg(&data)
        .args(["--out"])
        .arg(&preds));
    assert!(out.contains("wrote 3 prediction records"), "{out}");
    let first_line = std::fs::read_to_string(&preds).unwrap();
    let record: serde_json::Value =
        serde_json::from_str(first_line.lines().next().unwrap()).unwrap();
    assert!(record["transaction_pk"].is_string());
    assert_eq!(record["predictions"].as_array().unwrap().len(), 5);
    for p in record["predictions"].as_array().unwrap() {
        assert!(p["rank"].is_u64());
        assert!(p["category_pk"].is_string());
        assert!(p["score"].is_number());
        assert!(matches!(p["source"].as_str().unwrap(), "nn" | "gnn"));
    }

    let out = run(relcat()
        .args(["cascade-stats", "--data"])
        .arg(&preds));
    assert!(out.contains("resolved without GNN at k=1"), "{out}");

    let out = run(relcat()
        .args(["evaluate", "--config", cfg, "--data"])
        .arg(&data));
    assert!(out.contains("top-1"), "{out}");
    assert!(out.contains("resolved without GNN"), "{out}");

    let out = run(relcat()
        .args(["evaluate", "--config", cfg, "--zero-shot", "--data"])
        .arg(&data));
    assert!(out.contains("top-1"), "{out}");
}

#[test]
fn unknown_config_key_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.cfg");
    std::fs::write(&config, "mystery_knob = 3\n").unwrap();
    let out = relcat()
        .args(["generate", "--config", config.to_str().unwrap(), "--out"])
        .arg(dir.path().join("d"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mystery_knob"), "{stderr}");
}
