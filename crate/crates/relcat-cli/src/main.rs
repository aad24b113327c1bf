use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use relcat_core::cascade::{cascade_stats, CascadeResponse};
use relcat_core::config::Config;
use relcat_core::encoder::EncoderModel;
use relcat_core::eval::{company_history_sets, evaluate, temporal_split};
use relcat_core::gnn::GnnModel;
use relcat_core::metrics::write_jsonl;
use relcat_core::pipeline::{
    assemble, encode_tables, predict_cases, prepare_graph, responses_to_map, sentence_corpus,
    train_encoder_stage, train_gnn_stage, EvalMethod, Pipeline,
};
use relcat_core::store::{load_database, save_database, RelationalDatabase};
use relcat_core::synth::generate_synthetic;
use relcat_core::tokenizer::{train_wordpiece, Vocab};
use relcat_core::weights::{load_into_param_set, save_param_set};

#[derive(Parser)]
#[command(
    name = "relcat",
    about = "Relational transaction categorization: synthetic data, tokenizer/encoder/GNN training, and cascade prediction"
)]
struct Cli {
    /// Configuration file (flat key = value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Dataset directory (or input file for cascade-stats).
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Output path.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of predictions per transaction.
    #[arg(long, default_value_t = 5, global = true)]
    top_k: usize,
    /// Rank by text similarity alone, without company context.
    #[arg(long, global = true)]
    zero_shot: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic four-table dataset into --out.
    Generate,
    /// Train the WordPiece vocabulary from the dataset at --data.
    TrainTokenizer,
    /// Train the text encoder (writes weights to --out).
    TrainEncoder,
    /// Train the link-prediction GNN (writes weights to --out).
    TrainGnn,
    /// Predict categories for every uncategorized transaction at --data.
    Predict,
    /// Split, predict on the held-out transactions, and report accuracy.
    Evaluate,
    /// Summarize early-exit rates from a predictions file at --data.
    CascadeStats,
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut config = match &cli.config {
        Some(path) => Config::from_file(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.synth.seed = seed;
    }
    config.encoder_train.seed = config.seed;
    config.gnn_train.seed = config.seed;
    Ok(config)
}

fn data_dir(cli: &Cli) -> Result<PathBuf> {
    cli.data.clone().context("--data is required")
}

fn resolve(path: &Option<String>, data: &Path, default_name: &str) -> PathBuf {
    match path {
        Some(p) => PathBuf::from(p),
        None => data.join(default_name),
    }
}

fn load_vocab(config: &Config, data: &Path) -> Result<Vocab> {
    let path = resolve(&config.vocab_path, data, "vocab.txt");
    Vocab::load(&path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_encoder(config: &Config, data: &Path, vocab: &Vocab) -> Result<EncoderModel<f32>> {
    let path = resolve(&config.encoder_weights, data, "encoder.bin");
    let mut model = EncoderModel::<f32>::new(config.encoder.clone(), vocab.len(), config.seed)?;
    load_into_param_set(&path, &mut model.params)
        .with_context(|| format!("loading encoder weights {}", path.display()))?;
    Ok(model)
}

/// Rebuild serving state from persisted artifacts over the given database.
fn load_pipeline(config: &Config, data: &Path, db: &RelationalDatabase) -> Result<Pipeline> {
    let vocab = load_vocab(config, data)?;
    let encoder = load_encoder(config, data, &vocab)?;
    let features = encode_tables(&encoder, &vocab, db);
    let (graph, adj) = prepare_graph(db, &features, config)?;
    let gnn_path = resolve(&config.gnn_weights, data, "gnn.bin");
    let mut gnn_cfg = config.gnn.clone();
    gnn_cfg.hidden_dim = encoder.config.embedding_dim();
    let mut gnn =
        GnnModel::<f32>::new(gnn_cfg, &GnnModel::<f32>::relations_of(&graph), config.seed);
    load_into_param_set(&gnn_path, &mut gnn.params)
        .with_context(|| format!("loading gnn weights {}", gnn_path.display()))?;
    Ok(assemble(config.clone(), vocab, encoder, gnn, graph, adj, db)?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RELCAT_LOG", "info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let config = load_config(&cli)?;

    match cli.command {
        Command::Generate => {
            let out = cli.out.clone().context("--out directory is required")?;
            let db = generate_synthetic(&config.synth);
            save_database(&db, &out)?;
            let txns = db.tables["transaction"].rows.len();
            let cats = db.tables["category"].rows.len();
            println!(
                "generated {txns} transactions across {cats} category rows -> {}",
                out.display()
            );
        }
        Command::TrainTokenizer => {
            let data = data_dir(&cli)?;
            let db = load_database(&data)?;
            let (train_db, _) = temporal_split(&db, config.test_per_company);
            let corpus = sentence_corpus(&train_db);
            let vocab = train_wordpiece(
                &corpus,
                config.tokenizer_vocab_size,
                config.tokenizer_min_frequency,
            )?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| resolve(&config.vocab_path, &data, "vocab.txt"));
            vocab.save(&out)?;
            println!(
                "trained vocabulary of {} tokens -> {}",
                vocab.len(),
                out.display()
            );
        }
        Command::TrainEncoder => {
            let data = data_dir(&cli)?;
            let db = load_database(&data)?;
            let (train_db, _) = temporal_split(&db, config.test_per_company);
            let vocab = load_vocab(&config, &data)?;
            let (model, metrics) = train_encoder_stage(&train_db, &vocab, &config)?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| resolve(&config.encoder_weights, &data, "encoder.bin"));
            save_param_set(&out, &model.params)?;
            write_jsonl(out.with_extension("metrics.jsonl"), &metrics)?;
            let last = metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
            println!(
                "trained encoder ({} steps, final loss {last:.4}) -> {}",
                metrics.len(),
                out.display()
            );
        }
        Command::TrainGnn => {
            let data = data_dir(&cli)?;
            let db = load_database(&data)?;
            let (train_db, _) = temporal_split(&db, config.test_per_company);
            let vocab = load_vocab(&config, &data)?;
            let encoder = load_encoder(&config, &data, &vocab)?;
            let (gnn, metrics, _, _) = train_gnn_stage(&train_db, &vocab, &encoder, &config)?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| resolve(&config.gnn_weights, &data, "gnn.bin"));
            save_param_set(&out, &gnn.params)?;
            write_jsonl(out.with_extension("metrics.jsonl"), &metrics)?;
            let last = metrics.last().map(|m| m.loss).unwrap_or(f64::NAN);
            println!(
                "trained gnn ({} epochs, final mean pair loss {last:.4}) -> {}",
                metrics.len(),
                out.display()
            );
        }
        Command::Predict => {
            let data = data_dir(&cli)?;
            let db = load_database(&data)?;
            let pipeline = load_pipeline(&config, &data, &db)?;
            let targets = pipeline.uncategorized();
            log::info!("predicting for {} uncategorized transactions", targets.len());
            let responses: Vec<CascadeResponse> = if cli.zero_shot {
                pipeline.predict_zero_shot(&targets, cli.top_k)
            } else {
                targets
                    .iter()
                    .map(|&t| pipeline.predict_one(t, cli.top_k))
                    .collect::<relcat_core::Result<_>>()?
            };
            let out = cli.out.clone().context("--out file is required")?;
            write_jsonl(&out, &responses)?;
            println!(
                "wrote {} prediction records -> {}",
                responses.len(),
                out.display()
            );
        }
        Command::Evaluate => {
            let data = data_dir(&cli)?;
            let db = load_database(&data)?;
            let (train_db, cases) = temporal_split(&db, config.test_per_company);
            if cases.is_empty() {
                bail!("no test cases: companies are too small for the configured split");
            }
            let pipeline = load_pipeline(&config, &data, &train_db)?;
            let method = if cli.zero_shot {
                EvalMethod::ZeroShot
            } else {
                EvalMethod::Cascade
            };
            let responses = predict_cases(&pipeline, &cases, method, cli.top_k)?;
            let histories = company_history_sets(&train_db);
            let mut report = evaluate(&cases, &responses_to_map(&responses), &histories)?;
            if method == EvalMethod::Cascade {
                report.cascade = Some(cascade_stats(&responses, cli.top_k)?);
            }
            print!("{}", report.summary());
            if let Some(out) = &cli.out {
                write_jsonl(out, &[report])?;
                println!("report -> {}", out.display());
            }
        }
        Command::CascadeStats => {
            let input = cli
                .data
                .clone()
                .context("--data predictions file is required")?;
            let file = std::io::BufReader::new(
                std::fs::File::open(&input)
                    .with_context(|| format!("opening {}", input.display()))?,
            );
            let mut responses = Vec::new();
            for line in file.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                responses.push(serde_json::from_str::<CascadeResponse>(&line)?);
            }
            let stats = cascade_stats(&responses, cli.top_k)?;
            println!("responses: {}", responses.len());
            for (i, f) in stats.resolved_without_gnn.iter().enumerate() {
                println!("resolved without GNN at k={}: {:.4}", i + 1, f);
            }
            if let Some(out) = &cli.out {
                let mut f = std::io::BufWriter::new(std::fs::File::create(out)?);
                writeln!(f, "{}", serde_json::to_string(&stats)?)?;
            }
        }
    }
    Ok(())
}
