//! Flat `key = value` configuration files. Unknown keys are rejected.

use std::path::Path;

use crate::encoder::{EncoderConfig, EncoderTrainConfig};
use crate::error::{Error, Result};
use crate::gnn::{GnnConfig, GnnTrainConfig};
use crate::sampler::FanoutConfig;
use crate::synth::SyntheticConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateScope {
    /// Rank against every category row in the dataset.
    Global,
    /// Restrict ranking to the target company's own category rows.
    Company,
}

#[derive(Clone, Debug)]
pub struct Config {
    pub seed: u64,
    pub synth: SyntheticConfig,
    pub tokenizer_vocab_size: usize,
    pub tokenizer_min_frequency: u64,
    pub encoder: EncoderConfig,
    pub encoder_train: EncoderTrainConfig,
    pub gnn: GnnConfig,
    pub gnn_train: GnnTrainConfig,
    pub fanout: FanoutConfig,
    /// Same-company transaction augmentation on/off (ablation arm).
    pub use_two_hop: bool,
    pub cascade_threshold: f64,
    pub top_k: usize,
    pub test_per_company: usize,
    pub candidate_scope: CandidateScope,
    pub vocab_path: Option<String>,
    pub encoder_weights: Option<String>,
    pub gnn_weights: Option<String>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 42,
            synth: SyntheticConfig::default(),
            tokenizer_vocab_size: 8192,
            tokenizer_min_frequency: 2,
            encoder: EncoderConfig::default(),
            encoder_train: EncoderTrainConfig::default(),
            gnn: GnnConfig::default(),
            gnn_train: GnnTrainConfig::default(),
            fanout: FanoutConfig::default(),
            use_two_hop: true,
            cascade_threshold: 0.8,
            top_k: 5,
            test_per_company: 2,
            candidate_scope: CandidateScope::Global,
            vocab_path: None,
            encoder_weights: None,
            gnn_weights: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| Error::BadConfigValue {
        key: key.to_string(),
        reason: format!("cannot parse `{value}`"),
    })
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::BadConfigValue {
            key: key.to_string(),
            reason: format!("expected a boolean, got `{other}`"),
        }),
    }
}

impl Config {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Config> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::BadConfigValue {
                    key: line.to_string(),
                    reason: "expected `key = value`".into(),
                });
            };
            cfg.apply(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.synth.seed = self.seed;
            }
            "synth.num_companies" => self.synth.num_companies = parse(key, value)?,
            "synth.num_merchants" => self.synth.num_merchants = parse(key, value)?,
            "synth.zipf_exponent" => self.synth.zipf_exponent = parse(key, value)?,
            "synth.txn_per_company_min" => self.synth.transactions_per_company.0 = parse(key, value)?,
            "synth.txn_per_company_max" => self.synth.transactions_per_company.1 = parse(key, value)?,
            "synth.abbreviation_noise_rate" => {
                self.synth.abbreviation_noise_rate = parse(key, value)?
            }
            "synth.memo_rate" => self.synth.memo_rate = parse(key, value)?,
            "synth.personalization_rate" => self.synth.personalization_rate = parse(key, value)?,
            "synth.new_merchant_rate" => self.synth.new_merchant_rate = parse(key, value)?,
            "tokenizer.vocab_size" => self.tokenizer_vocab_size = parse(key, value)?,
            "tokenizer.min_frequency" => self.tokenizer_min_frequency = parse(key, value)?,
            "encoder.layers" => self.encoder.layers = parse(key, value)?,
            "encoder.hidden_dim" => self.encoder.hidden_dim = parse(key, value)?,
            "encoder.attention_heads" => self.encoder.attention_heads = parse(key, value)?,
            "encoder.feedforward_dim" => self.encoder.feedforward_dim = parse(key, value)?,
            "encoder.max_sequence_length" => self.encoder.max_sequence_length = parse(key, value)?,
            "encoder.learnable_temperature" => {
                self.encoder.learnable_temperature = parse_bool(key, value)?
            }
            "encoder_train.steps" => self.encoder_train.steps = parse(key, value)?,
            "encoder_train.batch_size" => self.encoder_train.batch_size = parse(key, value)?,
            "encoder_train.learning_rate" => self.encoder_train.learning_rate = parse(key, value)?,
            "encoder_train.warmup_fraction" => {
                self.encoder_train.warmup_fraction = parse(key, value)?
            }
            "gnn.layers" => self.gnn.layers = parse(key, value)?,
            "gnn.hidden_dim" => self.gnn.hidden_dim = parse(key, value)?,
            "gnn.leaky_slope" => self.gnn.leaky_slope = parse(key, value)?,
            "gnn_train.epochs" => self.gnn_train.epochs = parse(key, value)?,
            "gnn_train.learning_rate" => self.gnn_train.learning_rate = parse(key, value)?,
            "gnn_train.negatives_per_positive" => {
                self.gnn_train.negatives_per_positive = parse(key, value)?
            }
            "gnn_train.positive_fraction" => {
                self.gnn_train.positive_fraction = parse(key, value)?
            }
            "gnn_train.diversity_filtering" => {
                self.gnn_train.diversity_filtering = parse_bool(key, value)?
            }
            "sampler.fanout" => self.fanout.per_relation = parse(key, value)?,
            "sampler.history_k" => self.fanout.history_k = parse(key, value)?,
            "sampler.num_hops" => self.fanout.num_hops = parse(key, value)?,
            "sampler.similarity_sampling" => {
                self.fanout.similarity_sampling = parse_bool(key, value)?
            }
            "graph.two_hop" => self.use_two_hop = parse_bool(key, value)?,
            "cascade.threshold" => self.cascade_threshold = parse(key, value)?,
            "cascade.top_k" => self.top_k = parse(key, value)?,
            "split.test_per_company" => self.test_per_company = parse(key, value)?,
            "rank.candidate_scope" => {
                self.candidate_scope = match value {
                    "global" => CandidateScope::Global,
                    "company" => CandidateScope::Company,
                    other => {
                        return Err(Error::BadConfigValue {
                            key: key.to_string(),
                            reason: format!("expected global|company, got `{other}`"),
                        })
                    }
                }
            }
            "paths.vocab" => self.vocab_path = Some(value.to_string()),
            "paths.encoder_weights" => self.encoder_weights = Some(value.to_string()),
            "paths.gnn_weights" => self.gnn_weights = Some(value.to_string()),
            _ => return Err(Error::UnknownConfigKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.cascade_threshold >= -1.0 && self.cascade_threshold <= 1.0) {
            return Err(Error::InvalidConfig(
                "cascade.threshold must lie in [-1, 1]".into(),
            ));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidConfig("cascade.top_k must be >= 1".into()));
        }
        if !(self.gnn_train.positive_fraction > 0.0 && self.gnn_train.positive_fraction <= 1.0) {
            return Err(Error::InvalidConfig(
                "gnn_train.positive_fraction must lie in (0, 1]".into(),
            ));
        }
        if self.fanout.history_k == 0 {
            return Err(Error::InvalidConfig("sampler.history_k must be >= 1".into()));
        }
        Ok(())
    }
}
