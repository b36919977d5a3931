//! Run configuration: one JSON document with `data`, `model`, `train`,
//! `eval` and `seed` sections. Missing fields take defaults; unknown keys are
//! errors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use servib::datagen::CorpusSpec;
use servib::model::ModelConfig;
use servib::trainer::{TrainConfig, DEFAULT_BETAS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Folds for per-fold scoring and for the sweep's held-out split.
    pub folds: usize,
    pub betas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { folds: 5, betas: DEFAULT_BETAS.to_vec() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: CorpusSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config: {0}")]
    Invalid(String),
}

/// Flag values that win over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub cycles: Option<usize>,
    pub beta: Option<f64>,
    pub betas: Option<Vec<f64>>,
    pub folds: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        Ok(serde_json::from_str(text)?)
    }

    /// Reads `path`, or starts from defaults when there is no file.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|source| ConfigError::Read { path: p.display().to_string(), source })?;
                Self::from_json(&text)?
            }
            None => Self::default(),
        };
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(c) = o.cycles {
            self.train.cycles = c;
        }
        if let Some(b) = o.beta {
            self.train.beta = b;
        }
        if let Some(b) = &o.betas {
            self.eval.betas = b.clone();
        }
        if let Some(f) = o.folds {
            self.eval.folds = f;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = ConfigError::Invalid;
        self.data.validate().map_err(|e| invalid(format!("data: {e}")))?;
        self.model.validate().map_err(invalid)?;
        self.train.validate().map_err(invalid)?;
        if self.eval.folds < 2 {
            return Err(invalid(format!("eval.folds must be at least 2, got {}", self.eval.folds)));
        }
        if self.eval.betas.is_empty() {
            return Err(invalid("eval.betas must not be empty".into()));
        }
        if let Some(b) = self.eval.betas.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
            return Err(invalid(format!("eval.betas entries must be non-negative, got {b}")));
        }
        Ok(())
    }

    /// The corpus spec with the run seed filled in.
    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec { seed: self.seed, ..self.data.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// Effective config as written next to run outputs.
    pub fn echo(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(RunConfig::from_json(&c.echo()).unwrap(), c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_json(r#"{"eval": {"betas_": [1.0]}}"#).unwrap_err();
        assert!(e.to_string().contains("betas_"), "{e}");
        let e = RunConfig::from_json(r#"{"train": {"epochs": 3}}"#).unwrap_err();
        assert!(e.to_string().contains("epochs"), "{e}");
        let e = RunConfig::from_json(r#"{"data": {"n_utterances": 10, "noise": 0.1}}"#).unwrap_err();
        assert!(e.to_string().contains("noise"), "{e}");
    }

    #[test]
    fn every_corpus_and_train_field_is_addressable() {
        let text = r#"{
            "data": {"n_utterances": 12, "n_layers": 4, "min_frames": 8, "max_frames": 9, "dim": 5,
                     "vocab_size": 30, "content_layers": [0], "descriptor_layers": [3],
                     "class_prior": {"neutral": 1.0, "sad": 2.0}, "noise_std": 0.1,
                     "distractor_std": 0.5, "descriptor_correlation": 0.3, "encoder_seed": 9},
            "train": {"beta": 0.5, "epochs_per_stage": 3, "cycles": 2, "batch_size": 2,
                      "stage1_lr": 0.1, "stage2_peak_lr": 0.2, "warmup_fraction": 0.1,
                      "mixing": "round_robin", "grad_clip": null, "lora_in_stage1": false,
                      "train_decoder_base": true, "pretrain_epochs": 0, "pretrain_lr": 0.3,
                      "optimizer": {"beta1": 0.8, "beta2": 0.99, "eps": 1e-6, "weight_decay": 0.0}},
            "seed": 4
        }"#;
        let c = RunConfig::from_json(text).unwrap();
        c.validate().unwrap();
        assert_eq!(c.data.dim, 5);
        assert_eq!(c.data.encoder_seed, 9);
        assert_eq!(c.train.grad_clip, None);
        assert_eq!(c.train.optimizer.beta1, 0.8);
        assert_eq!(c.corpus_spec().seed, 4);
        assert_eq!(c.train_config().seed, 4);
    }

    #[test]
    fn flags_win_over_the_file() {
        let mut c = RunConfig::from_json(r#"{"seed": 1, "train": {"cycles": 4, "beta": 0.1}}"#).unwrap();
        c.apply(&Overrides { seed: Some(7), cycles: Some(1), beta: Some(1e-3), ..Overrides::default() });
        assert_eq!((c.seed, c.train.cycles, c.train.beta), (7, 1, 1e-3));
    }

    #[test]
    fn validation_names_the_offending_key() {
        let mut c = RunConfig::default();
        c.train.cycles = 0;
        assert!(c.validate().unwrap_err().to_string().contains("train.cycles"));
        let mut c = RunConfig::default();
        c.eval.folds = 1;
        assert!(c.validate().unwrap_err().to_string().contains("eval.folds"));
        let mut c = RunConfig::default();
        c.model.latent = 0;
        assert!(c.validate().unwrap_err().to_string().contains("model.latent"));
    }
}
