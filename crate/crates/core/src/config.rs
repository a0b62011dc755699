//! Experiment configuration: defaults, a `key = value` file format and the
//! ablation switches.
//!
//! Precedence is command-line flag over config file over default. The echo
//! written next to every run parses back to the same configuration.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::data::{SynthParams, NUM_FOLDS};
use crate::error::{MranError, Result};
use crate::model::ModelSpec;
use crate::optim::AdamConfig;
use crate::training::{LossWeights, TrainConfig};

/// A mixup term that can be switched off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Ablation {
    /// Domain mixup (`λ_m = 0`).
    Dm,
    /// Both category mixup terms.
    Cm,
    /// Labelled category mixup (`λ_a = 0`).
    Lcm,
    /// Unlabeled consistency (`λ_u = 0`).
    Ucm,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Dm, Ablation::Cm, Ablation::Lcm, Ablation::Ucm];

    pub fn key(self) -> &'static str {
        match self {
            Ablation::Dm => "dm",
            Ablation::Cm => "cm",
            Ablation::Lcm => "lcm",
            Ablation::Ucm => "ucm",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Dm => "w/o DM",
            Ablation::Cm => "w/o CM",
            Ablation::Lcm => "w/o LCM",
            Ablation::Ucm => "w/o UCM",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.key().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| MranError::Config(format!("unknown ablation `{s}` (expected dm, cm, lcm or ucm)")))
    }

    pub fn apply(self, w: LossWeights) -> LossWeights {
        match self {
            Ablation::Dm => LossWeights { lambda_m: 0.0, ..w },
            Ablation::Cm => LossWeights {
                lambda_a: 0.0,
                lambda_u: 0.0,
                ..w
            },
            Ablation::Lcm => LossWeights { lambda_a: 0.0, ..w },
            Ablation::Ucm => LossWeights { lambda_u: 0.0, ..w },
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data_dir: Option<PathBuf>,
    /// Domain subdirectories to load; empty means all of them.
    pub domain_names: Vec<String>,
    pub synth: bool,
    pub synth_params: SynthParams,
    pub seed: u64,
    pub repeats: usize,
    /// Cross-validation rotations run per repeat (at most the fold count).
    pub rotations: usize,
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub vocab_size: usize,
    pub ablations: BTreeSet<Ablation>,
    pub output_dir: PathBuf,
    /// Keys set explicitly by a file or flag rather than left at default.
    pub explicit: BTreeSet<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: None,
            domain_names: Vec::new(),
            synth: false,
            synth_params: SynthParams::default(),
            seed: 0,
            repeats: 1,
            rotations: NUM_FOLDS,
            train: TrainConfig::default(),
            model: ModelSpec::default(),
            vocab_size: 5000,
            ablations: BTreeSet::new(),
            output_dir: PathBuf::from("runs"),
            explicit: BTreeSet::new(),
        }
    }
}

/// Every recognised key, in echo order.
pub const KEYS: &[&str] = &[
    "data_dir",
    "domains",
    "synth",
    "synth_domains",
    "synth_labeled",
    "synth_unlabeled",
    "synth_dim",
    "synth_shared_signal",
    "synth_domain_shift",
    "synth_noise",
    "seed",
    "repeats",
    "rotations",
    "batch_size",
    "max_epochs",
    "k_d",
    "alpha",
    "lambda_d",
    "lambda_a",
    "lambda_u",
    "lambda_m",
    "learning_rate",
    "beta1",
    "beta2",
    "epsilon",
    "weight_decay",
    "max_grad_norm",
    "per_pair_lambda",
    "consistency_target_grad",
    "log_counts",
    "dropout",
    "extractor_hidden",
    "shared_dim",
    "domain_dim",
    "vocab_size",
    "ablate",
    "output_dir",
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| MranError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(MranError::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        let s = &mut self.synth_params;
        let a: &mut AdamConfig = &mut t.adam;
        match key {
            "data_dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "domains" => self.domain_names = parse_list(v),
            "synth" => self.synth = parse_bool(key, v)?,
            "synth_domains" => s.domains = parse_num(key, v)?,
            "synth_labeled" => s.n_labeled = parse_num(key, v)?,
            "synth_unlabeled" => s.n_unlabeled = parse_num(key, v)?,
            "synth_dim" => s.dim = parse_num(key, v)?,
            "synth_shared_signal" => s.shared_signal = parse_num(key, v)?,
            "synth_domain_shift" => s.domain_shift = parse_num(key, v)?,
            "synth_noise" => s.noise = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "repeats" => self.repeats = parse_num(key, v)?,
            "rotations" => self.rotations = parse_num(key, v)?,
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "max_epochs" => t.max_epochs = parse_num(key, v)?,
            "k_d" => t.k_d = parse_num(key, v)?,
            "alpha" => t.alpha = parse_num(key, v)?,
            "lambda_d" => t.weights.lambda_d = parse_num(key, v)?,
            "lambda_a" => t.weights.lambda_a = parse_num(key, v)?,
            "lambda_u" => t.weights.lambda_u = parse_num(key, v)?,
            "lambda_m" => t.weights.lambda_m = parse_num(key, v)?,
            "learning_rate" => a.learning_rate = parse_num(key, v)?,
            "beta1" => a.beta1 = parse_num(key, v)?,
            "beta2" => a.beta2 = parse_num(key, v)?,
            "epsilon" => a.epsilon = parse_num(key, v)?,
            "weight_decay" => a.weight_decay = parse_num(key, v)?,
            "max_grad_norm" => a.max_grad_norm = parse_num(key, v)?,
            "per_pair_lambda" => t.per_pair_lambda = parse_bool(key, v)?,
            "consistency_target_grad" => t.consistency_target_grad = parse_bool(key, v)?,
            "log_counts" => t.log_counts = parse_bool(key, v)?,
            "dropout" => self.model.dropout = parse_num(key, v)?,
            "extractor_hidden" => {
                self.model.extractor_hidden = parse_list(v)
                    .iter()
                    .map(|w| parse_num(key, w))
                    .collect::<Result<_>>()?
            }
            "shared_dim" => self.model.shared_dim = parse_num(key, v)?,
            "domain_dim" => self.model.domain_dim = parse_num(key, v)?,
            "vocab_size" => self.vocab_size = parse_num(key, v)?,
            "ablate" => {
                self.ablations = parse_list(v)
                    .iter()
                    .map(|x| Ablation::parse(x))
                    .collect::<Result<_>>()?
            }
            "output_dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(MranError::Config(format!("unknown config key `{key}`"))),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| MranError::Parse {
                line: n + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                MranError::Config(message) => MranError::Parse { line: n + 1, message },
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| MranError::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let t = &self.train;
        let s = &self.synth_params;
        let a = &t.adam;
        let v = match key {
            "data_dir" => self.data_dir.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            "domains" => self.domain_names.join(","),
            "synth" => self.synth.to_string(),
            "synth_domains" => s.domains.to_string(),
            "synth_labeled" => s.n_labeled.to_string(),
            "synth_unlabeled" => s.n_unlabeled.to_string(),
            "synth_dim" => s.dim.to_string(),
            "synth_shared_signal" => s.shared_signal.to_string(),
            "synth_domain_shift" => s.domain_shift.to_string(),
            "synth_noise" => s.noise.to_string(),
            "seed" => self.seed.to_string(),
            "repeats" => self.repeats.to_string(),
            "rotations" => self.rotations.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "k_d" => t.k_d.to_string(),
            "alpha" => t.alpha.to_string(),
            "lambda_d" => t.weights.lambda_d.to_string(),
            "lambda_a" => t.weights.lambda_a.to_string(),
            "lambda_u" => t.weights.lambda_u.to_string(),
            "lambda_m" => t.weights.lambda_m.to_string(),
            "learning_rate" => a.learning_rate.to_string(),
            "beta1" => a.beta1.to_string(),
            "beta2" => a.beta2.to_string(),
            "epsilon" => a.epsilon.to_string(),
            "weight_decay" => a.weight_decay.to_string(),
            "max_grad_norm" => a.max_grad_norm.to_string(),
            "per_pair_lambda" => t.per_pair_lambda.to_string(),
            "consistency_target_grad" => t.consistency_target_grad.to_string(),
            "log_counts" => t.log_counts.to_string(),
            "dropout" => self.model.dropout.to_string(),
            "extractor_hidden" => join(&self.model.extractor_hidden),
            "shared_dim" => self.model.shared_dim.to_string(),
            "domain_dim" => self.model.domain_dim.to_string(),
            "vocab_size" => self.vocab_size.to_string(),
            "ablate" => join(&self.ablations),
            "output_dir" => self.output_dir.display().to_string(),
            _ => return None,
        };
        Some(v)
    }

    /// Every key with its effective value, one `key = value` per line.
    pub fn echo(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).unwrap_or_default()))
            .collect()
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Loss weights after applying the ablation switches.
    pub fn weights(&self) -> LossWeights {
        self.ablations
            .iter()
            .fold(self.train.weights, |w, a| a.apply(w))
    }

    /// Training settings with ablations folded into the weights.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            weights: self.weights(),
            ..self.train.clone()
        }
    }

    /// Architecture for a dataset of the given shape.
    pub fn model_spec(&self, input_dim: usize, domains: usize) -> ModelSpec {
        ModelSpec {
            input_dim,
            domains,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(MranError::Config("repeats must be at least 1".into()));
        }
        if !(1..=NUM_FOLDS).contains(&self.rotations) {
            return Err(MranError::Config(format!(
                "rotations must lie in 1..={NUM_FOLDS}, got {}",
                self.rotations
            )));
        }
        if self.vocab_size == 0 {
            return Err(MranError::Config("vocab_size must be at least 1".into()));
        }
        if self.synth && self.data_dir.is_some() {
            return Err(MranError::Config("use either a data directory or the synthetic task, not both".into()));
        }
        self.train.validate()?;
        self.model_spec(1, 2).shared_spec().validate()?;
        let a = &self.train.adam;
        if a.learning_rate.is_nan() || a.learning_rate <= 0.0 || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(MranError::Config(format!("invalid Adam settings: {a:?}")));
        }
        Ok(())
    }
}
