//! Experiment configuration: a flat `key = value` text format with strict
//! validation, plus the defaults for the desk-scale reference setup.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::data::SyntheticDatasetSpec;
use crate::router::{GroupPartition, RouterConfig, RoutingVariant};

/// Complete description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub variant: RoutingVariant,
    pub num_experts: usize,
    pub num_groups: usize,
    /// Experts kept per group by the grouped variants.
    pub k_per_group: usize,
    /// Experts kept in total by the flat variants.
    pub flat_k: usize,
    pub temperature: f64,
    /// Strength of the running-mean logit correction.
    pub tau: f64,
    /// Decay of the running logit mean.
    pub ema_decay: f64,
    /// Load-balance coefficient.
    pub alpha: f64,
    pub lambda_intra: f64,
    pub lambda_inter: f64,
    pub dim: usize,
    pub d_ff: usize,
    pub num_classes: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub num_clusters: usize,
    pub tokens_per_cluster: usize,
    pub cluster_spread: f64,
    pub data_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> ExperimentConfig {
        ExperimentConfig {
            variant: RoutingVariant::HiMoe,
            num_experts: 8,
            num_groups: 4,
            k_per_group: 1,
            flat_k: 4,
            temperature: 1.0,
            tau: 0.01,
            ema_decay: 0.9,
            alpha: 0.01,
            lambda_intra: 0.1,
            lambda_inter: 0.05,
            dim: 16,
            d_ff: 64,
            num_classes: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            steps: 2000,
            batch_size: 32,
            seed: 1,
            num_clusters: 16,
            tokens_per_cluster: 32,
            cluster_spread: 0.35,
            data_seed: 1,
        }
    }
}

impl ExperimentConfig {
    /// Parses the flat `key = value` format. Lines may be blank or start
    /// with `#`; every key must be known and appear at most once.
    pub fn parse_str(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (key, value) = trimmed.split_once('=').ok_or_else(|| Error::ConfigParse {
                line,
                reason: format!("expected `key = value`, got `{trimmed}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(Error::ConfigParse {
                    line,
                    reason: format!("duplicate key `{key}`"),
                });
            }
            seen.push(key.to_string());
            cfg.apply(key, value, line)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::parse_str(&text)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
            value.parse().map_err(|_| Error::ConfigParse {
                line,
                reason: format!("invalid value `{value}` for `{key}`"),
            })
        }
        match key {
            "variant" => {
                self.variant = RoutingVariant::parse(value).map_err(|_| Error::ConfigParse {
                    line,
                    reason: format!(
                        "unknown variant `{value}` (expected one of flat, flat_lossfree_bias, grouped, hi_moe)"
                    ),
                })?;
            }
            "num_experts" => self.num_experts = num(key, value, line)?,
            "num_groups" => self.num_groups = num(key, value, line)?,
            "k_per_group" => self.k_per_group = num(key, value, line)?,
            "flat_k" => self.flat_k = num(key, value, line)?,
            "temperature" => self.temperature = num(key, value, line)?,
            "tau" => self.tau = num(key, value, line)?,
            "ema_decay" => self.ema_decay = num(key, value, line)?,
            "alpha" => self.alpha = num(key, value, line)?,
            "lambda_intra" => self.lambda_intra = num(key, value, line)?,
            "lambda_inter" => self.lambda_inter = num(key, value, line)?,
            "dim" => self.dim = num(key, value, line)?,
            "d_ff" => self.d_ff = num(key, value, line)?,
            "num_classes" => self.num_classes = num(key, value, line)?,
            "learning_rate" => self.learning_rate = num(key, value, line)?,
            "beta1" => self.beta1 = num(key, value, line)?,
            "beta2" => self.beta2 = num(key, value, line)?,
            "steps" => self.steps = num(key, value, line)?,
            "batch_size" => self.batch_size = num(key, value, line)?,
            "seed" => self.seed = num(key, value, line)?,
            "num_clusters" => self.num_clusters = num(key, value, line)?,
            "tokens_per_cluster" => self.tokens_per_cluster = num(key, value, line)?,
            "cluster_spread" => self.cluster_spread = num(key, value, line)?,
            "data_seed" => self.data_seed = num(key, value, line)?,
            _ => {
                return Err(Error::ConfigParse {
                    line,
                    reason: format!("unknown key `{key}`"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidConfig { reason });
        if self.num_experts == 0 {
            return bad("num_experts must be positive".into());
        }
        if self.num_groups == 0 || self.num_groups > self.num_experts {
            return bad(format!(
                "num_groups must be in 1..={}, got {}",
                self.num_experts, self.num_groups
            ));
        }
        if self.num_experts % self.num_groups != 0 {
            return bad(format!(
                "num_experts ({}) must be divisible by num_groups ({})",
                self.num_experts, self.num_groups
            ));
        }
        let group_size = self.num_experts / self.num_groups;
        if self.k_per_group == 0 || self.k_per_group > group_size {
            return bad(format!(
                "k_per_group must be in 1..={group_size}, got {}",
                self.k_per_group
            ));
        }
        if self.flat_k != self.k_per_group * self.num_groups {
            return bad(format!(
                "flat_k ({}) must equal k_per_group * num_groups ({}) so every variant \
                 activates the same compute",
                self.flat_k,
                self.k_per_group * self.num_groups
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        for (name, v) in [
            ("tau", self.tau),
            ("alpha", self.alpha),
            ("lambda_intra", self.lambda_intra),
            ("lambda_inter", self.lambda_inter),
            ("cluster_spread", self.cluster_spread),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and nonnegative, got {v}"));
            }
        }
        if !(self.ema_decay >= 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay must be in [0, 1), got {}", self.ema_decay));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v >= 0.0 && v < 1.0) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        for (name, v) in [
            ("dim", self.dim),
            ("d_ff", self.d_ff),
            ("num_classes", self.num_classes),
            ("batch_size", self.batch_size),
            ("num_clusters", self.num_clusters),
            ("tokens_per_cluster", self.tokens_per_cluster),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        Ok(())
    }

    /// Routing configuration with the contiguous balanced partition.
    pub fn router_config(&self) -> Result<RouterConfig> {
        let partition = GroupPartition::contiguous(self.num_experts, self.num_groups)?;
        let cfg = RouterConfig {
            num_experts: self.num_experts,
            partition,
            k_per_group: vec![self.k_per_group; self.num_groups],
            flat_k: self.flat_k,
            temperature: self.temperature,
            bias_strength: self.tau,
            ema_decay: self.ema_decay,
            load_coeff: self.alpha,
            lambda_intra: self.lambda_intra,
            lambda_inter: self.lambda_inter,
            variant: self.variant,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dataset_spec(&self) -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            num_clusters: self.num_clusters,
            dim: self.dim,
            tokens_per_cluster: self.tokens_per_cluster,
            cluster_spread: self.cluster_spread,
            seed: self.data_seed,
        }
    }

    /// Serializes back to the flat text format, one key per line, every key
    /// present, in the documented order.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        use std::fmt::Write as _;
        let _ = writeln!(s, "variant = {}", self.variant.as_str());
        let _ = writeln!(s, "num_experts = {}", self.num_experts);
        let _ = writeln!(s, "num_groups = {}", self.num_groups);
        let _ = writeln!(s, "k_per_group = {}", self.k_per_group);
        let _ = writeln!(s, "flat_k = {}", self.flat_k);
        let _ = writeln!(s, "temperature = {}", self.temperature);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "ema_decay = {}", self.ema_decay);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "lambda_intra = {}", self.lambda_intra);
        let _ = writeln!(s, "lambda_inter = {}", self.lambda_inter);
        let _ = writeln!(s, "dim = {}", self.dim);
        let _ = writeln!(s, "d_ff = {}", self.d_ff);
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "learning_rate = {}", self.learning_rate);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "num_clusters = {}", self.num_clusters);
        let _ = writeln!(s, "tokens_per_cluster = {}", self.tokens_per_cluster);
        let _ = writeln!(s, "cluster_spread = {}", self.cluster_spread);
        let _ = writeln!(s, "data_seed = {}", self.data_seed);
        s
    }
}
