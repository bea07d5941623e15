//! JSON run configuration: strict schema, defaults, and derivation of the
//! per-run task and trainer configurations.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::{TaskParams, DEFAULT_TEST_PER_CLASS, TEMPLATE_TOKEN_NORM};
use crate::trainer::{LrSchedule, Method, TrainConfig};

/// Configuration for task generation, training, and evaluation runs.
/// Unknown keys are rejected; missing keys take the defaults below.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub dim: usize,
    /// Hidden width of the frozen synthetic encoder.
    pub hidden: usize,
    /// Shot grid for protocol runs.
    pub shots: Vec<usize>,
    /// Context length.
    #[serde(rename = "M")]
    pub m: usize,
    pub tau: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub kg_weight: f64,
    pub lr: f64,
    pub schedule: String,
    pub epochs: usize,
    pub batch: usize,
    /// Mixed samples per batch; absent means one per original.
    pub mix_count: Option<usize>,
    pub noise_sigma: f64,
    pub prototype_perturb: f64,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            num_classes: 10,
            dim: 64,
            hidden: 128,
            shots: vec![1, 2, 4, 8, 16],
            m: 16,
            tau: 0.01,
            lambda1: 1.0,
            lambda2: 2.0,
            kg_weight: 8.0,
            lr: 0.01,
            schedule: "constant".to_string(),
            epochs: 100,
            batch: 8,
            mix_count: None,
            noise_sigma: 0.3,
            prototype_perturb: 0.2,
            methods: vec![
                "zeroshot".to_string(),
                "coop".to_string(),
                "prograd".to_string(),
                "kgcoop".to_string(),
                "ours".to_string(),
            ],
            seeds: vec![1, 2, 3],
            out_dir: "out".to_string(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes % 2 != 0 {
            return Err(Error::config("num_classes must be even and >= 2".to_string()));
        }
        if self.dim < 2 {
            return Err(Error::config("dim must be >= 2".to_string()));
        }
        if self.shots.is_empty() || self.shots.iter().any(|&k| k == 0) {
            return Err(Error::config("shots must be a nonempty list of positive counts"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds must be nonempty".to_string()));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods must be nonempty".to_string()));
        }
        for m in &self.methods {
            if m != "zeroshot" {
                Method::from_str(m)?;
            }
        }
        LrSchedule::from_str(&self.schedule)?;
        if self.noise_sigma < 0.0 || self.prototype_perturb < 0.0 {
            return Err(Error::config("noise levels must be nonnegative".to_string()));
        }
        // Trainer-side numeric checks share one implementation.
        self.train_config(Method::Coop, self.seed).validate()
    }

    /// Generation parameters for one task. The pool holds `pool_shots`
    /// train samples per base class (protocols pass the largest K so one
    /// task serves the whole shot grid).
    pub fn task_params(&self, seed: u64, pool_shots: usize) -> TaskParams {
        TaskParams {
            num_classes: self.num_classes,
            dim: self.dim,
            hidden: self.hidden,
            shots: pool_shots,
            test_per_class: DEFAULT_TEST_PER_CLASS,
            noise_sigma: self.noise_sigma,
            prototype_perturb: self.prototype_perturb,
            m_tokens: self.m,
            template_token_norm: TEMPLATE_TOKEN_NORM,
            seed,
        }
    }

    pub fn max_shots(&self) -> usize {
        self.shots.iter().copied().max().unwrap_or(1)
    }

    pub fn train_config(&self, method: Method, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(method, seed);
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch;
        cfg.mix_count = self.mix_count;
        cfg.learning_rate = self.lr;
        cfg.schedule = LrSchedule::from_str(&self.schedule).unwrap_or(LrSchedule::Constant);
        cfg.lambda1 = self.lambda1;
        cfg.lambda2 = self.lambda2;
        cfg.kg_weight = self.kg_weight;
        cfg.tau = self.tau;
        cfg.context_len = self.m;
        cfg
    }

    /// Applies a command-line seed override: replaces both the scalar seed
    /// and the protocol seed list.
    pub fn with_seed_override(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
            self.seeds = vec![s];
        }
        self
    }

    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

/// Reads and validates a UTF-8 JSON config file. A missing or malformed
/// file is a configuration error, not a runtime failure.
pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::config(format!("cannot read config {}: {e}", path.display()))
    })?;
    let cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("invalid config {}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let cfg: std::result::Result<RunConfig, _> =
            serde_json::from_str(r#"{"seed": 3, "bogus_key": 1}"#);
        assert!(cfg.is_err());
    }

    #[test]
    fn partial_configs_take_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 9, "dim": 32}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.dim, 32);
        assert_eq!(cfg.m, 16);
        assert_eq!(cfg.lambda2, 2.0);
    }

    #[test]
    fn capital_m_key_maps_to_context_length() {
        let cfg: RunConfig = serde_json::from_str(r#"{"M": 8}"#).unwrap();
        assert_eq!(cfg.m, 8);
    }

    #[test]
    fn bad_method_and_odd_classes_fail_validation() {
        let mut cfg = RunConfig::default();
        cfg.methods = vec!["mystery".to_string()];
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.num_classes = 7;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn seed_override_collapses_the_seed_list() {
        let cfg = RunConfig::default().with_seed_override(Some(42));
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.seeds, vec![42]);
        let untouched = RunConfig::default().with_seed_override(None);
        assert_eq!(untouched.seeds, vec![1, 2, 3]);
    }

    #[test]
    fn missing_config_file_is_a_config_error() {
        let err = load_run_config(Path::new("/nonexistent/cfg.json")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
