//! Experiment configuration: one JSON document, layered as
//! built-in defaults, then the config file, then `--set key.path=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use sda_core::{
    LikelihoodCovariance, LikelihoodVariant, LorenzParams, NetworkConfig, ObservationOperator,
    SamplerConfig, TrainConfig,
};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub system: LorenzParams,
    pub dataset: DatasetSection,
    pub network: NetworkSection,
    pub training: TrainingSection,
    pub observation: ObservationSection,
    pub guidance: GuidanceSection,
    pub sampler: SamplerSection,
    pub bpf: BpfSection,
    pub evaluation: EvaluationSection,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub trajectories: usize,
    pub length: usize,
    pub burn_in: usize,
    pub path: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            trajectories: 1024,
            length: 1024,
            burn_in: 1024,
            path: "data/lorenz.sdat".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// `k`: windows hold `2k + 1` states.
    pub window_radius: usize,
    pub hidden_features: usize,
    pub residual_blocks: usize,
    pub time_embedding_dim: usize,
}

impl Default for NetworkSection {
    fn default() -> Self {
        Self {
            window_radius: 2,
            hidden_features: 128,
            residual_blocks: 3,
            time_embedding_dim: 16,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub validation_windows: usize,
    /// Save a resumable state every this many epochs.
    pub checkpoint_every: usize,
    pub checkpoint: PathBuf,
    pub state: PathBuf,
    pub log: PathBuf,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            epochs: 256,
            batches_per_epoch: 64,
            batch_size: 256,
            learning_rate: 1e-3,
            weight_decay: 1e-3,
            validation_windows: 1024,
            checkpoint_every: 16,
            checkpoint: "model/network.sdck".into(),
            state: "model/network.sdos".into(),
            log: "model/train_log.csv".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSection {
    pub operator: ObservationOperator,
    /// Standard deviation of the observation noise, in standardized units.
    pub noise_std: f64,
    /// Index of the ground-truth trajectory within the evaluation split.
    pub trajectory: usize,
    /// Number of states `L` of the assimilation window.
    pub length: usize,
    pub path: PathBuf,
    pub truth: PathBuf,
}

impl Default for ObservationSection {
    fn default() -> Self {
        Self {
            operator: ObservationOperator::Stride {
                start: 0,
                step: 8,
                channels: vec![0],
            },
            noise_std: 0.05,
            trajectory: 0,
            length: 65,
            path: "obs/observation.sdao".into(),
            truth: "obs/truth.sdat".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Sda,
    Dps,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSection {
    pub variant: Variant,
    /// Scalar `Γ = γ·I` of the SDA covariance `Σ_y + (σ²/μ²)·γ·I`.
    pub gamma: f64,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        Self {
            variant: Variant::Sda,
            gamma: 1e-2,
        }
    }
}

impl GuidanceSection {
    pub fn likelihood(&self) -> LikelihoodVariant {
        match self.variant {
            Variant::Sda => LikelihoodVariant::Sda(LikelihoodCovariance::Surrogate(self.gamma)),
            Variant::Dps => LikelihoodVariant::Dps,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub samples: usize,
    pub steps: usize,
    pub corrections: usize,
    pub tau: f64,
    pub output: PathBuf,
    pub prior_output: PathBuf,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            samples: 256,
            steps: 256,
            corrections: 1,
            tau: 0.25,
            output: "posterior/sda.sdat".into(),
            prior_output: "posterior/prior.sdat".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpfSection {
    pub particles: usize,
    pub draws: usize,
    /// Steps used to draw stationary initial particles.
    pub burn_in: usize,
    pub output: PathBuf,
}

impl Default for BpfSection {
    fn default() -> Self {
        Self {
            particles: 1 << 14,
            draws: 256,
            burn_in: 1024,
            output: "posterior/bpf.sdat".into(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    /// Trajectories per ensemble entering each W₁ computation.
    pub w1_samples: usize,
    /// Report path without extension; `.csv` and `.json` are appended.
    pub report: PathBuf,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            w1_samples: 256,
            report: "report/stats".into(),
        }
    }
}

/// Seed tags of the independent random sub-tasks of an experiment.
pub mod tags {
    pub const DATASET: u64 = 1;
    pub const NETWORK_INIT: u64 = 2;
    pub const TRAINING: u64 = 3;
    pub const OBSERVATION: u64 = 4;
    pub const PRIOR_SAMPLING: u64 = 5;
    pub const POSTERIOR_SAMPLING: u64 = 6;
    pub const PARTICLE_FILTER: u64 = 7;
    pub const EVALUATION: u64 = 8;
}

impl ExperimentConfig {
    /// Defaults, overlaid with `file` and then with `overrides`.
    pub fn layered(file: Option<Value>, overrides: &[(String, Value)]) -> Result<(Self, Value)> {
        let mut value = serde_json::to_value(Self::default()).expect("defaults serialize");
        if let Some(file) = file {
            if !file.is_object() {
                return Err(CliError::Config("the config document must be a JSON object".into()));
            }
            merge(&mut value, file);
        }
        for (key, v) in overrides {
            set_dotted(&mut value, key, v.clone())?;
        }
        let config: Self =
            serde_json::from_value(value.clone()).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        // round trip so that the hash sees normalized values
        let value = serde_json::to_value(&config).expect("config serializes");
        Ok((config, value))
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.network.window_radius;
        let fail = |m: String| Err(CliError::Config(m));
        if k == 0 {
            return fail("network.window_radius must be at least 1".into());
        }
        if self.dataset.length < 2 * k + 1 {
            return fail(format!(
                "dataset.length = {} is shorter than a window of 2k + 1 = {} states",
                self.dataset.length,
                2 * k + 1
            ));
        }
        if self.observation.length < 2 * k + 1 {
            return fail(format!(
                "observation.length = {} is shorter than a window of 2k + 1 = {} states",
                self.observation.length,
                2 * k + 1
            ));
        }
        if !(self.observation.noise_std > 0.0) {
            return fail("observation.noise_std must be positive".into());
        }
        if self.dataset.trajectories == 0 || self.dataset.burn_in == 0 {
            return fail("dataset.trajectories and dataset.burn_in must be positive".into());
        }
        if !(self.guidance.gamma >= 0.0) {
            return fail("guidance.gamma must be non-negative".into());
        }
        if self.sampler.samples == 0 {
            return fail("sampler.samples must be positive".into());
        }
        if self.bpf.particles < 2 || self.bpf.draws == 0 || self.bpf.burn_in == 0 {
            return fail("bpf needs at least 2 particles, 1 draw and 1 burn-in step".into());
        }
        if self.evaluation.w1_samples == 0 || self.evaluation.w1_samples > sda_core::evaluation::DEFAULT_W1_CAP {
            return fail(format!(
                "evaluation.w1_samples must lie in 1..={}",
                sda_core::evaluation::DEFAULT_W1_CAP
            ));
        }
        if self.training.checkpoint_every == 0 {
            return fail("training.checkpoint_every must be positive".into());
        }
        self.sampler_config(0).validate()?;
        self.train_config().validate(self.dataset.length)?;
        self.network_config(sda_core::lorenz::STATE_DIM).validate()?;
        Ok(())
    }

    pub fn network_config(&self, state_dim: usize) -> NetworkConfig {
        NetworkConfig {
            window_radius: self.network.window_radius,
            state_dim,
            hidden_features: self.network.hidden_features,
            residual_blocks: self.network.residual_blocks,
            time_embedding_dim: self.network.time_embedding_dim,
            seed: sda_core::rng::derive_seed(self.seed, tags::NETWORK_INIT),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batches_per_epoch: t.batches_per_epoch,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            k: self.network.window_radius,
            seed: sda_core::rng::derive_seed(self.seed, tags::TRAINING),
            validation_windows: t.validation_windows,
        }
    }

    pub fn sampler_config(&self, tag: u64) -> SamplerConfig {
        SamplerConfig {
            steps: self.sampler.steps,
            corrections: self.sampler.corrections,
            tau: self.sampler.tau,
            seed: sda_core::rng::derive_seed(self.seed, tag),
        }
    }
}

/// Recursive merge; objects carrying an `op` tag are replaced wholesale so that
/// switching operator kinds does not leave stale fields behind.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) if !o.contains_key("op") => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key `{key}`")));
    }
    for part in &parts[..parts.len() - 1] {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(*part))
            .ok_or_else(|| CliError::Config(format!("unknown config key `{key}`")))?;
    }
    let last = parts[parts.len() - 1];
    let obj = node
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("`{key}` does not name a field")))?;
    if !obj.contains_key(last) {
        return Err(CliError::Config(format!("unknown config key `{key}`")));
    }
    obj.insert(last.to_string(), value);
    Ok(())
}

/// Parses `key=value`; the value is read as JSON when possible and as a string otherwise.
pub fn parse_override(text: &str) -> Result<(String, Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{text}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.trim().to_string(), value))
}

/// SHA-256 of the canonical (key-sorted, compact) JSON encoding.
pub fn config_hash(value: &Value) -> String {
    let bytes = serde_json::to_vec(value).expect("JSON values serialize");
    hex::encode(Sha256::digest(&bytes))
}

pub fn load_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::File {
        path: path.to_path_buf(),
        source: sda_core::Error::Io(e),
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_reach_nested_fields() {
        let o = vec![parse_override("training.epochs=3").unwrap(), parse_override("guidance.variant=dps").unwrap()];
        let (c, _) = ExperimentConfig::layered(None, &o).unwrap();
        assert_eq!(c.training.epochs, 3);
        assert_eq!(c.guidance.variant, Variant::Dps);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::layered(None, &[parse_override("training.epoch=3").unwrap()]).is_err());
        assert!(ExperimentConfig::layered(Some(json!({"sampler": {"stepz": 4}})), &[]).is_err());
    }

    #[test]
    fn operator_objects_are_replaced_not_merged() {
        let file = json!({"observation": {"operator": {"op": "coordinates", "channels": [1]}}});
        let (c, _) = ExperimentConfig::layered(Some(file), &[]).unwrap();
        assert_eq!(c.observation.operator, ObservationOperator::Coordinates { channels: vec![1] });
    }

    #[test]
    fn window_must_fit_the_trajectories() {
        let file = json!({"dataset": {"length": 4}, "observation": {"length": 4}});
        let err = ExperimentConfig::layered(Some(file), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn hash_depends_on_content_only() {
        let (_, a) = ExperimentConfig::layered(Some(json!({"seed": 4, "sampler": {"tau": 0.5}})), &[]).unwrap();
        let (_, b) = ExperimentConfig::layered(Some(json!({"sampler": {"tau": 0.5}, "seed": 4})), &[]).unwrap();
        let (_, c) = ExperimentConfig::layered(Some(json!({"seed": 5})), &[]).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(config_hash(&a), config_hash(&c));
        assert_eq!(config_hash(&a).len(), 64);
    }
}
