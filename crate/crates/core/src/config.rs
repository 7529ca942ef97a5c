//! Declarative experiment configuration, read from a single TOML file.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::correlation::SelectionMode;
use crate::error::{Error, Result};
use crate::forecast::DEFAULT_SAMPLES;
use crate::intervention::{DEFAULT_TARGET_BLOCKS, DEFAULT_WINDOW};
use crate::io::sha256_bytes;
use crate::mock::MockConfig;
use crate::physics::{SamplingRanges, SystemKind, DEFAULT_DT, FORECAST_HORIZON};
use crate::protocol::AblationMode;
use crate::sae::TrainConfig;
use crate::tokenizer::{DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_PRECISION};

/// `{0, 4, ..., 60} + {63}`.
pub fn default_blocks() -> Vec<u32> {
    (0..=60).step_by(4).chain([63]).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub n_trajectories: usize,
    pub dt: f64,
    pub ranges: SamplingRanges,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            n_trajectories: 10,
            dt: DEFAULT_DT,
            ranges: SamplingRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub alpha: f64,
    pub beta: f64,
    pub precision: u32,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            precision: DEFAULT_PRECISION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    /// `mock`, `tcp://host:port` or `stdio:<command>`.
    pub endpoint: String,
    /// Concurrent sessions; 0 means one per worker for the in-process mock
    /// and a single session otherwise.
    pub sessions: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            endpoint: "mock".into(),
            sessions: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptureConfig {
    /// Channel names to prompt; empty means every channel.
    pub channels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Entries listed per quantity in the top-k tables.
    pub top_k: usize,
    pub sync_fraction: f64,
    pub selection_mode: SelectionMode,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            top_k: 100,
            sync_fraction: 0.01,
            selection_mode: SelectionMode::Signed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InterventionConfig {
    /// History length of the intervention runs; defaults to the shortest
    /// configured context length.
    pub context_length: Option<u32>,
    pub n_blocks: usize,
    pub unit_fraction: f64,
    pub window: usize,
    pub mode: AblationMode,
    /// Trajectories per system; 0 means all.
    pub n_trajectories: usize,
    /// Seeded trials, each with its own sampling seeds and random control.
    pub trials: usize,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            context_length: None,
            n_blocks: DEFAULT_TARGET_BLOCKS,
            unit_fraction: 0.01,
            window: DEFAULT_WINDOW,
            mode: AblationMode::DeltaPatch,
            n_trajectories: 0,
            trials: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub n_samples: u32,
    pub horizon: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            n_samples: DEFAULT_SAMPLES,
            horizon: FORECAST_HORIZON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seed: u64,
    pub systems: Vec<SystemKind>,
    pub context_lengths: Vec<u32>,
    pub blocks: Vec<u32>,
    pub simulation: SimulationConfig,
    pub tokenizer: TokenizerConfig,
    pub adapter: AdapterConfig,
    pub capture: CaptureConfig,
    pub sae: TrainConfig,
    pub analysis: AnalysisConfig,
    pub intervention: InterventionConfig,
    pub evaluation: EvaluationConfig,
    /// Model served when the endpoint is `mock`.
    pub mock: MockConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("picl-run"),
            seed: 0,
            systems: SystemKind::all().to_vec(),
            context_lengths: vec![64, 128, 256, 512, 1024],
            blocks: default_blocks(),
            simulation: SimulationConfig::default(),
            tokenizer: TokenizerConfig::default(),
            adapter: AdapterConfig::default(),
            capture: CaptureConfig::default(),
            sae: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
            intervention: InterventionConfig::default(),
            evaluation: EvaluationConfig::default(),
            mock: MockConfig::default(),
        }
    }
}

fn bad(message: impl Into<String>) -> Error {
    Error::Config(message.into())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and validates a config file; returns it with the file bytes.
    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        Ok((Self::from_toml(text)?, bytes))
    }

    pub fn validate(&self) -> Result<()> {
        if self.systems.is_empty() {
            return Err(bad("no systems configured"));
        }
        if self.context_lengths.is_empty() || self.context_lengths.contains(&0) {
            return Err(bad("context lengths must be non-empty and positive"));
        }
        if self.blocks.is_empty() {
            return Err(bad("no blocks configured"));
        }
        for (name, list) in [("context_lengths", &self.context_lengths), ("blocks", &self.blocks)] {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(bad(format!("{name} contains duplicates")));
            }
        }
        if self.simulation.n_trajectories == 0 {
            return Err(bad("simulation.n_trajectories must be positive"));
        }
        if !(self.simulation.dt > 0.0 && self.simulation.dt.is_finite()) {
            return Err(bad("simulation.dt must be positive"));
        }
        self.simulation.ranges.validate()?;
        if self.tokenizer.precision == 0 {
            return Err(bad("tokenizer.precision must be at least 1"));
        }
        self.sae.validate()?;
        let a = &self.analysis;
        if a.top_k == 0 || !(a.sync_fraction > 0.0 && a.sync_fraction <= 1.0) {
            return Err(bad("analysis.top_k must be positive and sync_fraction in (0, 1]"));
        }
        let i = &self.intervention;
        if let Some(l) = i.context_length {
            if !self.context_lengths.contains(&l) {
                return Err(bad(format!("intervention.context_length {l} is not a configured context length")));
            }
        }
        if i.n_blocks == 0 || !(i.unit_fraction > 0.0 && i.unit_fraction <= 1.0) || i.window == 0 {
            return Err(bad("intervention needs n_blocks > 0, unit_fraction in (0, 1] and window > 0"));
        }
        if i.window > self.evaluation.horizon {
            return Err(bad("intervention.window exceeds evaluation.horizon"));
        }
        if i.n_trajectories > self.simulation.n_trajectories {
            return Err(bad("intervention.n_trajectories exceeds simulation.n_trajectories"));
        }
        if self.evaluation.n_samples == 0 || self.evaluation.horizon == 0 {
            return Err(bad("evaluation needs n_samples > 0 and horizon > 0"));
        }
        for s in &self.systems {
            let names = s.channel_names();
            if let Some(c) = self.capture.channels.iter().find(|c| !names.contains(c)) {
                if self.systems.iter().all(|k| !k.channel_names().contains(c)) {
                    return Err(bad(format!("capture channel {c:?} belongs to no configured system")));
                }
            }
        }
        if self.adapter.endpoint == "mock" {
            self.mock.validate()?;
            if let Some(b) = self.blocks.iter().find(|&&b| b >= self.mock.n_blocks) {
                return Err(bad(format!("block {b} outside the mock model's {} blocks", self.mock.n_blocks)));
            }
        }
        Ok(())
    }

    pub fn max_context(&self) -> u32 {
        *self.context_lengths.iter().max().expect("validated non-empty")
    }

    pub fn intervention_context(&self) -> u32 {
        self.intervention
            .context_length
            .unwrap_or_else(|| *self.context_lengths.iter().min().expect("validated non-empty"))
    }

    /// Channels of `kind` that are prompted.
    pub fn channels(&self, kind: SystemKind) -> Vec<String> {
        let all = kind.channel_names();
        if self.capture.channels.is_empty() {
            all
        } else {
            all.into_iter().filter(|c| self.capture.channels.contains(c)).collect()
        }
    }
}

/// Hash of the config file bytes and any seed override; equal inputs give
/// equal hashes and therefore equal skip decisions.
pub fn config_hash(bytes: &[u8], seed_override: Option<u64>) -> String {
    match seed_override {
        None => sha256_bytes(bytes),
        Some(seed) => {
            let mut v = bytes.to_vec();
            v.extend_from_slice(format!("\n#seed-override={seed}").as_bytes());
            sha256_bytes(&v)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_block_list() {
        let b = default_blocks();
        assert_eq!(b.len(), 17);
        assert_eq!((b[0], b[15], b[16]), (0, 60, 63));
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = toml::to_string_pretty(&c).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("seed = 1\nsede = 2\n").is_err());
        assert!(ExperimentConfig::from_toml("[sae]\nlearning_rate = 1e-3\nlearnig_rate = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[mock]\ncoupling = 2.0\ncupling = 1\n").is_err());
        let c = ExperimentConfig::from_toml("seed = 7\n[sae]\nepochs = 3\n").unwrap();
        assert_eq!((c.seed, c.sae.epochs, c.sae.batch_size), (7, 3, 4096));
    }

    #[test]
    fn semantic_checks() {
        assert!(ExperimentConfig::from_toml("context_lengths = [64, 64]\n").is_err());
        assert!(ExperimentConfig::from_toml("blocks = [0, 70]\n").is_err());
        assert!(ExperimentConfig::from_toml("[intervention]\ncontext_length = 100\n").is_err());
        assert!(ExperimentConfig::from_toml("[capture]\nchannels = [\"q9\"]\n").is_err());
    }

    #[test]
    fn hash_tracks_bytes_and_override() {
        let a = config_hash(b"seed = 1\n", None);
        assert_eq!(a, config_hash(b"seed = 1\n", None));
        assert_ne!(a, config_hash(b"seed = 1 \n", None));
        assert_ne!(a, config_hash(b"seed = 1\n", Some(1)));
    }
}
