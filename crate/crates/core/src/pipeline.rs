//! The experiment graph, run stage by stage from one [`ExperimentConfig`].
//!
//! ```text
//! simulate -> tokenize -> capture -> train-sae -> correlate -> sync ----> report
//!     |                                              '-> intervene --'     ^
//!     '-> evaluate ---------------------------------------------------------'
//! ```
//!
//! Each stage writes only under its own directory of the output root and
//! leaves a marker holding the config hash. A selected stage whose marker
//! matches is skipped unless forced or an upstream stage ran again. A failed
//! stage blocks its dependents; the other branches continue. After every run
//! `manifest.json` lists each file under the root with its SHA-256.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::activation::{
    build_dataset, read_tensor, ActivationTensor, AlignmentKey, AlignmentRecord, QuantityKind, TensorProvenance,
};
use crate::config::{config_hash, ExperimentConfig};
use crate::correlation::{
    blockwise_max, correlate_all, labels_of, sync_strength, top_k, CorrelationMatrix, Labels, SyncReport,
};
use crate::error::{Error, Result};
use crate::forecast::{first_step_table, per_step_table, sweep, ErrorReport, ForecastCase, ForecastSettings, SweepCell};
use crate::intervention::{random_control, run_intervention, select_targets, InterventionResult, InterventionSpec};
use crate::io::{derive_seed, read_toml, sha256_file, sidecar_path, write_atomic, write_toml, Provenance, Table};
use crate::mock::MockModel;
use crate::physics::{read_trajectory, simulate, write_trajectory, SystemKind, Trajectory, TrajectoryMeta};
use crate::protocol::{connect, tensor_file_name, CaptureSpec, Client, InProcess, PromptContext};
use crate::sae::{load_checkpoint, save_checkpoint, train, TrainConfig};
use crate::tokenizer::{align_tokens, fit_scaling, serialize, DigitSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Simulate,
    Tokenize,
    Capture,
    TrainSae,
    Correlate,
    Sync,
    Intervene,
    Evaluate,
    Report,
}

impl Stage {
    /// Every stage in an order compatible with the dependencies.
    pub const ALL: [Stage; 9] = [
        Stage::Simulate,
        Stage::Tokenize,
        Stage::Capture,
        Stage::TrainSae,
        Stage::Correlate,
        Stage::Sync,
        Stage::Intervene,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Tokenize => "tokenize",
            Stage::Capture => "capture",
            Stage::TrainSae => "train-sae",
            Stage::Correlate => "correlate",
            Stage::Sync => "sync",
            Stage::Intervene => "intervene",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Top-level directory of the stage's outputs.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Simulate => "trajectories",
            Stage::Tokenize => "prompts",
            Stage::Capture => "activations",
            Stage::TrainSae => "sae",
            Stage::Correlate => "correlation",
            Stage::Sync => "sync",
            Stage::Intervene => "intervention",
            Stage::Evaluate => "forecast",
            Stage::Report => "report",
        }
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Simulate => &[],
            Stage::Tokenize => &[Stage::Simulate],
            Stage::Capture => &[Stage::Tokenize],
            Stage::TrainSae => &[Stage::Capture],
            Stage::Correlate => &[Stage::TrainSae],
            Stage::Sync => &[Stage::Correlate],
            Stage::Intervene => &[Stage::Correlate],
            Stage::Evaluate => &[Stage::Simulate],
            Stage::Report => &[Stage::Sync, Stage::Intervene, Stage::Evaluate],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Worker threads; 0 lets rayon decide.
    pub jobs: usize,
    pub force: bool,
    pub seed_override: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StageStatus {
    Ran,
    Skipped,
    Failed(String),
    Blocked(Stage),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub status: StageStatus,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub outcomes: Vec<StageOutcome>,
    pub manifest: Option<PathBuf>,
}

impl RunSummary {
    pub fn success(&self) -> bool {
        self.outcomes
            .iter()
            .all(|o| matches!(o.status, StageStatus::Ran | StageStatus::Skipped))
    }
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for o in &self.outcomes {
            match &o.status {
                StageStatus::Ran => writeln!(f, "{:<10} ran ({:.1}s)", o.stage.name(), o.seconds)?,
                StageStatus::Skipped => writeln!(f, "{:<10} skipped (up to date)", o.stage.name())?,
                StageStatus::Failed(e) => writeln!(f, "{:<10} FAILED: {e}", o.stage.name())?,
                StageStatus::Blocked(d) => writeln!(f, "{:<10} blocked by {d}", o.stage.name())?,
            }
        }
        if let Some(m) = &self.manifest {
            writeln!(f, "manifest: {}", m.display())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub stage: Option<Stage>,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub producer: String,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn count(&self, stage: Stage, extension: &str) -> usize {
        self.files
            .iter()
            .filter(|f| f.stage == Some(stage) && f.path.ends_with(extension))
            .count()
    }
}

/// A tokenized prompt before any model has seen it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub text: String,
    pub alignment: AlignmentRecord,
}

/// Planted-unit and random-control runs of one seeded trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub planted: InterventionResult,
    pub control_units: Vec<(u32, Vec<usize>)>,
    pub control: InterventionResult,
}

impl TrialRecord {
    /// Planted epsilon strictly above the control epsilon.
    pub fn planted_wins(&self) -> bool {
        match (self.planted.epsilon, self.control.epsilon) {
            (Some(p), Some(c)) => p > c,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionOutcome {
    pub system: SystemKind,
    pub context_length: u32,
    pub spec: InterventionSpec,
    pub trials: Vec<TrialRecord>,
}

struct TrajectoryEntry {
    id: String,
    path: PathBuf,
    trajectory: Arc<Trajectory>,
}

pub struct Pipeline {
    config: ExperimentConfig,
    hash: String,
    root: PathBuf,
    options: RunOptions,
}

fn ctx<T>(what: impl fmt::Display, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.context(what.to_string()))
}

impl Pipeline {
    /// `config_bytes` are the raw file bytes the config was parsed from;
    /// they and the seed override define the config hash.
    pub fn new(mut config: ExperimentConfig, config_bytes: &[u8], options: RunOptions) -> Result<Self> {
        if let Some(seed) = options.seed_override {
            config.seed = seed;
        }
        config.validate()?;
        let hash = config_hash(config_bytes, options.seed_override);
        let root = config.output_dir.clone();
        Ok(Pipeline {
            config,
            hash,
            root,
            options,
        })
    }

    pub fn from_file(path: &Path, options: RunOptions) -> Result<Self> {
        let (config, bytes) = ExperimentConfig::load(path)?;
        let mut p = Self::new(config, &bytes, options)?;
        if p.root.is_relative() {
            if let Some(parent) = path.parent() {
                p.root = parent.join(&p.root);
            }
        }
        Ok(p)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn marker(&self, stage: Stage) -> PathBuf {
        self.root.join(".stages").join(format!("{}.done", stage.name()))
    }

    /// Whether the stage's outputs exist for the current config hash.
    pub fn is_current(&self, stage: Stage) -> bool {
        fs::read_to_string(self.marker(stage)).is_ok_and(|h| h.trim() == self.hash)
    }

    /// Selected stages in execution order, each with whether it would run.
    pub fn plan(&self, stages: &[Stage]) -> Vec<(Stage, bool)> {
        let mut reran = Vec::new();
        Stage::ALL
            .into_iter()
            .filter(|s| stages.contains(s))
            .map(|s| {
                let upstream = s.deps().iter().any(|d| reran.contains(d) || upstream_of(*d, &reran));
                let run = self.options.force || upstream || !self.is_current(s);
                if run {
                    reran.push(s);
                }
                (s, run)
            })
            .collect()
    }

    fn provenance(&self, stage: Stage, seeds: &[(&str, u64)]) -> Provenance {
        let mut map = BTreeMap::new();
        map.insert("base".to_owned(), self.config.seed);
        for (k, v) in seeds {
            map.insert((*k).to_owned(), *v);
        }
        Provenance {
            stage: stage.name().to_owned(),
            config_hash: self.hash.clone(),
            seeds: map,
        }
    }

    fn sidecar(&self, path: &Path, stage: Stage, seeds: &[(&str, u64)]) -> Result<()> {
        write_toml(&sidecar_path(path), &self.provenance(stage, seeds))
    }

    fn write_json<T: Serialize>(&self, path: &Path, value: &T, stage: Stage, seeds: &[(&str, u64)]) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())?;
        self.sidecar(path, stage, seeds)
    }

    fn write_table(&self, path: &Path, table: &Table, stage: Stage) -> Result<()> {
        table.write(path)?;
        self.sidecar(path, stage, &[])
    }

    fn pool(threads: usize) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))
    }

    /// Threads for stages that talk to the model.
    fn adapter_threads(&self) -> usize {
        match (self.config.adapter.endpoint.as_str(), self.config.adapter.sessions) {
            ("mock", 0) => self.options.jobs,
            (_, 0) => 1,
            (_, n) => n,
        }
    }

    /// Opens a session with the configured model and says hello.
    pub fn open(&self, session: &str) -> Result<Client> {
        if self.config.adapter.endpoint == "mock" {
            let model = MockModel::new(self.config.mock.clone())?;
            let mut client = Client::new(Box::new(InProcess { handler: model }), session);
            client.hello()?;
            Ok(client)
        } else {
            connect(&self.config.adapter.endpoint, session)
        }
    }

    /// Runs the selected stages. An empty selection does nothing.
    pub fn run(&self, stages: &[Stage]) -> Result<RunSummary> {
        if stages.is_empty() {
            return Ok(RunSummary {
                outcomes: Vec::new(),
                manifest: None,
            });
        }
        fs::create_dir_all(self.root.join(".stages")).map_err(|e| Error::io(&self.root, e))?;
        let pool = Self::pool(self.options.jobs)?;
        let adapter_pool = Self::pool(self.adapter_threads())?;

        let mut outcomes: Vec<StageOutcome> = Vec::new();
        for (stage, run) in self.plan(stages) {
            let status_of = |s: Stage| outcomes.iter().find(|o| o.stage == s).map(|o| &o.status);
            let blocked = stage.deps().iter().find(|&&d| match status_of(d) {
                Some(StageStatus::Ran | StageStatus::Skipped) => false,
                Some(_) => true,
                None => !self.is_current(d),
            });
            if let Some(&d) = blocked {
                warn!("{stage}: blocked by {d}");
                outcomes.push(StageOutcome {
                    stage,
                    status: StageStatus::Blocked(d),
                    seconds: 0.0,
                });
                continue;
            }
            if !run {
                info!("{stage}: up to date");
                outcomes.push(StageOutcome {
                    stage,
                    status: StageStatus::Skipped,
                    seconds: 0.0,
                });
                continue;
            }
            info!("{stage}: running");
            let _ = fs::remove_file(self.marker(stage));
            let start = Instant::now();
            let pool = if matches!(stage, Stage::Capture | Stage::Intervene | Stage::Evaluate) {
                &adapter_pool
            } else {
                &pool
            };
            let result = pool.install(|| self.run_stage(stage));
            let status = match result {
                Ok(()) => {
                    write_atomic(&self.marker(stage), self.hash.as_bytes())?;
                    StageStatus::Ran
                }
                Err(e) => {
                    warn!("{stage}: {e}");
                    StageStatus::Failed(e.to_string())
                }
            };
            outcomes.push(StageOutcome {
                stage,
                status,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        let manifest = self.write_manifest()?;
        Ok(RunSummary {
            outcomes,
            manifest: Some(manifest),
        })
    }

    fn run_stage(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Simulate => self.simulate(),
            Stage::Tokenize => self.tokenize(),
            Stage::Capture => self.capture(),
            Stage::TrainSae => self.train_sae(),
            Stage::Correlate => self.correlate(),
            Stage::Sync => self.sync(),
            Stage::Intervene => self.intervene(),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => self.report(),
        }
    }

    // Layout.

    fn trajectory_id(kind: SystemKind, i: usize) -> String {
        format!("{}_{i:03}", kind.slug())
    }

    fn trajectory_path(&self, kind: SystemKind, i: usize) -> PathBuf {
        self.root
            .join(Stage::Simulate.dir())
            .join(kind.slug())
            .join(format!("{}.csv", Self::trajectory_id(kind, i)))
    }

    fn prompt_path(&self, kind: SystemKind, l: u32, id: &str, channel: &str) -> PathBuf {
        self.root
            .join(Stage::Tokenize.dir())
            .join(kind.slug())
            .join(format!("L{l}"))
            .join(format!("{id}_{channel}.json"))
    }

    fn activation_dir(&self, kind: SystemKind, l: u32) -> PathBuf {
        self.root.join(Stage::Capture.dir()).join(kind.slug()).join(format!("L{l}"))
    }

    fn alignment_path(&self, kind: SystemKind, l: u32, stem: &str) -> PathBuf {
        self.activation_dir(kind, l).join(format!("{stem}.align.json"))
    }

    /// Checkpoint of the SAE for one context length and block.
    pub fn sae_path(&self, l: u32, block: u32) -> PathBuf {
        self.root
            .join(Stage::TrainSae.dir())
            .join(format!("L{l}"))
            .join(format!("b{block:02}.psae"))
    }

    pub fn correlation_path(&self, kind: SystemKind, l: u32) -> PathBuf {
        self.root.join(Stage::Correlate.dir()).join(kind.slug()).join(format!("L{l}.csv"))
    }

    fn sync_path(&self, kind: SystemKind, l: u32) -> PathBuf {
        self.root.join(Stage::Sync.dir()).join(kind.slug()).join(format!("L{l}.json"))
    }

    pub fn intervention_path(&self, kind: SystemKind) -> PathBuf {
        self.root.join(Stage::Intervene.dir()).join(format!("{}.json", kind.slug()))
    }

    fn forecast_path(&self, kind: SystemKind, l: u32) -> PathBuf {
        self.root.join(Stage::Evaluate.dir()).join(kind.slug()).join(format!("L{l}.json"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join(Stage::Report.dir())
    }

    fn n_states(&self) -> usize {
        self.config.max_context() as usize + self.config.evaluation.horizon
    }

    /// First forecast step, shared by every context length.
    fn forecast_start(&self) -> usize {
        self.config.max_context() as usize
    }

    fn stems(&self, kind: SystemKind) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for i in 0..self.config.simulation.n_trajectories {
            for c in self.config.channels(kind) {
                out.push((Self::trajectory_id(kind, i), c));
            }
        }
        out
    }

    fn load_trajectories(&self, kind: SystemKind) -> Result<Vec<TrajectoryEntry>> {
        (0..self.config.simulation.n_trajectories)
            .into_par_iter()
            .map(|i| {
                let path = self.trajectory_path(kind, i);
                let (trajectory, meta) = read_trajectory(&path)?;
                if trajectory.len() < self.n_states() {
                    return Err(Error::Missing(format!(
                        "{} has {} states, {} needed",
                        path.display(),
                        trajectory.len(),
                        self.n_states()
                    )));
                }
                Ok(TrajectoryEntry {
                    id: meta.id,
                    path,
                    trajectory: Arc::new(trajectory),
                })
            })
            .collect()
    }

    fn all_trajectories(&self) -> Result<BTreeMap<String, Trajectory>> {
        let mut map = BTreeMap::new();
        for &kind in &self.config.systems {
            for t in self.load_trajectories(kind)? {
                map.insert(t.id, (*t.trajectory).clone());
            }
        }
        Ok(map)
    }

    // Stages.

    fn simulate(&self) -> Result<()> {
        let cfg = &self.config;
        let jobs: Vec<(SystemKind, usize)> = cfg
            .systems
            .iter()
            .flat_map(|&k| (0..cfg.simulation.n_trajectories).map(move |i| (k, i)))
            .collect();
        jobs.par_iter().try_for_each(|&(kind, i)| {
            let id = Self::trajectory_id(kind, i);
            let seed = derive_seed(cfg.seed, &format!("simulate/{id}"));
            let traj = simulate(seed, kind, &cfg.simulation.ranges, cfg.simulation.dt, self.n_states())?;
            let mut meta = TrajectoryMeta::new(&id, &traj, Some(seed));
            meta.provenance = Some(self.provenance(Stage::Simulate, &[("trajectory", seed)]));
            write_trajectory(&self.trajectory_path(kind, i), &traj, &meta)
        })
    }

    fn tokenize(&self) -> Result<()> {
        let cfg = &self.config;
        let t0 = self.forecast_start();
        for &kind in &cfg.systems {
            let trajectories = self.load_trajectories(kind)?;
            let names = kind.channel_names();
            let jobs: Vec<(&TrajectoryEntry, u32, String)> = trajectories
                .iter()
                .flat_map(|t| {
                    cfg.context_lengths
                        .iter()
                        .flat_map(move |&l| cfg.channels(kind).into_iter().map(move |c| (t, l, c)))
                })
                .collect();
            jobs.par_iter().try_for_each(|(t, l, channel)| {
                let c = names.iter().position(|n| n == channel).expect("configured channel");
                let window_start = t0 - *l as usize;
                let values = t.trajectory.channel(c, window_start..t0);
                let scaling = fit_scaling(&values, cfg.tokenizer.alpha, cfg.tokenizer.beta)?;
                let digits = serialize(&values, &scaling, cfg.tokenizer.precision)?;
                let record = PromptRecord {
                    text: digits.text,
                    alignment: AlignmentRecord {
                        trajectory_id: t.id.clone(),
                        channel: channel.clone(),
                        context_length: *l,
                        window_start,
                        precision: cfg.tokenizer.precision,
                        scaling,
                        spans: digits.spans,
                        tokens: Vec::new(),
                        provenance: Some(self.provenance(Stage::Tokenize, &[])),
                    },
                };
                self.write_json(&self.prompt_path(kind, *l, &t.id, channel), &record, Stage::Tokenize, &[])
            })?;
        }
        Ok(())
    }

    fn read_prompt(&self, kind: SystemKind, l: u32, id: &str, channel: &str) -> Result<PromptRecord> {
        let path = self.prompt_path(kind, l, id, channel);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn capture(&self) -> Result<()> {
        let cfg = &self.config;
        let jobs: Vec<(SystemKind, usize)> = cfg
            .systems
            .iter()
            .flat_map(|&k| (0..cfg.simulation.n_trajectories).map(move |i| (k, i)))
            .collect();
        jobs.par_iter().try_for_each(|&(kind, i)| {
            let id = Self::trajectory_id(kind, i);
            let traj_path = self.trajectory_path(kind, i);
            let mut client = self.open(&format!("capture-{id}"))?;
            for &l in &cfg.context_lengths {
                let dir = self.activation_dir(kind, l);
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for channel in cfg.channels(kind) {
                    let prompt = self.read_prompt(kind, l, &id, &channel)?;
                    let mut record = prompt.alignment;
                    let stem = format!("{id}_{channel}");
                    let (tensors, token_lengths) = ctx(
                        format!("capture {stem} L{l}"),
                        client.capture(CaptureSpec {
                            prompt: prompt.text.clone(),
                            blocks: cfg.blocks.clone(),
                            output_dir: dir.to_string_lossy().into_owned(),
                            stem: stem.clone(),
                            trajectory_id: id.clone(),
                            channel: channel.clone(),
                            context_length: l,
                            context: Some(PromptContext {
                                trajectory: traj_path.to_string_lossy().into_owned(),
                                channel: channel.clone(),
                                window_start: record.window_start,
                                scaling: record.scaling,
                                precision: record.precision,
                            }),
                        }),
                    )?;
                    if tensors.len() != cfg.blocks.len() {
                        return Err(Error::Missing(format!(
                            "{stem} L{l}: {} tensors for {} blocks",
                            tensors.len(),
                            cfg.blocks.len()
                        )));
                    }
                    let digits = DigitSeries {
                        text: prompt.text,
                        precision: record.precision,
                        spans: record.spans.clone(),
                    };
                    record.tokens = align_tokens(&digits, &token_lengths)?;
                    record.provenance = Some(self.provenance(Stage::Capture, &[]));
                    self.write_json(&self.alignment_path(kind, l, &stem), &record, Stage::Capture, &[])?;
                    for t in &tensors {
                        let sidecar = sidecar_path(Path::new(&t.path));
                        let mut meta: TensorProvenance = read_toml(&sidecar)?;
                        meta.produced_by = Some(self.provenance(Stage::Capture, &[]));
                        write_toml(&sidecar, &meta)?;
                    }
                }
            }
            let _ = client.bye();
            Ok(())
        })
    }

    fn alignments(&self, kind: SystemKind, l: u32) -> Result<BTreeMap<AlignmentKey, AlignmentRecord>> {
        let mut map = BTreeMap::new();
        for (id, channel) in self.stems(kind) {
            let path = self.alignment_path(kind, l, &format!("{id}_{channel}"));
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let record: AlignmentRecord = serde_json::from_str(&text)?;
            map.insert(record.key(), record);
        }
        Ok(map)
    }

    fn tensors(&self, kind: SystemKind, l: u32, block: u32) -> Result<Vec<ActivationTensor>> {
        let dir = self.activation_dir(kind, l);
        self.stems(kind)
            .iter()
            .map(|(id, channel)| read_tensor(&dir.join(tensor_file_name(&format!("{id}_{channel}"), block))))
            .collect()
    }

    fn baseline_seed(&self) -> u64 {
        derive_seed(self.config.seed, "baseline")
    }

    fn train_sae(&self) -> Result<()> {
        let cfg = &self.config;
        let trajectories = self.all_trajectories()?;
        let mut alignments = BTreeMap::new();
        for &l in &cfg.context_lengths {
            let mut all = BTreeMap::new();
            for &kind in &cfg.systems {
                all.extend(self.alignments(kind, l)?);
            }
            alignments.insert(l, all);
        }
        let jobs: Vec<(u32, u32)> = cfg
            .context_lengths
            .iter()
            .flat_map(|&l| cfg.blocks.iter().map(move |&b| (l, b)))
            .collect();
        jobs.par_iter().try_for_each(|&(l, block)| {
            let mut tensors = Vec::new();
            for &kind in &cfg.systems {
                tensors.extend(self.tensors(kind, l, block)?);
            }
            let dataset = build_dataset(&tensors, &trajectories, &alignments[&l], self.baseline_seed())?;
            drop(tensors);
            let seed = derive_seed(cfg.seed, &format!("sae/L{l}/b{block}"));
            let train_cfg = TrainConfig {
                seed,
                ..cfg.sae.clone()
            };
            let rows = dataset.residuals();
            let (params, report) = ctx(format!("SAE L{l} block {block}"), train(&rows, &train_cfg))?;
            let path = self.sae_path(l, block);
            save_checkpoint(&path, &params, Some(&self.provenance(Stage::TrainSae, &[("sae", seed)])))?;
            self.write_table(&path.with_extension("loss.csv"), &report.loss_table(), Stage::TrainSae)?;
            info!(
                "SAE L{l} b{block}: {} samples, final loss {:.4e}, active {:.3}",
                rows.len(),
                report.epochs.last().map_or(f64::NAN, |e| e.total),
                report.active_fraction
            );
            Ok(())
        })
    }

    fn correlate(&self) -> Result<()> {
        let cfg = &self.config;
        let trajectories = self.all_trajectories()?;
        let cells: Vec<(SystemKind, u32)> = cfg
            .systems
            .iter()
            .flat_map(|&k| cfg.context_lengths.iter().map(move |&l| (k, l)))
            .collect();
        cells.par_iter().try_for_each(|&(kind, l)| {
            let alignments = self.alignments(kind, l)?;
            let per_block: Vec<(u32, Vec<Vec<f32>>, Vec<Labels>)> = cfg
                .blocks
                .par_iter()
                .map(|&block| {
                    let sae = load_checkpoint(&self.sae_path(l, block))?;
                    let tensors = self.tensors(kind, l, block)?;
                    let dataset = build_dataset(&tensors, &trajectories, &alignments, self.baseline_seed())?;
                    let codes = dataset
                        .samples
                        .iter()
                        .map(|s| sae.encode(&s.residual))
                        .collect::<Result<Vec<_>>>()?;
                    let labels = dataset.samples.iter().map(labels_of).collect();
                    Ok((block, codes, labels))
                })
                .collect::<Result<_>>()?;
            let labels = per_block[0].2.clone();
            if per_block.iter().any(|(_, _, l)| *l != labels) {
                return Err(Error::Alignment(format!("{kind} L{l}: blocks disagree on the sample order")));
            }
            let blocks: Vec<(u32, Vec<Vec<f32>>)> = per_block.into_iter().map(|(b, c, _)| (b, c)).collect();
            let matrix = correlate_all(l, &blocks, &labels)?;
            let path = self.correlation_path(kind, l);
            self.write_table(&path, &matrix.to_table(), Stage::Correlate)?;
            let mut dead = Table::new(["block", "undefined_E", "undefined_KE", "undefined_PE", "undefined_Rand"]);
            for (b, counts) in matrix.undefined_counts() {
                dead.push(std::iter::once(b.to_string()).chain(counts.iter().map(|c| c.to_string())));
            }
            self.write_table(&path.with_extension("undefined.csv"), &dead, Stage::Correlate)
        })
    }

    /// Correlation matrix of one system and context length.
    pub fn read_matrix(&self, kind: SystemKind, l: u32) -> Result<CorrelationMatrix> {
        CorrelationMatrix::from_table(&Table::read(&self.correlation_path(kind, l))?)
    }

    fn sync(&self) -> Result<()> {
        let cfg = &self.config;
        for &kind in &cfg.systems {
            for &l in &cfg.context_lengths {
                let matrix = self.read_matrix(kind, l)?;
                let report = ctx(
                    format!("sync {kind} L{l}"),
                    sync_strength(
                        &matrix,
                        QuantityKind::TotalEnergy,
                        cfg.analysis.sync_fraction,
                        cfg.analysis.selection_mode,
                    ),
                )?;
                self.write_json(&self.sync_path(kind, l), &report, Stage::Sync, &[])?;
            }
        }
        Ok(())
    }

    fn forecast_cases(&self, kind: SystemKind, history: u32, n: usize) -> Result<Vec<ForecastCase>> {
        let mut cases: Vec<ForecastCase> = self
            .load_trajectories(kind)?
            .into_iter()
            .map(|t| ForecastCase {
                trajectory_id: t.id,
                path: Some(t.path),
                trajectory: t.trajectory,
                forecast_start: self.forecast_start(),
                history: history as usize,
            })
            .collect();
        if n > 0 {
            cases.truncate(n);
        }
        Ok(cases)
    }

    fn forecast_settings(&self, seed: u64, horizon: usize) -> ForecastSettings {
        let cfg = &self.config;
        ForecastSettings {
            n_samples: cfg.evaluation.n_samples,
            horizon,
            alpha: cfg.tokenizer.alpha,
            beta: cfg.tokenizer.beta,
            precision: cfg.tokenizer.precision,
            seed,
        }
    }

    fn intervene(&self) -> Result<()> {
        let cfg = &self.config;
        let icfg = &cfg.intervention;
        let l = cfg.intervention_context();
        for &kind in &cfg.systems {
            let matrix = self.read_matrix(kind, l)?;
            let spec = select_targets(&matrix, icfg.n_blocks, icfg.unit_fraction, icfg.mode)?;
            if spec.short {
                warn!("{kind}: only {} blocks available for intervention", spec.targets.len());
            }
            let checkpoints: BTreeMap<u32, PathBuf> =
                spec.targets.iter().map(|t| (t.block, self.sae_path(l, t.block))).collect();
            let cases = self.forecast_cases(kind, l, icfg.n_trajectories)?;
            let trials = (0..icfg.trials)
                .into_par_iter()
                .map(|trial| {
                    let seed = derive_seed(cfg.seed, &format!("intervention/{kind}/{trial}"));
                    let settings = self.forecast_settings(seed, icfg.window);
                    let control = random_control(&spec, seed)?;
                    let mut client = self.open(&format!("intervene-{kind}-{trial}"))?;
                    let planted = run_intervention(&mut client, &spec, &checkpoints, &cases, &settings, icfg.window)?;
                    let control_result =
                        run_intervention(&mut client, &control, &checkpoints, &cases, &settings, icfg.window)?;
                    let _ = client.bye();
                    Ok(TrialRecord {
                        trial,
                        seed,
                        planted,
                        control_units: control.targets.iter().map(|t| (t.block, t.units.clone())).collect(),
                        control: control_result,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let wins = trials.iter().filter(|t| t.planted_wins()).count();
            info!("{kind}: planted ablation beats the control in {wins}/{} trials", trials.len());
            let outcome = InterventionOutcome {
                system: kind,
                context_length: l,
                spec,
                trials,
            };
            self.write_json(&self.intervention_path(kind), &outcome, Stage::Intervene, &[])?;
        }
        Ok(())
    }

    pub fn read_intervention(&self, kind: SystemKind) -> Result<InterventionOutcome> {
        let path = self.intervention_path(kind);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn evaluate(&self) -> Result<()> {
        let cfg = &self.config;
        let seed = derive_seed(cfg.seed, "evaluate");
        let settings = self.forecast_settings(seed, cfg.evaluation.horizon);
        let mut cells = Vec::new();
        for &kind in &cfg.systems {
            for &l in &cfg.context_lengths {
                cells.push(SweepCell {
                    system: kind.slug().to_owned(),
                    context_length: l,
                    cases: self.forecast_cases(kind, l, 0)?,
                });
            }
        }
        let reports = sweep(|session| self.open(session), &cells, &settings);
        for (report, cell) in reports.iter().zip(&cells) {
            if !report.is_complete() {
                warn!(
                    "{} L{}: {} of {} trajectories failed",
                    cell.system,
                    cell.context_length,
                    report.failures.len(),
                    cell.cases.len()
                );
            }
            let kind: SystemKind = cell.system.parse()?;
            self.write_json(&self.forecast_path(kind, cell.context_length), report, Stage::Evaluate, &[("forecast", seed)])?;
        }
        if reports.iter().all(|r| r.n_trajectories == 0) {
            return Err(Error::Missing(format!(
                "no forecast succeeded: {}",
                reports
                    .iter()
                    .flat_map(|r| r.failures.first())
                    .map(|(_, e)| e.as_str())
                    .next()
                    .unwrap_or("no cells")
            )));
        }
        Ok(())
    }

    pub fn read_forecast(&self, kind: SystemKind, l: u32) -> Result<ErrorReport> {
        let path = self.forecast_path(kind, l);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn report(&self) -> Result<()> {
        let cfg = &self.config;
        let dir = self.report_dir();

        let mut forecasts = Vec::new();
        for &kind in &cfg.systems {
            for &l in &cfg.context_lengths {
                forecasts.push(self.read_forecast(kind, l)?);
            }
        }
        self.write_table(&dir.join("forecast_first_step.csv"), &first_step_table(&forecasts), Stage::Report)?;
        self.write_table(&dir.join("forecast_per_step.csv"), &per_step_table(&forecasts), Stage::Report)?;

        let mut top = Table::new(["system", "context_length", "quantity", "rank", "block", "unit", "rho"]);
        let mut block_max = Table::new(["system", "context_length", "quantity", "block", "max_abs_rho"]);
        let mut sync_table = Table::new(["system", "context_length", "target", "strength", "selected", "defined_pairs"]);
        for &kind in &cfg.systems {
            for &l in &cfg.context_lengths {
                let matrix = self.read_matrix(kind, l)?;
                for q in QuantityKind::ALL {
                    for (rank, e) in top_k(&matrix, q, cfg.analysis.top_k)?.entries.iter().enumerate() {
                        top.push([
                            kind.slug().to_owned(),
                            l.to_string(),
                            q.to_string(),
                            rank.to_string(),
                            e.block.to_string(),
                            e.unit.to_string(),
                            format!("{:e}", e.rho),
                        ]);
                    }
                    for (block, max) in blockwise_max(&matrix, q) {
                        block_max.push([
                            kind.slug().to_owned(),
                            l.to_string(),
                            q.to_string(),
                            block.to_string(),
                            max.map_or("NA".into(), |m| format!("{m:e}")),
                        ]);
                    }
                }
                let path = self.sync_path(kind, l);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let sync: SyncReport = serde_json::from_str(&text)?;
                for (q, s) in &sync.strength {
                    sync_table.push([
                        kind.slug().to_owned(),
                        l.to_string(),
                        q.to_string(),
                        s.map_or("NA".into(), |v| format!("{v:e}")),
                        sync.selected.len().to_string(),
                        sync.defined_pairs.to_string(),
                    ]);
                }
            }
        }
        self.write_table(&dir.join("energy_top_k.csv"), &top, Stage::Report)?;
        self.write_table(&dir.join("energy_block_max.csv"), &block_max, Stage::Report)?;
        self.write_table(&dir.join("sync_strength.csv"), &sync_table, Stage::Report)?;

        let mut trials = Table::new([
            "system",
            "context_length",
            "trial",
            "arm",
            "window",
            "baseline_error",
            "intervened_error",
            "epsilon",
        ]);
        let mut summary = Table::new(["system", "context_length", "trials", "planted_epsilon", "control_epsilon", "planted_wins"]);
        for &kind in &cfg.systems {
            let outcome = self.read_intervention(kind)?;
            for t in &outcome.trials {
                for (arm, r) in [("planted", &t.planted), ("control", &t.control)] {
                    trials.push([
                        kind.slug().to_owned(),
                        outcome.context_length.to_string(),
                        t.trial.to_string(),
                        arm.to_owned(),
                        r.window.to_string(),
                        format!("{:e}", r.baseline_error),
                        format!("{:e}", r.intervened_error),
                        r.epsilon.map_or("NA".into(), |v| format!("{v:e}")),
                    ]);
                }
            }
            let mean_eps = |f: &dyn Fn(&TrialRecord) -> Option<f64>| {
                let v: Vec<f64> = outcome.trials.iter().filter_map(f).collect();
                if v.is_empty() {
                    "NA".to_owned()
                } else {
                    format!("{:e}", v.iter().sum::<f64>() / v.len() as f64)
                }
            };
            summary.push([
                kind.slug().to_owned(),
                outcome.context_length.to_string(),
                outcome.trials.len().to_string(),
                mean_eps(&|t| t.planted.epsilon),
                mean_eps(&|t| t.control.epsilon),
                outcome.trials.iter().filter(|t| t.planted_wins()).count().to_string(),
            ]);
        }
        self.write_table(&dir.join("intervention_trials.csv"), &trials, Stage::Report)?;
        self.write_table(&dir.join("intervention_summary.csv"), &summary, Stage::Report)
    }

    fn write_manifest(&self) -> Result<PathBuf> {
        let path = self.root.join("manifest.json");
        let mut files = Vec::new();
        for stage in Stage::ALL {
            for entry in WalkDir::new(self.root.join(stage.dir())).sort_by_file_name() {
                let entry = match entry {
                    Ok(e) => e,
                    Err(e) if e.io_error().is_some_and(|io| io.kind() == std::io::ErrorKind::NotFound) => break,
                    Err(e) => return Err(Error::invalid(format!("walking {}: {e}", self.root.display()))),
                };
                let in_flight = entry.file_name().to_string_lossy().contains(".tmp");
                if entry.file_type().is_file() && !in_flight {
                    files.push(entry.into_path());
                }
            }
        }
        files.sort();
        let entries = files
            .par_iter()
            .map(|f| {
                let rel = f.strip_prefix(&self.root).expect("under root");
                let top = rel.components().next().and_then(|c| c.as_os_str().to_str());
                Ok(ManifestEntry {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    stage: Stage::ALL.into_iter().find(|s| Some(s.dir()) == top),
                    bytes: fs::metadata(f).map_err(|e| Error::io(f, e))?.len(),
                    sha256: sha256_file(f)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            config_hash: self.hash.clone(),
            seed: self.config.seed,
            producer: concat!("picl ", env!("CARGO_PKG_VERSION")).into(),
            files: entries,
        };
        write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        Ok(path)
    }
}

fn upstream_of(stage: Stage, reran: &[Stage]) -> bool {
    stage.deps().iter().any(|d| reran.contains(d) || upstream_of(*d, reran))
}
