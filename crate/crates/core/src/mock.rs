//! A deterministic stand-in model speaking the adapter wire protocol.
//!
//! Every character is one token. At planted blocks the residual at a token
//! carries the standardized energy of the time step the token belongs to,
//! written along fixed unit directions; other blocks carry only sparse
//! distractor features and noise. Energies come from the trajectory file
//! named in the prompt context.
//!
//! Generation is anchored on the true continuation of that trajectory:
//!
//! `pred_i = truth_i + sigma(L) * sqrt(1 + g*i) * (1 + coupling * D) * s_c * xi_i`
//!
//! with `sigma(L) = sigma0 * (ref_len / L)^p` shrinking in the history
//! length `L`, `s_c` the channel's spread over the trajectory, `xi_i` a
//! standard normal drawn from the sample seed alone, and `D` the mean over
//! planted blocks of the fraction of planted signal that active edits remove
//! from the prompt's residuals. Without context the model extrapolates the
//! last two prompt values linearly with the same noise model.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activation::{
    write_tensor, ActivationTensor, PlantedSpec, QuantityKind, SignalNormalization, TensorProvenance,
};
use crate::error::{Error, Result};
use crate::intervention::ablate_residual;
use crate::io::{derive_seed, sha256_bytes};
use crate::physics::{read_trajectory, simulate, SamplingRanges, SystemKind, Trajectory, DEFAULT_DT};
use crate::protocol::{
    sample_seed, tensor_file_name, AblationMode, CapturedTensor, ErrorCode, GeneratedSample, Handler, PromptContext,
    Request, Response, Sampling, PROTOCOL_VERSION,
};
use crate::sae::{load_checkpoint, SaeParams};
use crate::tokenizer::{parse_literal, quantize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockPlant {
    pub block: u32,
    pub sources: Vec<QuantityKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockConfig {
    pub model_id: String,
    pub n_blocks: u32,
    pub hidden_dim: usize,
    pub plants: Vec<MockPlant>,
    /// Sparse distractor directions in every block.
    pub distractors: usize,
    pub distractor_rate: f64,
    pub noise: f64,
    pub offset: f64,
    /// Weight of the planted-signal disruption in the forecast noise.
    pub coupling: f64,
    pub sigma0: f64,
    pub reference_length: f64,
    pub history_exponent: f64,
    pub horizon_growth: f64,
    /// Systems simulated per kind to fix the energy standardization.
    pub reference_systems: usize,
    pub reference_ranges: SamplingRanges,
    pub seed: u64,
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            model_id: "picl-mock".into(),
            n_blocks: 64,
            hidden_dim: 32,
            plants: [12, 28, 44]
                .into_iter()
                .map(|block| MockPlant {
                    block,
                    sources: vec![QuantityKind::TotalEnergy],
                })
                .collect(),
            distractors: 16,
            distractor_rate: 0.05,
            noise: 0.1,
            offset: 3.0,
            coupling: 2.0,
            sigma0: 0.05,
            reference_length: 64.0,
            history_exponent: 0.5,
            horizon_growth: 0.25,
            reference_systems: 64,
            reference_ranges: SamplingRanges::default(),
            seed: 0,
        }
    }
}

impl MockConfig {
    pub fn validate(&self) -> Result<()> {
        let mut blocks = BTreeSet::new();
        for p in &self.plants {
            if p.block >= self.n_blocks {
                return Err(Error::Config(format!("planted block {} outside {} blocks", p.block, self.n_blocks)));
            }
            if !blocks.insert(p.block) {
                return Err(Error::Config(format!("block {} planted twice", p.block)));
            }
        }
        if !(self.coupling >= 0.0 && self.sigma0 >= 0.0 && self.horizon_growth >= 0.0) {
            return Err(Error::Config("coupling, sigma0 and horizon_growth must be non-negative".into()));
        }
        if !(self.reference_length > 0.0 && self.history_exponent >= 0.0) {
            return Err(Error::Config("reference_length must be positive, history_exponent non-negative".into()));
        }
        if self.hidden_dim == 0 || self.reference_systems == 0 {
            return Err(Error::Config("hidden_dim and reference_systems must be positive".into()));
        }
        Ok(())
    }

    pub fn planted_blocks(&self) -> Vec<u32> {
        self.plants.iter().map(|p| p.block).collect()
    }

    /// Forecast noise scale for a history of `history` steps.
    pub fn sigma(&self, history: usize) -> f64 {
        self.sigma0 * (self.reference_length / history.max(1) as f64).powf(self.history_exponent)
    }
}

struct Edit {
    sae: SaeParams<f32>,
    units: Vec<usize>,
    mode: AblationMode,
}

struct Loaded {
    trajectory: Trajectory,
    /// Spread of each channel over the whole trajectory.
    channel_std: Vec<f64>,
}

pub struct MockModel {
    config: MockConfig,
    specs: Vec<PlantedSpec>,
    sessions: BTreeSet<String>,
    edits: BTreeMap<String, BTreeMap<u32, Vec<Edit>>>,
    trajectories: BTreeMap<String, Arc<Loaded>>,
    normalization: BTreeMap<SystemKind, SignalNormalization>,
}

impl MockModel {
    pub fn new(config: MockConfig) -> Result<Self> {
        config.validate()?;
        let specs = (0..config.n_blocks)
            .map(|b| {
                let sources = config
                    .plants
                    .iter()
                    .find(|p| p.block == b)
                    .map(|p| p.sources.clone())
                    .unwrap_or_default();
                let mut spec = PlantedSpec::random(
                    config.hidden_dim,
                    sources,
                    config.distractors,
                    config.offset,
                    config.noise,
                    derive_seed(config.seed, &format!("mock/directions/{b}")),
                )?;
                spec.distractor_rate = config.distractor_rate;
                spec.validate()?;
                Ok(spec)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MockModel {
            config,
            specs,
            sessions: BTreeSet::new(),
            edits: BTreeMap::new(),
            trajectories: BTreeMap::new(),
            normalization: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    /// Planted layout of one block.
    pub fn planted_spec(&self, block: u32) -> Option<&PlantedSpec> {
        self.specs.get(block as usize)
    }

    fn load(&mut self, path: &str) -> Result<Arc<Loaded>> {
        if let Some(t) = self.trajectories.get(path) {
            return Ok(t.clone());
        }
        let (trajectory, _) = read_trajectory(Path::new(path))?;
        let n = trajectory.len() as f64;
        let channel_std = (0..trajectory.spec.kind.n_channels())
            .map(|c| {
                let v = trajectory.channel(c, 0..trajectory.len());
                let mean = v.iter().sum::<f64>() / n;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                var.sqrt().max(1e-6)
            })
            .collect();
        let loaded = Arc::new(Loaded {
            trajectory,
            channel_std,
        });
        self.trajectories.insert(path.to_owned(), loaded.clone());
        Ok(loaded)
    }

    fn normalization(&mut self, kind: SystemKind) -> Result<&SignalNormalization> {
        if !self.normalization.contains_key(&kind) {
            let mut energies = Vec::new();
            for i in 0..self.config.reference_systems {
                let seed = derive_seed(self.config.seed, &format!("mock/reference/{kind}/{i}"));
                let t = simulate(seed, kind, &self.config.reference_ranges, DEFAULT_DT, 64)?;
                energies.extend(t.energies()?);
            }
            self.normalization.insert(kind, SignalNormalization::fit(&energies)?);
        }
        Ok(&self.normalization[&kind])
    }

    /// Standardized source signals of every token of `prompt`, one vector per
    /// planted block source list. Without context all signals are zero.
    fn token_signals(&mut self, prompt: &str, context: Option<&PromptContext>) -> Result<Vec<Vec<f64>>> {
        let n_tokens = prompt.len();
        let Some(ctx) = context else {
            return Ok(vec![vec![0.0; 0]; n_tokens]);
        };
        let loaded = self.load(&ctx.trajectory)?;
        let traj = &loaded.trajectory;
        check_prompt(prompt, ctx, traj)?;
        let energies = traj.energies()?;
        let norm = self.normalization(traj.spec.kind)?.clone();
        let mut step = 0;
        let mut out = Vec::with_capacity(n_tokens);
        for byte in prompt.bytes() {
            let state = (ctx.window_start + step).min(traj.len() - 1);
            out.push(QuantityKind::ALL.iter().map(|&q| norm.standardize(q, &energies[state])).collect());
            if byte == b',' {
                step += 1;
            }
        }
        Ok(out)
    }

    /// Residual rows `[tokens, H]` at `block`, before any edit.
    fn residuals(&self, block: u32, prompt: &str, signals: &[Vec<f64>]) -> Vec<Vec<f32>> {
        let spec = &self.specs[block as usize];
        let label = format!("mock/residual/{block}/{}", sha256_bytes(prompt.as_bytes()));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &label));
        signals
            .iter()
            .map(|all| {
                let s: Vec<f64> = spec.sources.iter().map(|q| all.get(q.index()).copied().unwrap_or(0.0)).collect();
                spec.residual(&s, &mut rng)
            })
            .collect()
    }

    fn apply_edits(&self, session: &str, block: u32, rows: &mut [Vec<f32>]) -> Result<()> {
        if let Some(edits) = self.edits.get(session).and_then(|e| e.get(&block)) {
            for edit in edits {
                for row in rows.iter_mut() {
                    *row = ablate_residual(row, &edit.sae, &edit.units, edit.mode)?;
                }
            }
        }
        Ok(())
    }

    /// Mean over planted blocks of the share of planted-direction norm the
    /// session's edits remove.
    fn disruption(&self, session: &str, prompt: &str, signals: &[Vec<f64>]) -> Result<f64> {
        let Some(edits) = self.edits.get(session) else {
            return Ok(0.0);
        };
        let planted = self.config.planted_blocks();
        if planted.is_empty() || edits.is_empty() {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for &b in &planted {
            if !edits.contains_key(&b) {
                continue;
            }
            let spec = &self.specs[b as usize];
            let clean = self.residuals(b, prompt, signals);
            let mut edited = clean.clone();
            self.apply_edits(session, b, &mut edited)?;
            let proj_norm = |v: &[f64]| {
                spec.directions[..spec.sources.len()]
                    .iter()
                    .map(|d| d.iter().zip(v).map(|(a, b)| a * b).sum::<f64>().powi(2))
                    .sum::<f64>()
                    .sqrt()
            };
            let (mut removed, mut base) = (0.0, 0.0);
            for (x, y) in clean.iter().zip(&edited) {
                let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
                let delta: Vec<f64> = x.iter().zip(y).map(|(&a, &b)| a as f64 - b as f64).collect();
                removed += proj_norm(&delta);
                base += proj_norm(&xd);
            }
            if base > 0.0 {
                total += removed / base;
            }
        }
        Ok(total / planted.len() as f64)
    }

    fn require_session(&self, session_id: &str) -> std::result::Result<(), Response> {
        if self.sessions.contains(session_id) {
            Ok(())
        } else {
            Err(Response::error(session_id, ErrorCode::NoSession, "send hello first"))
        }
    }

    fn check_block(&self, session_id: &str, block: u32) -> std::result::Result<(), Response> {
        if block < self.config.n_blocks {
            Ok(())
        } else {
            Err(Response::error(
                session_id,
                ErrorCode::BadBlock,
                format!("block {block} outside {} blocks", self.config.n_blocks),
            ))
        }
    }

    fn generate(
        &mut self,
        session_id: &str,
        prompt: &str,
        n_samples: u32,
        steps: u32,
        seed: u64,
        context: Option<&PromptContext>,
    ) -> Result<Vec<GeneratedSample>> {
        let history_text = prompt.strip_suffix(',').unwrap_or(prompt);
        let literals = history_text
            .split(',')
            .scan(0usize, |offset, lit| {
                let at = *offset;
                *offset += lit.len() + 1;
                Some(parse_literal(lit, at))
            })
            .collect::<Result<Vec<i64>>>()?;
        let history = literals.len();
        let signals = self.token_signals(history_text, context)?;
        let disruption = self.disruption(session_id, history_text, &signals)?;
        let amplitude = self.config.sigma(history) * (1.0 + self.config.coupling * disruption);

        // Per step: the noiseless prediction and the noise scale, both in
        // integer literal units.
        let steps = steps as usize;
        let (centre, spread): (Vec<f64>, f64) = match context {
            Some(ctx) => {
                let loaded = self.load(&ctx.trajectory)?;
                let c = channel_index(&loaded.trajectory, &ctx.channel)?;
                let start = ctx.window_start + history;
                if start + steps > loaded.trajectory.len() {
                    return Err(Error::invalid(format!(
                        "continuation to step {} beyond {} states",
                        start + steps,
                        loaded.trajectory.len()
                    )));
                }
                let unit = 10f64.powi(ctx.precision as i32);
                let truth = loaded.trajectory.channel(c, start..start + steps);
                (
                    truth.iter().map(|&v| ctx.scaling.scale(v) * unit).collect(),
                    loaded.channel_std[c] / ctx.scaling.a * unit,
                )
            }
            None => {
                let last = *literals.last().expect("split yields at least one literal") as f64;
                let slope = if history > 1 { last - literals[history - 2] as f64 } else { 0.0 };
                let mean = literals.iter().sum::<i64>() as f64 / history as f64;
                let var = literals.iter().map(|&k| (k as f64 - mean).powi(2)).sum::<f64>() / history as f64;
                (
                    (1..=steps).map(|i| last + slope * i as f64).collect(),
                    var.sqrt().max(1.0),
                )
            }
        };

        (0..n_samples)
            .map(|i| {
                let s = sample_seed(seed, i);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, "mock/generate"));
                let literals = centre
                    .iter()
                    .enumerate()
                    .map(|(step, &c)| {
                        let xi: f64 = StandardNormal.sample(&mut rng);
                        let growth = (1.0 + self.config.horizon_growth * step as f64).sqrt();
                        quantize(c + amplitude * growth * spread * xi, 0).map(|k| k.to_string())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(GeneratedSample {
                    seed: s,
                    text: literals.join(","),
                })
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn capture(
        &mut self,
        session_id: &str,
        prompt: &str,
        blocks: &[u32],
        output_dir: &str,
        stem: &str,
        trajectory_id: &str,
        channel: &str,
        context_length: u32,
        context: Option<&PromptContext>,
    ) -> Result<Vec<CapturedTensor>> {
        if prompt.is_empty() {
            return Err(Error::invalid("empty prompt"));
        }
        let signals = self.token_signals(prompt, context)?;
        let mut out = Vec::with_capacity(blocks.len());
        for &block in blocks {
            let mut rows = self.residuals(block, prompt, &signals);
            self.apply_edits(session_id, block, &mut rows)?;
            let provenance = TensorProvenance {
                trajectory_id: trajectory_id.to_owned(),
                channel: channel.to_owned(),
                model_id: self.config.model_id.clone(),
                capture_point: "block_output".into(),
                representative: "last_digit".into(),
                produced_by: None,
            };
            let tensor = ActivationTensor::new(
                block,
                context_length,
                rows.len() as u32,
                self.config.hidden_dim as u32,
                rows.concat(),
                provenance,
            )?;
            let path = Path::new(output_dir).join(tensor_file_name(stem, block));
            write_tensor(&tensor, &path)?;
            out.push(CapturedTensor {
                block,
                path: path.to_string_lossy().into_owned(),
            });
        }
        Ok(out)
    }
}

fn channel_index(traj: &Trajectory, name: &str) -> Result<usize> {
    traj.spec
        .kind
        .channel_names()
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| Error::invalid(format!("unknown channel {name:?}")))
}

/// The prompt must be the serialization of the named channel over the
/// context window.
fn check_prompt(prompt: &str, ctx: &PromptContext, traj: &Trajectory) -> Result<()> {
    let c = channel_index(traj, &ctx.channel)?;
    let text = prompt.strip_suffix(',').unwrap_or(prompt);
    let values = crate::tokenizer::parse_text(text, &ctx.scaling, ctx.precision)?;
    if ctx.window_start + values.len() > traj.len() {
        return Err(Error::invalid("prompt runs past the end of the trajectory"));
    }
    let truth = traj.channel(c, ctx.window_start..ctx.window_start + values.len());
    let tolerance = ctx.scaling.a * 0.51 * 10f64.powi(-(ctx.precision as i32));
    if let Some(t) = values.iter().zip(&truth).position(|(v, t)| (v - t).abs() > tolerance + 1e-9 * t.abs()) {
        return Err(Error::invalid(format!(
            "prompt step {t} does not match channel {} of the context trajectory",
            ctx.channel
        )));
    }
    Ok(())
}

fn failure(session_id: &str, e: Error) -> Response {
    let code = match e {
        Error::Io { .. } | Error::StdIo(_) => ErrorCode::Io,
        _ => ErrorCode::BadRequest,
    };
    Response::error(session_id, code, e.to_string())
}

impl Handler for MockModel {
    fn handle(&mut self, request: Request) -> Response {
        let sampling = Sampling::default();
        let sid = request.session_id().to_owned();
        if !matches!(request, Request::Hello { .. }) {
            if let Err(r) = self.require_session(&sid) {
                return r;
            }
        }
        match request {
            Request::Hello {
                session_id,
                protocol_version,
                ..
            } => {
                if protocol_version != PROTOCOL_VERSION {
                    return Response::error(
                        &session_id,
                        ErrorCode::VersionMismatch,
                        format!("model speaks version {PROTOCOL_VERSION}, client sent {protocol_version}"),
                    );
                }
                self.sessions.insert(session_id.clone());
                Response::Hello {
                    session_id,
                    protocol_version: PROTOCOL_VERSION,
                    model_id: self.config.model_id.clone(),
                    n_blocks: self.config.n_blocks,
                    hidden_dim: self.config.hidden_dim as u32,
                    sampling,
                }
            }
            Request::Generate {
                session_id,
                prompt,
                n_samples,
                steps,
                seed,
                context,
            } => match self.generate(&session_id, &prompt, n_samples, steps, seed, context.as_ref()) {
                Ok(samples) => Response::Generated {
                    session_id,
                    samples,
                    sampling,
                },
                Err(e) => failure(&session_id, e),
            },
            Request::Capture {
                session_id,
                prompt,
                blocks,
                output_dir,
                stem,
                trajectory_id,
                channel,
                context_length,
                context,
            } => {
                for &b in &blocks {
                    if let Err(r) = self.check_block(&session_id, b) {
                        return r;
                    }
                }
                match self.capture(
                    &session_id,
                    &prompt,
                    &blocks,
                    &output_dir,
                    &stem,
                    &trajectory_id,
                    &channel,
                    context_length,
                    context.as_ref(),
                ) {
                    Ok(tensors) => Response::Captured {
                        session_id,
                        tensors,
                        token_lengths: vec![1; prompt.len()],
                        sampling,
                    },
                    Err(e) => failure(&session_id, e),
                }
            }
            Request::Intervene {
                session_id,
                block,
                checkpoint,
                units,
                mode,
            } => {
                if let Err(r) = self.check_block(&session_id, block) {
                    return r;
                }
                let sae = match load_checkpoint(Path::new(&checkpoint)) {
                    Ok(s) => s,
                    Err(e) => return Response::error(&session_id, ErrorCode::Io, e.to_string()),
                };
                if sae.input_dim != self.config.hidden_dim {
                    return Response::error(
                        &session_id,
                        ErrorCode::BadRequest,
                        format!("SAE input {} does not match hidden size {}", sae.input_dim, self.config.hidden_dim),
                    );
                }
                if let Some(u) = units.iter().find(|&&u| u >= sae.code_dim()) {
                    return Response::error(&session_id, ErrorCode::BadRequest, format!("unit {u} outside SAE code"));
                }
                let session = self.edits.entry(session_id.clone()).or_default();
                session.entry(block).or_default().push(Edit { sae, units, mode });
                Response::Intervened {
                    session_id,
                    active_edits: session.values().map(Vec::len).sum(),
                    sampling,
                }
            }
            Request::Clear { session_id } => {
                self.edits.remove(&session_id);
                Response::Cleared { session_id, sampling }
            }
            Request::Bye { session_id } => {
                self.edits.remove(&session_id);
                self.sessions.remove(&session_id);
                Response::Goodbye { session_id, sampling }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{write_trajectory, TrajectoryMeta};
    use crate::protocol::handle_line;
    use crate::tokenizer::{fit_scaling, serialize};

    fn hello(m: &mut MockModel, sid: &str) {
        let r = m.handle(Request::Hello {
            session_id: sid.into(),
            protocol_version: PROTOCOL_VERSION,
            client: String::new(),
        });
        assert!(matches!(r, Response::Hello { .. }), "{r:?}");
    }

    fn small() -> MockConfig {
        MockConfig {
            n_blocks: 8,
            hidden_dim: 16,
            plants: vec![MockPlant {
                block: 2,
                sources: vec![QuantityKind::TotalEnergy],
            }],
            distractors: 4,
            reference_systems: 8,
            ..MockConfig::default()
        }
    }

    #[test]
    fn requests_need_a_session() {
        let mut m = MockModel::new(small()).unwrap();
        let r = m.handle(Request::Clear { session_id: "s".into() });
        assert!(matches!(r, Response::Error { code: ErrorCode::NoSession, .. }));
        let r = m.handle(Request::Hello {
            session_id: "s".into(),
            protocol_version: 99,
            client: String::new(),
        });
        assert!(matches!(r, Response::Error { code: ErrorCode::VersionMismatch, .. }));
    }

    #[test]
    fn generation_is_deterministic_without_context() {
        let mut m = MockModel::new(small()).unwrap();
        hello(&mut m, "s");
        let line = r#"{"type":"generate","session_id":"s","prompt":"100,110,120,","n_samples":3,"steps":4,"seed":7}"#;
        let a = handle_line(&mut m, line);
        let b = handle_line(&mut m, line);
        assert_eq!(a, b);
        let Response::Generated { samples, .. } = serde_json::from_str(&a).unwrap() else {
            panic!("{a}")
        };
        assert_eq!(samples.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![7, 8, 9]);
        assert!(samples.iter().all(|s| s.text.split(',').count() == 4));
    }

    #[test]
    fn planted_projection_tracks_energy() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = MockModel::new(small()).unwrap();
        hello(&mut m, "s");
        let d1 = m.planted_spec(2).unwrap().directions[0].clone();
        let (mut proj, mut energies) = (Vec::new(), Vec::new());
        for i in 0..12 {
            let traj = simulate(i, SystemKind::MassSpring1D, &SamplingRanges::default(), 0.1, 40).unwrap();
            let path = dir.path().join(format!("t{i}.csv"));
            write_trajectory(&path, &traj, &TrajectoryMeta::new(format!("t{i}"), &traj, Some(i))).unwrap();
            let values = traj.channel(0, 0..32);
            let scaling = fit_scaling(&values, 0.99, 0.3).unwrap();
            let digits = serialize(&values, &scaling, 3).unwrap();
            let ctx = PromptContext {
                trajectory: path.to_string_lossy().into_owned(),
                channel: "x1".into(),
                window_start: 0,
                scaling,
                precision: 3,
            };
            let r = m.handle(Request::Capture {
                session_id: "s".into(),
                prompt: digits.text.clone(),
                blocks: vec![2],
                output_dir: dir.path().to_string_lossy().into_owned(),
                stem: format!("t{i}"),
                trajectory_id: format!("t{i}"),
                channel: "x1".into(),
                context_length: 32,
                context: Some(ctx),
            });
            let Response::Captured { tensors, token_lengths, .. } = r else { panic!("{r:?}") };
            assert_eq!(token_lengths.len(), digits.text.len());
            let tensor = crate::activation::read_tensor(Path::new(&tensors[0].path)).unwrap();
            let e = traj.energies().unwrap();
            for (t, span) in digits.spans.iter().enumerate() {
                let row = tensor.row(span.end);
                proj.push(row.iter().zip(&d1).map(|(&a, b)| a as f64 * b).sum::<f64>());
                energies.push(e[t].total);
            }
        }
        let rho = crate::correlation::pearson(&proj, &energies).unwrap().unwrap();
        assert!(rho >= 0.95, "rho {rho}");
    }

    #[test]
    fn mismatched_prompt_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let traj = simulate(1, SystemKind::MassSpring1D, &SamplingRanges::default(), 0.1, 40).unwrap();
        let path = dir.path().join("t.csv");
        write_trajectory(&path, &traj, &TrajectoryMeta::new("t", &traj, None)).unwrap();
        let mut m = MockModel::new(small()).unwrap();
        hello(&mut m, "s");
        let values = traj.channel(1, 0..16);
        let scaling = fit_scaling(&values, 0.99, 0.3).unwrap();
        let digits = serialize(&values, &scaling, 3).unwrap();
        let r = m.handle(Request::Generate {
            session_id: "s".into(),
            prompt: digits.prompt(),
            n_samples: 1,
            steps: 4,
            seed: 0,
            context: Some(PromptContext {
                trajectory: path.to_string_lossy().into_owned(),
                channel: "x1".into(),
                window_start: 0,
                scaling,
                precision: 3,
            }),
        });
        assert!(matches!(r, Response::Error { code: ErrorCode::BadRequest, .. }), "{r:?}");
    }
}
