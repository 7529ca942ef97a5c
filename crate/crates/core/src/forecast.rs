//! Forecast scoring: bounded relative error, median aggregation over
//! sampled continuations and the context-length sweep.
//!
//! Every channel is prompted on its own. The per-channel median forecasts
//! are unscaled and recombined into the full phase-state vector before the
//! error is taken.

use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{derive_seed, Table};
use crate::physics::{channel_value, Trajectory, FORECAST_HORIZON};
use crate::protocol::{Client, PromptContext};
use crate::tokenizer::{fit_scaling, parse_literal, serialize, ScalingParams, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_PRECISION};

pub const DEFAULT_SAMPLES: u32 = 10;

/// `|pred - truth| / (|pred| + |truth|)` with Euclidean norms. Two zero
/// vectors score 0.
pub fn bounded_relative_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            actual: pred.len(),
        });
    }
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut pred.iter().zip(truth).map(|(p, t)| p - t));
    let (a, b) = (norm(&mut pred.iter().copied()), norm(&mut truth.iter().copied()));
    let m = a.max(b);
    if m == 0.0 {
        return Ok(0.0);
    }
    if !(diff.is_finite() && m.is_finite()) {
        return Err(Error::invalid("non-finite forecast or truth"));
    }
    // Dividing through by the larger norm keeps Err(2z, z) at exactly 1/3.
    Ok((diff / m / (a / m + b / m)).min(1.0))
}

/// Median; an even count averages the two central order statistics.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// Median of the valid samples; `None` when none parsed.
pub fn median_aggregate(samples: &[Option<f64>]) -> Option<f64> {
    let valid: Vec<f64> = samples.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    median(&valid)
}

/// Reads up to `steps` comma-separated literals from a continuation and
/// unscales them. A literal that does not parse yields `None` for its step;
/// so does every step the continuation stops short of.
pub fn parse_generation(text: &str, steps: usize, scaling: &ScalingParams, precision: u32) -> Vec<Option<f64>> {
    let scale = 10f64.powi(precision as i32);
    let mut out: Vec<Option<f64>> = text
        .split(',')
        .take(steps)
        .map(|lit| {
            parse_literal(lit.trim(), 0)
                .ok()
                .map(|k| scaling.unscale(k as f64 / scale))
        })
        .collect();
    out.resize(steps, None);
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastSettings {
    pub n_samples: u32,
    pub horizon: usize,
    pub alpha: f64,
    pub beta: f64,
    pub precision: u32,
    pub seed: u64,
}

impl Default for ForecastSettings {
    fn default() -> Self {
        ForecastSettings {
            n_samples: DEFAULT_SAMPLES,
            horizon: FORECAST_HORIZON,
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            precision: DEFAULT_PRECISION,
            seed: 0,
        }
    }
}

/// One trajectory to forecast: history `[forecast_start - history,
/// forecast_start)`, truth from `forecast_start` on.
#[derive(Debug, Clone)]
pub struct ForecastCase {
    pub trajectory_id: String,
    /// Trajectory file, passed to the model as prompt context when set.
    pub path: Option<PathBuf>,
    pub trajectory: Arc<Trajectory>,
    pub forecast_start: usize,
    pub history: usize,
}

impl ForecastCase {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.history == 0 || self.history > self.forecast_start {
            return Err(Error::invalid(format!(
                "{}: history {} does not fit before step {}",
                self.trajectory_id, self.history, self.forecast_start
            )));
        }
        if self.forecast_start + horizon > self.trajectory.len() {
            return Err(Error::invalid(format!(
                "{}: forecast window ends at {} beyond {} states",
                self.trajectory_id,
                self.forecast_start + horizon,
                self.trajectory.len()
            )));
        }
        Ok(())
    }

    fn window_start(&self) -> usize {
        self.forecast_start - self.history
    }
}

/// Sampling seed of one channel prompt. It ignores the history length, so
/// every context length draws the same sample seeds.
pub fn channel_seed(base: u64, trajectory_id: &str, channel: &str) -> u64 {
    derive_seed(base, &format!("forecast/{trajectory_id}/{channel}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseForecast {
    pub trajectory_id: String,
    pub per_step_error: Vec<f64>,
    /// Continuation literals that failed to parse.
    pub invalid_samples: usize,
    /// Steps where some channel had no valid sample; scored as 1.
    pub missing_steps: usize,
}

impl CaseForecast {
    pub fn mean_error(&self) -> f64 {
        self.per_step_error.iter().sum::<f64>() / self.per_step_error.len().max(1) as f64
    }
}

pub fn forecast_case(client: &mut Client, case: &ForecastCase, settings: &ForecastSettings) -> Result<CaseForecast> {
    case.validate(settings.horizon)?;
    let traj = &case.trajectory;
    let names = traj.spec.kind.channel_names();
    let history = case.window_start()..case.forecast_start;
    let mut medians = Vec::with_capacity(names.len());
    let mut invalid_samples = 0;
    for (c, name) in names.iter().enumerate() {
        let values = traj.channel(c, history.clone());
        let scaling = fit_scaling(&values, settings.alpha, settings.beta)?;
        let digits = serialize(&values, &scaling, settings.precision)?;
        let context = case.path.as_ref().map(|p| PromptContext {
            trajectory: p.to_string_lossy().into_owned(),
            channel: name.clone(),
            window_start: case.window_start(),
            scaling,
            precision: settings.precision,
        });
        let seed = channel_seed(settings.seed, &case.trajectory_id, name);
        let samples = client.generate(&digits.prompt(), settings.n_samples, settings.horizon as u32, seed, context)?;
        let parsed: Vec<Vec<Option<f64>>> = samples
            .iter()
            .map(|s| parse_generation(&s.text, settings.horizon, &scaling, settings.precision))
            .collect();
        invalid_samples += parsed.iter().flatten().filter(|v| v.is_none()).count();
        medians.push(
            (0..settings.horizon)
                .map(|i| median_aggregate(&parsed.iter().map(|p| p[i]).collect::<Vec<_>>()))
                .collect::<Vec<_>>(),
        );
    }

    let mut per_step_error = Vec::with_capacity(settings.horizon);
    let mut missing_steps = 0;
    for i in 0..settings.horizon {
        let state = &traj.states[case.forecast_start + i];
        let truth: Vec<f64> = (0..names.len()).map(|c| channel_value(state, c)).collect();
        let pred: Option<Vec<f64>> = medians.iter().map(|m| m[i]).collect();
        match pred {
            Some(pred) => per_step_error.push(bounded_relative_error(&pred, &truth)?),
            None => {
                missing_steps += 1;
                per_step_error.push(1.0);
            }
        }
    }
    Ok(CaseForecast {
        trajectory_id: case.trajectory_id.clone(),
        per_step_error,
        invalid_samples,
        missing_steps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStat {
    pub mean: f64,
    /// Sample standard deviation over trajectories divided by `sqrt(n)`.
    pub stderr: f64,
}

/// Mean and standard error of `values`; a single value has zero spread.
pub fn mean_stderr(values: &[f64]) -> Option<StepStat> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let stderr = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Some(StepStat { mean, stderr })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub system: String,
    pub context_length: u32,
    pub n_trajectories: usize,
    pub per_step: Vec<StepStat>,
    /// Trajectories whose forecast failed, with the reason.
    pub failures: Vec<(String, String)>,
    pub missing_steps: usize,
    pub invalid_samples: usize,
}

impl ErrorReport {
    pub fn first_step(&self) -> Option<StepStat> {
        self.per_step.first().copied()
    }

    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn summarize(system: &str, context_length: u32, results: &[(String, Result<CaseForecast>)]) -> ErrorReport {
    let ok: Vec<&CaseForecast> = results.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
    let failures = results
        .iter()
        .filter_map(|(id, r)| r.as_ref().err().map(|e| (id.clone(), e.to_string())))
        .collect();
    let horizon = ok.iter().map(|c| c.per_step_error.len()).min().unwrap_or(0);
    let per_step = (0..horizon)
        .filter_map(|i| mean_stderr(&ok.iter().map(|c| c.per_step_error[i]).collect::<Vec<_>>()))
        .collect();
    ErrorReport {
        system: system.to_owned(),
        context_length,
        n_trajectories: ok.len(),
        per_step,
        failures,
        missing_steps: ok.iter().map(|c| c.missing_steps).sum(),
        invalid_samples: ok.iter().map(|c| c.invalid_samples).sum(),
    }
}

#[derive(Debug, Clone)]
pub struct SweepCell {
    pub system: String,
    pub context_length: u32,
    pub cases: Vec<ForecastCase>,
}

/// Scores every cell, each over its own session. Cells run in parallel on
/// the current rayon pool; the output follows the input order.
pub fn sweep<F>(open: F, cells: &[SweepCell], settings: &ForecastSettings) -> Vec<ErrorReport>
where
    F: Fn(&str) -> Result<Client> + Sync,
{
    cells
        .par_iter()
        .map(|cell| {
            let session = format!("sweep-{}-{}", cell.system, cell.context_length);
            let results: Vec<(String, Result<CaseForecast>)> = match open(&session) {
                Ok(mut client) => {
                    let out = cell
                        .cases
                        .iter()
                        .map(|case| (case.trajectory_id.clone(), forecast_case(&mut client, case, settings)))
                        .collect();
                    let _ = client.bye();
                    out
                }
                Err(e) => {
                    let msg = e.to_string();
                    cell.cases
                        .iter()
                        .map(|case| (case.trajectory_id.clone(), Err(Error::Missing(format!("no session: {msg}")))))
                        .collect()
                }
            };
            summarize(&cell.system, cell.context_length, &results)
        })
        .collect()
}

/// First-step error against context length.
pub fn first_step_table(reports: &[ErrorReport]) -> Table {
    let mut t = Table::new(["system", "context_length", "n", "mean", "stderr", "failed", "missing_steps"]);
    for r in reports {
        let (mean, stderr) = r
            .first_step()
            .map_or(("NA".into(), "NA".into()), |s| (format!("{:e}", s.mean), format!("{:e}", s.stderr)));
        t.push([
            r.system.clone(),
            r.context_length.to_string(),
            r.n_trajectories.to_string(),
            mean,
            stderr,
            r.failures.len().to_string(),
            r.missing_steps.to_string(),
        ]);
    }
    t
}

/// Error at every forecast step for every context length.
pub fn per_step_table(reports: &[ErrorReport]) -> Table {
    let mut t = Table::new(["system", "context_length", "step", "mean", "stderr"]);
    for r in reports {
        for (i, s) in r.per_step.iter().enumerate() {
            t.push([
                r.system.clone(),
                r.context_length.to_string(),
                i.to_string(),
                format!("{:e}", s.mean),
                format!("{:e}", s.stderr),
            ]);
        }
    }
    t
}
