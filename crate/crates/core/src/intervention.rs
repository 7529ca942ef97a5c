//! Causal test of energy-correlated codes: zero them inside the residual
//! stream during generation and measure how much the forecast error grows,
//! `epsilon = (Err(ablated) - Err(clean)) / Err(clean)`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::QuantityKind;
use crate::correlation::{block_means, selection_count, CorrelationMatrix};
use crate::error::{Error, Result};
use crate::forecast::{forecast_case, ForecastCase, ForecastSettings};
use crate::io::{derive_seed, Table};
use crate::protocol::{AblationMode, Client};
use crate::sae::{Real, SaeParams};

pub const DEFAULT_TARGET_BLOCKS: usize = 4;
pub const DEFAULT_WINDOW: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockTarget {
    pub block: u32,
    /// Mean `rho(c, E)` over the block's defined units.
    pub mean_rho: f64,
    /// Code units of the block's SAE.
    pub n_units: usize,
    pub units: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub targets: Vec<BlockTarget>,
    pub mode: AblationMode,
    pub fraction: f64,
    /// Set when fewer blocks than requested had a defined mean.
    pub short: bool,
}

impl InterventionSpec {
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.targets {
            if !seen.insert(t.block) {
                return Err(Error::invalid(format!("block {} targeted twice", t.block)));
            }
            if let Some(&u) = t.units.iter().find(|&&u| u >= t.n_units) {
                return Err(Error::invalid(format!("unit {u} outside block {} with {} units", t.block, t.n_units)));
            }
        }
        Ok(())
    }

    pub fn total_units(&self) -> usize {
        self.targets.iter().map(|t| t.units.len()).sum()
    }

    pub fn table(&self) -> Table {
        let mut t = Table::new(["block", "mean_rho", "n_units", "unit"]);
        for target in &self.targets {
            for u in &target.units {
                t.push([
                    target.block.to_string(),
                    format!("{:e}", target.mean_rho),
                    target.n_units.to_string(),
                    u.to_string(),
                ]);
            }
        }
        t
    }
}

/// Ranks blocks by mean `rho(c, E)` and keeps the best `n_blocks`, breaking
/// ties by block index. Within each block the `ceil(fraction * units)`
/// units with the highest signed `rho(c, E)` are selected.
pub fn select_targets(
    matrix: &CorrelationMatrix,
    n_blocks: usize,
    fraction: f64,
    mode: AblationMode,
) -> Result<InterventionSpec> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let mut ranked: Vec<(u32, f64)> = block_means(matrix, QuantityKind::TotalEnergy)
        .into_iter()
        .filter_map(|(b, m)| m.map(|m| (b, m)))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let short = ranked.len() < n_blocks;
    ranked.truncate(n_blocks);

    let targets = ranked
        .into_iter()
        .map(|(block, mean_rho)| {
            let units = &matrix
                .blocks
                .iter()
                .find(|b| b.block == block)
                .expect("ranked blocks come from the matrix")
                .units;
            let mut defined: Vec<(usize, f64)> = units
                .iter()
                .enumerate()
                .filter_map(|(i, r)| r[QuantityKind::TotalEnergy.index()].map(|r| (i, r)))
                .collect();
            defined.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            defined.truncate(selection_count(fraction, units.len()));
            BlockTarget {
                block,
                mean_rho,
                n_units: units.len(),
                units: defined.into_iter().map(|(i, _)| i).collect(),
            }
        })
        .collect();
    Ok(InterventionSpec {
        targets,
        mode,
        fraction,
        short,
    })
}

/// Same blocks and unit counts, units drawn uniformly from those not
/// selected by `spec`.
pub fn random_control(spec: &InterventionSpec, seed: u64) -> Result<InterventionSpec> {
    let mut targets = Vec::with_capacity(spec.targets.len());
    for t in &spec.targets {
        let selected: BTreeSet<usize> = t.units.iter().copied().collect();
        let pool: Vec<usize> = (0..t.n_units).filter(|u| !selected.contains(u)).collect();
        if pool.len() < t.units.len() {
            return Err(Error::invalid(format!(
                "block {} has {} unselected units, {} needed",
                t.block,
                pool.len(),
                t.units.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("control/{}", t.block)));
        let mut units: Vec<usize> = sample(&mut rng, pool.len(), t.units.len()).into_iter().map(|i| pool[i]).collect();
        units.sort_unstable();
        targets.push(BlockTarget { units, ..t.clone() });
    }
    Ok(InterventionSpec {
        targets,
        ..spec.clone()
    })
}

/// Removes the listed units from `x`.
///
/// `DeltaPatch`: `x - sum_i c_i * W_d[:, i]`, leaving reconstruction error in
/// place. `FullReplace`: the decoding of the code with the units zeroed.
pub fn ablate_residual<T: Real>(x: &[T], sae: &SaeParams<T>, units: &[usize], mode: AblationMode) -> Result<Vec<T>> {
    if let Some(&u) = units.iter().find(|&&u| u >= sae.code_dim()) {
        return Err(Error::invalid(format!("unit {u} outside code of {} units", sae.code_dim())));
    }
    let mut code = sae.encode(x)?;
    match mode {
        AblationMode::DeltaPatch => {
            let mut out = x.to_vec();
            let d = sae.code_dim();
            for &u in units {
                let c = code[u];
                if c != T::zero() {
                    for (i, o) in out.iter_mut().enumerate() {
                        *o = *o - c * sae.w_d[i * d + u];
                    }
                }
            }
            Ok(out)
        }
        AblationMode::FullReplace => {
            for &u in units {
                code[u] = T::zero();
            }
            sae.decode(&code)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEffect {
    pub trajectory_id: String,
    pub clean_error: f64,
    pub ablated_error: f64,
    /// Undefined when the clean error is zero.
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub window: usize,
    pub mode: AblationMode,
    /// Mean over trajectories of the window-mean clean error.
    pub baseline_error: f64,
    pub intervened_error: f64,
    /// Mean of the per-trajectory epsilons that are defined.
    pub epsilon: Option<f64>,
    pub per_step_baseline: Vec<f64>,
    pub per_step_intervened: Vec<f64>,
    pub trajectories: Vec<TrajectoryEffect>,
    pub missing_steps: usize,
}

impl InterventionResult {
    pub fn table(&self) -> Table {
        let mut t = Table::new(["trajectory", "clean_error", "ablated_error", "epsilon"]);
        for e in &self.trajectories {
            t.push([
                e.trajectory_id.clone(),
                format!("{:e}", e.clean_error),
                format!("{:e}", e.ablated_error),
                e.epsilon.map_or("NA".into(), |v| format!("{v:e}")),
            ]);
        }
        t
    }
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = v.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

fn per_step_mean(runs: &[Vec<f64>], window: usize) -> Vec<f64> {
    (0..window).map(|i| mean(runs.iter().map(|r| r[i]))).collect()
}

/// Forecasts every case twice with identical sampling seeds, first clean,
/// then with the selected units ablated. `settings.horizon` is overridden by
/// `window`. Edits are cleared on return.
pub fn run_intervention(
    client: &mut Client,
    spec: &InterventionSpec,
    checkpoints: &BTreeMap<u32, PathBuf>,
    cases: &[ForecastCase],
    settings: &ForecastSettings,
    window: usize,
) -> Result<InterventionResult> {
    spec.validate()?;
    let settings = ForecastSettings {
        horizon: window,
        ..settings.clone()
    };
    client.clear()?;
    let clean = cases
        .iter()
        .map(|c| forecast_case(client, c, &settings))
        .collect::<Result<Vec<_>>>()?;

    for t in &spec.targets {
        let path = checkpoints
            .get(&t.block)
            .ok_or_else(|| Error::Missing(format!("no SAE checkpoint for block {}", t.block)))?;
        client.intervene(t.block, path, &t.units, spec.mode)?;
    }
    let ablated = cases.iter().map(|c| forecast_case(client, c, &settings)).collect::<Result<Vec<_>>>();
    client.clear()?;
    let ablated = ablated?;

    let trajectories: Vec<TrajectoryEffect> = clean
        .iter()
        .zip(&ablated)
        .map(|(c, a)| {
            let (ce, ae) = (c.mean_error(), a.mean_error());
            TrajectoryEffect {
                trajectory_id: c.trajectory_id.clone(),
                clean_error: ce,
                ablated_error: ae,
                epsilon: (ce > 0.0).then(|| (ae - ce) / ce),
            }
        })
        .collect();
    let defined: Vec<f64> = trajectories.iter().filter_map(|t| t.epsilon).collect();
    let clean_steps: Vec<Vec<f64>> = clean.iter().map(|c| c.per_step_error.clone()).collect();
    let ablated_steps: Vec<Vec<f64>> = ablated.iter().map(|c| c.per_step_error.clone()).collect();
    Ok(InterventionResult {
        window,
        mode: spec.mode,
        baseline_error: mean(trajectories.iter().map(|t| t.clean_error)),
        intervened_error: mean(trajectories.iter().map(|t| t.ablated_error)),
        epsilon: (!defined.is_empty()).then(|| mean(defined.iter().copied())),
        per_step_baseline: per_step_mean(&clean_steps, window),
        per_step_intervened: per_step_mean(&ablated_steps, window),
        trajectories,
        missing_steps: clean.iter().chain(&ablated).map(|c| c.missing_steps).sum(),
    })
}
