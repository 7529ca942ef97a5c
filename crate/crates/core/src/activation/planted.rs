//! Synthetic residual streams in which each energy quantity is written along
//! a known unit direction, used to check the SAE and correlation stages end
//! to end without a language model.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{identity_alignment, ActivationTensor, AlignmentKey, AlignmentRecord, QuantityKind, TensorProvenance};
use crate::error::{Error, Result};
use crate::io::derive_seed;
use crate::physics::{EnergyBreakdown, Trajectory};

pub const PLANTED_CHANNEL: &str = "planted";

/// `residual = sum_f (signal_f + offset) * d_f + sum_j a_j * u_j + noise * eta`,
/// with `signal_f` the standardized quantity, `eta` standard normal and
/// `a_j` a sparse distractor activation: zero except with probability
/// `distractor_rate`, then uniform in `[0.5, 2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedSpec {
    pub hidden_dim: usize,
    pub sources: Vec<QuantityKind>,
    /// One per source, then one per distractor.
    pub directions: Vec<Vec<f64>>,
    pub offset: f64,
    pub noise: f64,
    #[serde(default)]
    pub distractor_rate: f64,
}

impl PlantedSpec {
    pub fn random(
        hidden_dim: usize,
        sources: Vec<QuantityKind>,
        distractors: usize,
        offset: f64,
        noise: f64,
        seed: u64,
    ) -> Result<Self> {
        let directions = orthonormal_directions(hidden_dim, sources.len() + distractors, seed)?;
        let spec = PlantedSpec {
            hidden_dim,
            sources,
            directions,
            offset,
            noise,
            distractor_rate: 0.05,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn distractors(&self) -> usize {
        self.directions.len().saturating_sub(self.sources.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.directions.len() < self.sources.len() {
            return Err(Error::DimensionMismatch {
                expected: self.sources.len(),
                actual: self.directions.len(),
            });
        }
        if self.sources.contains(&QuantityKind::RandomBaseline) {
            return Err(Error::invalid("the random baseline cannot be planted"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.offset.is_finite()) {
            return Err(Error::invalid("noise must be non-negative and offset finite"));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::invalid("distractor rate must lie in [0, 1]"));
        }
        for (i, d) in self.directions.iter().enumerate() {
            if d.len() != self.hidden_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.hidden_dim,
                    actual: d.len(),
                });
            }
            for (j, e) in self.directions.iter().enumerate().take(i + 1) {
                let dot: f64 = d.iter().zip(e).map(|(a, b)| a * b).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot - target).abs() > 1e-9 {
                    return Err(Error::invalid(format!("directions {i} and {j} are not orthonormal (dot {dot})")));
                }
            }
        }
        Ok(())
    }

    /// `signals` holds one standardized value per source.
    pub fn residual(&self, signals: &[f64], rng: &mut ChaCha8Rng) -> Vec<f32> {
        let mut out: Vec<f64> = (0..self.hidden_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                self.noise * z
            })
            .collect();
        let amplitudes = signals.iter().map(|s| s + self.offset).chain((0..self.distractors()).map(|_| {
            if rng.random::<f64>() < self.distractor_rate {
                rng.random_range(0.5..=2.0)
            } else {
                0.0
            }
        }));
        for (direction, amplitude) in self.directions.iter().zip(amplitudes.collect::<Vec<_>>()) {
            if amplitude != 0.0 {
                for (o, d) in out.iter_mut().zip(direction) {
                    *o += amplitude * d;
                }
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }
}

/// `n` orthonormal vectors in `R^h` by Gram-Schmidt on Gaussian draws.
pub fn orthonormal_directions(h: usize, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n > h {
        return Err(Error::invalid(format!("cannot fit {n} orthonormal directions in {h} dimensions")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..h).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    Ok(basis)
}

/// Per-quantity mean and standard deviation pooled over a set of states.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SignalNormalization {
    pub stats: BTreeMap<QuantityKind, (f64, f64)>,
}

impl SignalNormalization {
    pub fn fit<'a>(energies: impl IntoIterator<Item = &'a EnergyBreakdown>) -> Result<Self> {
        let energies: Vec<&EnergyBreakdown> = energies.into_iter().collect();
        if energies.is_empty() {
            return Err(Error::invalid("no states to normalize over"));
        }
        let mut stats = BTreeMap::new();
        for q in [
            QuantityKind::TotalEnergy,
            QuantityKind::KineticEnergy,
            QuantityKind::PotentialEnergy,
        ] {
            let values: Vec<f64> = energies.iter().filter_map(|e| q.of_energy(e)).collect();
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = if var > 0.0 { var.sqrt() } else { 1.0 };
            stats.insert(q, (mean, std));
        }
        Ok(SignalNormalization { stats })
    }

    pub fn standardize(&self, kind: QuantityKind, e: &EnergyBreakdown) -> f64 {
        match (kind.of_energy(e), self.stats.get(&kind)) {
            (Some(v), Some(&(mean, std))) => (v - mean) / std,
            _ => 0.0,
        }
    }
}

pub struct PlantedData {
    pub tensors: Vec<ActivationTensor>,
    pub alignments: BTreeMap<AlignmentKey, AlignmentRecord>,
    pub normalization: SignalNormalization,
}

/// One tensor per trajectory with a row per step of `window`. The
/// normalization is fitted on the window states of all trajectories.
pub fn generate_planted(
    spec: &PlantedSpec,
    block: u32,
    trajectories: &BTreeMap<String, Trajectory>,
    window: Range<usize>,
    seed: u64,
) -> Result<PlantedData> {
    spec.validate()?;
    if window.is_empty() {
        return Err(Error::invalid("empty planted window"));
    }
    let mut energies = BTreeMap::new();
    for (id, traj) in trajectories {
        if window.end > traj.len() {
            return Err(Error::invalid(format!("window {window:?} exceeds trajectory {id} of {} states", traj.len())));
        }
        let e = traj.energies()?;
        energies.insert(id, e[window.clone()].to_vec());
    }
    let normalization = SignalNormalization::fit(energies.values().flatten())?;

    let mut tensors = Vec::new();
    let mut alignments = BTreeMap::new();
    for (id, window_energies) in &energies {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("planted/{block}/{id}")));
        let mut data = Vec::with_capacity(window.len() * spec.hidden_dim);
        for e in window_energies {
            let signals: Vec<f64> = spec.sources.iter().map(|&q| normalization.standardize(q, e)).collect();
            data.extend(spec.residual(&signals, &mut rng));
        }
        let provenance = TensorProvenance {
            trajectory_id: (*id).clone(),
            channel: PLANTED_CHANNEL.into(),
            model_id: "planted".into(),
            capture_point: "block_output".into(),
            representative: "step".into(),
            produced_by: None,
        };
        let len = window.len() as u32;
        tensors.push(ActivationTensor::new(block, len, len, spec.hidden_dim as u32, data, provenance)?);
        let record = identity_alignment(id, PLANTED_CHANNEL, window.clone());
        alignments.insert(record.key(), record);
    }
    Ok(PlantedData {
        tensors,
        alignments,
        normalization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::build_dataset;
    use crate::physics::{simulate, SamplingRanges, SystemKind};

    #[test]
    fn directions_are_orthonormal() {
        let d = orthonormal_directions(16, 16, 3).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                let dot: f64 = d[i].iter().zip(&d[j]).map(|(a, b)| a * b).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
        assert!(orthonormal_directions(4, 5, 0).is_err());
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut spec = PlantedSpec::random(8, vec![QuantityKind::TotalEnergy, QuantityKind::KineticEnergy], 2, 3.0, 0.1, 1).unwrap();
        spec.directions[1] = spec.directions[0].clone();
        assert!(spec.validate().is_err());
        assert!(PlantedSpec::random(4, vec![QuantityKind::TotalEnergy], 4, 0.0, 0.1, 1).is_err());
        assert!(PlantedSpec::random(8, vec![QuantityKind::RandomBaseline], 0, 0.0, 0.1, 1).is_err());
    }

    #[test]
    fn noiseless_projection_recovers_signal() {
        let mut trajectories = BTreeMap::new();
        for i in 0..3 {
            let t = simulate(i, SystemKind::MassSpring1D, &SamplingRanges::default(), 0.1, 80).unwrap();
            trajectories.insert(format!("t{i}"), t);
        }
        let sources = vec![QuantityKind::KineticEnergy, QuantityKind::PotentialEnergy];
        let spec = PlantedSpec::random(12, sources.clone(), 4, 2.0, 0.0, 9).unwrap();
        let data = generate_planted(&spec, 0, &trajectories, 8..72, 4).unwrap();
        assert_eq!(data.tensors.len(), 3);
        let ds = build_dataset(&data.tensors, &trajectories, &data.alignments, 0).unwrap();
        assert_eq!(ds.len(), 3 * 64);
        for s in &ds.samples {
            for (q, d) in sources.iter().zip(&spec.directions) {
                let proj: f64 = s.residual.iter().zip(d).map(|(&r, &u)| r as f64 * u).sum();
                let expected = data.normalization.standardize(*q, &s.energy) + 2.0;
                assert!((proj - expected).abs() < 1e-4, "{proj} vs {expected}");
            }
        }
    }
}
