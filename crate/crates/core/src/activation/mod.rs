//! Residual-stream tensors, their pairing with physical quantities, and a
//! synthetic generator with planted energy directions.

mod format;
mod planted;

pub use format::{read_tensor, write_tensor, ActivationTensor, TensorProvenance, TENSOR_MAGIC, TENSOR_VERSION};
pub use planted::{PLANTED_CHANNEL, generate_planted, orthonormal_directions, PlantedData, PlantedSpec, SignalNormalization};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{derive_seed, Provenance};
use crate::physics::{energy, EnergyBreakdown, Trajectory};
use crate::tokenizer::{ScalingParams, StepSpan, StepTokens};

/// Label paired with every residual sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum QuantityKind {
    TotalEnergy,
    KineticEnergy,
    PotentialEnergy,
    RandomBaseline,
}

impl QuantityKind {
    pub const ALL: [QuantityKind; 4] = [
        QuantityKind::TotalEnergy,
        QuantityKind::KineticEnergy,
        QuantityKind::PotentialEnergy,
        QuantityKind::RandomBaseline,
    ];

    pub fn short(self) -> &'static str {
        match self {
            QuantityKind::TotalEnergy => "E",
            QuantityKind::KineticEnergy => "KE",
            QuantityKind::PotentialEnergy => "PE",
            QuantityKind::RandomBaseline => "Rand",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// The energy component this quantity reads, if any.
    pub fn of_energy(self, e: &EnergyBreakdown) -> Option<f64> {
        match self {
            QuantityKind::TotalEnergy => Some(e.total),
            QuantityKind::KineticEnergy => Some(e.kinetic),
            QuantityKind::PotentialEnergy => Some(e.potential),
            QuantityKind::RandomBaseline => None,
        }
    }
}

impl fmt::Display for QuantityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl std::str::FromStr for QuantityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        QuantityKind::ALL
            .into_iter()
            .find(|q| q.short().eq_ignore_ascii_case(s) || format!("{q:?}") == s)
            .ok_or_else(|| Error::invalid(format!("unknown quantity {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AlignmentKey {
    pub trajectory_id: String,
    pub channel: String,
    pub context_length: u32,
}

/// How one prompt was built from a trajectory window and how its time steps
/// map to characters and tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub trajectory_id: String,
    pub channel: String,
    pub context_length: u32,
    /// Trajectory state index of the first history step.
    pub window_start: usize,
    pub precision: u32,
    pub scaling: ScalingParams,
    #[serde(default)]
    pub spans: Vec<StepSpan>,
    /// Filled in once a model has tokenized the prompt.
    #[serde(default)]
    pub tokens: Vec<StepTokens>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl AlignmentRecord {
    pub fn key(&self) -> AlignmentKey {
        AlignmentKey {
            trajectory_id: self.trajectory_id.clone(),
            channel: self.channel.clone(),
            context_length: self.context_length,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SourceKey {
    pub block: u32,
    pub context_length: u32,
    pub trajectory_id: String,
    pub channel: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub residual: Vec<f32>,
    /// Trajectory state index.
    pub step: usize,
    pub energy: EnergyBreakdown,
    pub baseline: f64,
    pub source: SourceKey,
}

impl Sample {
    pub fn quantity(&self, kind: QuantityKind) -> f64 {
        kind.of_energy(&self.energy).unwrap_or(self.baseline)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDataset {
    pub samples: Vec<Sample>,
    pub sources: BTreeSet<SourceKey>,
    pub baseline_seed: u64,
}

impl ActivationDataset {
    pub fn hidden_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.residual.len())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn residuals(&self) -> Vec<&[f32]> {
        self.samples.iter().map(|s| s.residual.as_slice()).collect()
    }

    pub fn labels(&self, kind: QuantityKind) -> Vec<f64> {
        self.samples.iter().map(|s| s.quantity(kind)).collect()
    }
}

/// Standard-normal baseline value for one (trajectory, channel, step).
pub fn random_baseline(seed: u64, trajectory_id: &str, channel: &str, step: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("{trajectory_id}/{channel}/{step}")));
    StandardNormal.sample(&mut rng)
}

/// Pairs every history-window step of every tensor with the residual at the
/// step's representative token and the energy of the same trajectory state.
/// Samples are ordered by source key, then step, whatever the input order.
pub fn build_dataset(
    tensors: &[ActivationTensor],
    trajectories: &BTreeMap<String, Trajectory>,
    alignments: &BTreeMap<AlignmentKey, AlignmentRecord>,
    baseline_seed: u64,
) -> Result<ActivationDataset> {
    let mut ordered: Vec<&ActivationTensor> = tensors.iter().collect();
    ordered.sort_by_key(|t| source_key(t));

    let mut samples = Vec::new();
    let mut sources = BTreeSet::new();
    for tensor in ordered {
        let key = AlignmentKey {
            trajectory_id: tensor.provenance.trajectory_id.clone(),
            channel: tensor.provenance.channel.clone(),
            context_length: tensor.context_length,
        };
        let alignment = alignments
            .get(&key)
            .ok_or_else(|| Error::Missing(format!("no alignment for {key:?}")))?;
        let trajectory = trajectories
            .get(&key.trajectory_id)
            .ok_or_else(|| Error::Missing(format!("no trajectory {:?}", key.trajectory_id)))?;
        let history = tensor.context_length as usize;
        if alignment.tokens.len() < history {
            return Err(Error::Missing(format!(
                "alignment for {key:?} covers {} of {history} steps",
                alignment.tokens.len()
            )));
        }
        let source = source_key(tensor);
        for (t, tokens) in alignment.tokens[..history].iter().enumerate() {
            let position = tokens.representative;
            if position >= tensor.seq_len as usize {
                return Err(Error::invalid(format!(
                    "{key:?}: representative token {position} beyond sequence length {}",
                    tensor.seq_len
                )));
            }
            let step = alignment.window_start + t;
            let state = trajectory.states.get(step).ok_or_else(|| {
                Error::invalid(format!("{key:?}: step {step} outside trajectory of {} states", trajectory.len()))
            })?;
            samples.push(Sample {
                residual: tensor.row(position).to_vec(),
                step,
                energy: energy(&trajectory.spec, state)?,
                baseline: random_baseline(baseline_seed, &key.trajectory_id, &key.channel, step),
                source: source.clone(),
            });
        }
        sources.insert(source);
    }
    Ok(ActivationDataset {
        samples,
        sources,
        baseline_seed,
    })
}

fn source_key(t: &ActivationTensor) -> SourceKey {
    SourceKey {
        block: t.block_index,
        context_length: t.context_length,
        trajectory_id: t.provenance.trajectory_id.clone(),
        channel: t.provenance.channel.clone(),
    }
}

/// Alignment for tensors with one row per history step.
pub fn identity_alignment(trajectory_id: &str, channel: &str, window: std::ops::Range<usize>) -> AlignmentRecord {
    let len = window.len();
    AlignmentRecord {
        trajectory_id: trajectory_id.to_owned(),
        channel: channel.to_owned(),
        context_length: len as u32,
        window_start: window.start,
        precision: crate::tokenizer::DEFAULT_PRECISION,
        scaling: ScalingParams::identity(),
        spans: Vec::new(),
        tokens: (0..len)
            .map(|t| StepTokens {
                first: t,
                last: t,
                representative: t,
            })
            .collect(),
        provenance: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{simulate, SamplingRanges, SystemKind};

    fn fixture() -> (Vec<ActivationTensor>, BTreeMap<String, Trajectory>, BTreeMap<AlignmentKey, AlignmentRecord>) {
        let mut trajectories = BTreeMap::new();
        let mut alignments = BTreeMap::new();
        let mut tensors = Vec::new();
        for (i, id) in ["a", "b"].iter().enumerate() {
            let traj = simulate(i as u64, SystemKind::MassSpring1D, &SamplingRanges::default(), 0.1, 96).unwrap();
            for channel in ["x1", "v2"] {
                let record = identity_alignment(id, channel, 10..74);
                alignments.insert(record.key(), record);
                let data = (0..64 * 4).map(|v| v as f32 + i as f32).collect();
                let provenance = TensorProvenance {
                    trajectory_id: id.to_string(),
                    channel: channel.into(),
                    ..Default::default()
                };
                tensors.push(ActivationTensor::new(2, 64, 64, 4, data, provenance).unwrap());
            }
            trajectories.insert(id.to_string(), traj);
        }
        (tensors, trajectories, alignments)
    }

    #[test]
    fn one_sample_per_history_step() {
        let (tensors, trajectories, alignments) = fixture();
        let ds = build_dataset(&tensors[..1], &trajectories, &alignments, 5).unwrap();
        assert_eq!(ds.len(), 64);
        assert_eq!(ds.samples[0].step, 10);
        assert_eq!(ds.samples[63].step, 73);
        assert_eq!(ds.samples[3].residual, vec![12.0, 13.0, 14.0, 15.0]);
        for s in &ds.samples {
            assert_eq!(s.energy.total, s.energy.kinetic + s.energy.potential);
            let expected = energy(&trajectories["a"].spec, &trajectories["a"].states[s.step]).unwrap();
            assert_eq!(s.energy, expected);
        }
    }

    #[test]
    fn input_order_does_not_matter() {
        let (mut tensors, trajectories, alignments) = fixture();
        let forward = build_dataset(&tensors, &trajectories, &alignments, 5).unwrap();
        tensors.reverse();
        tensors.swap(0, 2);
        let shuffled = build_dataset(&tensors, &trajectories, &alignments, 5).unwrap();
        assert_eq!(forward, shuffled);
        assert_eq!(forward.len(), 4 * 64);
        assert_eq!(forward.sources.len(), 4);
    }

    #[test]
    fn baselines_are_reproducible_standard_normals() {
        let (tensors, trajectories, alignments) = fixture();
        let ds = build_dataset(&tensors, &trajectories, &alignments, 5).unwrap();
        let again = build_dataset(&tensors, &trajectories, &alignments, 5).unwrap();
        let other = build_dataset(&tensors, &trajectories, &alignments, 6).unwrap();
        assert_eq!(ds.labels(QuantityKind::RandomBaseline), again.labels(QuantityKind::RandomBaseline));
        assert_ne!(ds.labels(QuantityKind::RandomBaseline), other.labels(QuantityKind::RandomBaseline));
        let values = ds.labels(QuantityKind::RandomBaseline);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        assert!(mean.abs() < 0.3);
    }

    #[test]
    fn missing_pieces_are_errors() {
        let (tensors, trajectories, mut alignments) = fixture();
        let mut no_traj = trajectories.clone();
        no_traj.remove("b");
        assert!(matches!(build_dataset(&tensors, &no_traj, &alignments, 0), Err(Error::Missing(_))));

        let key = alignments.keys().next().unwrap().clone();
        alignments.get_mut(&key).unwrap().window_start = 90;
        assert!(matches!(build_dataset(&tensors, &trajectories, &alignments, 0), Err(Error::InvalidInput(_))));

        alignments.remove(&key);
        assert!(matches!(build_dataset(&tensors, &trajectories, &alignments, 0), Err(Error::Missing(_))));
    }

    #[test]
    fn quantity_names_parse() {
        for q in QuantityKind::ALL {
            assert_eq!(q.short().parse::<QuantityKind>().unwrap(), q);
        }
        assert!("xyz".parse::<QuantityKind>().is_err());
    }
}
