//! Trajectory export: one CSV row per time step (`t` followed by one column
//! per degree of freedom) and a TOML metadata sidecar.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PhaseState, SystemKind, SystemSpec, Trajectory};
use crate::error::{Error, Result};
use crate::io::{read_toml, sidecar_path, write_atomic, write_toml, Provenance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub id: String,
    pub kind: SystemKind,
    pub masses: [f64; 3],
    pub spring_constants: [f64; 2],
    pub natural_lengths: [f64; 2],
    pub gravity: f64,
    pub dt: f64,
    pub n_states: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

impl TrajectoryMeta {
    pub fn new(id: impl Into<String>, traj: &Trajectory, seed: Option<u64>) -> Self {
        TrajectoryMeta {
            id: id.into(),
            kind: traj.spec.kind,
            masses: traj.spec.masses,
            spring_constants: traj.spec.spring_constants,
            natural_lengths: traj.spec.natural_lengths,
            gravity: traj.spec.gravity,
            dt: traj.dt,
            n_states: traj.len(),
            seed,
            provenance: None,
        }
    }

    pub fn spec(&self) -> SystemSpec {
        SystemSpec {
            kind: self.kind,
            masses: self.masses,
            spring_constants: self.spring_constants,
            natural_lengths: self.natural_lengths,
            gravity: self.gravity,
        }
    }
}

/// Writes the CSV at `path` and the sidecar next to it.
pub fn write_trajectory(path: &Path, traj: &Trajectory, meta: &TrajectoryMeta) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_owned()];
    header.extend(traj.spec.kind.channel_names());
    writer.write_record(&header)?;
    for state in &traj.states {
        // `{}` on f64 prints the shortest string that parses back to the same bits.
        let row = std::iter::once(&state.time)
            .chain(&state.positions)
            .chain(&state.velocities)
            .map(|v| v.to_string());
        writer.write_record(row)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::StdIo(e.into_error()))?;
    write_atomic(path, &bytes)?;
    write_toml(&sidecar_path(path), meta)
}

pub fn read_trajectory(path: &Path) -> Result<(Trajectory, TrajectoryMeta)> {
    let meta: TrajectoryMeta = read_toml(&sidecar_path(path))?;
    let spec = meta.spec();
    spec.validate()?;
    let expected = spec.kind.channel_names();
    let coords = spec.coords();

    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    if header.first().map(String::as_str) != Some("t") || header[1..] != expected[..] {
        return Err(Error::invalid(format!(
            "{}: header {header:?} does not match {} channels",
            path.display(),
            spec.kind
        )));
    }

    let mut states = Vec::with_capacity(meta.n_states);
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let values = record
            .iter()
            .map(|field| {
                field
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("{}: row {row}: {e}", path.display())))
            })
            .collect::<Result<Vec<f64>>>()?;
        states.push(PhaseState {
            time: values[0],
            positions: values[1..1 + coords].to_vec(),
            velocities: values[1 + coords..].to_vec(),
        });
    }
    if states.len() != meta.n_states {
        return Err(Error::invalid(format!(
            "{}: sidecar declares {} states, file has {}",
            path.display(),
            meta.n_states,
            states.len()
        )));
    }
    Ok((
        Trajectory {
            spec,
            dt: meta.dt,
            states,
        },
        meta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{simulate, SamplingRanges};

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for kind in SystemKind::all() {
            let traj = simulate(9, kind, &SamplingRanges::default(), 0.1, 40).unwrap();
            let path = dir.path().join(format!("{kind}.csv"));
            let meta = TrajectoryMeta::new("t0", &traj, Some(9));
            write_trajectory(&path, &traj, &meta).unwrap();
            let (back, back_meta) = read_trajectory(&path).unwrap();
            assert_eq!(back, traj);
            assert_eq!(back_meta, meta);
        }
    }

    #[test]
    fn header_names_degrees_of_freedom() {
        let dir = tempfile::tempdir().unwrap();
        let traj = simulate(1, SystemKind::MassSpring1D, &SamplingRanges::default(), 0.1, 3).unwrap();
        let path = dir.path().join("a.csv");
        write_trajectory(&path, &traj, &TrajectoryMeta::new("a", &traj, None)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("t,x1,x2,x3,v1,v2,v3\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
