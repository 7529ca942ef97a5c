//! Coupled three-mass systems: a 1D mass-spring chain and a 3D spring-coupled
//! pendulum row under gravity.
//!
//! Both systems share one code path. Positions and velocities are stored
//! mass-major (`[m1_c0, m1_c1, .., m3_cD]`) with `D = spatial_dim`, so the 1D
//! chain simply has one component per mass.

mod io;

pub use io::{read_trajectory, write_trajectory, TrajectoryMeta};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_MASSES: usize = 3;
pub const N_SPRINGS: usize = 2;

/// Default time step used for every experiment.
pub const DEFAULT_DT: f64 = 0.1;

/// Number of forecast steps appended after the history window.
pub const FORECAST_HORIZON: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SystemKind {
    #[serde(rename = "mass_spring", alias = "MassSpring1D")]
    MassSpring1D,
    #[serde(rename = "pendulum", alias = "Pendulum3D")]
    Pendulum3D,
}

impl SystemKind {
    pub fn spatial_dim(self) -> usize {
        match self {
            SystemKind::MassSpring1D => 1,
            SystemKind::Pendulum3D => 3,
        }
    }

    /// Short identifier used in file names.
    pub fn slug(self) -> &'static str {
        match self {
            SystemKind::MassSpring1D => "mass_spring",
            SystemKind::Pendulum3D => "pendulum",
        }
    }

    pub fn all() -> [SystemKind; 2] {
        [SystemKind::MassSpring1D, SystemKind::Pendulum3D]
    }

    /// Channel names in state-vector order: all positions, then all velocities.
    pub fn channel_names(self) -> Vec<String> {
        let dim = self.spatial_dim();
        let mut names = Vec::with_capacity(2 * N_MASSES * dim);
        for prefix in ["x", "v"] {
            for mass in 1..=N_MASSES {
                if dim == 1 {
                    names.push(format!("{prefix}{mass}"));
                } else {
                    for c in 0..dim {
                        names.push(format!("{prefix}{mass}_{c}"));
                    }
                }
            }
        }
        names
    }

    pub fn n_channels(self) -> usize {
        2 * N_MASSES * self.spatial_dim()
    }
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.slug())
    }
}

impl std::str::FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mass_spring" | "MassSpring1D" => Ok(SystemKind::MassSpring1D),
            "pendulum" | "Pendulum3D" => Ok(SystemKind::Pendulum3D),
            other => Err(Error::invalid(format!("unknown system kind {other:?}"))),
        }
    }
}

/// Physical parameters of one coupled system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub masses: [f64; N_MASSES],
    pub spring_constants: [f64; N_SPRINGS],
    pub natural_lengths: [f64; N_SPRINGS],
    /// Only enters the pendulum Hamiltonian.
    pub gravity: f64,
}

impl SystemSpec {
    pub fn spatial_dim(&self) -> usize {
        self.kind.spatial_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, values: &[f64]| -> Result<()> {
            if values.iter().all(|v| v.is_finite() && *v > 0.0) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {values:?}")))
            }
        };
        positive("masses", &self.masses)?;
        positive("spring constants", &self.spring_constants)?;
        positive("natural lengths", &self.natural_lengths)?;
        if !(self.gravity.is_finite() && self.gravity >= 0.0) {
            return Err(Error::invalid(format!("gravity must be non-negative, got {}", self.gravity)));
        }
        Ok(())
    }

    /// Length of the flattened position (or velocity) vector.
    pub fn coords(&self) -> usize {
        N_MASSES * self.spatial_dim()
    }

    /// Positions with all masses at rest at their natural separations along the first axis.
    pub fn equilibrium_positions(&self) -> Vec<f64> {
        let dim = self.spatial_dim();
        let mut positions = vec![0.0; N_MASSES * dim];
        let mut offset = 0.0;
        for i in 0..N_MASSES {
            positions[i * dim] = offset;
            if i < N_SPRINGS {
                offset += self.natural_lengths[i];
            }
        }
        positions
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    pub time: f64,
}

impl PhaseState {
    pub fn at_rest(positions: Vec<f64>) -> Self {
        let velocities = vec![0.0; positions.len()];
        PhaseState {
            positions,
            velocities,
            time: 0.0,
        }
    }

    /// Concatenated `(x, v)` vector.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(2 * self.positions.len());
        z.extend_from_slice(&self.positions);
        z.extend_from_slice(&self.velocities);
        z
    }

    fn from_vector(z: &[f64], time: f64) -> Self {
        let half = z.len() / 2;
        PhaseState {
            positions: z[..half].to_vec(),
            velocities: z[half..].to_vec(),
            time,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().chain(&self.velocities).all(|v| v.is_finite()) && self.time.is_finite()
    }

    fn check(&self, spec: &SystemSpec) -> Result<()> {
        let n = spec.coords();
        for len in [self.positions.len(), self.velocities.len()] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: len,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub spec: SystemSpec,
    pub dt: f64,
    pub states: Vec<PhaseState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// One channel (a single degree of freedom) over `range`.
    pub fn channel(&self, channel: usize, range: std::ops::Range<usize>) -> Vec<f64> {
        self.states[range].iter().map(|s| channel_value(s, channel)).collect()
    }

    pub fn energies(&self) -> Result<Vec<EnergyBreakdown>> {
        self.states.iter().map(|s| energy(&self.spec, s)).collect()
    }
}

/// Value of channel `c` (state-vector order) in `state`.
pub fn channel_value(state: &PhaseState, c: usize) -> f64 {
    let n = state.positions.len();
    if c < n {
        state.positions[c]
    } else {
        state.velocities[c - n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub kinetic: f64,
    pub potential: f64,
}

/// Kinetic, potential and total energy of `state`.
pub fn energy(spec: &SystemSpec, state: &PhaseState) -> Result<EnergyBreakdown> {
    state.check(spec)?;
    let dim = spec.spatial_dim();
    let mut kinetic = 0.0;
    for (i, &m) in spec.masses.iter().enumerate() {
        let v = &state.velocities[i * dim..(i + 1) * dim];
        kinetic += 0.5 * m * v.iter().map(|c| c * c).sum::<f64>();
    }
    let mut potential = 0.0;
    for i in 0..N_SPRINGS {
        let r = separation(&state.positions, dim, i);
        let stretch = spec.natural_lengths[i] - r;
        potential += 0.5 * spec.spring_constants[i] * stretch * stretch;
    }
    if spec.kind == SystemKind::Pendulum3D {
        for (i, &m) in spec.masses.iter().enumerate() {
            potential += spec.gravity * m * state.positions[i * dim + 2];
        }
    }
    Ok(EnergyBreakdown {
        total: kinetic + potential,
        kinetic,
        potential,
    })
}

fn separation(positions: &[f64], dim: usize, spring: usize) -> f64 {
    let a = &positions[spring * dim..(spring + 1) * dim];
    let b = &positions[(spring + 1) * dim..(spring + 2) * dim];
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Time derivative of a phase state.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseDerivative {
    pub dx: Vec<f64>,
    pub dv: Vec<f64>,
}

pub fn equations_of_motion(spec: &SystemSpec, state: &PhaseState) -> Result<PhaseDerivative> {
    state.check(spec)?;
    let n = spec.coords();
    let mut dv = vec![0.0; n];
    accelerations(spec, &state.positions, &mut dv)?;
    Ok(PhaseDerivative {
        dx: state.velocities.clone(),
        dv,
    })
}

/// Writes `-∇PE / m` into `out`.
fn accelerations(spec: &SystemSpec, positions: &[f64], out: &mut [f64]) -> Result<()> {
    let dim = spec.spatial_dim();
    out.iter_mut().for_each(|a| *a = 0.0);
    for i in 0..N_SPRINGS {
        let r = separation(positions, dim, i);
        if r == 0.0 {
            return Err(Error::SingularConfiguration(i, i + 1));
        }
        // Force on mass i along (x_i - x_{i+1}) / r; mass i+1 gets the opposite.
        let scale = spec.spring_constants[i] * (spec.natural_lengths[i] - r) / r;
        for c in 0..dim {
            let f = scale * (positions[i * dim + c] - positions[(i + 1) * dim + c]);
            out[i * dim + c] += f;
            out[(i + 1) * dim + c] -= f;
        }
    }
    for (i, &m) in spec.masses.iter().enumerate() {
        for c in 0..dim {
            out[i * dim + c] /= m;
        }
        if spec.kind == SystemKind::Pendulum3D {
            out[i * dim + 2] -= spec.gravity;
        }
    }
    Ok(())
}

fn flat_derivative(spec: &SystemSpec, z: &[f64], out: &mut [f64]) -> Result<()> {
    let n = z.len() / 2;
    out[..n].copy_from_slice(&z[n..]);
    accelerations(spec, &z[..n], &mut out[n..])
}

/// Fixed-step classic Runge-Kutta integration. The returned trajectory holds
/// `n_steps + 1` states, the first being `initial`.
pub fn integrate(spec: &SystemSpec, initial: &PhaseState, dt: f64, n_steps: usize) -> Result<Trajectory> {
    spec.validate()?;
    initial.check(spec)?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::invalid(format!("dt must be positive, got {dt}")));
    }
    if n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    if !initial.is_finite() {
        return Err(Error::Divergence { step: 0 });
    }

    let dof = 2 * spec.coords();
    let mut z = initial.to_vector();
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; dof], vec![0.0; dof], vec![0.0; dof], vec![0.0; dof]);
    let mut tmp = vec![0.0; dof];
    let mut states = Vec::with_capacity(n_steps + 1);
    states.push(initial.clone());

    for step in 1..=n_steps {
        let diverged = |_| Error::Divergence { step };
        flat_derivative(spec, &z, &mut k1).map_err(diverged)?;
        for j in 0..dof {
            tmp[j] = z[j] + 0.5 * dt * k1[j];
        }
        flat_derivative(spec, &tmp, &mut k2).map_err(diverged)?;
        for j in 0..dof {
            tmp[j] = z[j] + 0.5 * dt * k2[j];
        }
        flat_derivative(spec, &tmp, &mut k3).map_err(diverged)?;
        for j in 0..dof {
            tmp[j] = z[j] + dt * k3[j];
        }
        flat_derivative(spec, &tmp, &mut k4).map_err(diverged)?;
        for j in 0..dof {
            z[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        let state = PhaseState::from_vector(&z, initial.time + step as f64 * dt);
        if !state.is_finite() {
            return Err(Error::Divergence { step });
        }
        states.push(state);
    }

    Ok(Trajectory {
        spec: spec.clone(),
        dt,
        states,
    })
}

/// Uniform sampling ranges for system parameters and initial conditions.
/// Each pair is `[low, high)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingRanges {
    pub mass: [f64; 2],
    pub spring_constant: [f64; 2],
    pub natural_length: [f64; 2],
    pub gravity: f64,
    /// Displacement of each coordinate from equilibrium.
    pub position_perturbation: [f64; 2],
    pub velocity: [f64; 2],
}

impl Default for SamplingRanges {
    fn default() -> Self {
        SamplingRanges {
            mass: [0.5, 2.0],
            spring_constant: [0.5, 2.0],
            natural_length: [0.5, 1.5],
            gravity: 9.8,
            position_perturbation: [-0.5, 0.5],
            velocity: [-0.5, 0.5],
        }
    }
}

impl SamplingRanges {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("mass", self.mass),
            ("spring_constant", self.spring_constant),
            ("natural_length", self.natural_length),
            ("position_perturbation", self.position_perturbation),
            ("velocity", self.velocity),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!("range {name} must satisfy low < high, got [{lo}, {hi}]")));
            }
        }
        for (name, [lo, _]) in &ranges[..3] {
            if *lo <= 0.0 {
                return Err(Error::invalid(format!("range {name} must be strictly positive")));
            }
        }
        if !(self.gravity.is_finite() && self.gravity >= 0.0) {
            return Err(Error::invalid("gravity must be non-negative"));
        }
        Ok(())
    }
}

/// Draws physical constants and an initial state. Deterministic in `seed`.
pub fn sample_system(seed: u64, kind: SystemKind, ranges: &SamplingRanges) -> Result<(SystemSpec, PhaseState)> {
    ranges.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |[lo, hi]: [f64; 2]| rng.random_range(lo..hi);

    let masses = [draw(ranges.mass), draw(ranges.mass), draw(ranges.mass)];
    let spring_constants = [draw(ranges.spring_constant), draw(ranges.spring_constant)];
    let natural_lengths = [draw(ranges.natural_length), draw(ranges.natural_length)];
    let spec = SystemSpec {
        kind,
        masses,
        spring_constants,
        natural_lengths,
        gravity: ranges.gravity,
    };

    let mut positions = spec.equilibrium_positions();
    for p in positions.iter_mut() {
        *p += draw(ranges.position_perturbation);
    }
    let velocities = (0..spec.coords()).map(|_| draw(ranges.velocity)).collect();
    Ok((
        spec,
        PhaseState {
            positions,
            velocities,
            time: 0.0,
        },
    ))
}

/// Samples a system and integrates it to a trajectory of `n_states` states.
pub fn simulate(seed: u64, kind: SystemKind, ranges: &SamplingRanges, dt: f64, n_states: usize) -> Result<Trajectory> {
    let (spec, initial) = sample_system(seed, kind, ranges)?;
    integrate(&spec, &initial, dt, n_states.saturating_sub(1).max(1))
}
