//! Two-layer sparse autoencoder with a ReLU code of twice the input width.
//!
//! `c = relu(W_e x + b_e)`, `x_hat = W_d c + b_d`, trained with Adam on
//! `mean ||x_hat - x||^2 + lambda * mean ||c||_1`.
//!
//! Parameters are generic over the float type so the analytic gradient can
//! be checked in double precision; training and checkpoints use `f32`.

use std::fmt::Debug;
use std::fs;
use std::path::Path;

use num_traits::{Float, FromPrimitive};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{derive_seed, sidecar_path, write_atomic, write_toml, Provenance, Table};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PSAE";
pub const CHECKPOINT_VERSION: u32 = 1;
const CHECKPOINT_HEADER: usize = 12;
const MAX_INPUT_DIM: u32 = 1 << 14;

pub trait Real: Float + FromPrimitive + Debug + Send + Sync + 'static {}
impl<T: Float + FromPrimitive + Debug + Send + Sync + 'static> Real for T {}

fn real<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("representable")
}

/// Encoder `W_e` is `2H x H`, decoder `W_d` is `H x 2H`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams<T = f32> {
    pub input_dim: usize,
    pub w_e: Vec<T>,
    pub b_e: Vec<T>,
    pub w_d: Vec<T>,
    pub b_d: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    /// Already weighted by lambda.
    pub sparsity: f64,
}

impl<T: Real> SaeParams<T> {
    pub fn zeros(input_dim: usize) -> Self {
        let d = 2 * input_dim;
        SaeParams {
            input_dim,
            w_e: vec![T::zero(); d * input_dim],
            b_e: vec![T::zero(); d],
            w_d: vec![T::zero(); input_dim * d],
            b_d: vec![T::zero(); input_dim],
        }
    }

    /// Weights uniform in `[-1/sqrt(H), 1/sqrt(H)]`, biases zero.
    pub fn init(input_dim: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        let bound = 1.0 / (input_dim as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(input_dim);
        for w in p.w_e.iter_mut().chain(p.w_d.iter_mut()) {
            *w = real(rng.random_range(-bound..=bound));
        }
        Ok(p)
    }

    pub fn code_dim(&self) -> usize {
        2 * self.input_dim
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d) = (self.input_dim, self.code_dim());
        for (block, expected) in [
            (&self.w_e, d * h),
            (&self.b_e, d),
            (&self.w_d, h * d),
            (&self.b_d, h),
        ] {
            if block.len() != expected {
                return Err(Error::DimensionMismatch {
                    expected,
                    actual: block.len(),
                });
            }
        }
        if self.blocks().iter().any(|b| b.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("non-finite SAE parameter"));
        }
        Ok(())
    }

    fn blocks(&self) -> [&Vec<T>; 4] {
        [&self.w_e, &self.b_e, &self.w_d, &self.b_d]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<T>; 4] {
        [&mut self.w_e, &mut self.b_e, &mut self.w_d, &mut self.b_d]
    }

    /// All parameters in declared order.
    pub fn flatten(&self) -> Vec<T> {
        self.blocks().into_iter().flatten().copied().collect()
    }

    pub fn from_flat(input_dim: usize, flat: &[T]) -> Result<Self> {
        let mut p = Self::zeros(input_dim);
        let total: usize = p.blocks().iter().map(|b| b.len()).sum();
        if flat.len() != total {
            return Err(Error::DimensionMismatch {
                expected: total,
                actual: flat.len(),
            });
        }
        let mut rest = flat;
        for block in p.blocks_mut() {
            let (head, tail) = rest.split_at(block.len());
            block.copy_from_slice(head);
            rest = tail;
        }
        Ok(p)
    }

    pub fn cast<U: Real>(&self) -> SaeParams<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.to_f64().expect("finite")).expect("finite")).collect();
        SaeParams {
            input_dim: self.input_dim,
            w_e: conv(&self.w_e),
            b_e: conv(&self.b_e),
            w_d: conv(&self.w_d),
            b_d: conv(&self.b_d),
        }
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: len,
            });
        }
        Ok(())
    }

    fn pre_activation(&self, x: &[T], z: &mut [T]) {
        let h = self.input_dim;
        for (j, zj) in z.iter_mut().enumerate() {
            let row = &self.w_e[j * h..(j + 1) * h];
            *zj = row.iter().zip(x).fold(self.b_e[j], |acc, (&w, &xi)| acc + w * xi);
        }
    }

    fn decode_into(&self, c: &[T], out: &mut [T]) {
        let d = self.code_dim();
        for (i, oi) in out.iter_mut().enumerate() {
            let row = &self.w_d[i * d..(i + 1) * d];
            *oi = row.iter().zip(c).fold(self.b_d[i], |acc, (&w, &cj)| acc + w * cj);
        }
    }

    pub fn encode(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_input(x.len())?;
        let mut z = vec![T::zero(); self.code_dim()];
        self.pre_activation(x, &mut z);
        z.iter_mut().for_each(|v| *v = v.max(T::zero()));
        Ok(z)
    }

    pub fn decode(&self, c: &[T]) -> Result<Vec<T>> {
        if c.len() != self.code_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.code_dim(),
                actual: c.len(),
            });
        }
        let mut out = vec![T::zero(); self.input_dim];
        self.decode_into(c, &mut out);
        Ok(out)
    }

    /// Column `unit` of the decoder: the direction code `unit` writes.
    pub fn decoder_column(&self, unit: usize) -> Vec<T> {
        let d = self.code_dim();
        (0..self.input_dim).map(|i| self.w_d[i * d + unit]).collect()
    }

    pub fn loss(&self, batch: &[&[T]], sparsity_weight: f64) -> Result<LossParts> {
        Ok(self.loss_and_gradient(batch, sparsity_weight, false)?.0)
    }

    /// Analytic gradient of the total loss. The ReLU derivative at 0 is 0.
    pub fn gradient(&self, batch: &[&[T]], sparsity_weight: f64) -> Result<(LossParts, SaeParams<T>)> {
        let (loss, grad) = self.loss_and_gradient(batch, sparsity_weight, true)?;
        Ok((loss, grad.expect("requested")))
    }

    fn loss_and_gradient(
        &self,
        batch: &[&[T]],
        sparsity_weight: f64,
        with_grad: bool,
    ) -> Result<(LossParts, Option<SaeParams<T>>)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let (h, d) = (self.input_dim, self.code_dim());
        let n = batch.len() as f64;
        let two_over_n: T = real(2.0 / n);
        let l1_grad: T = real(sparsity_weight / n);
        let mut grad = with_grad.then(|| SaeParams::zeros(h));
        let mut z = vec![T::zero(); d];
        let mut c = vec![T::zero(); d];
        let mut x_hat = vec![T::zero(); h];
        let mut g = vec![T::zero(); h];
        let (mut recon, mut l1) = (0.0f64, 0.0f64);

        for x in batch {
            self.check_input(x.len())?;
            self.pre_activation(x, &mut z);
            for (cj, &zj) in c.iter_mut().zip(&z) {
                *cj = zj.max(T::zero());
            }
            self.decode_into(&c, &mut x_hat);
            for (gi, (&xh, &xi)) in g.iter_mut().zip(x_hat.iter().zip(x.iter())) {
                let r = xh - xi;
                recon += r.to_f64().unwrap_or(f64::NAN).powi(2);
                *gi = two_over_n * r;
            }
            l1 += c.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).sum::<f64>();

            let Some(grad) = grad.as_mut() else { continue };
            for (i, &gi) in g.iter().enumerate() {
                grad.b_d[i] = grad.b_d[i] + gi;
                let row = &mut grad.w_d[i * d..(i + 1) * d];
                for (w, &cj) in row.iter_mut().zip(&c) {
                    *w = *w + gi * cj;
                }
            }
            for (j, &zj) in z.iter().enumerate() {
                if zj <= T::zero() {
                    continue;
                }
                let back = (0..h).fold(l1_grad, |acc, i| acc + self.w_d[i * d + j] * g[i]);
                grad.b_e[j] = grad.b_e[j] + back;
                let row = &mut grad.w_e[j * h..(j + 1) * h];
                for (w, &xk) in row.iter_mut().zip(x.iter()) {
                    *w = *w + back * xk;
                }
            }
        }
        let reconstruction = recon / n;
        let sparsity = sparsity_weight * l1 / n;
        Ok((
            LossParts {
                total: reconstruction + sparsity,
                reconstruction,
                sparsity,
            },
            grad,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub sparsity_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            sparsity_weight: 1e-3,
            epochs: 10,
            batch_size: 4096,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.sparsity_weight >= 0.0
            && self.sparsity_weight.is_finite()
            && self.batch_size >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid SAE training config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
    /// Share of code entries above zero over the training set after training.
    pub active_fraction: f64,
    pub steps: usize,
}

impl TrainReport {
    pub fn loss_table(&self) -> Table {
        let mut table = Table::new(["epoch", "total", "reconstruction", "sparsity"]);
        for e in &self.epochs {
            table.push([e.epoch.to_string(), e.total.to_string(), e.reconstruction.to_string(), e.sparsity.to_string()]);
        }
        table
    }
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

impl<T: Real> Adam<T> {
    fn new(len: usize) -> Self {
        Adam {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut SaeParams<T>, grad: &SaeParams<T>, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2): (T, T) = (real(cfg.beta1), real(cfg.beta2));
        let (one, eps, lr): (T, T, T) = (T::one(), real(cfg.epsilon), real(cfg.learning_rate));
        let c1 = one - b1.powi(self.step);
        let c2 = one - b2.powi(self.step);
        let mut k = 0;
        for (p, g) in params.blocks_mut().into_iter().zip(grad.blocks()) {
            for (pi, &gi) in p.iter_mut().zip(g.iter()) {
                let m = b1 * self.m[k] + (one - b1) * gi;
                let v = b2 * self.v[k] + (one - b2) * gi * gi;
                self.m[k] = m;
                self.v[k] = v;
                *pi = *pi - lr * (m / c1) / ((v / c2).sqrt() + eps);
                k += 1;
            }
        }
    }
}

/// Adam over shuffled mini-batches; the final short batch is kept.
/// Deterministic for a given config and row order.
pub fn train<T: Real>(rows: &[&[T]], config: &TrainConfig) -> Result<(SaeParams<T>, TrainReport)> {
    config.validate()?;
    let first = rows.first().ok_or_else(|| Error::invalid("empty training set"))?;
    let h = first.len();
    if let Some(bad) = rows.iter().find(|r| r.len() != h) {
        return Err(Error::DimensionMismatch {
            expected: h,
            actual: bad.len(),
        });
    }
    let mut params = SaeParams::init(h, derive_seed(config.seed, "sae/init"))?;
    let mut adam = Adam::new(params.flatten().len());
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "sae/shuffle"));
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    let mut batch: Vec<&[T]> = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut sums = [0.0f64; 3];
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| rows[i]));
            let (loss, grad) = params.gradient(&batch, config.sparsity_weight)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let w = chunk.len() as f64;
            sums[0] += w * loss.total;
            sums[1] += w * loss.reconstruction;
            sums[2] += w * loss.sparsity;
            adam.update(&mut params, &grad, config);
            steps += 1;
        }
        let n = rows.len() as f64;
        epochs.push(EpochLoss {
            epoch,
            total: sums[0] / n,
            reconstruction: sums[1] / n,
            sparsity: sums[2] / n,
        });
    }
    params.validate()?;
    let active_fraction = active_fraction(&params, rows)?;
    Ok((
        params,
        TrainReport {
            epochs,
            active_fraction,
            steps,
        },
    ))
}

pub fn active_fraction<T: Real>(params: &SaeParams<T>, rows: &[&[T]]) -> Result<f64> {
    let mut active = 0usize;
    for x in rows {
        active += params.encode(x)?.iter().filter(|&&c| c > T::zero()).count();
    }
    Ok(active as f64 / (rows.len() * params.code_dim()).max(1) as f64)
}

impl SaeParams<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(CHECKPOINT_HEADER + 4 * self.flatten().len());
        bytes.extend_from_slice(&CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(self.input_dim as u32).to_le_bytes());
        for v in self.flatten() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_owned(),
                expected: CHECKPOINT_MAGIC,
            });
        }
        if bytes.len() < CHECKPOINT_HEADER {
            return Err(Error::Truncated {
                path: path.to_owned(),
                expected: CHECKPOINT_HEADER as u64,
                actual: bytes.len() as u64,
            });
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let h = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if h == 0 || h > MAX_INPUT_DIM {
            return Err(Error::DimensionOverflow(format!("input dimension {h}")));
        }
        let h = h as u64;
        let expected = CHECKPOINT_HEADER as u64 + 4 * (4 * h * h + 3 * h);
        if bytes.len() as u64 != expected {
            return Err(Error::Truncated {
                path: path.to_owned(),
                expected,
                actual: bytes.len() as u64,
            });
        }
        let flat: Vec<f32> = bytes[CHECKPOINT_HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        SaeParams::from_flat(h as usize, &flat)
    }
}

/// Writes a checkpoint and, when given, a provenance sidecar.
pub fn save_checkpoint(path: &Path, params: &SaeParams<f32>, provenance: Option<&Provenance>) -> Result<()> {
    write_atomic(path, &params.to_bytes())?;
    if let Some(p) = provenance {
        write_toml(&sidecar_path(path), p)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SaeParams<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    SaeParams::from_bytes(&bytes, path)
}
