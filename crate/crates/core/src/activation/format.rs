//! Binary tensor file.
//!
//! Layout (little-endian):
//! - magic `b"PICL"`
//! - format version: u32
//! - block index: u32
//! - context length: u32
//! - sequence length `L`: u32
//! - hidden dim `H`: u32
//! - `L * H` binary32 values, time-major
//!
//! Provenance lives in a TOML sidecar with the same basename.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_toml, sidecar_path, write_atomic, write_toml, Provenance};

pub const TENSOR_MAGIC: [u8; 4] = *b"PICL";
pub const TENSOR_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Upper bound on `L * H` accepted by the reader (4 GiB of payload).
const MAX_ELEMENTS: u64 = 1 << 30;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TensorProvenance {
    pub trajectory_id: String,
    pub channel: String,
    pub model_id: String,
    /// Where in the block the residual was read, e.g. `block_output`.
    #[serde(default)]
    pub capture_point: String,
    /// How time steps map to token positions, e.g. `last_digit`.
    #[serde(default)]
    pub representative: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub produced_by: Option<Provenance>,
}

/// Residual stream of one prompt at one block: `seq_len x hidden_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub block_index: u32,
    pub context_length: u32,
    pub seq_len: u32,
    pub hidden_dim: u32,
    pub data: Vec<f32>,
    pub provenance: TensorProvenance,
}

impl ActivationTensor {
    pub fn new(
        block_index: u32,
        context_length: u32,
        seq_len: u32,
        hidden_dim: u32,
        data: Vec<f32>,
        provenance: TensorProvenance,
    ) -> Result<Self> {
        if seq_len == 0 || hidden_dim == 0 {
            return Err(Error::invalid("tensor dimensions must be positive"));
        }
        let expected = seq_len as usize * hidden_dim as usize;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(ActivationTensor {
            block_index,
            context_length,
            seq_len,
            hidden_dim,
            data,
            provenance,
        })
    }

    pub fn row(&self, position: usize) -> &[f32] {
        let h = self.hidden_dim as usize;
        &self.data[position * h..(position + 1) * h]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        bytes.extend_from_slice(&TENSOR_MAGIC);
        for field in [
            TENSOR_VERSION,
            self.block_index,
            self.context_length,
            self.seq_len,
            self.hidden_dim,
        ] {
            bytes.extend_from_slice(&field.to_le_bytes());
        }
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes
    }

    /// Decodes a tensor; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != TENSOR_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_owned(),
                expected: TENSOR_MAGIC,
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                path: path.to_owned(),
                expected: HEADER_LEN as u64,
                actual: bytes.len() as u64,
            });
        }
        let field = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        let version = field(0);
        if version != TENSOR_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (block_index, context_length, seq_len, hidden_dim) = (field(1), field(2), field(3), field(4));
        let elements = seq_len as u64 * hidden_dim as u64;
        if elements > MAX_ELEMENTS {
            return Err(Error::DimensionOverflow(format!("{seq_len} x {hidden_dim} exceeds the element limit")));
        }
        let expected = HEADER_LEN as u64 + 4 * elements;
        if bytes.len() as u64 != expected {
            return Err(Error::Truncated {
                path: path.to_owned(),
                expected,
                actual: bytes.len() as u64,
            });
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        ActivationTensor::new(
            block_index,
            context_length,
            seq_len,
            hidden_dim,
            data,
            TensorProvenance::default(),
        )
    }
}

/// Writes the tensor and its provenance sidecar. The payload is written to a
/// temporary file and renamed into place.
pub fn write_tensor(tensor: &ActivationTensor, path: &Path) -> Result<()> {
    write_atomic(path, &tensor.to_bytes())?;
    write_toml(&sidecar_path(path), &tensor.provenance)
}

/// Reads a tensor file. A missing sidecar leaves the provenance empty.
pub fn read_tensor(path: &Path) -> Result<ActivationTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut tensor = ActivationTensor::from_bytes(&bytes, path)?;
    let sidecar = sidecar_path(path);
    if sidecar.exists() {
        tensor.provenance = read_toml(&sidecar)?;
    }
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn provenance() -> TensorProvenance {
        TensorProvenance {
            trajectory_id: "mass_spring_000".into(),
            channel: "x1".into(),
            model_id: "mock".into(),
            capture_point: "block_output".into(),
            representative: "last_digit".into(),
            produced_by: None,
        }
    }

    #[test]
    fn single_zero_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.picl");
        let t = ActivationTensor::new(0, 64, 1, 1, vec![0.0], provenance()).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 28);
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn random_tensor_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.picl");
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut data: Vec<f32> = (0..64 * 8).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect();
        data[3] = -0.0;
        data[5] = f32::from_bits(0x7fc0_0001);
        let t = ActivationTensor::new(7, 128, 64, 8, data, provenance()).unwrap();
        write_tensor(&t, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back.provenance, t.provenance);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let t = ActivationTensor::new(3, 64, 2, 1, vec![1.0, -2.0], provenance()).unwrap();
        let bytes = t.to_bytes();
        assert_eq!(&bytes[..4], b"PICL");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..12], 3u32.to_le_bytes());
        assert_eq!(bytes[12..16], 64u32.to_le_bytes());
        assert_eq!(bytes[16..20], 2u32.to_le_bytes());
        assert_eq!(bytes[20..24], 1u32.to_le_bytes());
        assert_eq!(bytes[24..28], 1.0f32.to_le_bytes());
    }

    #[test]
    fn distinct_errors() {
        let p = Path::new("x");
        let t = ActivationTensor::new(0, 1, 2, 2, vec![0.0; 4], provenance()).unwrap();
        let bytes = t.to_bytes();

        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(ActivationTensor::from_bytes(truncated, p), Err(Error::Truncated { .. })));

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ActivationTensor::from_bytes(&bad, p), Err(Error::BadMagic { .. })));

        let mut version = bytes.clone();
        version[4] = 9;
        assert!(matches!(ActivationTensor::from_bytes(&version, p), Err(Error::UnsupportedVersion(9))));

        let mut huge = bytes.clone();
        huge[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[20..24].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(ActivationTensor::from_bytes(&huge, p), Err(Error::DimensionOverflow(_))));
    }

    #[test]
    fn truncated_file_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.picl");
        let t = ActivationTensor::new(0, 1, 4, 4, vec![1.0; 16], provenance()).unwrap();
        write_tensor(&t, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(read_tensor(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn rejects_inconsistent_shapes() {
        assert!(ActivationTensor::new(0, 1, 2, 2, vec![0.0; 3], provenance()).is_err());
        assert!(ActivationTensor::new(0, 1, 0, 2, vec![], provenance()).is_err());
    }
}
