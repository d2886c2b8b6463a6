//! Tensor container: one JSON header line, then a little-endian `f64` payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::msm::Trajectory;

pub const CONTAINER_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Latent,
    Observed,
    Regime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub schema_version: u32,
    pub dtype: String,
    /// `[N, T, dim]`.
    pub shape: [usize; 3],
    pub role: Role,
    pub seed: u64,
    pub generator: String,
    /// Hex SHA-256 of the payload bytes.
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: ContainerHeader,
    pub data: Vec<f64>,
}

fn payload_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Container {
    pub fn new(data: Vec<f64>, shape: [usize; 3], role: Role, seed: u64, generator: &str) -> Result<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::shape(format!("{} values do not fill shape {shape:?}", data.len())));
        }
        let header = ContainerHeader {
            schema_version: CONTAINER_SCHEMA,
            dtype: "float64".into(),
            shape,
            role,
            seed,
            generator: generator.into(),
            sha256: digest(&payload_bytes(&data)),
        };
        Ok(Container { header, data })
    }

    /// Equal-length trajectories stacked as `[N, T, dim]`.
    pub fn from_trajectories(ts: &[Trajectory], role: Role, seed: u64, generator: &str) -> Result<Self> {
        let (t, d) = ts.first().map_or((0, 0), |z| (z.len(), z.dim()));
        if ts.iter().any(|z| z.len() != t || z.dim() != d) {
            return Err(Error::shape("trajectories differ in length or dimension"));
        }
        let data = ts.iter().flat_map(|z| z.data().iter().copied()).collect();
        Container::new(data, [ts.len(), t, d], role, seed, generator)
    }

    pub fn from_regimes(rs: &[Vec<usize>], seed: u64, generator: &str) -> Result<Self> {
        let t = rs.first().map_or(0, Vec::len);
        if rs.iter().any(|s| s.len() != t) {
            return Err(Error::shape("regime sequences differ in length"));
        }
        let data = rs.iter().flat_map(|s| s.iter().map(|&k| k as f64)).collect();
        Container::new(data, [rs.len(), t, 1], Role::Regime, seed, generator)
    }

    pub fn trajectories(&self) -> Result<Vec<Trajectory>> {
        let [n, t, d] = self.header.shape;
        if n == 0 {
            return Ok(Vec::new());
        }
        self.data.chunks(t * d).map(|c| Trajectory::new(c.to_vec(), d)).collect()
    }

    pub fn regimes(&self) -> Result<Vec<Vec<usize>>> {
        if self.header.role != Role::Regime {
            return Err(Error::Format(format!("container holds {:?} data, not regimes", self.header.role)));
        }
        let t = self.header.shape[1];
        if t == 0 {
            return Ok(vec![Vec::new(); self.header.shape[0]]);
        }
        self.data
            .chunks(t)
            .map(|c| {
                c.iter()
                    .map(|&v| {
                        if v >= 0.0 && v.fract() == 0.0 {
                            Ok(v as usize)
                        } else {
                            Err(Error::Format(format!("invalid regime label {v}")))
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        out.extend(payload_bytes(&self.data));
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("missing header line".into()))?;
        let header: ContainerHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.schema_version != CONTAINER_SCHEMA {
            return Err(Error::Format(format!("unsupported schema version {}", header.schema_version)));
        }
        if header.dtype != "float64" {
            return Err(Error::Format(format!("unsupported dtype {:?}", header.dtype)));
        }
        let payload = &bytes[nl + 1..];
        let expected = 8 * header.shape.iter().product::<usize>();
        if payload.len() != expected {
            return Err(Error::Format(format!("payload has {} bytes, shape needs {expected}", payload.len())));
        }
        let actual = digest(payload);
        if actual != header.sha256 {
            return Err(Error::Checksum { expected: header.sha256, actual });
        }
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Container { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Container::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_payload_is_rejected() {
        let c = Container::new(vec![1.0, 2.0, 3.0, 4.0], [1, 2, 2], Role::Latent, 0, "test").unwrap();
        let mut b = c.to_bytes().unwrap();
        assert_eq!(Container::from_bytes(&b).unwrap(), c);
        let last = b.len() - 1;
        b[last] ^= 1;
        assert!(matches!(Container::from_bytes(&b), Err(Error::Checksum { .. })));
        b.pop();
        assert!(matches!(Container::from_bytes(&b), Err(Error::Format(_))));
    }

    #[test]
    fn regimes_round_trip() {
        let rs = vec![vec![0, 2, 1], vec![1, 1, 0]];
        let c = Container::from_regimes(&rs, 3, "test").unwrap();
        assert_eq!(c.header.shape, [2, 3, 1]);
        assert_eq!(c.regimes().unwrap(), rs);
    }
}
