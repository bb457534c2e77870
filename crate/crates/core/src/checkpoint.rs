//! Versioned, self-describing parameter container shared by every network.
//!
//! A checkpoint is one JSON document holding the format tag, the network
//! kind, its architecture description, a short architecture tag derived from
//! that description, a checksum of the parameters and the parameters
//! themselves (stored as f64, which round-trips f32 exactly).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const FORMAT: &str = "harmoflow-checkpoint/1";

/// `{kind}-{16 hex digits}` fingerprint of a serializable architecture.
pub fn architecture_tag<A: Serialize>(kind: &str, arch: &A) -> String {
    let json = serde_json::to_string(arch).expect("architecture serializes");
    let digest = Sha256::digest(json.as_bytes());
    let hex: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    format!("{kind}-{hex}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub kind: String,
    pub architecture: serde_json::Value,
    pub architecture_tag: String,
    pub checksum: String,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn new<A: Serialize, T: Scalar>(kind: &str, arch: &A, params: &ParamSet<T>) -> Result<Self> {
        Ok(Checkpoint {
            format: FORMAT.to_string(),
            kind: kind.to_string(),
            architecture: serde_json::to_value(arch)?,
            architecture_tag: architecture_tag(kind, arch),
            checksum: params.checksum(),
            params: params
                .iter()
                .map(|(name, t)| ParamRecord {
                    name: name.to_string(),
                    shape: t.shape(),
                    data: t.data().iter().map(|v| v.to_f64_lossy()).collect(),
                })
                .collect(),
        })
    }

    /// Writes through a temporary sibling and renames, so readers never see
    /// a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let json = serde_json::to_vec(self)?;
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{}`, expected `{FORMAT}`", ck.format)));
        }
        Ok(ck)
    }

    /// Architecture description, after checking kind and tag.
    pub fn architecture<A: Serialize + DeserializeOwned>(&self, kind: &str) -> Result<A> {
        if self.kind != kind {
            return Err(Error::ArchitectureMismatch { expected: kind.to_string(), found: self.kind.clone() });
        }
        let arch: A = serde_json::from_value(self.architecture.clone())?;
        let tag = architecture_tag(kind, &arch);
        if tag != self.architecture_tag {
            return Err(Error::ArchitectureMismatch { expected: tag, found: self.architecture_tag.clone() });
        }
        Ok(arch)
    }

    /// Loads the stored values into `params`, which must have been built for
    /// `expected_tag`. The stored checksum is verified afterwards.
    pub fn restore<T: Scalar>(&self, expected_tag: &str, params: &mut ParamSet<T>) -> Result<()> {
        if self.architecture_tag != expected_tag {
            return Err(Error::ArchitectureMismatch {
                expected: expected_tag.to_string(),
                found: self.architecture_tag.clone(),
            });
        }
        let entries = self
            .params
            .iter()
            .map(|r| {
                let data = r.data.iter().map(|&v| T::lit(v)).collect();
                Tensor::from_vec(r.shape, data)
                    .map(|t| (r.name.clone(), t))
                    .map_err(|_| Error::Checkpoint(format!("parameter `{}` has wrong length", r.name)))
            })
            .collect::<Result<Vec<_>>>()?;
        params.load(entries)?;
        let sum = params.checksum();
        if sum != self.checksum {
            return Err(Error::Integrity(format!("parameter checksum {sum} does not match stored {}", self.checksum)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    #[derive(Serialize, Deserialize, PartialEq, Debug)]
    struct Arch {
        width: usize,
    }

    fn params(seed: u64) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        let mut r = rng(seed);
        ps.add_normal("a", [2, 3, 1, 1], 1.0, &mut r);
        ps.add_normal("b", [1, 1, 1, 4], 0.1, &mut r);
        ps
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let ps = params(1);
        Checkpoint::new("toy", &Arch { width: 3 }, &ps).unwrap().save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        let arch: Arch = ck.architecture("toy").unwrap();
        assert_eq!(arch, Arch { width: 3 });
        let mut fresh = params(2);
        ck.restore(&architecture_tag("toy", &arch), &mut fresh).unwrap();
        assert_eq!(fresh, ps);
    }

    #[test]
    fn mismatched_architecture_is_rejected() {
        let ps = params(1);
        let ck = Checkpoint::new("toy", &Arch { width: 3 }, &ps).unwrap();
        let mut fresh = params(2);
        let other = architecture_tag("toy", &Arch { width: 4 });
        assert!(matches!(ck.restore(&other, &mut fresh), Err(Error::ArchitectureMismatch { .. })));
        assert!(matches!(ck.architecture::<Arch>("flow"), Err(Error::ArchitectureMismatch { .. })));
    }

    #[test]
    fn tampered_values_fail_integrity() {
        let ps = params(1);
        let mut ck = Checkpoint::new("toy", &Arch { width: 3 }, &ps).unwrap();
        ck.params[0].data[0] += 1.0;
        let mut fresh = params(2);
        let tag = ck.architecture_tag.clone();
        assert!(matches!(ck.restore(&tag, &mut fresh), Err(Error::Integrity(_))));
    }
}
