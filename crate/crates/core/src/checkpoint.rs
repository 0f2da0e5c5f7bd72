//! Binary checkpoint: magic `HSGF`, a little-endian `u32` version, the run
//! configuration as a length-prefixed JSON blob, then named tensors.
//!
//! Each tensor is `u32` name length, UTF-8 name, `u32` rank, `rank` x
//! `u32` extents and the values as `f32` little-endian. The PCA tensors
//! (`pca.mean`, `pca.components`, `pca.eigenvalues`) come first, followed
//! by the model parameters in canonical order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SplitSpec;
use crate::error::{Error, Result};
use crate::model::{param_layout, ModelConfig, ModelParams};
use crate::pca::PcaModel;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"HSGF";
pub const VERSION: u32 = 1;

/// Arithmetic precision used for training and evaluation. Checkpoints
/// always store 32-bit values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Everything needed to rebuild a run: model shape, data split and
/// optimiser settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub precision: Precision,
}

impl RunConfig {
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// 64-bit FNV-1a of the canonical JSON, as 16 hex digits.
    pub fn config_hash(&self) -> Result<String> {
        Ok(format!(
            "{:016x}",
            fnv1a64(self.canonical_json()?.as_bytes())
        ))
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub pca: PcaModel,
    pub params: ModelParams<Tensor<f32>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }

    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.u32(b.len())?;
        self.0.extend_from_slice(b);
        Ok(())
    }

    fn tensor(
        &mut self,
        name: &str,
        shape: &[usize],
        values: impl Iterator<Item = f32>,
    ) -> Result<()> {
        self.bytes(name.as_bytes())?;
        self.u32(shape.len())?;
        for &d in shape {
            self.u32(d)?;
        }
        for v in values {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let name = std::str::from_utf8(self.bytes()?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()?;
        if rank > 8 {
            return Err(Error::Format(format!(
                "tensor {name}: implausible rank {rank}"
            )));
        }
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Format(format!("tensor {name}: extents overflow")))?;
        let values = self
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, shape, values))
    }
}

fn pca_tensors(pca: &PcaModel) -> [(&'static str, Vec<usize>, &[f64]); 3] {
    let (l, b) = (pca.input_bands(), pca.output_bands());
    [
        ("pca.mean", vec![l], &pca.mean),
        ("pca.components", vec![b, l], &pca.components),
        ("pca.eigenvalues", vec![b], &pca.eigenvalues),
    ]
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize)?;
        w.bytes(self.config.canonical_json()?.as_bytes())?;
        let count = 3 + self.params.leaves().len();
        w.u32(count)?;
        for (name, shape, values) in pca_tensors(&self.pca) {
            w.tensor(name, &shape, values.iter().map(|&v| v as f32))?;
        }
        let mut result = Ok(());
        self.params.map(|name, t| {
            if result.is_ok() {
                result = w.tensor(name, t.shape(), t.data().iter().copied());
            }
        });
        result?;
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()? as u32;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let config: RunConfig = serde_json::from_slice(r.bytes()?)?;
        let layout = param_layout(&config.model)?;
        let count = r.u32()?;
        let expected = 3 + layout.leaves().len();
        if count != expected {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, configuration needs {expected}"
            )));
        }

        let l_and_b = |name: &str, shape: &[usize], want_rank: usize| -> Result<()> {
            if shape.len() != want_rank {
                return Err(Error::Format(format!(
                    "{name}: expected rank {want_rank}, got {shape:?}"
                )));
            }
            Ok(())
        };
        let mut pca_parts = Vec::with_capacity(3);
        for (want, rank) in [
            ("pca.mean", 1),
            ("pca.components", 2),
            ("pca.eigenvalues", 1),
        ] {
            let (name, shape, values) = r.tensor()?;
            if name != want {
                return Err(Error::Format(format!(
                    "expected tensor {want}, found {name:?}"
                )));
            }
            l_and_b(&name, &shape, rank)?;
            pca_parts.push((
                shape,
                values.into_iter().map(f64::from).collect::<Vec<f64>>(),
            ));
        }
        let (l, b) = (pca_parts[0].0[0], pca_parts[2].0[0]);
        if pca_parts[1].0 != [b, l] {
            return Err(Error::Format(format!(
                "pca.components is {:?}, expected [{b}, {l}]",
                pca_parts[1].0
            )));
        }
        if b != config.model.pca_bands {
            return Err(Error::Format(format!(
                "PCA keeps {b} components but the model expects {}",
                config.model.pca_bands
            )));
        }
        let mut it = pca_parts.into_iter().map(|p| p.1);
        let pca = PcaModel {
            mean: it.next().expect("three parts"),
            components: it.next().expect("three parts"),
            eigenvalues: it.next().expect("three parts"),
        };

        let params = layout.try_map(|want, spec| {
            let (name, shape, values) = r.tensor()?;
            if name != want {
                return Err(Error::Format(format!(
                    "expected tensor {want}, found {name:?}"
                )));
            }
            if shape != spec.shape {
                return Err(Error::Format(format!(
                    "{name}: stored shape {shape:?}, configuration needs {:?}",
                    spec.shape
                )));
            }
            Tensor::new(shape, values)
        })?;
        if r.pos != buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            config,
            pca,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Names of every stored tensor, in file order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = pca_tensors(&self.pca)
            .iter()
            .map(|t| t.0.to_string())
            .collect();
        names.extend(self.params.names());
        names
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn sample() -> Checkpoint {
        let model = ModelConfig::tiny(3);
        let params = init_params::<f32>(&model, 3).unwrap();
        let l = 8;
        let b = model.pca_bands;
        Checkpoint {
            config: RunConfig {
                model,
                split: SplitSpec::default(),
                train: TrainConfig::default(),
                precision: Precision::F32,
            },
            pca: PcaModel {
                mean: (0..l).map(|i| i as f64 * 0.5).collect(),
                components: (0..b * l).map(|i| (i as f64).sin() as f32 as f64).collect(),
                eigenvalues: (0..b).map(|i| (b - i) as f64).collect(),
            },
            params,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_checks() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        let good = sample().to_bytes().unwrap();
        for cut in [0, 5, 20, good.len() / 2, good.len() - 1] {
            assert!(Checkpoint::from_bytes(&good[..cut]).is_err());
        }
        let mut extra = good.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }
}
