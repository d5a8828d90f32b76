//! Versioned binary checkpoints: every parameter tensor or TT record, the
//! gate-order and bias-convention tags, optimizer state, RNG state, and a
//! config hash. Little-endian throughout; save -> load -> save is
//! byte-identical. Writes go to a temp file then rename, so a crash never
//! leaves a torn checkpoint behind.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;
use crate::tt::TTMatrix;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"TTRNNCKP";

/// One named parameter: a dense tensor or a whole TT matrix record.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Dense(DenseTensor),
    Tt(TTMatrix),
}

/// Early-stopping bookkeeping needed for exact training continuation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerProgress {
    pub epoch_next: u32,
    pub best_metric: f64,
    pub stalls: u32,
    pub lr: f64,
}

impl Default for TrainerProgress {
    fn default() -> Self {
        TrainerProgress {
            epoch_next: 0,
            best_metric: f64::NEG_INFINITY,
            stalls: 0,
            lr: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamSnapshot {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: Vec<(String, DenseTensor, DenseTensor)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub config_text: String,
    pub gate_order: String,
    pub bias_convention: String,
    pub rng_state: u64,
    pub progress: TrainerProgress,
    pub entries: Vec<(String, Payload)>,
    pub adam: Option<AdamSnapshot>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_tensor(out: &mut Vec<u8>, t: &DenseTensor) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 string in checkpoint".into()))
    }

    fn tensor(&mut self) -> Result<DenseTensor> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(self.f64()?);
        }
        DenseTensor::new(shape, data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        put_str(&mut out, &self.config_text);
        put_str(&mut out, &self.gate_order);
        put_str(&mut out, &self.bias_convention);
        out.extend_from_slice(&self.rng_state.to_le_bytes());
        out.extend_from_slice(&self.progress.epoch_next.to_le_bytes());
        out.extend_from_slice(&self.progress.best_metric.to_le_bytes());
        out.extend_from_slice(&self.progress.stalls.to_le_bytes());
        out.extend_from_slice(&self.progress.lr.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, payload) in &self.entries {
            put_str(&mut out, name);
            match payload {
                Payload::Dense(t) => {
                    out.push(0);
                    put_tensor(&mut out, t);
                }
                Payload::Tt(ttm) => {
                    out.push(1);
                    let record = ttm.to_bytes();
                    out.extend_from_slice(&(record.len() as u32).to_le_bytes());
                    out.extend_from_slice(&record);
                }
            }
        }
        match &self.adam {
            None => out.push(0),
            Some(a) => {
                out.push(1);
                out.extend_from_slice(&a.step.to_le_bytes());
                out.extend_from_slice(&a.lr.to_le_bytes());
                out.extend_from_slice(&a.beta1.to_le_bytes());
                out.extend_from_slice(&a.beta2.to_le_bytes());
                out.extend_from_slice(&a.eps.to_le_bytes());
                out.extend_from_slice(&(a.moments.len() as u32).to_le_bytes());
                for (name, m, v) in &a.moments {
                    put_str(&mut out, name);
                    put_tensor(&mut out, m);
                    put_tensor(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config_hash = r.u64()?;
        let config_text = r.string()?;
        let gate_order = r.string()?;
        let bias_convention = r.string()?;
        let rng_state = r.u64()?;
        let progress = TrainerProgress {
            epoch_next: r.u32()?,
            best_metric: r.f64()?,
            stalls: r.u32()?,
            lr: r.f64()?,
        };
        let n_entries = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name = r.string()?;
            let tag = r.u8()?;
            let payload = match tag {
                0 => Payload::Dense(r.tensor()?),
                1 => {
                    let len = r.u32()? as usize;
                    let record = r.take(len)?;
                    let (ttm, used) = TTMatrix::from_bytes(record)?;
                    if used != len {
                        return Err(Error::Checkpoint("TT record length mismatch".into()));
                    }
                    Payload::Tt(ttm)
                }
                other => return Err(Error::Checkpoint(format!("unknown payload tag {other}"))),
            };
            entries.push((name, payload));
        }
        let adam = match r.u8()? {
            0 => None,
            _ => {
                let step = r.u64()?;
                let lr = r.f64()?;
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let count = r.u32()? as usize;
                let mut moments = Vec::with_capacity(count);
                for _ in 0..count {
                    let name = r.string()?;
                    let m = r.tensor()?;
                    let v = r.tensor()?;
                    moments.push((name, m, v));
                }
                Some(AdamSnapshot {
                    step,
                    lr,
                    beta1,
                    beta2,
                    eps,
                    moments,
                })
            }
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "trailing bytes after checkpoint payload: {}",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_hash,
            config_text,
            gate_order,
            bias_convention,
            rng_state,
            progress,
            entries,
            adam,
        })
    }

    /// Atomic save: write a temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn entry(&self, name: &str) -> Option<&Payload> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tt::init_tt;

    fn sample() -> Checkpoint {
        let mut rng = Rng::new(1);
        Checkpoint {
            config_hash: 0xdead_beef_cafe_f00d,
            config_text: "cell=lstm param=tt-fused hidden=8".into(),
            gate_order: "lstm:c,u,f,o".into(),
            bias_convention: "lstm-single".into(),
            rng_state: 42,
            progress: TrainerProgress {
                epoch_next: 3,
                best_metric: 0.93,
                stalls: 1,
                lr: 3e-4,
            },
            entries: vec![
                (
                    "cell.w".into(),
                    Payload::Tt(init_tt(&[4, 2, 2], &[1, 2, 2], &[1, 2, 2, 1], 7, 0.5).unwrap()),
                ),
                (
                    "cell.b".into(),
                    Payload::Dense(DenseTensor::randn(vec![16], 1.0, &mut rng)),
                ),
            ],
            adam: Some(AdamSnapshot {
                step: 120,
                lr: 3e-4,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                moments: vec![(
                    "cell.b".into(),
                    DenseTensor::randn(vec![16], 0.1, &mut rng),
                    DenseTensor::randn(vec![16], 0.01, &mut rng).map(f64::abs),
                )],
            }),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = sample();
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn save_load_through_file() {
        let dir = std::env::temp_dir().join(format!("ttrnn-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let ckpt = sample();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ckpt);
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn truncated_file_is_a_clean_error() {
        let bytes = sample().to_bytes();
        for cut in [4usize, 17, 60, bytes.len() - 5] {
            let err = Checkpoint::from_bytes(&bytes[..cut]);
            assert!(
                matches!(err, Err(Error::Checkpoint(_))),
                "cut at {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn version_mismatch_is_detected() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 99; // version field
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::CheckpointVersion {
                found: 99,
                expected: CHECKPOINT_VERSION
            })
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }
}
