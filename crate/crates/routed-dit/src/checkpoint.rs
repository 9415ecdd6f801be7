//! Binary checkpoint format.
//!
//! Layout: magic "DCR1", u32 version, u32 config length + TOML config
//! snapshot, u64 step counter, u32 array count, then per array: u32 name
//! length, name, u8 element type (0 = f64), u32 ndim, u32 dims, little-endian
//! f64 payload. Optimizer moments ride along as `<name>.adam_m` / `.adam_v`.

use std::fs;
use std::path::Path;

use crate::config::RunConfig;
use crate::diffusion::Trainer;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::optim::AdamState;

pub const MAGIC: [u8; 4] = *b"DCR1";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub arrays: Vec<CheckpointArray>,
}

impl Checkpoint {
    pub fn from_trainer(config: &RunConfig, trainer: &Trainer) -> Self {
        let mut arrays = Vec::new();
        for (arr, st) in trainer.model.store.arrays.iter().zip(&trainer.states) {
            arrays.push(CheckpointArray {
                name: arr.name.clone(),
                shape: arr.shape.clone(),
                data: arr.data.clone(),
            });
            arrays.push(CheckpointArray {
                name: format!("{}.adam_m", arr.name),
                shape: arr.shape.clone(),
                data: st.m.clone(),
            });
            arrays.push(CheckpointArray {
                name: format!("{}.adam_v", arr.name),
                shape: arr.shape.clone(),
                data: st.v.clone(),
            });
        }
        Checkpoint { config: config.clone(), step: trainer.step, arrays }
    }

    pub fn array(&self, name: &str) -> Option<&CheckpointArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn ensure_config(&self, expected: &RunConfig) -> Result<()> {
        if &self.config != expected {
            return Err(Error::Format(
                "checkpoint config does not match the requested config".into(),
            ));
        }
        Ok(())
    }

    /// Rebuild a trainer (model, optimizer moments, step counter).
    pub fn restore_trainer(&self) -> Result<Trainer> {
        let model = Model::new(self.config.model.clone(), self.config.seed)?;
        let mut trainer = Trainer::new(model)?;
        trainer.step = self.step;
        for (id, arr) in trainer.model.store.arrays.iter_mut().enumerate() {
            let take = |suffix: &str| -> Result<&CheckpointArray> {
                let name = format!("{}{suffix}", arr.name);
                let found = self
                    .arrays
                    .iter()
                    .find(|a| a.name == name)
                    .ok_or_else(|| Error::Format(format!("checkpoint misses array `{name}`")))?;
                if found.shape != arr.shape {
                    return Err(Error::Format(format!(
                        "array `{name}` has shape {:?}, model wants {:?}",
                        found.shape, arr.shape
                    )));
                }
                Ok(found)
            };
            arr.data = take("")?.data.clone();
            trainer.states[id] = AdamState {
                m: take(".adam_m")?.data.clone(),
                v: take(".adam_v")?.data.clone(),
            };
        }
        Ok(trainer)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config.to_toml().into_bytes();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
        }
        let version = cur.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version}, this build reads version {VERSION}"
            )));
        }
        let cfg_len = cur.u32()? as usize;
        let cfg_bytes = cur.take(cfg_len)?;
        let cfg_text = std::str::from_utf8(cfg_bytes)
            .map_err(|_| Error::Format("config snapshot is not UTF-8".into()))?;
        let config = RunConfig::from_toml(cfg_text)?;
        let step = cur.u64()?;
        let count = cur.u32()? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_string();
            let dtype = cur.take(1)?[0];
            if dtype != DTYPE_F64 {
                return Err(Error::Format(format!("unknown element type {dtype}")));
            }
            let ndim = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(cur.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let b: [u8; 8] = cur.take(8)?.try_into().unwrap();
                data.push(f64::from_le_bytes(b));
            }
            arrays.push(CheckpointArray { name, shape, data });
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - cur.pos
            )));
        }
        Ok(Checkpoint { config, step, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{GeneratorKind, ToyDataset};
    use crate::diffusion::{draw_batch, TrainRngs};
    use crate::model::ModelConfig;

    fn small_run_config() -> RunConfig {
        RunConfig {
            seed: 3,
            steps: 2,
            batch_size: 2,
            model: ModelConfig {
                image_side: 8,
                patch_side: 2,
                hidden_dim: 16,
                heads: 2,
                layers: 2,
                mlp_ratio: 2,
                classes: 2,
                train_timesteps: 10,
                sample_steps: 5,
                regions: 2,
                ..ModelConfig::default()
            },
            ..RunConfig::default()
        }
    }

    fn trained_trainer(cfg: &RunConfig) -> Trainer {
        let model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
        let mut trainer = Trainer::new(model).unwrap();
        let ds = ToyDataset::new(GeneratorKind::Shapes, 2, 8).unwrap();
        let mut rngs = TrainRngs::new(cfg.seed);
        for _ in 0..2 {
            let batch = draw_batch(&ds, &trainer.model, 2, &mut rngs).unwrap();
            trainer.train_step(&batch, 0.3).unwrap();
        }
        trainer
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let cfg = small_run_config();
        let trainer = trained_trainer(&cfg);
        let ckpt = Checkpoint::from_trainer(&cfg, &trainer);
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, ckpt);
    }

    #[test]
    fn restore_reproduces_trainer_state() {
        let cfg = small_run_config();
        let trainer = trained_trainer(&cfg);
        let ckpt = Checkpoint::from_trainer(&cfg, &trainer);
        let restored = ckpt.restore_trainer().unwrap();
        assert_eq!(restored.step, trainer.step);
        for (a, b) in trainer.model.store.arrays.iter().zip(&restored.model.store.arrays) {
            assert_eq!(a.data, b.data, "array {}", a.name);
        }
        for (a, b) in trainer.states.iter().zip(&restored.states) {
            assert_eq!(a.m, b.m);
            assert_eq!(a.v, b.v);
        }
    }

    #[test]
    fn truncated_file_is_format_error() {
        let cfg = small_run_config();
        let trainer = trained_trainer(&cfg);
        let bytes = Checkpoint::from_trainer(&cfg, &trainer).to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let e = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(e, Error::Format(_)), "cut at {cut}: {e}");
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let cfg = small_run_config();
        let trainer = trained_trainer(&cfg);
        let mut bytes = Checkpoint::from_trainer(&cfg, &trainer).to_bytes();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        let e = Checkpoint::from_bytes(&bytes).unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains('7') && msg.contains('1'), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let e = Checkpoint::from_bytes(b"NOPE").unwrap_err();
        assert!(matches!(e, Error::Format(_)));
    }

    #[test]
    fn manifest_matches_store() {
        let cfg = small_run_config();
        let trainer = trained_trainer(&cfg);
        let ckpt = Checkpoint::from_trainer(&cfg, &trainer);
        assert_eq!(ckpt.arrays.len(), trainer.model.store.len() * 3);
        for arr in &trainer.model.store.arrays {
            assert!(ckpt.array(&arr.name).is_some());
            assert!(ckpt.array(&format!("{}.adam_m", arr.name)).is_some());
            assert!(ckpt.array(&format!("{}.adam_v", arr.name)).is_some());
        }
    }

    #[test]
    fn config_mismatch_is_explicit() {
        let cfg = small_run_config();
        let trainer = trained_trainer(&cfg);
        let ckpt = Checkpoint::from_trainer(&cfg, &trainer);
        ckpt.ensure_config(&cfg).unwrap();
        let mut other = cfg.clone();
        other.seed = 99;
        assert!(ckpt.ensure_config(&other).is_err());
    }
}
