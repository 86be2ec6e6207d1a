//! LAMPCK1 checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8   "LAMPCK1\0"
//! version      u32
//! snapshot     u32 length + UTF-8 TOML (config, normalizers, stage label)
//! count        u32 number of parameters
//! per parameter:
//!   name       u16 length + UTF-8
//!   rank       u8, then rank × u32 extents
//!   frozen     u8
//!   values     numel × f32
//! optimizer    u8 flag (always 0: optimizer state is not stored)
//! sha256       32 bytes over everything above
//! ```

use std::path::Path;

use gradcore::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::LampConfig;
use crate::error::{LampError, Result};
use crate::model::Model;
use crate::motionrep::MotionNormalizer;
use crate::toyworld::ActionNormalizer;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LAMPCK1\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub stage: String,
    pub flow_norm: MotionNormalizer,
    pub action_norm: ActionNormalizer,
    pub config: LampConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub snapshot: Snapshot,
    pub params: Vec<ParamBlob>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LampError::format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| LampError::format("checkpoint string is not UTF-8"))
    }
}

impl Checkpoint {
    /// Parameters of `model` whose names start with one of `prefixes`.
    pub fn capture(model: &Model<f32>, prefixes: &[&str], stage: &str) -> Self {
        let params = model
            .store
            .iter()
            .filter(|(_, p)| prefixes.iter().any(|x| p.name.starts_with(x)))
            .map(|(_, p)| ParamBlob {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                frozen: p.frozen,
                data: p.value.data().to_vec(),
            })
            .collect();
        Checkpoint {
            snapshot: Snapshot {
                stage: stage.to_string(),
                flow_norm: model.flow_norm,
                action_norm: model.action_norm,
                config: model.cfg.clone(),
            },
            params,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let snap = toml::to_string(&self.snapshot).map_err(|e| LampError::format(format!("snapshot: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(snap.len() as u32).to_le_bytes());
        out.extend_from_slice(snap.as_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            if p.name.len() > u16::MAX as usize || p.shape.len() > u8::MAX as usize {
                return Err(LampError::format(format!("parameter {} cannot be encoded", p.name)));
            }
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.shape.len() as u8);
            for &e in &p.shape {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            out.push(p.frozen as u8);
            for &x in &p.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.push(0);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 + 32 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(LampError::format("not a LAMPCK1 checkpoint"));
        }
        let (body, stored) = bytes.split_at(bytes.len() - 32);
        let computed = Sha256::digest(body);
        if computed.as_slice() != stored {
            return Err(LampError::Checksum {
                stored: hex(stored),
                computed: hex(&computed),
            });
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(LampError::format(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let n = r.u32()? as usize;
        let snap = r.string(n)?;
        let snapshot: Snapshot = toml::from_str(&snap).map_err(|e| LampError::format(format!("snapshot: {e}")))?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = r.string(n)?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let frozen = r.u8()? != 0;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            params.push(ParamBlob { name, shape, frozen, data });
        }
        if r.u8()? != 0 {
            return Err(LampError::format("optimizer state segment is not supported"));
        }
        if r.pos != body.len() {
            return Err(LampError::format(format!("{} trailing bytes in checkpoint", body.len() - r.pos)));
        }
        Ok(Checkpoint { snapshot, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Copies every stored parameter into `store` by name. Frozen flags
    /// are left as they are in `store`.
    pub fn apply(&self, store: &mut ParamStore<f32>) -> Result<()> {
        for p in &self.params {
            let id = store
                .id(&p.name)
                .ok_or_else(|| LampError::config(format!("checkpoint parameter {} has no counterpart in the model", p.name)))?;
            let dst = store.get_mut(id);
            if dst.value.shape() != p.shape.as_slice() {
                return Err(LampError::config(format!(
                    "parameter {} has shape {:?} in the checkpoint but {:?} in the model",
                    p.name,
                    p.shape,
                    dst.value.shape()
                )));
            }
            dst.value = Tensor::new(&p.shape, p.data.clone())?;
        }
        Ok(())
    }

    /// Rebuilds the model described by the snapshot and loads every parameter.
    /// The model must own exactly the stored parameters under `prefixes`.
    pub fn restore(&self) -> Result<Model<f32>> {
        let s = &self.snapshot;
        let mut model = Model::new(&s.config, s.flow_norm, s.action_norm)?;
        self.apply(&mut model.store)?;
        for p in &self.params {
            let id = model.store.id(&p.name).expect("applied above");
            model.store.get_mut(id).frozen = p.frozen;
        }
        Ok(model)
    }

    /// Stage-2 compatibility: grid, perception and motion settings must agree.
    pub fn check_compatible(&self, cfg: &LampConfig) -> Result<()> {
        let c = &self.snapshot.config;
        if c.grid() != cfg.grid() {
            return Err(LampError::config(format!(
                "checkpoint grid {:?} does not match configured grid {:?}",
                c.grid(),
                cfg.grid()
            )));
        }
        if c.percept != cfg.percept || c.motion != cfg.motion {
            return Err(LampError::config("checkpoint perception or motion settings differ from the configuration"));
        }
        Ok(())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::STAGE1_PREFIXES;

    fn model() -> Model<f32> {
        Model::new(&LampConfig::tiny(), MotionNormalizer::identity(), ActionNormalizer::identity()).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = model();
        let ck = Checkpoint::capture(&m, &[""], "init");
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let restored = back.restore().unwrap();
        assert_eq!(restored.fingerprint(""), m.fingerprint(""));
    }

    #[test]
    fn corrupted_byte_is_detected() {
        let bytes = Checkpoint::capture(&model(), &STAGE1_PREFIXES, "stage1").to_bytes().unwrap();
        for pos in [9, bytes.len() / 2, bytes.len() - 40] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x10;
            assert!(matches!(Checkpoint::from_bytes(&bad), Err(LampError::Checksum { .. })));
        }
    }

    #[test]
    fn mismatched_grid_is_a_config_error() {
        let ck = Checkpoint::capture(&model(), &STAGE1_PREFIXES, "stage1");
        let mut cfg = LampConfig::tiny();
        cfg.data.grid.rows = 6;
        assert!(matches!(ck.check_compatible(&cfg), Err(LampError::Config(_))));
        assert!(ck.check_compatible(&LampConfig::tiny()).is_ok());
    }
}
