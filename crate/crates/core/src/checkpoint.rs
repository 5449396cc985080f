//! PCKPT parameter checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "PCKPT" u32:version=1
//! u32:meta_len  meta_len bytes of JSON metadata
//! u32:param_count
//! per param: u16:name_len name u8:group u8:locked u8:rank u64[rank]:shape u64:offset
//! u64:payload_len  payload_len × f64
//! "LION" u32:param_count  param_count × u8:has_moment  f64 moments of the flagged params
//! ```
//!
//! Offsets and lengths count `f64` elements, not bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::Group;
use crate::provenance::Provenance;
use crate::tensor::Tensor;
use crate::trainer::{LionState, TrainState};

pub const MAGIC: &[u8; 5] = b"PCKPT";
pub const VERSION: u32 = 1;
const LION_TAG: &[u8; 4] = b"LION";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub seed: u64,
    pub step: u64,
    pub model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub group: Group,
    pub locked: bool,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<ParamRecord>,
    pub moments: Vec<Option<Tensor>>,
}

fn group_code(g: Group) -> u8 {
    match g {
        Group::Image => 0,
        Group::Text => 1,
        Group::Fusion => 2,
        Group::Loss => 3,
    }
}

impl Checkpoint {
    pub fn capture(state: &TrainState, prov: &Provenance) -> Self {
        Self {
            meta: CheckpointMeta {
                config_hash: prov.config_hash.clone(),
                seed: prov.seed,
                step: state.step,
                model: state.model.config.clone(),
            },
            params: state
                .model
                .params
                .iter()
                .map(|(_, p)| ParamRecord {
                    name: p.name.clone(),
                    group: p.group,
                    locked: p.locked,
                    value: p.value.clone(),
                })
                .collect(),
            moments: state.lion.m.clone(),
        }
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(self.meta.config_hash.clone(), self.meta.seed)
    }

    /// Rebuilds the model described by the metadata and loads every value.
    pub fn restore(&self) -> Result<TrainState> {
        let mut model = Model::new(&self.meta.model, self.meta.seed)?;
        self.load_into(&mut model)?;
        Ok(TrainState {
            model,
            lion: LionState { m: self.moments.clone() },
            step: self.meta.step,
        })
    }

    /// Copies values and lock flags into a model with the same layout.
    pub fn load_into(&self, model: &mut Model) -> Result<()> {
        if model.params.len() != self.params.len() {
            return Err(Error::Precondition(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        let ids: Vec<_> = model.params.iter().map(|(id, _)| id).collect();
        for (id, rec) in ids.into_iter().zip(&self.params) {
            let p = model.params.get_mut(id);
            if p.name != rec.name || p.group != rec.group || p.value.shape() != rec.value.shape() {
                return Err(Error::Precondition(format!(
                    "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                    rec.name,
                    rec.value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            p.value = rec.value.clone();
            p.locked = rec.locked;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.push(group_code(p.group));
            out.push(p.locked as u8);
            out.push(p.value.rank() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += p.value.numel() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for p in &self.params {
            put_f64s(&mut out, p.value.data());
        }
        out.extend_from_slice(LION_TAG);
        out.extend_from_slice(&(self.moments.len() as u32).to_le_bytes());
        out.extend(self.moments.iter().map(|m| m.is_some() as u8));
        for m in self.moments.iter().flatten() {
            put_f64s(&mut out, m.data());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(5)? != MAGIC {
            return Err(r.err("not a PCKPT file"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported PCKPT version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| r.err(&format!("bad metadata: {e}")))?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("parameter name is not UTF-8"))?;
            let group = match r.u8()? {
                0 => Group::Image,
                1 => Group::Text,
                2 => Group::Fusion,
                3 => Group::Loss,
                g => return Err(r.err(&format!("unknown group code {g}"))),
            };
            let locked = r.u8()? != 0;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            manifest.push((name, group, locked, shape, offset));
        }
        let payload_len = r.u64()? as usize;
        let payload = r.f64s(payload_len)?;
        let mut params = Vec::with_capacity(count);
        for (name, group, locked, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            let data = payload
                .get(offset..offset + n)
                .ok_or_else(|| r.err(&format!("parameter {name} overruns the payload")))?
                .to_vec();
            let value = Tensor::new(shape, data).map_err(|e| r.err(&e.to_string()))?;
            params.push(ParamRecord { name, group, locked, value });
        }
        if r.take(4)? != LION_TAG {
            return Err(r.err("missing optimizer section"));
        }
        if r.u32()? as usize != count {
            return Err(r.err("optimizer section does not match the parameter count"));
        }
        let flags = r.take(count)?.to_vec();
        let mut moments = Vec::with_capacity(count);
        for (flag, p) in flags.iter().zip(&params) {
            moments.push(if *flag != 0 {
                let data = r.f64s(p.value.numel())?;
                Some(Tensor::new(p.value.shape(), data).map_err(|e| r.err(&e.to_string()))?)
            } else {
                None
            });
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after optimizer section"));
        }
        Ok(Self { meta, params, moments })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::format(self.path, format!("{msg} (at byte {})", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err("truncated file")),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state() -> TrainState {
        let mut model = Model::new(&ModelConfig::tiny(), 3).unwrap();
        model.set_locked_layers(crate::model::Component::Image, 1).unwrap();
        let mut s = TrainState::new(model);
        s.step = 4;
        if let Some(m) = s.lion.m.iter_mut().flatten().next() {
            m.data_mut()[0] = 0.25;
        }
        s
    }

    #[test]
    fn bytes_round_trip() {
        let s = state();
        let ck = Checkpoint::capture(&s, &Provenance::new("h", 3));
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..5], MAGIC);
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 1);
        let back = Checkpoint::from_bytes(&bytes, Path::new("x")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let restored = back.restore().unwrap();
        assert_eq!(restored.model.params, s.model.params);
        assert_eq!(restored.lion, s.lion);
        assert_eq!(restored.step, 4);
    }

    #[test]
    fn locked_params_have_no_moments() {
        let ck = Checkpoint::capture(&state(), &Provenance::default());
        for (p, m) in ck.params.iter().zip(&ck.moments) {
            assert_eq!(p.locked, m.is_none(), "{}", p.name);
        }
        assert!(ck.params.iter().any(|p| p.locked));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = Checkpoint::capture(&state(), &Provenance::default()).to_bytes();
        let p = Path::new("ck");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], p).is_err());
        assert!(Checkpoint::from_bytes(b"PCKPX", p).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra, p), Err(Error::Format { .. })));
        let mut v2 = bytes;
        v2[5] = 2;
        assert!(Checkpoint::from_bytes(&v2, p).is_err());
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let ck = Checkpoint::capture(&state(), &Provenance::default());
        let mut other = Model::new(&ModelConfig::default(), 1).unwrap();
        assert!(ck.load_into(&mut other).is_err());
    }
}
