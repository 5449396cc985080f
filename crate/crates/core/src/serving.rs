//! Export path: prefix truncation, global int8 quantization, the PCEB
//! embedding store, and exact inner-product search.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PinId;
use crate::provenance::Provenance;
use crate::tensor::{TensorError, NORM_EPS};

pub const MAGIC: &[u8; 4] = b"PCEB";
pub const VERSION: u32 = 1;

/// Stored vectors must have unit norm to this tolerance.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// First `k` components, re-normalized to unit length.
pub fn truncate_prefix(v: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > v.len() {
        return Err(Error::Precondition(format!("prefix {k} outside 1..={}", v.len())));
    }
    let head = &v[..k];
    let norm = head.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm >= NORM_EPS) {
        return Err(TensorError::DegenerateVector { norm, eps: NORM_EPS }.into());
    }
    Ok(head.iter().map(|x| x / norm).collect())
}

/// Shared scale and zero point of the affine int8 map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub s: f64,
    pub z: i32,
}

impl Default for QuantParams {
    fn default() -> Self {
        Self { s: 0.5 / 127.0, z: 0 }
    }
}

impl QuantParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0) || !self.s.is_finite() {
            return Err(Error::Config(format!("quantization scale must be positive, got {}", self.s)));
        }
        if !(-127..=127).contains(&self.z) {
            return Err(Error::Config(format!("zero point {} outside [-127, 127]", self.z)));
        }
        Ok(())
    }

    /// The parameters as a store file records them (scale in `f32`).
    pub fn as_stored(&self) -> Self {
        Self {
            s: self.s as f32 as f64,
            z: self.z,
        }
    }
}

/// `round(x / s + z)`, half away from zero, clamped to `[-127, 127]`.
pub fn quantize(x: &[f64], qp: &QuantParams) -> Vec<i8> {
    x.iter()
        .map(|&v| (v / qp.s + qp.z as f64).round().clamp(-127.0, 127.0) as i8)
        .collect()
}

/// `(x_q - z) * s`.
pub fn dequantize(xq: &[i8], qp: &QuantParams) -> Vec<f64> {
    xq.iter().map(|&q| (q as i32 - qp.z) as f64 * qp.s).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I8 { data: Vec<i8>, qp: QuantParams },
}

/// Row-major embeddings keyed by pin id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub ids: Vec<PinId>,
    pub payload: Payload,
    index: HashMap<PinId, usize>,
}

fn index_of(ids: &[PinId]) -> Result<HashMap<PinId, usize>> {
    let mut index = HashMap::with_capacity(ids.len());
    for (i, &id) in ids.iter().enumerate() {
        if index.insert(id, i).is_some() {
            return Err(Error::Precondition(format!("duplicate id {id} in embedding store")));
        }
    }
    Ok(index)
}

impl EmbeddingStore {
    /// Float store from unit rows.
    pub fn from_rows(ids: Vec<PinId>, rows: &[Vec<f64>]) -> Result<Self> {
        if ids.len() != rows.len() {
            return Err(Error::Precondition(format!("{} ids for {} rows", ids.len(), rows.len())));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (id, r) in ids.iter().zip(rows) {
            if r.len() != dim {
                return Err(Error::Precondition(format!("row {id} has {} dims, expected {dim}", r.len())));
            }
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Precondition(format!("row {id} has norm {norm}, expected 1")));
            }
            data.extend(r.iter().map(|&x| x as f32));
        }
        let index = index_of(&ids)?;
        Ok(Self {
            dim,
            ids,
            payload: Payload::F32(data),
            index,
        })
    }

    /// Unit rows truncated to their first `k` components.
    pub fn from_prefix_rows(ids: Vec<PinId>, rows: &[Vec<f64>], k: usize) -> Result<Self> {
        let rows = rows.iter().map(|r| truncate_prefix(r, k)).collect::<Result<Vec<_>>>()?;
        Self::from_rows(ids, &rows)
    }

    /// Int8 copy of a float store. The scale is rounded to `f32` first so
    /// the values in memory equal those read back from disk.
    pub fn quantized(&self, qp: &QuantParams) -> Result<Self> {
        qp.validate()?;
        let Payload::F32(data) = &self.payload else {
            return Err(Error::Precondition("store is already quantized".into()));
        };
        let qp = qp.as_stored();
        let x: Vec<f64> = data.iter().map(|&v| v as f64).collect();
        Ok(Self {
            payload: Payload::I8 {
                data: quantize(&x, &qp),
                qp,
            },
            ..self.clone()
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dtype_name(&self) -> &'static str {
        match self.payload {
            Payload::F32(_) => "float32",
            Payload::I8 { .. } => "int8",
        }
    }

    /// Row `i`, dequantized if needed.
    pub fn row(&self, i: usize) -> Vec<f64> {
        let r = i * self.dim..(i + 1) * self.dim;
        match &self.payload {
            Payload::F32(d) => d[r].iter().map(|&v| v as f64).collect(),
            Payload::I8 { data, qp } => dequantize(&data[r], qp),
        }
    }

    pub fn get(&self, id: PinId) -> Option<Vec<f64>> {
        self.index.get(&id).map(|&i| self.row(i))
    }

    pub fn payload_bytes(&self) -> usize {
        match &self.payload {
            Payload::F32(d) => d.len() * 4,
            Payload::I8 { data, .. } => data.len(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(29 + self.len() * 8 + self.payload_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let (dtype, scale, zp) = match &self.payload {
            Payload::F32(_) => (0u8, 0f32, 0i32),
            Payload::I8 { qp, .. } => (1u8, qp.s as f32, qp.z),
        };
        out.push(dtype);
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&scale.to_le_bytes());
        out.extend_from_slice(&zp.to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&id.to_le_bytes());
        }
        match &self.payload {
            Payload::F32(d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Payload::I8 { data, .. } => out.extend(data.iter().map(|&q| q as u8)),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::format(path, msg);
        let header = 4 + 4 + 1 + 4 + 8 + 4 + 4;
        if bytes.len() < header || &bytes[..4] != MAGIC {
            return Err(bad("not a PCEB file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != VERSION {
            return Err(bad(format!("unsupported PCEB version {version}")));
        }
        let dtype = bytes[8];
        let dim = u32_at(9) as usize;
        let count = u64::from_le_bytes(bytes[13..21].try_into().expect("8 bytes")) as usize;
        let scale = f32::from_le_bytes(bytes[21..25].try_into().expect("4 bytes"));
        let zp = i32::from_le_bytes(bytes[25..29].try_into().expect("4 bytes"));
        let width = match dtype {
            0 => 4,
            1 => 1,
            d => return Err(bad(format!("unknown dtype {d}"))),
        };
        let expected = count
            .checked_mul(8)
            .and_then(|ids| count.checked_mul(dim)?.checked_mul(width)?.checked_add(ids))
            .and_then(|body| body.checked_add(header));
        if expected != Some(bytes.len()) {
            return Err(bad(format!("{} bytes do not match {count} rows of dim {dim}", bytes.len())));
        }
        let ids: Vec<PinId> = bytes[header..header + 8 * count]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let body = &bytes[header + 8 * count..];
        let payload = if dtype == 0 {
            if scale != 0.0 || zp != 0 {
                return Err(bad("float store must have zero scale and zero point".into()));
            }
            Payload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            )
        } else {
            let qp = QuantParams { s: scale as f64, z: zp };
            qp.validate().map_err(|e| bad(e.to_string()))?;
            Payload::I8 {
                data: body.iter().map(|&b| b as i8).collect(),
                qp,
            }
        };
        let index = index_of(&ids).map_err(|e| bad(e.to_string()))?;
        Ok(Self { dim, ids, payload, index })
    }

    /// Writes the store and a `.meta.json` sidecar with its provenance.
    pub fn write(&self, path: &Path, meta: &StoreMeta) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::io(path))?;
        let side = sidecar_path(path);
        let json = serde_json::to_string_pretty(meta).expect("metadata serializes");
        fs::write(&side, json + "\n").map_err(Error::io(&side))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Provenance and export settings recorded next to a store file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMeta {
    #[serde(flatten)]
    pub provenance: Provenance,
    pub modality: String,
    pub prefix: usize,
    pub checkpoint: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn read_store_meta(path: &Path) -> Result<StoreMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(Error::io(&side))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))
}

/// Exact inner-product search: best `k` rows, ties broken by ascending id.
pub fn top_k_search(store: &EmbeddingStore, query: &[f64], k: usize) -> Result<Vec<(PinId, f64)>> {
    if k == 0 {
        return Err(Error::Precondition("K must be at least 1".into()));
    }
    if query.len() != store.dim {
        return Err(Error::Precondition(format!(
            "query has {} dims but the store has {}",
            query.len(),
            store.dim
        )));
    }
    let mut scored: Vec<(PinId, f64)> = (0..store.len())
        .map(|i| {
            let row = store.row(i);
            (store.ids[i], row.iter().zip(query).map(|(a, b)| a * b).sum())
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}
