//! TSCK checkpoint files (little-endian).
//!
//! ```text
//! "TSCK" | u32 version=1 | u32 len, UTF-8 TOML metadata
//! u32 count, then per tensor: u32 name_len, name, u32 rank, rank x u64 dims, f32 payload
//! ```

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::TrainConfig;
use crate::data::MinMaxStats;
use crate::error::{Error, Result};
use crate::nn::{AdamState, ParamStore};
use crate::tensor::Tensor;

pub const CKPT_MAGIC: &[u8; 4] = b"TSCK";
pub const CKPT_VERSION: u32 = 1;

/// Everything besides tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub phase: String,
    /// Id of the checkpoint this one continued from.
    pub parent: Option<String>,
    pub in_channels: usize,
    pub length: usize,
    pub num_classes: usize,
    /// Agreement of pseudo labels with held-back truth, when known.
    pub pseudo_agreement: Option<f64>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
    pub norm: Option<MinMaxStats>,
    /// Mean objective per optimizer step.
    pub history: Vec<f32>,
    pub pseudo_labels: Option<Vec<i64>>,
}

fn push_u32(b: &mut Vec<u8>, v: u32) {
    b.extend_from_slice(&v.to_le_bytes());
}

fn narrow(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::format(format!("{what} exceeds u32")))
}

fn push_tensor(b: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    push_u32(b, narrow(name.len(), "tensor name")?);
    b.extend_from_slice(name.as_bytes());
    push_u32(b, narrow(t.rank(), "rank")?);
    for &d in t.shape() {
        b.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        b.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

fn vec_tensor(v: &[f32]) -> Tensor<f32> {
    Tensor::new(vec![v.len()], v.to_vec()).expect("1-d")
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, params: ParamStore) -> Self {
        Self {
            meta,
            params,
            adam: None,
            norm: None,
            history: Vec::new(),
            pseudo_labels: None,
        }
    }

    fn named_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out: Vec<(String, Tensor<f32>)> = self
            .params
            .iter()
            .map(|(n, t)| (format!("param.{n}"), t.clone()))
            .collect();
        if let Some(a) = &self.adam {
            out.extend(a.m.iter().map(|(n, t)| (format!("adam.m.{n}"), t.clone())));
            out.extend(a.v.iter().map(|(n, t)| (format!("adam.v.{n}"), t.clone())));
            // two 24-bit halves, each exact in f32
            let step = [(a.step >> 24) as f32, (a.step & 0xff_ffff) as f32];
            out.push(("adam.step".into(), vec_tensor(&step)));
        }
        if let Some(n) = &self.norm {
            out.push(("norm.min".into(), vec_tensor(&n.min)));
            out.push(("norm.max".into(), vec_tensor(&n.max)));
        }
        out.push(("history.loss".into(), vec_tensor(&self.history)));
        if let Some(p) = &self.pseudo_labels {
            out.push(("pseudo.labels".into(), vec_tensor(&p.iter().map(|&y| y as f32).collect::<Vec<_>>())));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&self.meta).map_err(|e| Error::format(format!("metadata: {e}")))?;
        let mut b = Vec::new();
        b.extend_from_slice(CKPT_MAGIC);
        push_u32(&mut b, CKPT_VERSION);
        push_u32(&mut b, narrow(meta.len(), "metadata")?);
        b.extend_from_slice(meta.as_bytes());
        let tensors = self.named_tensors();
        push_u32(&mut b, narrow(tensors.len(), "tensor count")?);
        for (name, t) in &tensors {
            push_tensor(&mut b, name, t)?;
        }
        Ok(b)
    }

    /// Short content hash of the serialized form.
    pub fn id(&self) -> Result<String> {
        Ok(checksum(&self.to_bytes()?))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(checksum(&bytes))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::format("checkpoint magic mismatch"));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(Error::format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u32(&mut r)? as usize;
        let meta_bytes = take(&mut r, len)?;
        let meta_text = std::str::from_utf8(meta_bytes).map_err(|_| Error::format("metadata is not UTF-8"))?;
        let meta: CheckpointMeta = toml::from_str(meta_text).map_err(|e| Error::format(format!("metadata: {e}")))?;

        let mut ck = Checkpoint::new(meta, ParamStore::new());
        let mut adam: Option<AdamState> = None;
        let (mut nmin, mut nmax) = (None, None);
        let count = read_u32(&mut r)?;
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, nlen)?)
                .map_err(|_| Error::format("tensor name is not UTF-8"))?
                .to_string();
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut d = [0u8; 8];
                read_exact(&mut r, &mut d)?;
                shape.push(usize::try_from(u64::from_le_bytes(d)).map_err(|_| Error::format("dimension overflows"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::format("tensor size overflows"))?;
            let data = take(&mut r, n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            if let Some(p) = name.strip_prefix("param.") {
                ck.params.insert(p, t);
            } else if let Some(p) = name.strip_prefix("adam.m.") {
                adam.get_or_insert_with(AdamState::new).m.insert(p, t);
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                adam.get_or_insert_with(AdamState::new).v.insert(p, t);
            } else {
                match name.as_str() {
                    "adam.step" => {
                        let d = t.data();
                        if d.len() != 2 {
                            return Err(Error::format("adam.step must hold two words"));
                        }
                        adam.get_or_insert_with(AdamState::new).step = ((d[0] as u64) << 24) | d[1] as u64;
                    }
                    "norm.min" => nmin = Some(t.into_data()),
                    "norm.max" => nmax = Some(t.into_data()),
                    "history.loss" => ck.history = t.into_data(),
                    "pseudo.labels" => ck.pseudo_labels = Some(t.data().iter().map(|&v| v as i64).collect()),
                    other => return Err(Error::format(format!("unknown checkpoint tensor `{other}`"))),
                }
            }
        }
        if !r.is_empty() {
            return Err(Error::format("trailing bytes after checkpoint tensors"));
        }
        ck.adam = adam;
        ck.norm = match (nmin, nmax) {
            (Some(min), Some(max)) => Some(MinMaxStats { min, max }),
            (None, None) => None,
            _ => return Err(Error::format("normalization statistics incomplete")),
        };
        Ok(ck)
    }
}

pub fn checksum(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::format("truncated checkpoint"))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if r.len() < n {
        return Err(Error::format("truncated checkpoint"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}
