//! Binary checkpoint: `GAVP`, u32 version, u64-length-prefixed JSON
//! metadata, u64 step, tensors (name, rank, dims, f32 LE values), then the
//! frozen-name list. All integers little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::policy::{Policy, PolicySpec};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GAVP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub spec: PolicySpec,
    pub train: TrainConfig,
    pub codebook_trained: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub step: u64,
    pub policy: Policy<f32>,
}

pub fn checkpoint_bytes(policy: &Policy<f32>, train: &TrainConfig, step: u64) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        spec: policy.spec.clone(),
        train: train.clone(),
        codebook_trained: policy.codebook_trained,
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&step.to_le_bytes());
    out.extend_from_slice(&(policy.params.len() as u32).to_le_bytes());
    for (name, t) in policy.params.iter() {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let frozen: Vec<&str> = policy.params.frozen_names().collect();
    out.extend_from_slice(&(frozen.len() as u32).to_le_bytes());
    for name in frozen {
        put_str(&mut out, name);
    }
    Ok(out)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn save_checkpoint(policy: &Policy<f32>, train: &TrainConfig, step: u64, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &checkpoint_bytes(policy, train, step)?)
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
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("tensor name is not UTF-8".into()))
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let json_len = r.len()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::Format(format!("bad checkpoint metadata: {e}")))?;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name:?} has implausible rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("tensor {name:?}: {e}")))?;
        params
            .insert(name, t)
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    let frozen = r.u32()? as usize;
    for _ in 0..frozen {
        let name = r.string()?;
        params.freeze(&name).map_err(|e| Error::Format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    // the stored tensors must be exactly what this configuration builds
    let fresh = Policy::<f32>::new(meta.spec.clone(), 0).map_err(|e| Error::Format(format!("stored config: {e}")))?;
    let layout = |p: &ParamStore<f32>| -> Vec<(String, Vec<usize>, bool)> {
        p.iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec(), p.is_frozen(n)))
            .collect()
    };
    let mut expect = layout(&fresh.params);
    if meta.codebook_trained {
        expect
            .iter_mut()
            .filter(|(n, _, _)| n.starts_with("vq."))
            .for_each(|e| e.2 = true);
    }
    if layout(&params) != expect {
        return Err(Error::Format("checkpoint tensors do not match its stored configuration".into()));
    }
    Ok(Checkpoint {
        step,
        policy: Policy {
            spec: meta.spec.clone(),
            params,
            codebook_trained: meta.codebook_trained,
        },
        meta,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    parse_checkpoint(&bytes)
}

/// Loads and rejects a checkpoint whose policy configuration differs from
/// `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &PolicySpec) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    if ck.meta.spec != *expected {
        return Err(Error::Config(format!(
            "checkpoint {} was trained with a different policy configuration",
            path.display()
        )));
    }
    Ok(ck)
}
