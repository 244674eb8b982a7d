//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "SEPKCKPT"
//! version   u32      1
//! dtype     u32      1 = f32, 2 = f64
//! count     u32      number of tensors
//! count × { name_len u32, name utf-8, ndim u32, dims ndim × u64, data numel × dtype }
//! meta_len  u64
//! metadata  meta_len bytes of UTF-8 JSON
//! ```
//!
//! Parameter values are stored under their own names. Adam state and running
//! statistics use the suffixes `#adam_m`, `#adam_v`, `#adam_step`, `#mean`
//! and `#var`.

use std::path::{Path, PathBuf};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SEPKCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Element type written to disk. `F64` round-trips exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn tag(self) -> u32 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    /// Snapshot of every parameter, its optimizer state and every running
    /// statistic in `store`.
    pub fn from_store(store: &ParamStore, metadata: serde_json::Value) -> Self {
        let mut tensors = Vec::new();
        for p in store.params() {
            tensors.push((p.name.clone(), p.value.clone()));
            tensors.push((format!("{}#adam_m", p.name), p.first_moment.clone()));
            tensors.push((format!("{}#adam_v", p.name), p.second_moment.clone()));
            tensors.push((format!("{}#adam_step", p.name), Tensor::scalar(p.step as f64)));
        }
        for s in store.all_stats() {
            let row = |v: &[f64]| Tensor::new(&[v.len()], v.to_vec()).expect("non-empty stats");
            tensors.push((format!("{}#mean", s.name), row(&s.mean)));
            tensors.push((format!("{}#var", s.name), row(&s.var)));
        }
        Checkpoint { tensors, metadata }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn required(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .tensor(name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::Config(format!(
                "checkpoint tensor `{name}` has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    /// Overwrites values, optimizer state and running statistics in `store`.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        for p in store.params_mut() {
            let shape = p.value.shape().to_vec();
            p.value = self.required(&p.name, &shape)?.clone();
            // Optimizer state is optional so weight-only containers load too.
            if self.tensor(&format!("{}#adam_m", p.name)).is_some() {
                p.first_moment = self.required(&format!("{}#adam_m", p.name), &shape)?.clone();
                p.second_moment = self.required(&format!("{}#adam_v", p.name), &shape)?.clone();
                p.step = self.required(&format!("{}#adam_step", p.name), &[1])?.item() as u64;
            }
        }
        for s in store.all_stats_mut() {
            let c = s.mean.len();
            s.mean = self.required(&format!("{}#mean", s.name), &[c])?.data().to_vec();
            s.var = self.required(&format!("{}#var", s.name), &[c])?.data().to_vec();
        }
        Ok(())
    }

    pub fn to_bytes(&self, precision: Precision) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&precision.tag().to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                match precision {
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let meta = serde_json::to_vec(&self.metadata).expect("JSON values always serialize");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out
    }

    /// Parses a container; `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path: path.to_path_buf(),
        };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.error("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.error(&format!("unsupported version {version}")));
        }
        let precision = match r.u32()? {
            1 => Precision::F32,
            2 => Precision::F64,
            other => return Err(r.error(&format!("unknown dtype tag {other}"))),
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.error("tensor name is not UTF-8"))?
                .to_owned();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.error("tensor size overflows"))?;
            let data = match precision {
                Precision::F32 => (0..numel)
                    .map(|_| r.array::<4>().map(|b| f32::from_le_bytes(b) as f64))
                    .collect::<Result<Vec<_>>>()?,
                Precision::F64 => (0..numel)
                    .map(|_| r.array::<8>().map(f64::from_le_bytes))
                    .collect::<Result<Vec<_>>>()?,
            };
            let t = Tensor::new(&shape, data)
                .map_err(|e| r.error(&format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let meta_len = r.u64()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| r.error(&format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes after metadata"));
        }
        Ok(Checkpoint { tensors, metadata })
    }

    pub fn write(&self, path: &Path, precision: Precision) -> Result<()> {
        std::fs::write(path, self.to_bytes(precision)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl<'a> Reader<'a> {
    fn error(&self, detail: &str) -> Error {
        Error::Format {
            path: self.path.clone(),
            detail: format!("{detail} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.error("unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u32(&mut self) -> Result<u32> {
        self.array::<4>().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array::<8>().map(u64::from_le_bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::new(&[2, 3], vec![0.1, -0.2, 1.0 / 3.0, 4.0, 5.5, -6.25]).unwrap(), true);
        store.add("b", Tensor::scalar(std::f64::consts::PI), false);
        let s = store.add_stats("bn.running", 2);
        store.stats_mut(s).mean = vec![0.5, -0.5];
        store.get_mut(a).step = 7;
        store.get_mut(a).first_moment = Tensor::full(&[2, 3], 1e-3);
        store
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let store = sample_store();
        let ck = Checkpoint::from_store(&store, serde_json::json!({"epoch": 3}));
        let back = Checkpoint::from_bytes(&ck.to_bytes(Precision::F64), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        let mut fresh = sample_store();
        for p in fresh.params_mut() {
            p.value = p.value.map(|_| 0.0);
            p.step = 0;
        }
        back.restore_into(&mut fresh).unwrap();
        for (p, q) in store.params().iter().zip(fresh.params()) {
            assert_eq!(p.value, q.value);
            assert_eq!(p.first_moment, q.first_moment);
            assert_eq!(p.step, q.step);
        }
        assert_eq!(fresh.all_stats(), store.all_stats());
    }

    #[test]
    fn f32_container_is_readable() {
        let ck = Checkpoint::from_store(&sample_store(), serde_json::Value::Null);
        let bytes = ck.to_bytes(Precision::F32);
        assert_eq!(&bytes[12..16], &1u32.to_le_bytes());
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        let (a, b) = (ck.tensor("a").unwrap(), back.tensor("a").unwrap());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(*y, *x as f32 as f64);
        }
    }

    #[test]
    fn header_layout() {
        let ck = Checkpoint::from_store(&sample_store(), serde_json::Value::Null);
        let bytes = ck.to_bytes(Precision::F64);
        assert_eq!(&bytes[..8], b"SEPKCKPT");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize, ck.tensors.len());
        // First tensor: name "a", 2 dims [2, 3].
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1);
        assert_eq!(bytes[24], b'a');
        assert_eq!(u32::from_le_bytes(bytes[25..29].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[29..37].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[37..45].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[45..53].try_into().unwrap()), 0.1);
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let bytes = Checkpoint::from_store(&sample_store(), serde_json::Value::Null).to_bytes(Precision::F64);
        let p = Path::new("x.ckpt");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Format { .. })));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], p), Err(Error::Format { .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::from_bytes(&extra, p), Err(Error::Format { .. })));
        let mut version = bytes;
        version[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&version, p), Err(Error::Format { .. })));
    }

    #[test]
    fn shape_mismatch_on_restore_is_config_error() {
        let ck = Checkpoint::from_store(&sample_store(), serde_json::Value::Null);
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[3, 2]), true);
        assert!(matches!(ck.restore_into(&mut other), Err(Error::Config(_))));
        let mut missing = ParamStore::new();
        missing.add("zzz", Tensor::zeros(&[1]), true);
        assert!(matches!(ck.restore_into(&mut missing), Err(Error::Config(m)) if m.contains("zzz")));
    }
}
