//! `RTLW` named-tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "RTLW"
//! version u16
//! count   u32
//! count x { name_len u16, name utf-8, dtype u8 (0 = f64, 1 = f32),
//!           rank u8, dims u32 x rank, data }
//! ```

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::Module;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RTLW";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::F32(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

/// In-memory image of a weight file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    tensors: IndexMap<String, StoredTensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LoadPolicy {
    /// The file and the model must hold exactly the same names and shapes.
    Strict,
    /// Copy every file tensor whose name exists in the model.
    PrefixMatch,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LoadReport {
    /// Model tensors overwritten from the file.
    pub copied: Vec<String>,
    /// File tensors with no counterpart in the model.
    pub skipped: Vec<String>,
    /// Model tensors the file did not provide.
    pub untouched: Vec<String>,
    /// Whether batch-norm running statistics were among the copied tensors.
    pub running_stats_transferred: bool,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Snapshot of every tensor of `model` as `f64`.
    pub fn from_module<M: Module + ?Sized>(model: &M) -> Self {
        let mut ws = Self::new();
        for store in model.stores() {
            for (name, entry) in store.iter() {
                ws.insert(
                    name,
                    StoredTensor {
                        shape: entry.tensor.shape().to_vec(),
                        data: TensorData::F64(entry.tensor.data().to_vec()),
                    },
                );
            }
        }
        ws
    }

    /// Same snapshot with every tensor narrowed to `f32`.
    pub fn from_module_f32<M: Module + ?Sized>(model: &M) -> Self {
        let mut ws = Self::from_module(model);
        for t in ws.tensors.values_mut() {
            t.data = TensorData::F32(t.data.to_f64().iter().map(|&v| v as f32).collect());
        }
        ws
    }

    pub fn insert(&mut self, name: &str, t: StoredTensor) {
        self.tensors.insert(name.to_owned(), t);
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        self.tensors
            .get(name)
            .map(|t| Tensor::new(&t.shape, t.data.to_f64()).expect("stored shape is consistent"))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let count = u32::try_from(self.tensors.len()).map_err(|_| Error::Invalid("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Invalid(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.data.tag());
            let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Invalid(format!("rank too large for {name}")))?;
            out.push(rank);
            for &d in &t.shape {
                let d = u32::try_from(d).map_err(|_| Error::Invalid(format!("dimension too large for {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &t.data {
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(r.corrupt_at(0, format!("bad magic {magic:?}")));
        }
        let version = u16::from_le_bytes(r.array("version")?);
        if version != FORMAT_VERSION {
            return Err(r.corrupt_at(4, format!("unsupported format version {version}")));
        }
        let count = u32::from_le_bytes(r.array("tensor count")?);
        let mut ws = Self::new();
        for _ in 0..count {
            let start = r.pos;
            let len = u16::from_le_bytes(r.array("name length")?) as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| r.corrupt_at(start + 2, "tensor name is not utf-8".into()))?
                .to_owned();
            let tag_pos = r.pos;
            let [tag] = r.array("dtype")?;
            let [rank] = r.array("rank")?;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(r.array("dimension")?) as usize);
            }
            let numel: usize = shape.iter().product();
            let data = match tag {
                0 => TensorData::F64(
                    r.take(numel * 8, "f64 data")?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                1 => TensorData::F32(
                    r.take(numel * 4, "f32 data")?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                other => return Err(r.corrupt_at(tag_pos, format!("unknown dtype tag {other}"))),
            };
            if ws.tensors.contains_key(&name) {
                return Err(r.corrupt_at(start, format!("duplicate tensor `{name}`")));
            }
            ws.tensors.insert(name, StoredTensor { shape, data });
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt_at(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(ws)
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

    /// Copies tensors into `model` according to `policy`. The model is left
    /// untouched when the load is rejected.
    pub fn apply<M: Module + ?Sized>(&self, model: &mut M, policy: LoadPolicy) -> Result<LoadReport> {
        let model_names = model.param_names();
        let mut report = LoadReport::default();
        for name in &model_names {
            let entry = model.find(name).expect("listed");
            match self.tensors.get(name) {
                Some(t) if t.shape != entry.tensor.shape() => {
                    return Err(Error::Load(format!(
                        "shape conflict for `{name}`: file {:?}, model {:?}",
                        t.shape,
                        entry.tensor.shape()
                    )));
                }
                Some(_) => report.copied.push(name.clone()),
                None => report.untouched.push(name.clone()),
            }
        }
        report.skipped = self
            .tensors
            .keys()
            .filter(|k| model.find(k).is_none())
            .cloned()
            .collect();
        if policy == LoadPolicy::Strict && (!report.untouched.is_empty() || !report.skipped.is_empty()) {
            return Err(Error::Load(format!(
                "strict load: {} model tensors missing from file, {} file tensors unknown to model (first: {:?})",
                report.untouched.len(),
                report.skipped.len(),
                report.untouched.first().or(report.skipped.first())
            )));
        }
        for name in &report.copied {
            let src = self.tensors[name].data.to_f64();
            let dst = model.find_mut(name).expect("listed");
            dst.tensor.data_mut().copy_from_slice(&src);
        }
        report.running_stats_transferred = report
            .copied
            .iter()
            .any(|n| n.ends_with(".running_mean") || n.ends_with(".running_var"));
        Ok(report)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt_at(self.pos, format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        let s: &'a [u8] = s;
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn corrupt_at(&self, offset: usize, reason: String) -> Error {
        Error::Corrupt { offset, reason }
    }
}

pub fn save_weights<M: Module + ?Sized>(model: &M, path: impl AsRef<Path>) -> Result<()> {
    WeightStore::from_module(model).save(path)
}

pub fn load_weights<M: Module + ?Sized>(model: &mut M, path: impl AsRef<Path>, policy: LoadPolicy) -> Result<LoadReport> {
    WeightStore::load(path)?.apply(model, policy)
}
