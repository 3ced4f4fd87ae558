use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::DiffError;

const MAGIC: &[u8; 8] = b"CETSPPB\0";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub m: Tensor,
    pub v: Tensor,
}

/// Named trainable tensors together with their Adam moments.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamBlock {
    entries: Vec<ParamEntry>,
    step: u64,
}

impl ParamBlock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        let (r, c) = value.shape();
        self.entries.push(ParamEntry { name, value, m: Tensor::zeros(r, c), v: Tensor::zeros(r, c) });
        ParamId(self.entries.len() - 1)
    }

    /// Glorot-uniform weight matrix.
    pub fn add_glorot(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    /// Uniform in `±1/sqrt(rows)`, the usual default for a linear layer with
    /// `rows` inputs.
    pub fn add_fan_in(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let a = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_const(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64) -> ParamId {
        self.add(name, Tensor::from_vec(rows, cols, vec![value; rows * cols]))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Scalar view over all parameters in registration order.
    pub fn scalar(&self, flat: usize) -> f64 {
        let (id, off) = self.locate(flat);
        self.entries[id].value.data()[off]
    }

    pub fn set_scalar(&mut self, flat: usize, v: f64) {
        let (id, off) = self.locate(flat);
        self.entries[id].value.data_mut()[off] = v;
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (i, e) in self.entries.iter().enumerate() {
            if flat < e.value.len() {
                return (i, flat);
            }
            flat -= e.value.len();
        }
        panic!("scalar index out of range");
    }

    /// Bias-corrected Adam with decoupled weight decay.
    pub fn adam_step(&mut self, grads: &Grads, cfg: &AdamConfig) -> Result<(), DiffError> {
        if grads.len() != self.entries.len() {
            return Err(DiffError::Shape { op: "adam_step", lhs: (self.entries.len(), 0), rhs: (grads.len(), 0) });
        }
        for (e, g) in self.entries.iter().zip(&grads.0) {
            if e.value.shape() != g.shape() {
                return Err(DiffError::Shape { op: "adam_step", lhs: e.value.shape(), rhs: g.shape() });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for (e, g) in self.entries.iter_mut().zip(&grads.0) {
            let w = e.value.data_mut().iter_mut();
            let m = e.m.data_mut().iter_mut();
            let v = e.v.data_mut().iter_mut();
            for (((w, m), v), &g) in w.zip(m).zip(v).zip(g.data()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let mhat = *m / c1;
                let vhat = *v / c2;
                *w -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
            }
        }
        Ok(())
    }

    /// Serializes weights (not optimizer moments) with a free-form metadata
    /// map, a version tag and a trailing SHA-256 checksum.
    pub fn to_bytes(&self, meta: &BTreeMap<String, String>) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let meta_text: String = meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta_text.len() as u32).to_le_bytes());
        out.extend_from_slice(meta_text.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.value.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(e.value.cols() as u32).to_le_bytes());
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, BTreeMap<String, String>), DiffError> {
        let bad = |m: &str| DiffError::Checkpoint(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 32 {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(DiffError::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?).map_err(|_| bad("metadata is not UTF-8"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| bad("malformed metadata line"))?;
            meta.insert(k.to_string(), v.to_string());
        }
        let n = r.u32()? as usize;
        let mut block = ParamBlock::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| bad("name is not UTF-8"))?.to_string();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let raw = r.take(rows.checked_mul(cols).and_then(|x| x.checked_mul(8)).ok_or_else(|| bad("shape overflow"))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if block.id(&name).is_some() {
                return Err(DiffError::Checkpoint(format!("duplicate block {name}")));
            }
            block.add(name, Tensor::from_vec(rows, cols, data));
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok((block, meta))
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> std::io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes(meta))?;
        f.sync_all()
    }

    pub fn load(path: &Path) -> Result<(Self, BTreeMap<String, String>), DiffError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| DiffError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }

    /// Copies values from `other` for every entry with matching name and shape.
    /// Returns an error naming the first missing or mis-shaped entry.
    pub fn load_values_from(&mut self, other: &ParamBlock) -> Result<(), DiffError> {
        for e in &mut self.entries {
            let id = other.id(&e.name).ok_or_else(|| DiffError::Checkpoint(format!("missing block {}", e.name)))?;
            let src = other.value(id);
            if src.shape() != e.value.shape() {
                return Err(DiffError::Shape { op: "load", lhs: e.value.shape(), rhs: src.shape() });
            }
            e.value = src.clone();
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DiffError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| DiffError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DiffError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-6 }
    }
}

/// One gradient tensor per parameter entry, in registration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads(pub Vec<Tensor>);

impl Grads {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn zeros_like(p: &ParamBlock) -> Self {
        Self(p.entries.iter().map(|e| Tensor::zeros(e.value.rows(), e.value.cols())).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.0 {
            t.scale_assign(s);
        }
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(Tensor::sq_norm).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Tensor::is_finite)
    }

    /// Scales the whole gradient down to global norm `max` if it exceeds it.
    /// Returns the norm before clipping.
    pub fn clip_norm(&mut self, max: f64) -> f64 {
        let n = self.norm();
        if n > max && n > 0.0 {
            self.scale(max / n);
        }
        n
    }

    /// Flattened scalar at the same indexing as [`ParamBlock::scalar`].
    pub fn scalar(&self, mut flat: usize) -> f64 {
        for t in &self.0 {
            if flat < t.len() {
                return t.data()[flat];
            }
            flat -= t.len();
        }
        panic!("scalar index out of range");
    }
}
