//! Named parameter tensors, gradient accumulators and the checkpoint file.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A learnable tensor. Values are stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Self {
        let t = Tensor { name: name.into(), shape, values };
        assert_eq!(t.values.len(), t.shape.iter().product::<usize>(), "tensor `{}`: value count", t.name);
        t
    }

    /// Shape viewed as a matrix: trailing dimension is the column count.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            dims => {
                let cols = *dims.last().unwrap();
                (self.values.len() / cols.max(1), cols)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, tensor: Tensor) -> ParamId {
        assert!(self.find(&tensor.name).is_none(), "duplicate parameter `{}`", tensor.name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    /// Total number of scalar parameters.
    pub fn n_values(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }
}

/// Gradient buffer of one parameter. Embedding lookups produce sparse
/// row gradients; everything else is dense.
#[derive(Clone, Debug, PartialEq)]
pub enum GradBuf {
    Dense(Vec<f64>),
    Rows { width: usize, rows: BTreeMap<usize, Vec<f64>> },
}

impl GradBuf {
    fn add_dense(&mut self, len: usize, g: &[f64]) {
        self.densify(len);
        if let GradBuf::Dense(d) = self {
            for (a, b) in d.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    fn densify(&mut self, len: usize) {
        if let GradBuf::Rows { width, rows } = self {
            let mut d = vec![0.0; len];
            for (r, v) in rows.iter() {
                d[r * *width..(r + 1) * *width].copy_from_slice(v);
            }
            *self = GradBuf::Dense(d);
        }
    }

    fn add_row(&mut self, row: usize, width: usize, g: &[f64]) {
        match self {
            GradBuf::Dense(d) => {
                for (a, b) in d[row * width..(row + 1) * width].iter_mut().zip(g) {
                    *a += b;
                }
            }
            GradBuf::Rows { rows, .. } => {
                let entry = rows.entry(row).or_insert_with(|| vec![0.0; width]);
                for (a, b) in entry.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        match self {
            GradBuf::Dense(d) => d.iter_mut().for_each(&mut f),
            GradBuf::Rows { rows, .. } => rows.values_mut().flat_map(|r| r.iter_mut()).for_each(&mut f),
        }
    }

    fn sum_sq(&self) -> f64 {
        match self {
            GradBuf::Dense(d) => d.iter().map(|x| x * x).sum(),
            GradBuf::Rows { rows, .. } => rows.values().flatten().map(|x| x * x).sum(),
        }
    }
}

/// Gradient accumulators for every parameter of a store. Buffers are
/// allocated on first use; a missing buffer means an all-zero gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    lens: Vec<usize>,
    widths: Vec<usize>,
    bufs: Vec<Option<GradBuf>>,
}

impl Gradients {
    pub fn new(store: &ParamStore) -> Self {
        Gradients {
            lens: store.iter().map(|t| t.values.len()).collect(),
            widths: store.iter().map(|t| t.matrix_shape().1).collect(),
            bufs: vec![None; store.len()],
        }
    }

    pub fn zero(&mut self) {
        self.bufs.iter_mut().for_each(|b| *b = None);
    }

    pub fn buf(&self, id: ParamId) -> Option<&GradBuf> {
        self.bufs[id.0].as_ref()
    }

    pub(crate) fn accumulate_dense(&mut self, id: ParamId, g: &[f64]) {
        let len = self.lens[id.0];
        debug_assert_eq!(g.len(), len);
        match &mut self.bufs[id.0] {
            Some(b) => b.add_dense(len, g),
            slot @ None => *slot = Some(GradBuf::Dense(g.to_vec())),
        }
    }

    pub(crate) fn accumulate_row(&mut self, id: ParamId, row: usize, g: &[f64]) {
        let width = self.widths[id.0];
        self.bufs[id.0]
            .get_or_insert_with(|| GradBuf::Rows { width, rows: BTreeMap::new() })
            .add_row(row, width, g);
    }

    /// Adds another accumulator (for the same store) into this one.
    pub fn add_assign(&mut self, other: &Gradients) {
        for (i, b) in other.bufs.iter().enumerate() {
            let Some(b) = b else { continue };
            let id = ParamId(i);
            match b {
                GradBuf::Dense(d) => self.accumulate_dense(id, d),
                GradBuf::Rows { rows, .. } => {
                    for (r, v) in rows {
                        self.accumulate_row(id, *r, v);
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for b in self.bufs.iter_mut().flatten() {
            b.for_each_mut(|x| *x *= c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.bufs.iter().flatten().map(GradBuf::sum_sq).sum::<f64>().sqrt()
    }

    /// Rescales so the global norm does not exceed `max_norm`. Returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    /// Dense copy of one parameter's gradient.
    pub fn dense(&self, id: ParamId) -> Vec<f64> {
        let len = self.lens[id.0];
        match &self.bufs[id.0] {
            None => vec![0.0; len],
            Some(GradBuf::Dense(d)) => d.clone(),
            Some(b @ GradBuf::Rows { .. }) => {
                let mut b = b.clone();
                b.densify(len);
                match b {
                    GradBuf::Dense(d) => d,
                    GradBuf::Rows { .. } => unreachable!(),
                }
            }
        }
    }

    pub fn get(&self, id: ParamId, index: usize) -> f64 {
        match &self.bufs[id.0] {
            None => 0.0,
            Some(GradBuf::Dense(d)) => d[index],
            Some(GradBuf::Rows { width, rows }) => rows.get(&(index / width)).map_or(0.0, |r| r[index % width]),
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PGDPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Checkpoint(format!("invalid utf-8: {e}")))
}

/// Writes `magic, version, metadata, entries` where every entry is
/// `name, shape, raw little-endian f64 values`.
pub fn write_checkpoint<W: Write>(mut w: W, metadata: &str, store: &ParamStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    write_u64(&mut w, metadata.len() as u64)?;
    w.write_all(metadata.as_bytes())?;
    write_u64(&mut w, store.len() as u64)?;
    for t in store.iter() {
        write_u32(&mut w, t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        write_u32(&mut w, t.shape.len() as u32)?;
        for &d in &t.shape {
            write_u64(&mut w, d as u64)?;
        }
        let mut bytes = Vec::with_capacity(t.values.len() * 8);
        for v in &t.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(String, ParamStore)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let meta_len = read_u64(&mut r)? as usize;
    let metadata = read_string(&mut r, meta_len)?;
    let count = read_u64(&mut r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let ndim = read_u32(&mut r)? as usize;
        let shape = (0..ndim).map(|_| read_u64(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        store.add(Tensor::new(name, shape, values));
    }
    Ok((metadata, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut store = ParamStore::new();
        store.add(Tensor::new("w", vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1.0 / 7.0]));
        store.add(Tensor::new("b", vec![3], vec![1e300, -2.5, 0.0]));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, "{\"k\":1}", &store).unwrap();
        let (meta, back) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(meta, "{\"k\":1}");
        for (a, b) in store.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            let bits = |t: &Tensor| t.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(read_checkpoint(&b"NOTACKPTxxxx"[..]), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn sparse_and_dense_gradients_merge() {
        let mut store = ParamStore::new();
        let e = store.add(Tensor::new("emb", vec![3, 2], vec![0.0; 6]));
        let mut g = Gradients::new(&store);
        g.accumulate_row(e, 1, &[1.0, 2.0]);
        let mut h = Gradients::new(&store);
        h.accumulate_dense(e, &[1.0; 6]);
        g.add_assign(&h);
        assert_eq!(g.dense(e), vec![1.0, 1.0, 2.0, 3.0, 1.0, 1.0]);
        assert_eq!(g.get(e, 3), 3.0);
        let n = g.clip_global_norm(1.0);
        assert!((n - 17f64.sqrt()).abs() < 1e-12);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
