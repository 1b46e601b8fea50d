//! Named parameter tensors, graph binding, and the binary tensor file format.
//!
//! File layout: the 8-byte magic `CTCALCK1`, a little-endian `u64` header
//! length, a JSON header, then every tensor's data as little-endian f32 in
//! header order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ctcal_autodiff::{Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TENSOR_FILE_MAGIC: &[u8; 8] = b"CTCALCK1";
pub const TENSOR_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a tensor. Names are unique; re-adding a name panics.
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.names.len() - 1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect(), index: self.index.clone() }
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout<U: Real>(&self, other: &ParamStore<U>) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// SHA-256 over names, shapes and value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.names.iter().zip(&self.tensors) {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Place every tensor on the graph, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound { leaves: if trainable { vars.clone() } else { Vec::new() }, vars }
    }
}

/// Graph handles for one [`ParamStore`]. Entries may be overridden (adapters).
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    leaves: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Leaf variables in parameter order; empty when bound as constants.
    pub fn leaves(&self) -> &[Var] {
        &self.leaves
    }

    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

/// Seeded initializer that appends parameters to a store.
pub struct Init<'a, T> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let t = Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut self.rng)));
        self.store.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.store.add(name, Tensor::ones(shape))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorFileHeader {
    version: u32,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Write `tmp` then rename over `path`, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_tensors(meta: serde_json::Value, store: &ParamStore<f32>) -> Result<Vec<u8>> {
    let header = TensorFileHeader {
        version: TENSOR_FILE_VERSION,
        meta,
        tensors: store.iter().map(|(_, n, t)| TensorEntry { name: n.to_string(), shape: t.shape().to_vec() }).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 4 * store.num_scalars());
    out.extend_from_slice(TENSOR_FILE_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<(serde_json::Value, ParamStore<f32>)> {
    let mut r = bytes;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_FILE_MAGIC {
        return Err(Error::Config("not a tensor file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if r.len() < len {
        return Err(Error::Config("truncated tensor file header".into()));
    }
    let header: TensorFileHeader = serde_json::from_slice(&r[..len])?;
    if header.version != TENSOR_FILE_VERSION {
        return Err(Error::VersionMismatch { found: header.version, expected: TENSOR_FILE_VERSION });
    }
    let mut data = &r[len..];
    let mut store = ParamStore::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if data.len() < 4 * n {
            return Err(Error::Config(format!("truncated data for tensor `{}`", e.name)));
        }
        let values = data[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        data = &data[4 * n..];
        store.add(e.name, Tensor::new(&e.shape, values)?);
    }
    if !data.is_empty() {
        return Err(Error::Config(format!("{} trailing bytes in tensor file", data.len())));
    }
    Ok((header.meta, store))
}

pub fn save_tensors(path: &Path, meta: serde_json::Value, store: &ParamStore<f32>) -> Result<()> {
    write_atomic(path, &encode_tensors(meta, store)?)
}

pub fn load_tensors(path: &Path) -> Result<(serde_json::Value, ParamStore<f32>)> {
    decode_tensors(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_file_round_trip_is_exact() {
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(&mut store, 3);
        init.normal("a.w", &[3, 4], 1.0);
        init.zeros("a.b", &[4]);
        init.normal("scalar", &[], 0.1);
        let bytes = encode_tensors(serde_json::json!({"k": 1}), &store).unwrap();
        let (meta, back) = decode_tensors(&bytes).unwrap();
        assert_eq!(meta["k"], 1);
        assert_eq!(back, store);
        assert_eq!(back.fingerprint(), store.fingerprint());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let store = ParamStore::<f32>::new();
        let mut bytes = encode_tensors(serde_json::Value::Null, &store).unwrap();
        bytes[0] = b'X';
        assert!(decode_tensors(&bytes).is_err());
        let mut store = ParamStore::<f32>::new();
        store.add("x", Tensor::ones(&[4]));
        let bytes = encode_tensors(serde_json::Value::Null, &store).unwrap();
        assert!(decode_tensors(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn bind_constants_has_no_leaves() {
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::ones(&[2]));
        let mut g = Graph::new();
        let b = store.bind(&mut g, false);
        assert!(b.leaves().is_empty());
        assert!(!g.requires_grad(b.get(ParamId(0))));
    }
}
