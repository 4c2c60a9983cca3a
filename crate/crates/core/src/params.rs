//! Named parameter tensors, their gradients, and the checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "HBAFCKPT" | version u16 | metadata_len u32 | metadata (UTF-8 JSON)
//! count u32 | count x { name_len u32 | name | rows u32 | cols u32 | rows*cols f64 }
//! sha256 of every preceding byte (32 bytes)
//! ```

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::Matrix;
use crate::error::{HbafError, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"HBAFCKPT";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Matrix,
}

/// Every learnable tensor of a model, addressed by a stable dotted name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Matrix) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(HbafError::Config(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn sum_squares(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|e| e.value.iter())
            .map(|v| v * v)
            .sum()
    }

    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.value.iter().any(|v| !v.is_finite()))
            .map(|e| e.name.as_str())
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix) {
                e.value.fill(0.0);
            }
        }
    }

    /// Copies values from `other` for every name both stores share with equal shapes.
    pub fn copy_matching(&mut self, other: &ParameterStore) -> usize {
        let mut copied = 0;
        for e in &mut self.entries {
            if let Some(v) = other.get(&e.name) {
                if v.dim() == e.value.dim() {
                    e.value.assign(v);
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn to_checkpoint_bytes(&self, metadata: &str) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.write_u16::<LittleEndian>(CHECKPOINT_VERSION).unwrap();
        buf.write_u32::<LittleEndian>(metadata.len() as u32).unwrap();
        buf.extend_from_slice(metadata.as_bytes());
        buf.write_u32::<LittleEndian>(self.entries.len() as u32)
            .unwrap();
        for e in &self.entries {
            buf.write_u32::<LittleEndian>(e.name.len() as u32).unwrap();
            buf.extend_from_slice(e.name.as_bytes());
            buf.write_u32::<LittleEndian>(e.value.nrows() as u32).unwrap();
            buf.write_u32::<LittleEndian>(e.value.ncols() as u32).unwrap();
            for v in e.value.iter() {
                buf.write_f64::<LittleEndian>(*v).unwrap();
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        buf
    }

    /// Parses a checkpoint, verifying its checksum. Returns the store and its metadata.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<(ParameterStore, String)> {
        let bad = |m: &str| HbafError::Checkpoint(m.to_string());
        if bytes.len() < CHECKPOINT_MAGIC.len() + 32 {
            return Err(bad("file too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut cur = Cursor::new(body);
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = cur.read_u16::<LittleEndian>().map_err(|_| bad("truncated"))?;
        if version != CHECKPOINT_VERSION {
            return Err(HbafError::Checkpoint(format!("unsupported version {version}")));
        }
        let read_string = |cur: &mut Cursor<&[u8]>| -> Result<String> {
            let len = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
            let mut raw = vec![0u8; len];
            cur.read_exact(&mut raw).map_err(|_| bad("truncated"))?;
            String::from_utf8(raw).map_err(|_| bad("invalid utf-8"))
        };
        let metadata = read_string(&mut cur)?;
        let count = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))?;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name = read_string(&mut cur)?;
            let rows = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
            let cols = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated"))? as usize;
            let mut data = vec![0.0; rows * cols];
            cur.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|_| bad("truncated"))?;
            let value = Matrix::from_shape_vec((rows, cols), data).map_err(|e| bad(&e.to_string()))?;
            store.register(&name, value)?;
        }
        if (cur.position() as usize) != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok((store, metadata))
    }

    pub fn save(&self, path: &Path, metadata: &str) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes(metadata)).map_err(|e| HbafError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(ParameterStore, String)> {
        let bytes = std::fs::read(path).map_err(|e| HbafError::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }
}

/// Gradients aligned with a [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Matrix>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        ParamGrads {
            grads: store
                .entries
                .iter()
                .map(|e| Matrix::zeros(e.value.dim()))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.grads[id.0]
    }

    pub fn set(&mut self, id: ParamId, g: Matrix) {
        self.grads[id.0] = g;
    }

    /// Name of the first parameter whose gradient holds a non-finite entry.
    pub fn first_non_finite<'a>(&self, store: &'a ParameterStore) -> Option<&'a str> {
        self.grads
            .iter()
            .zip(&store.entries)
            .find(|(g, _)| g.iter().any(|v| !v.is_finite()))
            .map(|(_, e)| e.name.as_str())
    }

    /// Adds the gradient of `weight * sum(theta^2)`.
    pub fn add_l2(&mut self, store: &ParameterStore, weight: f64) {
        for (g, e) in self.grads.iter_mut().zip(&store.entries) {
            g.zip_mut_with(&e.value, |gv, &p| *gv += 2.0 * weight * p);
        }
    }
}

/// Deterministic parameter initialization.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform(&mut self, rows: usize, cols: usize, fan_in: usize) -> Matrix {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        self.uniform(rows, cols, bound)
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |_| self.rng.random_range(-bound..=bound))
    }
}
