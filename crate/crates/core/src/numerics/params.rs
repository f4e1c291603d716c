use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Real, Tensor2D};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor2D<T>,
    pub frozen: bool,
}

/// Named parameter tensors with trainable/frozen flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a tensor. Panics on a duplicate name.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2D<T>, frozen: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value,
            frozen,
        });
        ParamId(id)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor2D<T> {
        &self.params[id.0].value
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2D<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.len())
            .sum()
    }

    /// `(name, rows, cols)` of every trainable tensor, in registration order.
    pub fn trainable_census(&self) -> Vec<(String, usize, usize)> {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| (p.name.clone(), p.value.rows(), p.value.cols()))
            .collect()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            slots: self
                .params
                .iter()
                .map(|p| Tensor2D::zeros(p.value.rows(), p.value.cols()))
                .collect(),
            frozen: self.params.iter().map(|p| p.frozen).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Gradient accumulators, one slot per parameter. Slots of frozen
/// parameters never receive anything.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    slots: Vec<Tensor2D<T>>,
    frozen: Vec<bool>,
}

impl<T: Real> Grads<T> {
    #[inline]
    pub fn wants(&self, id: ParamId) -> bool {
        !self.frozen[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor2D<T> {
        &self.slots[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Tensor2D<T>) {
        if self.wants(id) {
            self.slots[id.0].add_assign(g);
        }
    }

    pub fn accumulate_scaled(&mut self, id: ParamId, g: &Tensor2D<T>, s: T) {
        if self.wants(id) {
            self.slots[id.0].add_scaled(g, s);
        }
    }

    /// Adds `g` into row `row` of the slot.
    pub fn accumulate_row(&mut self, id: ParamId, row: usize, g: &[T]) {
        if self.wants(id) {
            for (a, &b) in self.slots[id.0].row_mut(row).iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.slots.iter_mut().for_each(|t| t.scale(s));
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor2D<T>)> {
        self.slots.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(Tensor2D::is_finite)
    }
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub frozen: bool,
    /// Offset into the binary file, in scalars.
    pub offset: usize,
}

/// JSON manifest describing the binary checkpoint body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

/// Writes `<stem>.bin` (little-endian f64 values) and `<stem>.json`.
pub fn save_checkpoint<T: Real>(
    store: &ParamStore<T>,
    dir: &Path,
    stem: &str,
    metadata: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let mut body = Vec::new();
    let mut tensors = Vec::with_capacity(store.len());
    let mut offset = 0;
    for (_, p) in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: [p.value.rows(), p.value.cols()],
            frozen: p.frozen,
            offset,
        });
        offset += p.value.len();
        for v in p.value.as_slice() {
            let v = v.to_f64().expect("finite scalar");
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        dtype: "f64-le".into(),
        tensors,
        metadata,
    };
    fs::create_dir_all(dir)?;
    fs::File::create(dir.join(format!("{stem}.bin")))?.write_all(&body)?;
    fs::write(
        dir.join(format!("{stem}.json")),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(dir: &Path, stem: &str) -> Result<(ParamStore<T>, CheckpointManifest)> {
    let manifest: CheckpointManifest =
        serde_json::from_str(&fs::read_to_string(dir.join(format!("{stem}.json")))?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    let mut body = Vec::new();
    fs::File::open(dir.join(format!("{stem}.bin")))?.read_to_end(&mut body)?;
    let mut store = ParamStore::new();
    for e in &manifest.tensors {
        let n = e.shape[0] * e.shape[1];
        let start = e.offset * 8;
        let end = start + n * 8;
        if end > body.len() {
            return Err(Error::Checkpoint(format!("tensor {} truncated", e.name)));
        }
        let data = body[start..end]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        store.insert(
            e.name.clone(),
            Tensor2D::from_vec(e.shape[0], e.shape[1], data),
            e.frozen,
        );
    }
    Ok((store, manifest))
}
