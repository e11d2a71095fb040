//! Named parameters and the `NRIT1` binary checkpoint format.
//!
//! A checkpoint is the magic `NRIT1` followed by one record per tensor:
//! name length (`u32` LE), UTF-8 name, rank (`u32` LE), each dimension
//! (`u32` LE), then the raw values as `f64` LE. Records run to end of file.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NritError, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"NRIT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub gradient: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let gradient = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            gradient,
        }
    }
}

/// An ordered collection of uniquely named parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NritError::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter::new(name, value));
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds `grads[i]` into parameter `i`'s gradient slot.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.iter() {
            self.params[id.0].gradient.add_assign(g);
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.gradient.fill(0.0);
        }
    }

    /// Parameters whose values differ bitwise between two stores with the same layout.
    pub fn diff_names(&self, other: &ParamStore) -> Vec<String> {
        self.params
            .iter()
            .zip(&other.params)
            .filter(|(a, b)| a.name != b.name || !a.value.bits_eq(&b.value))
            .map(|(a, _)| a.name.clone())
            .collect()
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let entries: Vec<(&str, &Tensor)> = self
            .params
            .iter()
            .map(|p| (p.name.as_str(), &p.value))
            .collect();
        encode_tensors(&entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    /// Overwrites values from a checkpoint. Every stored parameter must be
    /// present with the same shape, and nothing may be missing.
    pub fn load_values(&mut self, path: &Path) -> Result<()> {
        let bytes = fs::read(path)?;
        self.load_values_from_bytes(&bytes)
    }

    pub fn load_values_from_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let entries = decode_tensors(bytes)?;
        if entries.len() != self.params.len() {
            return Err(NritError::format(
                "checkpoint",
                format!("{} tensors, model has {}", entries.len(), self.params.len()),
            ));
        }
        for (name, value) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| NritError::format("checkpoint", format!("unknown parameter {name}")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(NritError::format(
                    "checkpoint",
                    format!("{name}: shape {:?} vs {:?}", value.shape(), p.value.shape()),
                ));
            }
            p.value = value;
        }
        Ok(())
    }
}

/// Sparse per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    entries: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, id: ParamId, grad: Tensor) {
        match self.entries.iter_mut().find(|(i, _)| *i == id) {
            Some((_, g)) => g.add_assign(&grad),
            None => self.entries.push((id, grad)),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(i, g)| (*i, g))
    }
}

pub fn encode_tensors(entries: &[(&str, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut cur = bytes;
    let mut magic = [0u8; 5];
    cur.read_exact(&mut magic)
        .map_err(|_| NritError::format("checkpoint", "truncated header"))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NritError::format("checkpoint", "bad magic"));
    }
    let mut out = Vec::new();
    while !cur.is_empty() {
        let name_len = read_u32(&mut cur)? as usize;
        if cur.len() < name_len {
            return Err(NritError::format("checkpoint", "truncated name"));
        }
        let name = std::str::from_utf8(&cur[..name_len])
            .map_err(|_| NritError::format("checkpoint", "name is not UTF-8"))?
            .to_string();
        cur = &cur[name_len..];
        let rank = read_u32(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut cur)? as usize);
        }
        let n: usize = shape.iter().product();
        if cur.len() < n * 8 {
            return Err(NritError::format("checkpoint", format!("truncated values for {name}")));
        }
        let data = cur[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cur = &cur[n * 8..];
        let t = Tensor::new(shape, data).map_err(|e| NritError::format("checkpoint", e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

fn read_u32(cur: &mut &[u8]) -> Result<u32> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf)
        .map_err(|_| NritError::format("checkpoint", "truncated record"))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_tensors(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_tensors(entries))?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode_tensors(&fs::read(path)?)
}
