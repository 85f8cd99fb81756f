use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{Graph, Value};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Position of a parameter inside its [`Checkpoint`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    lookup: HashMap<String, usize>,
}

impl<T: Real> Default for Checkpoint<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    offset: usize,
    shape: Vec<usize>,
    dtype: DType,
}

#[derive(Serialize, Deserialize)]
struct Index {
    params: Vec<IndexEntry>,
}

const MAGIC: &[u8; 8] = b"HCKPT001";

impl<T: Real> Checkpoint<T> {
    pub fn new() -> Self {
        Checkpoint { names: Vec::new(), tensors: Vec::new(), lookup: HashMap::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.lookup.contains_key(&name), "duplicate parameter `{name}`");
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.lookup.get(name).map(|&i| &self.tensors[i])
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copy every entry whose name starts with `from` into `self` under the
    /// same suffix prefixed by `to`. Returns how many entries were copied.
    pub fn load_prefixed(&mut self, src: &Checkpoint<T>, from: &str, to: &str) -> Result<usize> {
        let mut n = 0;
        for (name, t) in src.iter() {
            let Some(rest) = name.strip_prefix(from) else { continue };
            let target = format!("{to}{rest}");
            let Some(&i) = self.lookup.get(&target) else { continue };
            if self.tensors[i].shape() != t.shape() {
                return Err(Error::Dimension(format!(
                    "`{target}` is {:?} but source `{name}` is {:?}",
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
            self.tensors[i] = t.clone();
            n += 1;
        }
        Ok(n)
    }

    /// Bind every parameter as a graph leaf; `trainable(id)` controls whether
    /// gradients are tracked.
    pub fn bind(&self, g: &mut Graph<T>, trainable: impl Fn(ParamId) -> bool) -> Vec<Value> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| g.leaf(t.clone(), trainable(ParamId(i))))
            .collect()
    }

    /// Collect gradients of bound leaves after `Graph::backward`.
    pub fn collect_grads(&self, g: &Graph<T>, bound: &[Value]) -> Grads<T> {
        Grads { per_param: bound.iter().map(|&v| g.grad(v).cloned()).collect() }
    }

    pub fn max_abs_diff(&self, other: &Checkpoint<T>) -> f64 {
        self.tensors.iter().zip(&other.tensors).map(|(a, b)| a.max_abs_diff(b)).fold(0.0, f64::max)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let mut params = Vec::with_capacity(self.len());
        for (name, t) in self.iter() {
            params.push(IndexEntry { name: name.to_string(), offset, shape: t.shape().to_vec(), dtype: T::DTYPE });
            offset += t.len() * T::DTYPE.size();
        }
        let index = serde_json::to_vec(&Index { params }).expect("index serializes");
        let mut out = Vec::with_capacity(16 + index.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        for t in &self.tensors {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let ilen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let istart: usize = 16;
        let iend = istart.checked_add(ilen).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Format("truncated checkpoint index".into()))?;
        let index: Index = serde_json::from_slice(&bytes[istart..iend])
            .map_err(|e| Error::Format(format!("checkpoint index: {e}")))?;
        let data = &bytes[iend..];
        let mut ck = Checkpoint::new();
        for e in index.params {
            if e.dtype != T::DTYPE {
                return Err(Error::Format(format!(
                    "`{}` stored as {:?}, expected {:?}",
                    e.name,
                    e.dtype,
                    T::DTYPE
                )));
            }
            let n: usize = e.shape.iter().product();
            let sz = e.dtype.size();
            let end = e.offset + n * sz;
            if end > data.len() {
                return Err(Error::Format(format!("`{}` runs past end of file", e.name)));
            }
            let vals: Vec<T> = data[e.offset..end].chunks_exact(sz).map(T::read_le).collect();
            ck.push(e.name, Tensor::new(e.shape, vals)?);
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Gradients aligned with a checkpoint's parameter order. `None` marks a
/// frozen parameter.
#[derive(Clone, Debug)]
pub struct Grads<T> {
    pub per_param: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn zeros_like(ck: &Checkpoint<T>) -> Self {
        Grads { per_param: ck.tensors.iter().map(|t| Some(Tensor::zeros(t.shape()))).collect() }
    }

    /// Elementwise sum in argument order.
    pub fn accumulate(&mut self, other: &Grads<T>) {
        for (a, b) in self.per_param.iter_mut().zip(&other.per_param) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(b),
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for t in self.per_param.iter_mut().flatten() {
            t.scale_assign(c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_wrong_dtype() {
        let mut a = Checkpoint::<f32>::new();
        a.push("w", Tensor::zeros(&[2]));
        assert!(matches!(Checkpoint::<f64>::from_bytes(&a.to_bytes()), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::<f32>::from_bytes(b"hello").is_err());
    }

    proptest! {
        #[test]
        fn byte_roundtrip_is_exact(vals in proptest::collection::vec(proptest::num::f32::ANY, 1..40), split in 1usize..39) {
            let split = split.min(vals.len());
            let mut ck = Checkpoint::<f32>::new();
            ck.push("a.w", Tensor::new(vec![vals.len()], vals.clone()).unwrap());
            ck.push("b", Tensor::new(vec![split], vals[..split].to_vec()).unwrap());
            let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes()).unwrap();
            for ((na, ta), (nb, tb)) in ck.iter().zip(back.iter()) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(ta.shape(), tb.shape());
                let bits_a: Vec<u32> = ta.data().iter().map(|x| x.to_bits()).collect();
                let bits_b: Vec<u32> = tb.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
