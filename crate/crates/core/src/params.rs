//! Named parameter storage and the binary checkpoint format.
//!
//! A [`ParamStore`] owns trainable tensors, non-trainable buffers (batch-norm
//! running statistics) and per-parameter optimizer state, all keyed by the
//! same stable string path. Iteration order is the lexicographic order of
//! names, so every consumer sees parameters in one deterministic order.
//!
//! Checkpoint layout (all integers little-endian), documented in
//! `docs/checkpoint-format.md`:
//!
//! ```text
//! magic        4 bytes  "PDCK"
//! version      u32      1
//! width        u8       bytes per scalar (4 = f32, 8 = f64)
//! entries      u32
//! entry*:
//!   section    u8       0 param | 1 buffer | 2 first moment | 3 second moment | 4 step
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   ndim       u32      (0 for step entries)
//!   dims       ndim × u64
//!   payload    product(dims) scalars, row-major; step entries carry one u64
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{numel, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"PDCK";
const VERSION: u32 = 1;

/// Optimizer state tracked for one parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MomentState<T> {
    pub step: u64,
    /// SGD momentum buffer, or Adam's first moment.
    pub first: Option<Vec<T>>,
    /// Adam's second moment.
    pub second: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
struct Entry<T> {
    tensor: Tensor<T>,
    state: MomentState<T>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Entry<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    /// Registers a trainable tensor. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        t.requires_grad = true;
        self.params.insert(
            name,
            Entry {
                tensor: t,
                state: MomentState::default(),
            },
        );
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate buffer name `{name}`")));
        }
        self.buffers.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor<T>> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffers.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, e)| (k.as_str(), &e.tensor))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, e)| (k.as_str(), &mut e.tensor))
    }

    /// Parameters with their optimizer state, in name order.
    pub fn iter_with_state(
        &mut self,
    ) -> impl Iterator<Item = (&str, &mut Tensor<T>, &mut MomentState<T>)> {
        self.params
            .iter_mut()
            .map(|(k, e)| (k.as_str(), &mut e.tensor, &mut e.state))
    }

    pub fn state(&self, name: &str) -> Option<&MomentState<T>> {
        self.params.get(name).map(|e| &e.state)
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.values().map(|e| e.tensor.len()).sum()
    }

    /// Parameters and buffers converted to another precision, without
    /// gradients or optimizer state.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (k, e) in &self.params {
            out.insert(k.clone(), e.tensor.cast()).expect("names are unique");
        }
        for (k, b) in &self.buffers {
            out.insert_buffer(k.clone(), b.cast()).expect("names are unique");
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for e in self.params.values_mut() {
            e.tensor.clear_grad();
        }
    }

    /// Adds `grad` into the named parameter's gradient buffer.
    pub fn accumulate_grad(&mut self, name: &str, grad: &[T]) -> Result<()> {
        let t = self
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
        match t.grad_mut() {
            Some(acc) => {
                for (a, &g) in acc.iter_mut().zip(grad) {
                    *a = *a + g;
                }
                Ok(())
            }
            None => t.set_grad(grad.to_vec()),
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params
            .values()
            .all(|e| e.tensor.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        let mut entries: Vec<(u8, &str, &[usize], Payload<'_, T>)> = Vec::new();
        for (k, e) in &self.params {
            entries.push((0, k, e.tensor.shape(), Payload::Data(e.tensor.data())));
        }
        for (k, t) in &self.buffers {
            entries.push((1, k, t.shape(), Payload::Data(t.data())));
        }
        for (k, e) in &self.params {
            let (s, shape) = (&e.state, e.tensor.shape());
            if let Some(f) = &s.first {
                entries.push((2, k, shape, Payload::Data(f)));
            }
            if let Some(v) = &s.second {
                entries.push((3, k, shape, Payload::Data(v)));
            }
            entries.push((4, k, &[], Payload::Step(s.step)));
        }
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (section, name, shape, payload) in entries {
            out.push(section);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match payload {
                Payload::Data(d) => {
                    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                    for &dim in shape {
                        out.extend_from_slice(&(dim as u64).to_le_bytes());
                    }
                    for &v in d {
                        v.write_le(&mut out);
                    }
                }
                Payload::Step(s) => {
                    out.extend_from_slice(&0u32.to_le_bytes());
                    out.extend_from_slice(&s.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses a checkpoint. Scalars stored at a different width are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic, not a parameter checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported checkpoint version {version}")));
        }
        let width = r.u8()? as usize;
        if width != 4 && width != 8 {
            return Err(r.err(format!("unsupported scalar width {width}")));
        }
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let section = r.u8()?;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.err("parameter name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            if section == 4 {
                let step = r.u64()?;
                store.state_entry(&name, &r)?.step = step;
                continue;
            }
            let n = numel(&shape);
            let raw = r.take(n.checked_mul(width).ok_or_else(|| r.err("tensor too large"))?)?;
            let data: Vec<T> = raw
                .chunks(width)
                .map(|ch| {
                    if width == 4 {
                        T::from_f64(f32::from_le_bytes(ch.try_into().expect("4")) as f64)
                    } else {
                        T::from_f64(f64::from_le_bytes(ch.try_into().expect("8")))
                    }
                })
                .collect();
            match section {
                0 => store.insert(name, Tensor::new(shape, data)?)?,
                1 => store.insert_buffer(name, Tensor::new(shape, data)?)?,
                2 => store.state_entry(&name, &r)?.first = Some(data),
                3 => store.state_entry(&name, &r)?.second = Some(data),
                s => return Err(r.err(format!("unknown section tag {s}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last entry"));
        }
        Ok(store)
    }

    fn state_entry(&mut self, name: &str, r: &Reader<'_>) -> Result<&mut MomentState<T>> {
        self.params
            .get_mut(name)
            .map(|e| &mut e.state)
            .ok_or_else(|| r.err(format!("optimizer state for unknown parameter `{name}`")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

enum Payload<'a, T> {
    Data(&'a [T]),
    Step(u64),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            position: format!("byte {}", self.pos),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("unexpected end of checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}
