use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Real, Tensor};
use crate::error::{Error, Result};
use crate::nn::wire::{put_str, put_u32, Reader};

/// Dense `f32` parameter value.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!("param shape {shape:?} vs {} values", data.len())));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let dist = Normal::new(0.0f32, std).expect("finite std");
        Self {
            shape: shape.to_vec(),
            data: (0..shape.iter().product()).map(|_| dist.sample(rng)).collect(),
        }
    }
}

/// Gradients keyed by parameter path.
pub type Grads = BTreeMap<String, Vec<f32>>;

/// Named parameters with a frozen subset. Paths iterate in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: BTreeMap<String, Param>,
    frozen: BTreeSet<String>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, p: Param) -> Result<()> {
        let path = path.into();
        if self.params.contains_key(&path) {
            return Err(Error::Contract(format!("duplicate parameter path {path}")));
        }
        self.params.insert(path, p);
        Ok(())
    }

    /// Inserts or replaces.
    pub fn set(&mut self, path: impl Into<String>, p: Param) {
        self.params.insert(path.into(), p);
    }

    pub fn get(&self, path: &str) -> Result<&Param> {
        self.params
            .get(path)
            .ok_or_else(|| Error::Config(format!("missing parameter {path}")))
    }

    pub fn get_mut(&mut self, path: &str) -> Result<&mut Param> {
        self.params
            .get_mut(path)
            .ok_or_else(|| Error::Config(format!("missing parameter {path}")))
    }

    pub fn contains(&self, path: &str) -> bool {
        self.params.contains_key(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|k| k.as_str())
    }

    pub fn freeze(&mut self, path: &str) -> Result<()> {
        if !self.contains(path) {
            return Err(Error::Config(format!("cannot freeze unknown parameter {path}")));
        }
        self.frozen.insert(path.to_string());
        Ok(())
    }

    /// Freezes every path starting with `prefix`; returns how many matched.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        let hits: Vec<String> = self.params.keys().filter(|k| k.starts_with(prefix)).cloned().collect();
        let n = hits.len();
        self.frozen.extend(hits);
        n
    }

    pub fn is_frozen(&self, path: &str) -> bool {
        self.frozen.contains(path)
    }

    pub fn frozen_paths(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(|s| s.as_str())
    }

    pub fn trainable_paths(&self) -> impl Iterator<Item = &str> {
        self.params.keys().filter(|k| !self.frozen.contains(*k)).map(|k| k.as_str())
    }

    pub fn num_elements(&self, frozen: Option<bool>) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| frozen.is_none_or(|f| self.frozen.contains(*k) == f))
            .map(|(_, p)| p.data.len())
            .sum()
    }

    /// Copy of the parameters whose path satisfies `keep`, frozen flags included.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> ParamSet {
        let params: BTreeMap<String, Param> = self
            .params
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let frozen = self.frozen.iter().filter(|k| params.contains_key(*k)).cloned().collect();
        ParamSet { params, frozen }
    }

    pub fn remove_where(&mut self, drop: impl Fn(&str) -> bool) {
        self.params.retain(|k, _| !drop(k));
        self.frozen.retain(|k| !drop(k));
    }

    /// Adds every entry of `other`; paths must not collide.
    pub fn extend(&mut self, other: ParamSet) -> Result<()> {
        for (k, v) in other.params {
            self.insert(k, v)?;
        }
        self.frozen.extend(other.frozen);
        Ok(())
    }

    /// Leaf for `path` in `g`, created once per graph. Frozen parameters do not
    /// require gradients.
    pub fn bind<T: Real>(&self, g: &mut Graph<T>, path: &str) -> Result<Tensor> {
        if let Some(t) = g.named(path) {
            return Ok(t);
        }
        let p = self.get(path)?;
        let t = g.tensor_f32(&p.shape, &p.data, !self.is_frozen(path))?;
        g.insert_named(path, t);
        Ok(t)
    }

    /// Gradients for every trainable path after `g.backward`; paths that were
    /// never bound in `g` get zeros.
    pub fn grads_from<T: Real>(&self, g: &Graph<T>) -> Grads {
        self.trainable_paths()
            .map(|path| {
                let n = self.params[path].data.len();
                let grad = g
                    .named(path)
                    .and_then(|t| g.grad(t))
                    .map(|v| v.into_iter().map(|x| x.to32()).collect())
                    .unwrap_or_else(|| vec![0.0; n]);
                (path.to_string(), grad)
            })
            .collect()
    }

    /// Parameter table: u32 count, then per entry a length-prefixed UTF-8 path,
    /// u32 rank, u32 dims and raw little-endian `f32` values. All integers are
    /// little-endian.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_table(&mut out, self.params.iter().map(|(k, v)| (k.as_str(), v)));
        out
    }

    pub fn deserialize(bytes: &[u8]) -> Result<ParamSet> {
        let mut r = Reader::new(bytes);
        let params = read_table(&mut r)?;
        if r.remaining() != 0 {
            return Err(Error::format(format!("{} trailing bytes after parameter table", r.remaining())));
        }
        Ok(params)
    }
}

pub(crate) fn write_table<'a>(out: &mut Vec<u8>, entries: impl ExactSizeIterator<Item = (&'a str, &'a Param)>) {
    put_u32(out, entries.len() as u32);
    for (path, p) in entries {
        put_str(out, path);
        put_u32(out, p.shape.len() as u32);
        for &d in &p.shape {
            put_u32(out, d as u32);
        }
        for v in &p.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) fn read_table(r: &mut Reader) -> Result<ParamSet> {
    let count = r.u32("entry count")? as usize;
    let mut set = ParamSet::new();
    for _ in 0..count {
        let path = r.string("parameter path")?;
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(format!("implausible rank {rank} for {path}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(format!("shape overflow for {path}")))?;
        let bytes = r.take(
            n.checked_mul(4).ok_or_else(|| Error::format("size overflow"))?,
            "parameter values",
        )?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        set.insert(path.clone(), Param { shape, data })
            .map_err(|_| Error::format(format!("duplicate path {path}")))?;
    }
    Ok(set)
}
