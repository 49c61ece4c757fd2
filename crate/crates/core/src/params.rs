//! Named parameter storage. Modules allocate tensors here at build time and
//! get back stable indices; a forward pass leafs every entry onto the tape
//! in store order, so index i of the leaf list is parameter i.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, ValId};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Reporting bucket for the parameter-structure breakdown.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Bucket {
    Encoder,
    Decoder,
    Other,
}

pub struct Param<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub bucket: Bucket,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ParamIdx(pub usize);

pub struct ParamStore<T: Scalar> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, bucket: Bucket) -> Result<ParamIdx> {
        let name = name.into();
        if self.entries.iter().any(|p| p.name == name) {
            return Err(Error::Param(format!("duplicate parameter name {name}")));
        }
        self.entries.push(Param { name, tensor, bucket });
        Ok(ParamIdx(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: ParamIdx) -> &Param<T> {
        &self.entries[idx.0]
    }

    pub fn get_mut(&mut self, idx: ParamIdx) -> &mut Param<T> {
        &mut self.entries[idx.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamIdx> {
        self.entries.iter().position(|p| p.name == name).map(ParamIdx)
    }

    /// Total scalar count, optionally restricted to one bucket.
    pub fn count(&self, bucket: Option<Bucket>) -> usize {
        self.entries
            .iter()
            .filter(|p| bucket.map(|b| p.bucket == b).unwrap_or(true))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Leafs every parameter onto the tape; result index i corresponds to
    /// store entry i.
    pub fn leaf_all(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<ValId> {
        self.entries.iter().map(|p| tape.leaf(p.tensor.clone(), trainable)).collect()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Uniform init on [lo, hi); draws in f64 so the build is identical for
/// every scalar type.
pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, dims: Vec<usize>, lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| T::of(lo + (hi - lo) * rng.random::<f64>())).collect();
    Tensor::new(dims, data).expect("uniform init dims")
}

pub fn fan_in_uniform<T: Scalar>(rng: &mut ChaCha8Rng, dims: Vec<usize>, fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    uniform(rng, dims, -bound, bound)
}
