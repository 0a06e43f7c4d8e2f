use std::collections::BTreeMap;

use rand::RngExt;
use rand_distr::{Distribution, Normal};

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub frozen: bool,
}

/// Named parameter tensors with gradient buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    by_name: BTreeMap<String, ParamId>,
}

/// Initialization schemes used by the layers in this crate.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Const(f64),
    /// Uniform in `[-bound, bound]` with `bound = gain / sqrt(fan_in)`.
    Uniform { fan_in: usize, gain: f64 },
    Normal { std: f64 },
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: value.with_requires_grad(true),
            frozen: false,
        });
        Ok(id)
    }

    pub fn init<R: rand::Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        let data: Vec<S> = match init {
            Init::Zeros => vec![S::zero(); n],
            Init::Const(c) => vec![S::of(c); n],
            Init::Uniform { fan_in, gain } => {
                let bound = gain / (fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| S::of(rng.random_range(-bound..=bound)))
                    .collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| Error::Parameter(e.to_string()))?;
                (0..n).map(|_| S::of(dist.sample(rng))).collect()
            }
        };
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::NotFound(format!("parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<S>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
            p.value.zero_grad();
        }
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = true;
            p.value.zero_grad();
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(|p| p.value.len())
            .sum()
    }

    /// Overwrites values of parameters whose names appear in `tensors`.
    /// Every parameter of the store must be present with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor<S>)]) -> Result<()> {
        let lookup: BTreeMap<&str, &Tensor<S>> =
            tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for p in &mut self.params {
            let t = lookup
                .get(p.name.as_str())
                .ok_or_else(|| Error::NotFound(format!("tensor {} in checkpoint", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::shape("load_named", p.value.shape(), t.shape()));
            }
            p.value.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor<S>)> {
        self.params
            .iter()
            .map(|p| {
                let mut t = p.value.clone();
                t.zero_grad();
                (p.name.clone(), t)
            })
            .collect()
    }

    /// FNV-1a over names and value bits; used to verify frozen weights.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for v in p.value.data() {
                eat(&v.to_f64_lossy().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast::<T>().with_requires_grad(true),
                    frozen: p.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}
