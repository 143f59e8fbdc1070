use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Learning-rate group: the shared visual trunk runs at a lower rate
/// than the heads and text-side parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    Head,
}

/// A named model parameter with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Flat registry of all model parameters, trainable and frozen.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        group: ParamGroup,
        value: Tensor,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.to_string(),
            group,
            value,
            grad,
            trainable,
        });
        let id = ParamId(self.params.len() - 1);
        self.index.insert(name.to_string(), id.0);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Parameter> {
        self.index
            .get(name)
            .map(|&i| &self.params[i])
            .ok_or_else(|| Error::Lookup(name.to_string()))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i]),
            None => Err(Error::Lookup(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.rows(), p.value.cols());
        }
    }

    /// Total number of trainable scalar entries.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }
}

/// Tracks which parameters entered the tape this forward pass, so the
/// backward sweep can route gradients back into the store. Requesting
/// the same parameter twice reuses the existing leaf.
#[derive(Default)]
pub struct Leaves {
    pub pairs: Vec<(String, super::tape::VarId)>,
}

impl Leaves {
    pub fn new() -> Self {
        Leaves::default()
    }

    pub fn var(
        &mut self,
        tape: &mut super::tape::Tape,
        store: &ParamStore,
        name: &str,
    ) -> Result<super::tape::VarId> {
        if let Some((_, v)) = self.pairs.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let p = store.by_name(name)?;
        let v = tape.leaf(p.value.clone(), p.trainable);
        self.pairs.push((name.to_string(), v));
        Ok(v)
    }

    /// Adds tape gradients into the store's accumulators.
    pub fn accumulate(
        &self,
        grads: &[Option<Tensor>],
        store: &mut ParamStore,
    ) -> Result<()> {
        for (name, v) in &self.pairs {
            if let Some(g) = &grads[v.index()] {
                store.by_name_mut(name)?.grad.add_assign(g);
            }
        }
        Ok(())
    }
}

/// FNV-1a over the parameter name; stable across builds, unlike the
/// std hasher's randomized state.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// RNG keyed by (seed, label) so each parameter's initialization is
/// independent of registration order and model variant.
pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(label.as_bytes()))
}

pub fn seeded_gaussian(seed: u64, label: &str, rows: usize, cols: usize, std: f64) -> Tensor {
    let mut rng = rng_for(seed, label);
    let dist = Normal::new(0.0, std).expect("valid std");
    let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(&mut rng)).collect();
    Tensor::new(rows, cols, data).expect("shape matches data")
}

pub fn seeded_uniform(seed: u64, label: &str, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let mut rng = rng_for(seed, label);
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).expect("shape matches data")
}
