//! Named parameter and buffer registry with seeded initialization.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
}

/// Owns every trainable parameter and non-trainable buffer of a model.
///
/// Names are dotted paths (`gen.up0.conv1.weight`). Trainable parameters and
/// buffers live in separate maps so optimizers never see buffers.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, rng: ChaCha8Rng) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
            rng,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    /// Trainable parameters whose name starts with `prefix.`.
    pub fn group(&self, prefix: &str) -> Vec<(String, Var)> {
        let dotted = format!("{prefix}.");
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(&dotted))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    fn sample(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::Uniform(bound) => (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect(),
        };
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// Draws a standard-normal tensor from the store's stream (used for
    /// power-iteration starting vectors).
    fn normal(&mut self, shape: &[usize]) -> Result<Tensor> {
        self.sample(shape, Init::Normal(1.0))
    }
}

/// A prefix view into a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl Scope<'_> {
    pub fn pp(&mut self, name: impl AsRef<str>) -> Scope<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let key = self.full(name);
        if self.store.params.contains_key(&key) {
            return Err(Error::Config(format!("duplicate parameter {key}")));
        }
        let var = Var::from_tensor(&self.store.sample(shape, init)?)?;
        self.store.params.insert(key, var.clone());
        Ok(var)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        let key = self.full(name);
        if self.store.buffers.contains_key(&key) {
            return Err(Error::Config(format!("duplicate buffer {key}")));
        }
        let t = match init {
            Init::Normal(_) => self.store.normal(shape)?,
            other => self.store.sample(shape, other)?,
        };
        let var = Var::from_tensor(&t)?;
        self.store.buffers.insert(key, var.clone());
        Ok(var)
    }
}
