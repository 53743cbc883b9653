use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named, seeded parameter storage.
///
/// Names are dotted paths; the first segment is the parameter group
/// (`grm`, `cfem`, `fusion`, `gb`, `da`, `db`). Iteration order is the
/// lexicographic order of names, so everything derived from it is
/// reproducible.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    inner: Mutex<Inner>,
}

struct Inner {
    rng: ChaCha8Rng,
    vars: BTreeMap<String, Var>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// `U(-bound, bound)`
    Uniform(f64),
    Const(f64),
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            dtype,
            device,
            inner: Mutex::new(Inner {
                rng: ChaCha8Rng::seed_from_u64(seed),
                vars: BTreeMap::new(),
            }),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn root(&self) -> ParamPath<'_> {
        ParamPath {
            store: self,
            prefix: String::new(),
        }
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        if inner.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let len: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Uniform(bound) => (0..len)
                .map(|_| inner.rng.gen_range(-bound..=bound))
                .collect(),
            Init::Const(v) => vec![v; len],
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(handle)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("param store poisoned").vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All `(name, var)` pairs in name order.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn group_vars(&self, group: &str) -> Vec<(String, Var)> {
        self.vars()
            .into_iter()
            .filter(|(name, _)| group_of(name) == group)
            .collect()
    }

    pub fn groups(&self) -> Vec<String> {
        let mut groups: Vec<String> = self
            .vars()
            .iter()
            .map(|(n, _)| group_of(n).to_string())
            .collect();
        groups.dedup();
        groups
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner
            .lock()
            .expect("param store poisoned")
            .vars
            .get(name)
            .cloned()
    }

    /// Number of scalar parameters in a group.
    pub fn group_size(&self, group: &str) -> usize {
        self.group_vars(group)
            .iter()
            .map(|(_, v)| v.elem_count())
            .sum()
    }
}

pub fn group_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Prefix handle used while building layers.
#[derive(Clone)]
pub struct ParamPath<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamPath<'a> {
    pub fn sub(&self, name: impl AsRef<str>) -> ParamPath<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamPath {
            store: self.store,
            prefix,
        }
    }

    pub fn var(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        self.store.create(full, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}
