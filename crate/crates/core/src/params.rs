//! Named parameter storage with seeded initialization and a per-name
//! trainable/frozen split.
//!
//! Every module pulls its weights from a [`ParamStore`] through a [`Scope`].
//! Trainable entries are backed by a [`Var`] so autodiff tracks them; frozen
//! entries are plain tensors and never receive gradients. Initial values are
//! drawn from an RNG seeded by `(store seed, parameter name)`, so a
//! parameter's init does not depend on construction order.

use std::collections::BTreeMap;
use std::sync::Arc;

use candle_core::{DType, Device, Shape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Init {
    Zeros,
    Const(f64),
    Normal { std: f64 },
    /// Uniform in `[-bound, bound]`.
    Uniform { bound: f64 },
    /// Start from the current value of another (already created) parameter.
    CopyOf(String),
}

impl Init {
    /// PyTorch's default for linear and conv layers.
    pub fn kaiming(fan_in: usize) -> Self {
        Init::Uniform {
            bound: 1.0 / (fan_in as f64).sqrt(),
        }
    }
}

#[derive(Clone)]
struct Param {
    tensor: Tensor,
    var: Option<Var>,
}

type TrainablePredicate = Arc<dyn Fn(&str) -> bool + Send + Sync>;

pub struct ParamStore {
    dtype: DType,
    seed: u64,
    entries: BTreeMap<String, Param>,
    pending: BTreeMap<String, Tensor>,
    trainable: Option<TrainablePredicate>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("seed", &self.seed)
            .field("entries", &self.entries.len())
            .field("pending", &self.pending.len())
            .finish()
    }
}

pub fn device() -> Device {
    Device::Cpu
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            seed,
            entries: BTreeMap::new(),
            pending: BTreeMap::new(),
            trainable: None,
        }
    }

    /// A store whose parameters are taken from `values` when present and
    /// freshly initialized otherwise.
    pub fn with_values(dtype: DType, seed: u64, values: BTreeMap<String, Tensor>) -> Self {
        let mut store = Self::new(dtype, seed);
        store.pending = values;
        store
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Decides which parameters created from now on are trainable.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool + Send + Sync + 'static) {
        self.trainable = Some(Arc::new(pred));
    }

    pub fn root(&mut self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    fn init_values(&self, name: &str, numel: usize, init: &Init) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(name));
        Ok(match init {
            Init::Zeros => vec![0.0; numel],
            Init::Const(c) => vec![*c; numel],
            Init::Normal { std } => (0..numel)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect(),
            Init::Uniform { bound } => {
                if *bound == 0.0 {
                    vec![0.0; numel]
                } else {
                    let dist = Uniform::new_inclusive(-bound, *bound)
                        .map_err(|e| Error::invalid(format!("init {name}: {e}")))?;
                    (0..numel).map(|_| dist.sample(&mut rng)).collect()
                }
            }
            Init::CopyOf(src) => {
                let src_param = self.entries.get(src).ok_or_else(|| {
                    Error::invalid(format!("init {name}: source parameter {src} does not exist"))
                })?;
                src_param
                    .tensor
                    .to_dtype(DType::F64)?
                    .flatten_all()?
                    .to_vec1::<f64>()?
            }
        })
    }

    pub fn get(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let shape: Shape = shape.into();
        if let Some(p) = self.entries.get(name) {
            if p.tensor.shape() != &shape {
                return Err(Error::shape(format!(
                    "parameter {name} requested as {shape:?} but exists as {:?}",
                    p.tensor.shape()
                )));
            }
            return Ok(p.tensor.clone());
        }
        let value = match self.pending.remove(name) {
            Some(t) => {
                if t.shape() != &shape {
                    return Err(Error::shape(format!(
                        "parameter {name}: checkpoint has {:?}, model expects {shape:?}",
                        t.shape()
                    )));
                }
                t.to_dtype(self.dtype)?
            }
            None => {
                let data = self.init_values(name, shape.elem_count(), &init)?;
                Tensor::from_vec(data, shape, &device())?.to_dtype(self.dtype)?
            }
        };
        let trainable = self.trainable.as_ref().is_some_and(|f| f(name));
        let param = if trainable {
            let var = Var::from_tensor(&value)?;
            Param {
                tensor: var.as_tensor().clone(),
                var: Some(var),
            }
        } else {
            Param {
                tensor: value.detach(),
                var: None,
            }
        };
        let out = param.tensor.clone();
        self.entries.insert(name.to_string(), param);
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.tensor)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|p| p.var.is_some())
    }

    /// Checkpoint values that no module asked for.
    pub fn unused_values(&self) -> Vec<String> {
        self.pending.keys().cloned().collect()
    }

    pub fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter_map(|(n, p)| p.var.clone().map(|v| (n.clone(), v)))
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.var.is_some())
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn frozen_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, p)| p.var.is_none())
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// Overwrites a parameter's value in place (the tensors handed to modules
    /// share storage and observe the change).
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .entries
            .get(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))?;
        if p.tensor.shape() != value.shape() {
            return Err(Error::shape(format!(
                "assign {name}: {:?} vs {:?}",
                p.tensor.shape(),
                value.shape()
            )));
        }
        let value = value.to_dtype(self.dtype)?;
        match &p.var {
            Some(var) => var.set(&value)?,
            None => overwrite_storage(&p.tensor, &value)?,
        }
        Ok(())
    }

    /// All `(name, tensor)` pairs in name order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|(n, p)| (n.clone(), p.tensor.clone()))
            .collect()
    }

    /// SHA-256 over names and f32 little-endian bytes of every parameter
    /// accepted by `filter`.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, p) in &self.entries {
            if !filter(name) {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update(tensor_bytes(&p.tensor)?);
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Per-parameter checksums, for pinpointing which entries changed.
    pub fn checksums(&self) -> Result<BTreeMap<String, String>> {
        self.entries
            .iter()
            .map(|(n, p)| Ok((n.clone(), hex::encode(Sha256::digest(tensor_bytes(&p.tensor)?)))))
            .collect()
    }
}

/// Writes `value` into the storage behind `dst` (both must share shape).
fn overwrite_storage(dst: &Tensor, value: &Tensor) -> Result<()> {
    if dst.dims().is_empty() {
        let v = value.reshape(1)?;
        dst.reshape(1)?.slice_set(&v, 0, 0)?;
    } else {
        dst.slice_set(&value.contiguous()?, 0, 0)?;
    }
    Ok(())
}

pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let v = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(v.len() * 4);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// A name prefix into a [`ParamStore`].
pub struct Scope<'a> {
    store: &'a mut ParamStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&mut self, name: &str) -> Scope<'_> {
        Scope {
            prefix: self.full(name),
            store: self.store,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Creates or fetches `<prefix>.<name>`. `Init::CopyOf` sources are
    /// absolute parameter names.
    pub fn get(&mut self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Tensor> {
        let full = self.full(name);
        self.store.get(&full, shape, init)
    }

    /// Absolute name of `name` under this scope.
    pub fn path(&self, name: &str) -> String {
        self.full(name)
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}
