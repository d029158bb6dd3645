//! AdamW with decoupled weight decay over named [`Var`]s.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug)]
struct Slot {
    var: Var,
    m: Tensor,
    v: Tensor,
}

#[derive(Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    slots: BTreeMap<String, Slot>,
    /// Number of updates applied so far.
    pub step: usize,
}

impl AdamW {
    pub fn new(vars: Vec<(String, Var)>, config: AdamWConfig) -> Result<Self> {
        let slots = vars
            .into_iter()
            .map(|(name, var)| {
                let m = var.as_tensor().zeros_like()?;
                let v = var.as_tensor().zeros_like()?;
                Ok((name, Slot { var, m, v }))
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, slots, step: 0 })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched (their moments are not decayed either).
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, slot) in self.slots.iter_mut() {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = g.detach().to_dtype(slot.m.dtype())?;
            slot.m = ((&slot.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?.detach();
            slot.v = ((&slot.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let theta = slot.var.as_tensor().detach();
            let decayed = (&theta * (1.0 - lr * c.weight_decay))?;
            let next = (decayed - (update * lr)?)?;
            let finite = crate::nn::scalar_f64(&next.abs()?.sum_all()?)?;
            if !finite.is_finite() {
                return Err(Error::non_finite(format!("parameter {name}")));
            }
            slot.var.set(&next)?;
        }
        Ok(())
    }

    /// Moments keyed `adam.m.<name>` and `adam.v.<name>`.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.slots.len());
        for (name, s) in &self.slots {
            out.push((format!("adam.m.{name}"), s.m.clone()));
            out.push((format!("adam.v.{name}"), s.v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>, step: usize) -> Result<()> {
        for (name, s) in self.slots.iter_mut() {
            let m = tensors
                .get(&format!("adam.m.{name}"))
                .ok_or_else(|| Error::invalid(format!("optimizer state missing for {name}")))?;
            let v = tensors
                .get(&format!("adam.v.{name}"))
                .ok_or_else(|| Error::invalid(format!("optimizer state missing for {name}")))?;
            if m.dims() != s.m.dims() || v.dims() != s.v.dims() {
                return Err(Error::shape(format!("optimizer state for {name} has the wrong shape")));
            }
            s.m = m.to_dtype(s.m.dtype())?;
            s.v = v.to_dtype(s.v.dtype())?;
        }
        self.step = step;
        Ok(())
    }
}
