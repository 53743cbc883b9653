use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed, named parameter set. Moments are created lazily and
/// can be exported for checkpointing.
pub struct Adam {
    cfg: AdamConfig,
    params: Vec<(String, Var)>,
    moments: BTreeMap<String, (Tensor, Tensor)>,
    step: u64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            params,
            moments: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    /// One update with learning rate `lr`. Parameters without a gradient
    /// are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bias1 = 1.0 - b1.powi(t);
        let bias2 = 1.0 - b2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (((m * b1)? + (g * (1.0 - b1))?)?, ((v * b2)? + (g.sqr()? * (1.0 - b2))?)?),
                None => ((g * (1.0 - b1))?, (g.sqr()? * (1.0 - b2))?),
            };
            let (m, v) = (m.detach(), v.detach());
            let denom = ((&v / bias2)?.sqrt()? + self.cfg.eps)?;
            let update = ((&m / bias1)?.div(&denom)? * lr)?;
            var.set(&var.as_tensor().sub(&update)?.detach())?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    pub fn export(&self) -> AdamState {
        AdamState {
            step: self.step,
            moments: self
                .moments
                .iter()
                .map(|(k, (m, v))| (k.clone(), (m.clone(), v.clone())))
                .collect(),
        }
    }

    pub fn import(&mut self, state: AdamState) -> Result<()> {
        for (name, (m, _)) in &state.moments {
            let var = self
                .params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v)
                .ok_or_else(|| Error::Config(format!("optimizer state for unknown parameter `{name}`")))?;
            if m.dims() != var.dims() {
                return Err(Error::ParamShape {
                    group: crate::nn::group_of(name).to_string(),
                    name: name.clone(),
                    expected: var.dims().to_vec(),
                    found: m.dims().to_vec(),
                });
            }
        }
        self.step = state.step;
        self.moments = state.moments;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor, Tensor)>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first step is lr * sign(g) (up to eps).
        let var = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 0.5], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("w".into(), var.clone())], AdamConfig::default());
        let loss = (var.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        opt.step(&loss.backward().unwrap(), 0.1).unwrap();
        let got = var.as_tensor().to_vec1::<f64>().unwrap();
        for (g, want) in got.iter().zip([0.9, -1.9, 0.4]) {
            assert!((g - want).abs() < 1e-6, "{got:?}");
        }
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn minimizes_quadratic() {
        let var = Var::from_tensor(&Tensor::new(&[3.0f32, -4.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(vec![("w".into(), var.clone())], AdamConfig::default());
        for _ in 0..500 {
            let loss = var.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.step(&loss.backward().unwrap(), 0.05).unwrap();
        }
        let v = var.as_tensor().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
    }
}
