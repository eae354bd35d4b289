//! Adam with serializable moment state.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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

#[derive(Debug)]
pub struct Adam {
    cfg: AdamConfig,
    params: Vec<(String, Var)>,
    moments: BTreeMap<String, (Tensor, Tensor)>,
    steps: u64,
}

impl Adam {
    pub fn new(params: Vec<(String, Var)>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            params,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Applies one update. Parameters without a gradient are left alone.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var) else { continue };
            // Gradients carry their op graph; keep the moments free of it.
            let g = g.detach();
            let gm = (&g * (1.0 - b1))?;
            let gv = (g.sqr()? * (1.0 - b2))?;
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (((m * b1)? + gm)?, ((v * b2)? + gv)?),
                None => (gm, gv),
            };
            let denom = ((&v / c2)?.sqrt()? + self.cfg.eps)?;
            let update = (&m / c1)?.div(&denom)?;
            let next = (var.as_tensor().detach() - (update * lr)?)?;
            var.set(&next)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<param>` / `v.<param>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, (m, v)) in &self.moments {
            out.insert(format!("m.{name}"), m.clone());
            out.insert(format!("v.{name}"), v.clone());
        }
        out
    }

    pub fn load_state(&mut self, steps: u64, state: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut moments = BTreeMap::new();
        for (name, var) in &self.params {
            match (state.get(&format!("m.{name}")), state.get(&format!("v.{name}"))) {
                (Some(m), Some(v)) => {
                    let m = m.to_dtype(var.dtype())?;
                    let v = v.to_dtype(var.dtype())?;
                    moments.insert(name.clone(), (m, v));
                }
                (None, None) => {}
                _ => return Err(Error::Checkpoint(format!("incomplete Adam state for {name}"))),
            }
        }
        self.moments = moments;
        self.steps = steps;
        Ok(())
    }
}
