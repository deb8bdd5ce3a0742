use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};

use crate::error::{Error, Result};

/// Adam with bias correction. The learning rate is supplied per step so a
/// schedule can drive it.
pub struct Adam {
    vars: Vec<(String, Var)>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: AdamState,
}

/// Step counter and first/second moment estimates, keyed by parameter name.
#[derive(Clone)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(vars: &[(String, Var)], beta1: f64, beta2: f64) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, var) in vars {
            first.insert(name.clone(), var.zeros_like()?);
            second.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self { vars: vars.to_vec(), beta1, beta2, eps: 1e-8, state: AdamState { step: 0, first, second } })
    }

    pub fn state(&self) -> &AdamState {
        &self.state
    }

    pub fn set_state(&mut self, state: AdamState) -> Result<()> {
        for (name, var) in &self.vars {
            for moments in [&state.first, &state.second] {
                match moments.get(name) {
                    Some(t) if t.dims() == var.dims() => {}
                    _ => return Err(Error::ConfigMismatch(format!("optimizer state for {name} missing or misshapen"))),
                }
            }
        }
        self.state = state;
        Ok(())
    }

    /// Applies one update with learning rate `lr`. Parameters without a
    /// gradient in `grads` are left untouched, moments included.
    ///
    /// With `clip_norm`, gradients are rescaled so their global L2 norm does
    /// not exceed it.
    pub fn step(&mut self, grads: &GradStore, lr: f64, clip_norm: Option<f64>) -> Result<()> {
        let present: Vec<(&String, &Var, &Tensor)> =
            self.vars.iter().filter_map(|(n, v)| grads.get(v.as_tensor()).map(|g| (n, v, g))).collect();
        let scale = match clip_norm {
            Some(max) => {
                let mut total = 0.0;
                for (_, _, g) in &present {
                    total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                }
                let norm = total.sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.state.step += 1;
        let t = self.state.step as i32;
        let correction1 = 1.0 - self.beta1.powi(t);
        let correction2 = 1.0 - self.beta2.powi(t);
        for (name, var, grad) in present {
            let grad = if scale != 1.0 { grad.affine(scale, 0.0)? } else { grad.clone() };
            let m = self.state.first.get_mut(name).expect("moment registered");
            let next_m = ((&*m * self.beta1)? + (&grad * (1.0 - self.beta1))?)?;
            let v = self.state.second.get_mut(name).expect("moment registered");
            let next_v = ((&*v * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&next_m / correction1)?;
            let v_hat = (&next_v / correction2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.eps)?)?;
            var.set(&var.as_tensor().sub(&(update * lr)?)?)?;
            *self.state.first.get_mut(name).unwrap() = next_m;
            *self.state.second.get_mut(name).unwrap() = next_v;
        }
        Ok(())
    }
}
