use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Moment accumulators, created lazily per parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<F = f32> {
    pub m: ParamStore<F>,
    pub v: ParamStore<F>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new() -> Self {
        Self {
            m: ParamStore::new(),
            v: ParamStore::new(),
            step: 0,
        }
    }
}

/// One update of every parameter that has a gradient: decoupled weight
/// decay `p -= lr * wd * p`, then the bias-corrected Adam step.
pub fn adam_step<F: Scalar>(params: &mut ParamStore<F>, grads: &ParamStore<F>, state: &mut AdamState<F>, cfg: &AdamConfig) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let (one_b1, one_b2) = (F::lit(1.0 - cfg.beta1), F::lit(1.0 - cfg.beta2));
    let decay = F::lit(1.0 - cfg.lr * cfg.weight_decay);
    let step_size = F::lit(cfg.lr / bc1);
    let inv_sqrt_bc2 = F::lit(1.0 / bc2.sqrt());
    let eps = F::lit(cfg.eps);
    for (name, g) in grads.iter() {
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("gradient for unknown parameter `{name}`")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient for `{name}` has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !state.m.contains(name) {
            state.m.insert(name, Tensor::zeros(g.shape()));
            state.v.insert(name, Tensor::zeros(g.shape()));
        }
        let m = state.m.get_mut(name).expect("inserted").data_mut();
        let v = state.v.get_mut(name).expect("inserted").data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *p = *p * decay;
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p -= step_size * *m / ((*v).sqrt() * inv_sqrt_bc2 + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![1], vec![v]).unwrap());
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = one(0.5);
        let mut st = AdamState::new();
        adam_step(&mut p, &one(1.0), &mut st, &cfg).unwrap();
        // m_hat = 1, v_hat = 1  ->  delta = -lr / (1 + eps)
        let delta = p.get("w").unwrap().data()[0] - 0.5;
        assert!((delta + 3e-4 / (1.0 + 1e-8)).abs() < 1e-15, "{delta}");
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_grads_zero_decay_is_identity() {
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut p = one(0.25);
        let mut st = AdamState::new();
        for _ in 0..5 {
            adam_step(&mut p, &one(0.0), &mut st, &cfg).unwrap();
        }
        assert_eq!(p.get("w").unwrap().data()[0], 0.25);
    }

    #[test]
    fn matches_hand_recurrence_with_decay() {
        let cfg = AdamConfig::default();
        let mut p = one(1.0);
        let mut st = AdamState::new();
        let grads = [0.3, -0.7, 0.2];
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for (i, &g) in grads.iter().enumerate() {
            adam_step(&mut p, &one(g), &mut st, &cfg).unwrap();
            let t = (i + 1) as i32;
            w -= cfg.lr * cfg.weight_decay * w;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            assert!((p.get("w").unwrap().data()[0] - w).abs() < 1e-14);
        }
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut p: ParamStore<f32> = one(1.0).cast();
            let mut st = AdamState::new();
            for i in 0..10 {
                let g: ParamStore<f32> = one((i as f64).sin()).cast();
                adam_step(&mut p, &g, &mut st, &AdamConfig::default()).unwrap();
            }
            p.get("w").unwrap().data()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}
