//! AdamW with linear warmup, and an exponential moving average of weights.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup: usize,
    /// Cosine decay to zero between the end of warmup and this step.
    pub decay_to: Option<usize>,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup: 2000,
            decay_to: None,
            clip_norm: None,
        }
    }
}

impl AdamWConfig {
    /// Learning rate of 1-based step `k`: `(k / warmup) · lr` during warmup.
    pub fn lr_at(&self, k: usize) -> f64 {
        if self.warmup > 0 && k <= self.warmup {
            return (k as f64 / self.warmup as f64) * self.lr;
        }
        match self.decay_to {
            Some(end) if end > self.warmup => {
                let u = ((k - self.warmup) as f64 / (end - self.warmup) as f64).min(1.0);
                self.lr * 0.5 * (1.0 + (std::f64::consts::PI * u).cos())
            }
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: usize,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, step: 0, moments: HashMap::new() })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update from `(name, gradient)` pairs and returns the
    /// learning rate used. Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)]) -> Result<f64> {
        self.step += 1;
        let k = self.step;
        let lr = self.cfg.lr_at(k);
        let clip = match self.cfg.clip_norm {
            Some(c) => {
                let total = grads
                    .iter()
                    .filter(|(n, _)| store.get(n).is_some_and(|p| !p.frozen))
                    .map(|(_, g)| g.data().iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if total > c {
                    c / total
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let AdamWConfig { beta1: b1, beta2: b2, eps, weight_decay: wd, .. } = self.cfg;
        let bc1 = 1.0 - b1.powi(k as i32);
        let bc2 = 1.0 - b2.powi(k as i32);
        for (name, g) in grads {
            let p = store
                .get_mut(name)
                .ok_or_else(|| Error::State(format!("gradient for unknown parameter {name}")))?;
            if p.frozen {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(Error::State(format!("gradient shape mismatch for {name}")));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let (pd, md, vd) = (p.value.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                let gi = gi * clip;
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                pd[i] -= lr * (mh / (vh.sqrt() + eps) + wd * pd[i]);
            }
        }
        Ok(lr)
    }
}

/// Shadow copies of parameters, updated as
/// `shadow ← β·shadow + (1 − β)·live`, computed as
/// `shadow + (1 − β)·(live − shadow)` so `shadow = live` is a fixed point.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: Vec<(String, Tensor)>,
}

impl EmaState {
    /// Mirrors every trainable parameter of `store`.
    pub fn new(store: &ParamStore, decay: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::Config(format!("EMA decay must lie in (0, 1), got {decay}")));
        }
        let shadow = store.iter().filter(|p| !p.frozen).map(|p| (p.name.clone(), p.value.clone())).collect();
        Ok(Self { decay, shadow })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.shadow.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Replaces shadows with values from `entries` where names match.
    pub fn load(&mut self, entries: &[(String, Tensor)]) -> Result<()> {
        let lookup: HashMap<&str, &Tensor> = entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        for (n, s) in &mut self.shadow {
            if let Some(t) = lookup.get(n.as_str()) {
                if t.shape() != s.shape() {
                    return Err(Error::State(format!("EMA shadow shape mismatch for {n}")));
                }
                *s = (*t).clone();
            }
        }
        Ok(())
    }
}

/// One EMA step. `β = 0` copies the live values.
pub fn ema_update(state: &mut EmaState, store: &ParamStore) -> Result<()> {
    ema_update_with(state, store, state.decay)
}

pub fn ema_update_with(state: &mut EmaState, store: &ParamStore, beta: f64) -> Result<()> {
    for (name, s) in &mut state.shadow {
        let live = store
            .get(name)
            .ok_or_else(|| Error::State(format!("EMA tracks unknown parameter {name}")))?;
        if live.value.shape() != s.shape() {
            return Err(Error::State(format!(
                "EMA shadow {name} has shape {:?}, live {:?}",
                s.shape(),
                live.value.shape()
            )));
        }
        for (sv, &lv) in s.data_mut().iter_mut().zip(live.value.data()) {
            *sv += (1.0 - beta) * (lv - *sv);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::new(vec![v.len()], v.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn warmup_is_linear_and_exact() {
        let cfg = AdamWConfig::default();
        for k in [1usize, 7, 1000, 1999, 2000] {
            assert_eq!(cfg.lr_at(k), (k as f64 / 2000.0) * 2e-4);
        }
        assert_eq!(cfg.lr_at(2500), 2e-4);
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut s = store_with(&[0.3, -1.2]);
        let before = s.value("w").unwrap().clone();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, warmup: 0, ..Default::default() }).unwrap();
        for _ in 0..5 {
            opt.step(&mut s, &[("w".into(), Tensor::new(vec![2], vec![1.0, -3.0]).unwrap())]).unwrap();
        }
        assert_eq!(s.value("w").unwrap(), &before);
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut s = store_with(&[1.0]);
        s.set_frozen("w", true).unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, warmup: 0, ..Default::default() }).unwrap();
        opt.step(&mut s, &[("w".into(), Tensor::new(vec![1], vec![5.0]).unwrap())]).unwrap();
        assert_eq!(s.value("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut s = store_with(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, warmup: 0, weight_decay: 0.0, ..Default::default() }).unwrap();
        opt.step(&mut s, &[("w".into(), Tensor::new(vec![1], vec![4.0]).unwrap())]).unwrap();
        assert!((s.value("w").unwrap().data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn ema_examples() {
        let live = store_with(&[1.0]);
        let mut st = EmaState::new(&live, 0.9).unwrap();
        ema_update(&mut st, &live).unwrap();
        assert_eq!(st.get("w").unwrap().data(), &[1.0]);

        let mut st = EmaState { decay: 0.9, shadow: vec![("w".into(), Tensor::zeros(&[1]))] };
        for _ in 0..3 {
            ema_update(&mut st, &live).unwrap();
        }
        assert!((st.get("w").unwrap().data()[0] - (1.0 - 0.9f64.powi(3))).abs() < 1e-15);

        let mut st = EmaState { decay: 0.5, shadow: vec![("w".into(), Tensor::full(&[1], 7.0))] };
        ema_update_with(&mut st, &live, 0.0).unwrap();
        assert_eq!(st.get("w").unwrap().data(), &[1.0]);

        let mut st = EmaState { decay: 0.5, shadow: vec![("w".into(), Tensor::zeros(&[2]))] };
        assert!(matches!(ema_update(&mut st, &live), Err(Error::State(_))));
        assert!(EmaState::new(&live, 1.0).is_err());
    }
}
