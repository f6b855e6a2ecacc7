//! AdamW with per-group settings, global-norm clipping and a warmup + linear
//! decay schedule. State is plain tensors so it can live in checkpoints.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::config::OptimConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;

/// Learning rate at `step` (0-based) of a run with `total` steps.
pub fn lr_at(cfg: &OptimConfig, step: usize, total: usize) -> f64 {
    let total = total.max(1);
    let warmup = ((cfg.warmup_frac * total as f64).ceil() as usize).min(total);
    if step < warmup {
        return cfg.lr * (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let frac = ((step - warmup) as f64 / span).min(1.0);
    cfg.lr + (cfg.lr_end - cfg.lr) * frac
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

struct Group {
    name: String,
    cfg: OptimConfig,
    slots: Vec<Slot>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub lr: f64,
}

pub struct AdamW {
    groups: Vec<Group>,
    step: usize,
    total_steps: usize,
}

impl AdamW {
    pub fn new(total_steps: usize) -> Self {
        Self { groups: Vec::new(), step: 0, total_steps }
    }

    pub fn add_group(&mut self, name: &str, store: &ParamStore, cfg: &OptimConfig) -> Result<()> {
        let slots = store
            .iter()
            .map(|(n, var)| {
                Ok(Slot { name: n.clone(), var: var.clone(), m: var.as_tensor().zeros_like()?, v: var.as_tensor().zeros_like()? })
            })
            .collect::<Result<Vec<_>>>()?;
        self.groups.push(Group { name: name.to_string(), cfg: cfg.clone(), slots });
        Ok(())
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update per group from `grads`. Parameters without a
    /// gradient are treated as having a zero gradient (moments still decay).
    pub fn step(&mut self, grads: &GradStore) -> Result<Vec<StepStats>> {
        let t = (self.step + 1) as i32;
        let mut stats = Vec::with_capacity(self.groups.len());
        for group in &mut self.groups {
            let cfg = &group.cfg;
            let gs: Vec<Option<Tensor>> = group.slots.iter().map(|s| grads.get(s.var.as_tensor()).map(|g| g.detach())).collect();
            let mut sq = 0f64;
            for g in gs.iter().flatten() {
                sq += g.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
            }
            let norm = sq.sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFiniteValue(format!("gradient norm of group {}", group.name)));
            }
            let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip { cfg.grad_clip / norm } else { 1.0 };
            let lr = lr_at(cfg, self.step, self.total_steps);
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for (slot, g) in group.slots.iter_mut().zip(gs) {
                let g = match g {
                    Some(g) => (g * clip)?,
                    None => slot.var.as_tensor().zeros_like()?,
                };
                // Leaf grads can still reference the forward graph; keep the
                // moments free of it so it is not retained across steps.
                slot.m = ((&slot.m * cfg.beta1)? + (&g * (1.0 - cfg.beta1))?)?.detach();
                slot.v = ((&slot.v * cfg.beta2)? + (g.sqr()? * (1.0 - cfg.beta2))?)?.detach();
                let update = (&slot.m / bc1)?.div(&((&slot.v / bc2)?.sqrt()? + cfg.eps)?)?;
                let w = slot.var.as_tensor();
                // Decay matrices only; gains, biases and vectors are left alone.
                let decayed = if cfg.weight_decay > 0.0 && w.rank() >= 2 { (w * (1.0 - lr * cfg.weight_decay))? } else { w.clone() };
                slot.var.set(&decayed.sub(&(update * lr)?)?)?;
            }
            stats.push(StepStats { grad_norm: norm, lr });
        }
        self.step += 1;
        Ok(stats)
    }

    /// Moment tensors keyed `opt.<group>.{m,v}.<param>`.
    pub fn export(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for g in &self.groups {
            for s in &g.slots {
                out.insert(format!("opt.{}.m.{}", g.name, s.name), s.m.clone());
                out.insert(format!("opt.{}.v.{}", g.name, s.name), s.v.clone());
            }
        }
        out
    }

    pub fn import(&mut self, tensors: &BTreeMap<String, Tensor>, step: usize) -> Result<()> {
        for g in &mut self.groups {
            for s in &mut g.slots {
                for (kind, dst) in [("m", &mut s.m), ("v", &mut s.v)] {
                    let key = format!("opt.{}.{kind}.{}", g.name, s.name);
                    let t = tensors.get(&key).ok_or_else(|| Error::Format(format!("missing optimizer state {key}")))?;
                    if t.dims() != dst.dims() {
                        return Err(Error::Format(format!("optimizer state {key} has shape {:?}", t.dims())));
                    }
                    *dst = t.clone();
                }
            }
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn cfg() -> OptimConfig {
        OptimConfig {
            lr: 0.1,
            lr_end: 0.01,
            warmup_frac: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 0.0,
        }
    }

    #[test]
    fn schedule_shape() {
        let c = cfg();
        assert!((lr_at(&c, 0, 100) - 0.01).abs() < 1e-12);
        assert!((lr_at(&c, 9, 100) - 0.1).abs() < 1e-12);
        assert!((lr_at(&c, 10, 100) - 0.1).abs() < 1e-12);
        assert!((lr_at(&c, 100, 100) - 0.01).abs() < 1e-12);
        let mid = lr_at(&c, 55, 100);
        assert!(mid < 0.1 && mid > 0.01);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::new(&[1f32, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(10);
        let c = OptimConfig { warmup_frac: 0.0, lr_end: 0.1, ..cfg() };
        opt.add_group("g", &store, &c).unwrap();
        let loss = w.as_tensor().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        opt.step(&grads).unwrap();
        // With bias correction the first update is lr * sign(g).
        let got = w.as_tensor().to_vec1::<f32>().unwrap();
        assert!((got[0] - 0.9).abs() < 1e-6 && (got[1] + 1.9).abs() < 1e-6, "{got:?}");
    }

    #[test]
    fn minimizes_quadratic_and_clips() {
        let mut store = ParamStore::new();
        let w = store.insert("w", Tensor::new(&[[3f32, -4.0]], &Device::Cpu).unwrap()).unwrap();
        let mut opt = AdamW::new(300);
        opt.add_group("g", &store, &OptimConfig { grad_clip: 1.0, ..cfg() }).unwrap();
        let mut first = None;
        for _ in 0..300 {
            let grads = w.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let s = opt.step(&grads).unwrap();
            first.get_or_insert(s[0].grad_norm);
        }
        assert!((first.unwrap() - 10.0).abs() < 1e-5);
        let v = w.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
    }
}
