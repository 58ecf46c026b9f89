//! AdamW with decoupled weight decay and a linear warmup/decay schedule.

use crate::error::{invalid, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr_peak: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    pub warmup_fraction: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_peak: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            total_steps: 1000,
            warmup_fraction: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return Err(invalid(format!("lr must be >= 0, got {}", self.lr_peak)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(invalid("eps must be > 0 and weight decay >= 0"));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(invalid("warmup fraction must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_fraction * self.total_steps as f64).round() as u64
    }

    /// Linear rise to `lr_peak` over the warmup, then linear decay to zero
    /// at `total_steps`. Zero beyond the end.
    pub fn lr_at(&self, step: u64) -> f64 {
        let total = self.total_steps;
        if step >= total {
            return 0.0;
        }
        let warm = self.warmup_steps();
        if step < warm {
            self.lr_peak * step as f64 / warm as f64
        } else {
            self.lr_peak * (total - step) as f64 / (total - warm) as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            cfg,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update using the current gradients; returns the rate
    /// used. Update `k` (1-based) runs at `lr_at(k)`; frozen parameters
    /// are left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<f64> {
        if self.m.len() != store.len() {
            return Err(invalid("optimizer state does not match the parameter store"));
        }
        self.step += 1;
        let t = self.step;
        let lr = self.cfg.lr_at(t);
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t as i32);
        let bc2 = 1.0 - c.beta2.powi(t as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let decay = if p.kind.decays() { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = p.grad.data();
            let theta = p.value.data_mut();
            for k in 0..theta.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                if lr == 0.0 {
                    continue;
                }
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                theta[k] -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * theta[k]);
            }
        }
        Ok(lr)
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= f);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamKind};
    use crate::rng::rng;

    fn cfg(total: u64) -> AdamWConfig {
        AdamWConfig {
            lr_peak: 1e-2,
            total_steps: total,
            ..Default::default()
        }
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg(100);
        assert_eq!(c.lr_at(10), 1e-2);
        assert_eq!(c.lr_at(100), 0.0);
        assert!((c.lr_at(55) - 0.5e-2).abs() < 1e-15);
        assert_eq!(c.lr_at(0), 0.0);
        assert_eq!(c.lr_at(150), 0.0);
        assert!((c.lr_at(5) - 0.5e-2).abs() < 1e-15);
    }

    #[test]
    fn no_warmup_decays_from_peak() {
        let c = AdamWConfig {
            warmup_fraction: 0.0,
            ..cfg(10)
        };
        assert_eq!(c.lr_at(0), 1e-2);
    }

    #[test]
    fn frozen_and_zero_lr_leave_values() {
        let mut s = ParamStore::new();
        let mut r = rng(0);
        let a = s.add("a", &[3, 3], ParamKind::Weight, Init::Normal(1.0), &mut r);
        let b = s.add("b", &[3], ParamKind::Bias, Init::Normal(1.0), &mut r);
        s.get_mut(b).trainable = false;
        for p in s.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.3);
        }
        let before = s.clone();
        let mut opt = AdamW::new(cfg(10), &s);
        for _ in 0..5 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.value(b), before.value(b));
        assert_ne!(s.value(a), before.value(a));

        let mut s2 = before.clone();
        let mut opt = AdamW::new(
            AdamWConfig {
                lr_peak: 0.0,
                ..cfg(10)
            },
            &s2,
        );
        for _ in 0..5 {
            opt.step(&mut s2).unwrap();
        }
        assert_eq!(s2.value(a), before.value(a));
    }

    #[test]
    fn weight_decay_skips_biases() {
        let mut s = ParamStore::new();
        let mut r = rng(0);
        let w = s.add("w", &[2, 2], ParamKind::Weight, Init::Ones, &mut r);
        let b = s.add("b", &[2], ParamKind::Bias, Init::Ones, &mut r);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr_peak: 0.1,
                weight_decay: 0.5,
                warmup_fraction: 0.0,
                total_steps: 2,
                ..Default::default()
            },
            &s,
        );
        opt.step(&mut s).unwrap();
        // zero gradient: only decay moves weights
        assert!((s.value(w).data()[0] - (1.0 - 0.05 * 0.5)).abs() < 1e-12);
        assert_eq!(s.value(b).data()[0], 1.0);
    }
}
