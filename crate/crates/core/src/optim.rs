//! AdamW with linear warmup and cosine decay.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{is_no_decay, ModelParams};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Masking ratio used during pretraining.
    pub eta: f64,
    /// Fraction of tokens given sinusoidal position hints during pretraining.
    pub hint_fraction: f64,
    /// Stop pretraining once the evaluated position top-1 after an epoch reaches this value.
    pub stop_at_pos_top1: Option<f64>,
    pub hflip: bool,
    pub crop_pad: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_steps(1000)
    }
}

impl TrainConfig {
    /// Defaults with 5% warmup for the given step budget.
    pub fn with_steps(total_steps: usize) -> Self {
        Self {
            lr: 1e-3,
            warmup_steps: total_steps / 20,
            total_steps,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            seed: 0,
            eta: 0.75,
            hint_fraction: 0.0,
            stop_at_pos_top1: None,
            hflip: false,
            crop_pad: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(String::from(m)));
        if self.warmup_steps > self.total_steps {
            return err("warmup steps exceed total steps");
        }
        let negative = |v: f64| v.is_nan() || v < 0.0;
        if negative(self.lr)
            || negative(self.weight_decay)
            || negative(self.adam_eps)
            || self.adam_eps == 0.0
        {
            return err("learning rate, weight decay and epsilon must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return err("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return err("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::InvalidEta(self.eta));
        }
        if !(0.0..=1.0).contains(&self.hint_fraction) {
            return err("hint fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Learning rate at 1-based `step`: linear warmup to the peak, then cosine to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let (w, total) = (self.warmup_steps, self.total_steps.max(1));
        if w > 0 && step <= w {
            return self.lr * step as f64 / w as f64;
        }
        if step >= total {
            return 0.0;
        }
        let progress = (step - w) as f64 / (total - w) as f64;
        0.5 * self.lr * (1.0 + libm::cos(core::f64::consts::PI * progress))
    }
}

#[derive(Debug, Clone)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    cfg: TrainConfig,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            state: BTreeMap::new(),
        }
    }

    /// One update at 1-based `step`. Nothing is modified if any gradient is non-finite.
    /// Returns the learning rate used.
    pub fn step(
        &mut self,
        params: &mut ModelParams<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        step: usize,
    ) -> Result<f64> {
        if step == 0 {
            return Err(Error::Config(String::from("optimizer steps start at 1")));
        }
        for (name, g) in grads {
            if !g.data().iter().all(|v| v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        let lr = self.cfg.lr_at(step);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = T::from_f64(1.0 - libm::pow(b1, step as f64));
        let bc2 = T::from_f64(1.0 - libm::pow(b2, step as f64));
        let (b1t, b2t) = (T::from_f64(b1), T::from_f64(b2));
        let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let eps = T::from_f64(self.cfg.adam_eps);
        let lr_t = T::from_f64(lr);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let st = self
                .state
                .entry(String::from(name))
                .or_insert_with(|| Moments {
                    m: vec![T::ZERO; g.len()],
                    v: vec![T::ZERO; g.len()],
                });
            let shrink = if is_no_decay(name) {
                T::ONE
            } else {
                T::from_f64(1.0 - lr * self.cfg.weight_decay)
            };
            for (((w, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = b1t * *m + ob1 * gi;
                *v = b2t * *v + ob2 * gi * gi;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w = *w * shrink - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ModelParams<f64> {
        let mut p = ModelParams::new();
        p.insert("w.weight", Tensor::from_f64(&[1], &[v]).unwrap());
        p
    }

    fn grads(g: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut m = BTreeMap::new();
        m.insert(
            String::from("w.weight"),
            Tensor::from_f64(&[1], &[g]).unwrap(),
        );
        m
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut cfg = TrainConfig::with_steps(10);
        cfg.weight_decay = 0.0;
        let mut p = one_param(0.7);
        let mut opt = AdamW::new(&cfg);
        for s in 1..=3 {
            opt.step(&mut p, &grads(0.0), s).unwrap();
        }
        assert_eq!(p.get("w.weight").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_closed_form() {
        let mut cfg = TrainConfig::with_steps(10);
        cfg.warmup_steps = 0;
        cfg.weight_decay = 0.0;
        let lr = cfg.lr_at(1);
        let mut p = one_param(1.0);
        AdamW::new(&cfg).step(&mut p, &grads(1.0), 1).unwrap();
        let want = 1.0 - lr * 1.0 / (1.0 + cfg.adam_eps);
        assert!((p.get("w.weight").unwrap().data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled_and_skips_biases() {
        let cfg = TrainConfig {
            warmup_steps: 0,
            ..TrainConfig::with_steps(10)
        };
        let lr = cfg.lr_at(1);
        let mut p = one_param(2.0);
        p.insert("w.bias", Tensor::from_f64(&[1], &[2.0]).unwrap());
        let mut g = grads(0.0);
        g.insert(
            String::from("w.bias"),
            Tensor::from_f64(&[1], &[0.0]).unwrap(),
        );
        AdamW::new(&cfg).step(&mut p, &g, 1).unwrap();
        assert!((p.get("w.weight").unwrap().data()[0] - 2.0 * (1.0 - lr * 0.05)).abs() < 1e-15);
        assert_eq!(p.get("w.bias").unwrap().data()[0], 2.0);
    }

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig {
            warmup_steps: 10,
            ..TrainConfig::with_steps(100)
        };
        assert_eq!(cfg.lr_at(10), cfg.lr);
        assert_eq!(cfg.lr_at(5), cfg.lr * 0.5);
        assert!(cfg.lr_at(100).abs() < 1e-12);
        assert!(cfg.lr_at(99) > 0.0);
        let mut prev = cfg.lr;
        for s in 11..=100 {
            let l = cfg.lr_at(s);
            assert!(l <= prev);
            prev = l;
        }
    }

    #[test]
    fn non_finite_gradient_rejected_untouched() {
        let cfg = TrainConfig::with_steps(10);
        let mut p = one_param(1.0);
        let r = AdamW::new(&cfg).step(&mut p, &grads(f64::NAN), 1);
        assert_eq!(r, Err(Error::NonFiniteGradient("w.weight".into())));
        assert_eq!(p.get("w.weight").unwrap().data(), &[1.0]);
    }

    #[test]
    fn validation() {
        let mut cfg = TrainConfig::with_steps(10);
        cfg.warmup_steps = 11;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::with_steps(10);
        cfg.eta = 1.0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::with_steps(10).validate().is_ok());
    }
}
