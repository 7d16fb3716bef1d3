//! AdamW with decoupled weight decay and the one-cycle learning-rate
//! schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::Parameter;
use crate::scalar::{sc, Scalar};
use crate::tensor::Tensor;

/// Per-parameter moment estimates plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamWState<T> {
    pub step: u64,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Default for AdamWState<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> AdamWState<T> {
    pub fn new() -> Self {
        AdamWState {
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<&(Tensor<T>, Tensor<T>)> {
        self.moments.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &(Tensor<T>, Tensor<T>))> {
        self.moments.iter()
    }

    /// Rebuild state from serialized parts (checkpoint loading).
    pub fn from_parts(step: u64, moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>) -> Self {
        AdamWState { step, moments }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// One optimizer step over the given trainable parameters.
///
/// Weight decay is decoupled: it scales the value directly instead of being
/// folded into the gradient. Moments are bias-corrected with the counter
/// incremented before the correction, so the very first step is already
/// well scaled.
pub fn adamw_step<'a, T: Scalar>(
    params: impl IntoIterator<Item = &'a mut Parameter<T>>,
    state: &mut AdamWState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let b1 = sc::<T>(cfg.beta1);
    let b2 = sc::<T>(cfg.beta2);
    let one = T::one();
    let eps = sc::<T>(cfg.eps);
    let lr_t = sc::<T>(lr);
    let wd = sc::<T>(cfg.weight_decay);
    let corr1 = sc::<T>(1.0 - cfg.beta1.powi(t as i32));
    let corr2 = sc::<T>(1.0 - cfg.beta2.powi(t as i32));

    for p in params {
        if !p.trainable {
            continue;
        }
        if !p.grad.all_finite() {
            return Err(Error::NonFinite(format!(
                "gradient of parameter {}",
                p.name
            )));
        }
        let (m, v) = state
            .moments
            .entry(p.name.clone())
            .or_insert_with(|| (Tensor::zeros(p.value.dims()), Tensor::zeros(p.value.dims())));
        if m.dims() != p.value.dims() {
            return Err(Error::shape(
                format!("AdamW state of {}", p.name),
                format!("{:?}", p.value.dims()),
                format!("{:?}", m.dims()),
            ));
        }
        for i in 0..p.value.numel() {
            let g = p.grad.data()[i];
            let mi = b1 * m.data()[i] + (one - b1) * g;
            let vi = b2 * v.data()[i] + (one - b2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / corr1;
            let v_hat = vi / corr2;
            let val = p.value.data()[i];
            // Decoupled decay: applied to the value, not the gradient.
            p.value.data_mut()[i] = val - lr_t * (m_hat / (v_hat.sqrt() + eps)) - lr_t * wd * val;
        }
    }
    Ok(())
}

/// One-cycle schedule: cosine rise from `max_lr / initial_div` to `max_lr`
/// over the first `pct_start` of training, then cosine decay to
/// `max_lr / final_div`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct OneCycleSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub initial_div: f64,
    pub final_div: f64,
}

impl OneCycleSchedule {
    pub fn new(max_lr: f64, total_steps: usize) -> Result<Self> {
        let s = OneCycleSchedule {
            max_lr,
            total_steps,
            pct_start: 0.3,
            initial_div: 25.0,
            final_div: 1e4,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_lr <= 0.0 || self.initial_div <= 0.0 || self.final_div <= 0.0 {
            return Err(Error::invalid(
                "one-cycle: rates and divisors must be positive",
            ));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid("one-cycle: total_steps must be positive"));
        }
        if !(0.0..1.0).contains(&self.pct_start) || self.pct_start == 0.0 {
            return Err(Error::invalid("one-cycle: pct_start must be in (0, 1)"));
        }
        Ok(())
    }

    /// Step index at which the peak `max_lr` is reached.
    pub fn peak_step(&self) -> usize {
        (self.pct_start * self.total_steps as f64).round() as usize
    }

    pub fn lr(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::invalid(format!(
                "one-cycle step {step} out of range 0..{}",
                self.total_steps
            )));
        }
        let peak = self.peak_step();
        let start = self.max_lr / self.initial_div;
        let end = self.max_lr / self.final_div;
        let interp =
            |a: f64, b: f64, t: f64| b + (a - b) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0;
        if step <= peak {
            if peak == 0 {
                return Ok(self.max_lr);
            }
            Ok(interp(start, self.max_lr, step as f64 / peak as f64))
        } else {
            let denom = (self.total_steps - 1 - peak).max(1);
            let t = (step - peak) as f64 / denom as f64;
            Ok(interp(self.max_lr, end, t))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(name: &str, value: f64, grad: f64) -> Parameter<f64> {
        let mut p = Parameter::new(name, Tensor::scalar(value));
        p.grad = Tensor::scalar(grad);
        p
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut p = scalar_param("w", 1.5, 0.0);
        let mut state = AdamWState::new();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(std::iter::once(&mut p), &mut state, 0.1, &cfg).unwrap();
        assert_eq!(p.value.scalar_value(), 1.5);
    }

    #[test]
    fn zero_grad_with_decay_scales_value() {
        let mut p = scalar_param("w", 2.0, 0.0);
        let mut state = AdamWState::new();
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..Default::default()
        };
        adamw_step(std::iter::once(&mut p), &mut state, 0.5, &cfg).unwrap();
        // value * (1 - lr * wd)
        assert!((p.value.scalar_value() - 2.0 * (1.0 - 0.5 * 0.01)).abs() < 1e-12);
    }

    #[test]
    fn first_step_is_bias_corrected_sign_step() {
        let mut p = scalar_param("w", 1.0, 1.0);
        let mut state = AdamWState::new();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(std::iter::once(&mut p), &mut state, 0.1, &cfg).unwrap();
        // m_hat = v_hat = 1 at t = 1, so the step is lr / (1 + eps).
        assert!((p.value.scalar_value() - 0.9).abs() < 1e-6);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut p = scalar_param("layer.weight", 1.0, f64::NAN);
        let mut state = AdamWState::new();
        let err = adamw_step(
            std::iter::once(&mut p),
            &mut state,
            0.1,
            &AdamWConfig::default(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("layer.weight"));
    }

    #[test]
    fn frozen_params_are_skipped() {
        let mut p = scalar_param("w", 1.0, 1.0);
        p.trainable = false;
        let mut state = AdamWState::new();
        adamw_step(
            std::iter::once(&mut p),
            &mut state,
            0.1,
            &AdamWConfig::default(),
        )
        .unwrap();
        assert_eq!(p.value.scalar_value(), 1.0);
    }

    #[test]
    fn one_cycle_endpoints_and_peak() {
        let s = OneCycleSchedule::new(1e-3, 100).unwrap();
        let peak = s.peak_step();
        assert_eq!(peak, 30);
        assert!((s.lr(0).unwrap() - 1e-3 / 25.0).abs() < 1e-15);
        assert!((s.lr(peak).unwrap() - 1e-3).abs() < 1e-15);
        let last = s.lr(99).unwrap();
        let floor = 1e-3 / 1e4;
        assert!((last - floor).abs() / floor < 0.01, "last lr {last}");
        assert!(s.lr(100).is_err());
    }

    #[test]
    fn one_cycle_positive_everywhere() {
        let s = OneCycleSchedule::new(1e-3, 65).unwrap();
        let mut max_seen = 0.0f64;
        for step in 0..65 {
            let lr = s.lr(step).unwrap();
            assert!(lr > 0.0);
            max_seen = max_seen.max(lr);
        }
        assert!((max_seen - 1e-3).abs() < 1e-12);
    }
}
