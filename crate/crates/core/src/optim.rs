//! AdamW and the cosine learning-rate schedule with linear warmup.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_warmup_ratio() -> f64 {
    0.005
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    /// Peak learning rate.
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_warmup_ratio")]
    pub warmup_ratio: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
            warmup_ratio: default_warmup_ratio(),
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.warmup_ratio);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Linear warmup to the peak rate, then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_peak: f64,
    pub total_steps: u64,
    pub warmup_ratio: f64,
}

impl CosineSchedule {
    pub fn new(lr_peak: f64, total_steps: u64, warmup_ratio: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&warmup_ratio) {
            return Err(Error::Config(format!("warmup_ratio {warmup_ratio} not in [0, 1)")));
        }
        Ok(CosineSchedule {
            lr_peak,
            total_steps,
            warmup_ratio,
        })
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.total_steps as f64).ceil() as u64
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Contract(format!(
                "step {step} beyond schedule of {} steps",
                self.total_steps
            )));
        }
        let warmup = self.warmup_steps();
        if step >= self.total_steps {
            return Ok(0.0);
        }
        if step < warmup {
            return Ok(self.lr_peak * step as f64 / warmup as f64);
        }
        let progress = (step - warmup) as f64 / (self.total_steps - warmup) as f64;
        Ok(self.lr_peak * 0.5 * (1.0 + (PI * progress).cos()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// One AdamW update of a flat parameter buffer. `t` is the 1-based step.
///
/// Weight decay is decoupled and applied before the adaptive step.
pub fn adamw_update(param: &mut [f64], grad: &[f64], moments: &mut Moments, t: u64, cfg: &AdamWConfig, lr: f64) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut moments.m).zip(&mut moments.v) {
        *p -= lr * cfg.weight_decay * *p;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// AdamW state keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// Restores saved state (used by checkpoint loading).
    pub fn restore(config: AdamWConfig, step: u64, moments: BTreeMap<String, Moments>) -> Self {
        AdamW { config, step, moments }
    }

    /// Applies one update to every parameter that has a gradient.
    ///
    /// All gradients are checked before any parameter is touched; a NaN or
    /// infinite entry aborts the step and names the offending parameter.
    pub fn step<'a, I>(&mut self, params: I, lr: f64) -> Result<()>
    where
        I: IntoIterator<Item = (String, &'a mut Tensor)>,
    {
        let params: Vec<(String, &'a mut Tensor)> = params.into_iter().collect();
        let next = self.step + 1;
        for (name, t) in &params {
            if let Some(g) = t.grad() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient {
                        name: name.clone(),
                        step: next,
                    });
                }
            }
        }
        self.step = next;
        for (name, t) in params {
            if !t.requires_grad() {
                continue;
            }
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let moments = self.moments.entry(name).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            if moments.m.len() != g.len() {
                return Err(Error::Contract("optimizer state does not match parameter size".into()));
            }
            adamw_update(t.data_mut(), &g, moments, next, &self.config, lr);
        }
        Ok(())
    }
}
