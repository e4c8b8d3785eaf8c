use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// Optimization settings shared by pre-training and fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub adam: AdamHyper,
    /// Global-norm clip threshold; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            peak_lr: 6e-4,
            warmup_ratio: 0.048,
            adam: AdamHyper::default(),
            grad_clip: 0.0,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_ratio * self.steps as f64).round() as u64
    }

    pub fn schedule(&self) -> LinearSchedule {
        LinearSchedule {
            peak: self.peak_lr,
            warmup: self.warmup_steps(),
            total: self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return Err(Error::Config(format!("invalid learning rate {}", self.peak_lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside [0, 1]",
                self.warmup_ratio
            )));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return Err(Error::Config("adam betas must be in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// Linear warmup to `peak` then linear decay to zero at `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl LinearSchedule {
    /// Rate for 1-based update `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if step <= self.warmup {
            if self.warmup == 0 {
                self.peak
            } else {
                self.peak * step as f64 / self.warmup as f64
            }
        } else if step >= self.total {
            0.0
        } else {
            self.peak * (self.total - step) as f64 / (self.total - self.warmup) as f64
        }
    }
}

/// One AdamW update with bias correction; weight decay is decoupled from
/// the adaptive step.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    h: &AdamHyper,
    decay: bool,
) {
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    let shrink = if decay { 1.0 - lr * h.weight_decay } else { 1.0 };
    for i in 0..param.len() {
        let g = grad[i].to_f64c();
        let mi = h.beta1 * m[i].to_f64c() + (1.0 - h.beta1) * g;
        let vi = h.beta2 * v[i].to_f64c() + (1.0 - h.beta2) * g * g;
        m[i] = T::of(mi);
        v[i] = T::of(vi);
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + h.eps);
        param[i] = T::of(param[i].to_f64c() * shrink - step);
    }
}

/// Matrices decay; biases, norm gains and the relative bias table do not.
fn decays(name: &str) -> bool {
    name.ends_with(".weight") || name.starts_with("embeddings.")
}

/// Scales every gradient so the global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [&mut Mat<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|v| v.to_f64c().powi(2))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        grads.iter_mut().for_each(|g| g.scale(s));
    }
    norm
}

/// First and second moments per named tensor plus the update count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub moments: BTreeMap<String, (Mat<T>, Mat<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState {
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Applies one update. `params` and `grads` are matched by position and
    /// must carry the same names. Nothing is modified if any gradient is
    /// non-finite.
    pub fn apply(
        &mut self,
        params: Vec<(String, &mut Mat<T>)>,
        grads: &[(String, &Mat<T>)],
        lr: f64,
        h: &AdamHyper,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Inconsistent(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
        self.step += 1;
        for ((name, p), (gname, g)) in params.into_iter().zip(grads) {
            if &name != gname || (p.rows, p.cols) != (g.rows, g.cols) {
                return Err(Error::Inconsistent(format!(
                    "gradient {gname} does not match parameter {name}"
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (p.zeros_like(), p.zeros_like()));
            adamw_update(
                &mut p.data,
                &g.data,
                &mut m.data,
                &mut v.data,
                self.step,
                lr,
                h,
                decays(&name),
            );
        }
        Ok(())
    }
}
