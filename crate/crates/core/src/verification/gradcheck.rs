use std::fmt;

use crate::corpus::pack_pair;
use crate::error::Result;
use crate::masking::{BlockMaskingPolicy, CorruptionPolicy};
use crate::model::{ModelConfig, Transformer};
use crate::objectives::{build_training_example, example_gradient, loss_joint, ObjectiveKind, TargetWeights};
use crate::seed::rng_for;

use super::synthetic_vocab;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub model: ModelConfig,
    /// Central-difference step.
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            model: ModelConfig::tiny(16),
            step: 1e-4,
            rel_tol: 1e-3,
            abs_floor: 1e-6,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub checked: usize,
    /// Largest `|a−n| / max(|a|, |n|)` over entries whose magnitude is above
    /// the absolute floor.
    pub max_rel_error: f64,
    pub worst: String,
    pub failures: Vec<String>,
    /// Entries where both gradients are exactly zero.
    pub both_zero: usize,
    /// Median of `err(2h)/err(h)`; about 4 for a second-order scheme.
    pub order_ratio: f64,
}

impl GradientReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && (3.0..=5.0).contains(&self.order_ratio)
    }
}

impl fmt::Display for GradientReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "grad {}: checked={} max_rel={:.3e} at {} both_zero={} order_ratio={:.2}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.checked,
            self.max_rel_error,
            self.worst,
            self.both_zero,
            self.order_ratio
        )?;
        for line in self.failures.iter().take(10) {
            write!(f, "\n  {line}")?;
        }
        Ok(())
    }
}

/// Every parameter gradient of the joint loss (64-bit) against central
/// differences on one sampled AE+PAR instance.
pub fn check_gradients(cfg: &GradCheckConfig) -> Result<GradientReport> {
    let model = Transformer::<f64>::new(cfg.model.clone(), cfg.seed)?;
    let vocab = synthetic_vocab(cfg.model.vocab_size);
    let ids = vocab.ordinary_ids();
    let mut rng = rng_for(cfg.seed, &[0x6C]);
    let token = |i: u32| ids.start + i % (ids.end - ids.start);
    let s1: Vec<u32> = (0..7).map(token).collect();
    let s2: Vec<u32> = (3..8).map(token).collect();
    let x = pack_pair(&s1, &s2, cfg.model.max_positions)?;
    let masking = BlockMaskingPolicy {
        ratio: 0.4,
        ..Default::default()
    };
    let inst = build_training_example(
        &x,
        ObjectiveKind::AePar,
        &masking,
        &CorruptionPolicy::default(),
        &vocab,
        &mut rng,
    )?
    .instance;
    let weights = TargetWeights::for_batch([&inst]);
    let rows = inst.target_rows();
    let loss = |m: &Transformer<f64>| -> Result<f64> {
        let out = m.eval(&inst, &rows)?;
        let t = loss_joint(&out, &inst)?;
        Ok(t.ae.sum * weights.ae + t.par.sum * weights.par)
    };
    let (_, analytic) = example_gradient(&model, &inst, weights, 0)?;

    let mut probe = model.clone();
    let mut numeric_at = |tensor: usize, i: usize, h: f64| -> Result<f64> {
        let orig = probe.params.named()[tensor].1.data[i];
        probe.params.named_mut()[tensor].1.data[i] = orig + h;
        let plus = loss(&probe)?;
        probe.params.named_mut()[tensor].1.data[i] = orig - h;
        let minus = loss(&probe)?;
        probe.params.named_mut()[tensor].1.data[i] = orig;
        Ok((plus - minus) / (2.0 * h))
    };

    let mut report = GradientReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
        failures: Vec::new(),
        both_zero: 0,
        order_ratio: 0.0,
    };
    let mut largest: Vec<(f64, usize, usize)> = Vec::new();
    for (t, (name, g)) in analytic.named().into_iter().enumerate() {
        for (i, &a) in g.data.iter().enumerate() {
            let n = numeric_at(t, i, cfg.step)?;
            report.checked += 1;
            if a == 0.0 && n == 0.0 {
                report.both_zero += 1;
                continue;
            }
            let scale = a.abs().max(n.abs());
            if scale <= cfg.abs_floor {
                continue;
            }
            let rel = (a - n).abs() / scale;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}]");
            }
            if rel > cfg.rel_tol {
                report
                    .failures
                    .push(format!("{name}[{i}] analytic={a:.6e} numeric={n:.6e} rel={rel:.3e}"));
            }
            largest.push((a.abs(), t, i));
        }
    }

    largest.sort_by(|a, b| b.0.total_cmp(&a.0));
    let h = 1e-3;
    let mut ratios = Vec::new();
    for &(_, t, i) in largest.iter().take(16) {
        let a = analytic.named()[t].1.data[i];
        let e1 = (numeric_at(t, i, h)? - a).abs();
        let e2 = (numeric_at(t, i, 2.0 * h)? - a).abs();
        if e1 > 1e-11 {
            ratios.push(e2 / e1);
        }
    }
    ratios.sort_by(f64::total_cmp);
    report.order_ratio = ratios.get(ratios.len() / 2).copied().unwrap_or(f64::NAN);
    Ok(report)
}
