//! Executable checks of the structural claims: one-pass logits equal the
//! vanilla cloze and per-step constructions, nothing leaks, gradients
//! match finite differences, the sampler hits its rates, and each example
//! costs exactly one forward pass.

mod gradcheck;
mod passes;
mod sampler;
mod suite;

use std::collections::BTreeSet;
use std::fmt;

pub use gradcheck::{check_gradients, GradCheckConfig, GradientReport};
pub use passes::{count_forward_passes, PassReport};
pub use sampler::{check_sampler_stats, SamplerReport};
pub use suite::{
    pass_count_examples, random_triple, run_suite, synthetic_vocab, Suite, SuiteResult, Triple,
};

use crate::assembly::{
    assemble_pmlm_input, attention_bfs, audit_leakage, build_cloze_instance, build_step_instance,
    step_rows, LeakageReport, PmlmInstance, TokenCategory,
};
use crate::corpus::{PackedInput, Vocab};
use crate::error::{Error, Result};
use crate::masking::{CorruptionPlan, FactorizationOrder};
use crate::model::{Scalar, Transformer};

/// Largest accepted row deviation between a one-pass row and its oracle.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-5;

/// `max|a−b| / max(max|b|, 1e-12)` over one logits row.
pub fn relative_deviation<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let scale = b
        .iter()
        .fold(0.0f64, |m, v| m.max(v.to_f64c().abs()))
        .max(1e-12);
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.to_f64c() - y.to_f64c()).abs())
        .fold(0.0, f64::max)
        / scale
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowDeviation {
    pub row: usize,
    pub label: String,
    /// Factorization step for pseudo rows.
    pub step: Option<usize>,
    pub deviation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub kind: &'static str,
    pub rows: Vec<RowDeviation>,
    pub threshold: f64,
    pub audit: LeakageReport,
}

impl EquivalenceReport {
    pub fn max_deviation(&self) -> f64 {
        self.rows.iter().map(|r| r.deviation).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.audit.passed() && self.rows.iter().all(|r| r.deviation <= self.threshold)
    }
}

impl fmt::Display for EquivalenceReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: rows={} max_rel={:.3e} threshold={:.0e} audit={}",
            self.kind,
            if self.passed() { "PASS" } else { "FAIL" },
            self.rows.len(),
            self.max_deviation(),
            self.threshold,
            if self.audit.passed() { "PASS" } else { "FAIL" },
        )?;
        for r in self.rows.iter().filter(|r| r.deviation > self.threshold) {
            write!(f, "\n  row {} {} rel={:.3e}", r.row, r.label, r.deviation)?;
        }
        for v in &self.audit.violations {
            write!(f, "\n  leak {v}")?;
        }
        Ok(())
    }
}

/// Compares `[M]` rows of `combined` with the same rows of `cloze`.
pub fn compare_ae<T: Scalar>(
    model: &Transformer<T>,
    combined: &PmlmInstance,
    cloze: &PmlmInstance,
) -> Result<EquivalenceReport> {
    let rows = combined.rows_of(TokenCategory::ConvMask);
    for &r in &rows {
        if cloze.token_ids.get(r) != Some(&combined.token_ids[r])
            || cloze.position_ids[r] != combined.position_ids[r]
        {
            return Err(Error::Inconsistent(format!("row {r} differs from the cloze instance")));
        }
    }
    let one = model.eval(combined, &rows)?;
    let two = model.eval(cloze, &rows)?;
    let rows = rows
        .iter()
        .enumerate()
        .map(|(i, &row)| RowDeviation {
            row,
            label: combined.label(row),
            step: None,
            deviation: relative_deviation(one.logits.row(i), two.logits.row(i)),
        })
        .collect();
    Ok(EquivalenceReport {
        kind: "ae",
        rows,
        threshold: EQUIVALENCE_TOLERANCE,
        audit: audit_leakage(combined),
    })
}

/// `[M]`-row logits of the one-pass instance against the vanilla cloze
/// instance; the leakage audit runs on the one-pass instance.
pub fn check_ae_equivalence<T: Scalar>(
    model: &Transformer<T>,
    x: &PackedInput,
    order: &FactorizationOrder,
    plan: &CorruptionPlan,
) -> Result<EquivalenceReport> {
    let combined = assemble_pmlm_input(x, order, plan)?;
    compare_ae(model, &combined, &build_cloze_instance(x, plan))
}

/// Compares every `[P]` row of `combined` with the matching row of its
/// per-step oracle (`oracles[i]` for step `i`).
pub fn compare_par<T: Scalar>(
    model: &Transformer<T>,
    combined: &PmlmInstance,
    oracles: &[PmlmInstance],
) -> Result<EquivalenceReport> {
    let pseudo: Vec<usize> = (0..combined.len())
        .filter(|&r| matches!(combined.categories[r], TokenCategory::Pseudo { .. }))
        .collect();
    let one = model.eval(combined, &pseudo)?;
    let mut rows = Vec::new();
    for (step, oracle) in oracles.iter().enumerate() {
        let map = step_rows(combined, step);
        if map.len() != oracle.len() {
            return Err(Error::Inconsistent(format!(
                "step {step} oracle has {} rows, expected {}",
                oracle.len(),
                map.len()
            )));
        }
        let mut oracle_rows = Vec::new();
        let mut combined_rows = Vec::new();
        for (j, &r) in map.iter().enumerate() {
            if (oracle.token_ids[j], oracle.position_ids[j]) != (combined.token_ids[r], combined.position_ids[r]) {
                return Err(Error::Inconsistent(format!("step {step} oracle row {j} differs")));
            }
            if combined.categories[r] == (TokenCategory::Pseudo { step }) {
                oracle_rows.push(j);
                combined_rows.push(r);
            }
        }
        let two = model.eval(oracle, &oracle_rows)?;
        for (i, &r) in combined_rows.iter().enumerate() {
            let k = pseudo.binary_search(&r).expect("pseudo row evaluated");
            rows.push(RowDeviation {
                row: r,
                label: combined.label(r),
                step: Some(step),
                deviation: relative_deviation(one.logits.row(k), two.logits.row(i)),
            });
        }
    }
    Ok(EquivalenceReport {
        kind: "par",
        rows,
        threshold: EQUIVALENCE_TOLERANCE,
        audit: audit_leakage(combined),
    })
}

/// `[P]`-row logits of the one-pass instance against a standalone instance
/// per factorization step.
pub fn check_par_equivalence<T: Scalar>(
    model: &Transformer<T>,
    x: &PackedInput,
    order: &FactorizationOrder,
    plan: &CorruptionPlan,
) -> Result<EquivalenceReport> {
    let combined = assemble_pmlm_input(x, order, plan)?;
    let oracles = (0..order.len())
        .map(|i| build_step_instance(x, order, plan, i))
        .collect::<Result<Vec<_>>>()?;
    compare_par(model, &combined, &oracles)
}

/// Positions whose true token can reach `row` over any number of attention
/// hops: unmasked content rows and original-token rows. Special tokens and
/// in-place mask slots carry no content and are left out.
pub fn conditioning_set(inst: &PmlmInstance, row: usize) -> BTreeSet<usize> {
    let parent = attention_bfs(&inst.attention_mask, row);
    (0..inst.len())
        .filter(|&k| parent[k] != usize::MAX)
        .filter(|&k| match inst.categories[k] {
            TokenCategory::Context => !Vocab::is_special(inst.token_ids[k]),
            TokenCategory::Original { .. } => true,
            _ => false,
        })
        .map(|k| inst.position_ids[k])
        .collect()
}

/// `(label, conditioning set)` for every prediction row, in row order.
pub fn conditioning_sets(inst: &PmlmInstance) -> Vec<(String, BTreeSet<usize>)> {
    inst.target_rows()
        .into_iter()
        .map(|r| (inst.label(r), conditioning_set(inst, r)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::pack_pair;
    use crate::model::ModelConfig;

    fn six() -> PackedInput {
        pack_pair(&[11, 12, 13, 14, 15, 16], &[], 16).unwrap()
    }

    fn model() -> Transformer<f32> {
        Transformer::new(ModelConfig::tiny(20), 5).unwrap()
    }

    #[test]
    fn figure_order_is_equivalent() {
        let x = six();
        let order = FactorizationOrder::new(vec![vec![4, 5], vec![2]], &x).unwrap();
        let plan = CorruptionPlan::all_mask(&order.masked_positions());
        let ae = check_ae_equivalence(&model(), &x, &order, &plan).unwrap();
        assert!(ae.passed(), "{ae}");
        assert_eq!(ae.rows.len(), 3);
        let par = check_par_equivalence(&model(), &x, &order, &plan).unwrap();
        assert!(par.passed(), "{par}");
        assert_eq!(par.rows.iter().filter(|r| r.step == Some(1)).count(), 1);
    }

    #[test]
    fn added_edge_fails_both_checks() {
        let x = six();
        let order = FactorizationOrder::new(vec![vec![4, 5], vec![2]], &x).unwrap();
        let plan = CorruptionPlan::all_mask(&order.masked_positions());
        let mut combined = assemble_pmlm_input(&x, &order, &plan).unwrap();
        let x6 = 6;
        let x4 = (0..combined.len())
            .find(|&r| combined.categories[r] == (TokenCategory::Original { step: 0 }) && combined.position_ids[r] == 4)
            .unwrap();
        combined.attention_mask.set(x6, x4, true);
        // sharpen attention so one extra key moves the logits visibly
        let mut m = model();
        m.params.scale(10.0);
        let report = compare_ae(&m, &combined, &build_cloze_instance(&x, &plan)).unwrap();
        assert!(!report.passed());
        assert!(report.max_deviation() > EQUIVALENCE_TOLERANCE, "{}", report.max_deviation());
        let text = report.to_string();
        assert!(text.contains("FAIL") && text.contains("x6 -> x4"), "{text}");
    }

    #[test]
    fn no_masks_is_a_vacuous_pass() {
        let x = six();
        let order = FactorizationOrder::empty();
        let plan = CorruptionPlan::default();
        let r = check_ae_equivalence(&model(), &x, &order, &plan).unwrap();
        assert!(r.passed() && r.rows.is_empty());
    }

    #[test]
    fn relative_deviation_scale() {
        assert_eq!(relative_deviation(&[1.0f64, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_deviation(&[1.0f64, 2.2], &[1.0, 2.0]) - 0.1).abs() < 1e-12);
    }
}
