use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::{
    check_ae_equivalence, check_gradients, check_par_equivalence, check_sampler_stats,
    count_forward_passes, EquivalenceReport, GradCheckConfig,
};
use crate::corpus::{pack_pair, PackedInput, Vocab, SPECIAL_TOKENS};
use crate::error::{Error, Result};
use crate::masking::{
    plan_corruption, sample_blockwise_mask, BlockMaskingPolicy, CorruptionPlan, CorruptionPolicy,
    FactorizationOrder,
};
use crate::model::{ModelConfig, Transformer};
use crate::objectives::{build_training_example, ObjectiveKind, TrainingExample};
use crate::seed::{derive_seed, rng_for};

const TRIPLE_TAG: u64 = 0x7E;
const PASSES_TAG: u64 = 0x9A;
pub const EQUIVALENCE_TRIPLES: usize = 100;
pub const SAMPLER_SEQUENCES: usize = 10_000;
pub const SAMPLER_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Ae,
    Par,
    Grad,
    Sampler,
    Passes,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ae" => Suite::Ae,
            "par" => Suite::Par,
            "grad" => Suite::Grad,
            "sampler" => Suite::Sampler,
            "passes" => Suite::Passes,
            "all" => Suite::All,
            other => return Err(Error::Config(format!("unknown suite {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

/// `[PAD] … [P]` followed by `t0 t1 …` up to `size` entries.
pub fn synthetic_vocab(size: usize) -> Vocab {
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain((0..size.saturating_sub(SPECIAL_TOKENS.len())).map(|i| format!("t{i}")))
        .collect();
    Vocab::from_tokens(tokens).expect("synthetic vocabulary is valid")
}

/// A random input, factorization order, corruption plan and model.
pub struct Triple {
    pub x: PackedInput,
    pub order: FactorizationOrder,
    pub plan: CorruptionPlan,
    pub model: Transformer<f32>,
}

fn triple_model_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden_size: 32,
        heads: 4,
        ffn_size: 64,
        vocab_size: 40,
        max_positions: 64,
        relative_buckets: 16,
        max_relative_distance: 32,
        dropout: 0.0,
        use_relative_bias: true,
    }
}

pub fn random_triple(seed: u64, index: u64) -> Result<Triple> {
    let config = triple_model_config();
    let vocab = synthetic_vocab(config.vocab_size);
    let ids = vocab.ordinary_ids();
    let mut rng = rng_for(seed, &[TRIPLE_TAG, index]);
    let mut segment = |min: usize| -> Vec<u32> {
        let n = rng.random_range(min..=20);
        (0..n).map(|_| rng.random_range(ids.clone())).collect()
    };
    let s1 = segment(2);
    let s2 = segment(0);
    let x = pack_pair(&s1, &s2, 48)?;
    let mut rng = rng_for(seed, &[TRIPLE_TAG, index, 1]);
    let policy = BlockMaskingPolicy {
        block_prob: rng.random_range(0.0..=1.0),
        ratio: rng.random_range(0.1..0.5),
        ..Default::default()
    };
    let order = sample_blockwise_mask(&x, &policy, &mut rng);
    let plan = plan_corruption(&order, &vocab, &CorruptionPolicy::default(), &mut rng);
    let model = Transformer::new(config, derive_seed(seed, &[TRIPLE_TAG, index, 2]))?;
    Ok(Triple {
        x,
        order,
        plan,
        model,
    })
}

fn equivalence_suite(
    name: &'static str,
    seed: u64,
    check: fn(&Triple) -> Result<EquivalenceReport>,
) -> Result<SuiteResult> {
    use rayon::prelude::*;

    let reports: Vec<Result<EquivalenceReport>> = (0..EQUIVALENCE_TRIPLES as u64)
        .into_par_iter()
        .map(|i| check(&random_triple(seed, i)?))
        .collect();
    let mut rows = 0;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for (i, r) in reports.into_iter().enumerate() {
        let r = r?;
        rows += r.rows.len();
        worst = worst.max(r.max_deviation());
        if !r.passed() {
            failures.push(format!("\n  instance {i}: {r}"));
        }
    }
    Ok(SuiteResult {
        name,
        passed: failures.is_empty(),
        detail: format!(
            "{EQUIVALENCE_TRIPLES} instances, {rows} rows, max_rel={worst:.3e}, audits clean={}{}",
            failures.is_empty(),
            failures.concat()
        ),
    })
}

/// Four examples with exactly ten masked tokens each.
pub fn pass_count_examples(seed: u64, objective: ObjectiveKind) -> Result<Vec<TrainingExample>> {
    let vocab = synthetic_vocab(40);
    let policy = BlockMaskingPolicy::default();
    let s1: Vec<u32> = (0..30).map(|i| 6 + i % 34).collect();
    let s2: Vec<u32> = (0..30).map(|i| 6 + (i * 7) % 34).collect();
    let x = pack_pair(&s1, &s2, 64)?;
    let mut out = Vec::new();
    let mut k = 0u64;
    while out.len() < 4 {
        let ex = build_training_example(
            &x,
            objective,
            &policy,
            &CorruptionPolicy::default(),
            &vocab,
            &mut rng_for(seed, &[PASSES_TAG, k]),
        )?;
        k += 1;
        if ex.order.masked_count() == 10 {
            out.push(ex);
        }
    }
    Ok(out)
}

fn passes_suite(seed: u64) -> Result<SuiteResult> {
    let model = Transformer::<f32>::new(
        ModelConfig {
            max_positions: 128,
            ..triple_model_config()
        },
        seed,
    )?;
    let mut lines = Vec::new();
    let mut passed = true;
    for objective in [ObjectiveKind::AePar, ObjectiveKind::Ae, ObjectiveKind::Par] {
        let r = count_forward_passes(&model, &pass_count_examples(seed, objective)?)?;
        passed &= r.passed();
        lines.push(format!("{objective}: {r}"));
    }
    Ok(SuiteResult {
        name: "passes",
        passed,
        detail: lines.join("; "),
    })
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<SuiteResult>> {
    let mut out = Vec::new();
    let want = |s: Suite| suite == s || suite == Suite::All;
    if want(Suite::Ae) {
        out.push(equivalence_suite("ae", seed, |t| {
            check_ae_equivalence(&t.model, &t.x, &t.order, &t.plan)
        })?);
    }
    if want(Suite::Par) {
        out.push(equivalence_suite("par", seed, |t| {
            check_par_equivalence(&t.model, &t.x, &t.order, &t.plan)
        })?);
    }
    if want(Suite::Grad) {
        let r = check_gradients(&GradCheckConfig {
            seed,
            ..Default::default()
        })?;
        out.push(SuiteResult {
            name: "grad",
            passed: r.passed(),
            detail: r.to_string(),
        });
    }
    if want(Suite::Sampler) {
        let r = check_sampler_stats(SAMPLER_SEQUENCES, SAMPLER_LEN, seed);
        out.push(SuiteResult {
            name: "sampler",
            passed: r.passed(),
            detail: r.to_string(),
        });
    }
    if want(Suite::Passes) {
        out.push(passes_suite(seed)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples_are_reproducible() {
        let a = random_triple(3, 5).unwrap();
        let b = random_triple(3, 5).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.order, b.order);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn passes_suite_reports_four_vs_forty_four() {
        let r = passes_suite(1).unwrap();
        assert!(r.passed, "{r}");
        assert!(r.detail.contains("measured=4 naive=44"), "{r}");
    }

    #[test]
    fn suite_names_parse() {
        for s in ["ae", "par", "grad", "sampler", "passes", "all"] {
            assert!(s.parse::<Suite>().is_ok());
        }
        assert!("everything".parse::<Suite>().is_err());
    }
}
