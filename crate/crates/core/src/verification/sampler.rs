use std::fmt;

use crate::corpus::pack_pair;
use crate::masking::{sample_blockwise_mask, BlockMaskingPolicy};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerReport {
    pub samples: usize,
    pub seq_len: usize,
    pub masked_ratio: f64,
    pub ratio_bounds: (f64, f64),
    /// `block_counts[l]` blocks of length `l`.
    pub block_counts: Vec<u64>,
    pub expected_freqs: Vec<f64>,
    /// Frequencies are only judged when sequences are long enough for
    /// every block length to fit freely.
    pub freqs_checked: bool,
}

pub const FREQ_TOLERANCE: f64 = 0.01;

impl SamplerReport {
    pub fn block_freqs(&self) -> Vec<f64> {
        let total: u64 = self.block_counts.iter().sum();
        self.block_counts
            .iter()
            .map(|&c| c as f64 / total.max(1) as f64)
            .collect()
    }

    pub fn ratio_ok(&self) -> bool {
        (self.ratio_bounds.0..=self.ratio_bounds.1).contains(&self.masked_ratio)
    }

    pub fn freqs_ok(&self) -> bool {
        !self.freqs_checked
            || self
                .block_freqs()
                .iter()
                .zip(&self.expected_freqs)
                .skip(1)
                .all(|(f, e)| (f - e).abs() <= FREQ_TOLERANCE)
    }

    pub fn passed(&self) -> bool {
        self.ratio_ok() && self.freqs_ok()
    }
}

impl fmt::Display for SamplerReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "sampler {}: n={} len={} ratio={:.4} in [{:.3}, {:.3}]",
            if self.passed() { "PASS" } else { "FAIL" },
            self.samples,
            self.seq_len,
            self.masked_ratio,
            self.ratio_bounds.0,
            self.ratio_bounds.1
        )?;
        let freqs = self.block_freqs();
        for l in 1..freqs.len() {
            write!(f, " len{l}={:.4}/{:.2}", freqs[l], self.expected_freqs[l])?;
        }
        Ok(())
    }
}

/// Masks `n` packed sequences of total length `len` and tallies the masked
/// ratio and the block-length histogram.
pub fn check_sampler_stats(n: usize, len: usize, seed: u64) -> SamplerReport {
    use rayon::prelude::*;

    let policy = BlockMaskingPolicy::default();
    let body = len.saturating_sub(3).max(1);
    let s1_len = body.div_ceil(2);
    let s1: Vec<u32> = (0..s1_len as u32).map(|i| 6 + i % 50).collect();
    let s2: Vec<u32> = (0..(body - s1_len) as u32).map(|i| 6 + i % 50).collect();
    let x = pack_pair(&s1, &s2, body + 3).expect("fits by construction");
    let usable = x.usable_len();

    let per_sample: Vec<(usize, Vec<u64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let order = sample_blockwise_mask(&x, &policy, &mut rng_for(seed, &[i as u64]));
            let mut counts = vec![0u64; policy.max_block + 1];
            for step in order.steps() {
                counts[step.len()] += 1;
            }
            (order.masked_count(), counts)
        })
        .collect();
    let mut masked = 0usize;
    let mut block_counts = vec![0u64; policy.max_block + 1];
    for (m, counts) in per_sample {
        masked += m;
        for (a, c) in block_counts.iter_mut().zip(counts) {
            *a += c;
        }
    }

    let mut expected = vec![0.0; policy.max_block + 1];
    expected[1] = 1.0 - policy.block_prob;
    let span = (policy.max_block - policy.min_block + 1) as f64;
    for e in expected.iter_mut().take(policy.max_block + 1).skip(policy.min_block) {
        *e += policy.block_prob / span;
    }
    // at most one block overshoots the budget
    let budget = policy.budget(usable);
    let overshoot = (budget + policy.max_block - 1) as f64 / usable as f64;
    SamplerReport {
        samples: n,
        seq_len: x.len(),
        masked_ratio: masked as f64 / (n * usable) as f64,
        ratio_bounds: (policy.ratio, overshoot.max(0.17)),
        block_counts,
        expected_freqs: expected,
        freqs_checked: usable >= 100,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_sequences_keep_the_floor() {
        let r = check_sampler_stats(2000, 8, 1);
        assert!(r.masked_ratio >= 0.15, "{r}");
        assert!(r.passed(), "{r}");
        assert!(!r.freqs_checked);
    }

    #[test]
    fn seeded_runs_repeat() {
        assert_eq!(check_sampler_stats(300, 64, 9), check_sampler_stats(300, 64, 9));
    }

    #[test]
    fn expected_frequencies() {
        let r = check_sampler_stats(10, 512, 0);
        assert_eq!(r.expected_freqs.len(), 7);
        assert!((r.expected_freqs[1] - 0.6).abs() < 1e-12);
        for l in 2..=6 {
            assert!((r.expected_freqs[l] - 0.08).abs() < 1e-12);
        }
    }
}
