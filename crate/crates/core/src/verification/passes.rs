use std::fmt;

use crate::error::Result;
use crate::model::{Scalar, Transformer};
use crate::objectives::{batch_gradient, TrainingExample};

/// Measured forward passes for one training batch against the cost of
/// building one cloze instance plus one instance per masked token.
#[derive(Debug, Clone, PartialEq)]
pub struct PassReport {
    pub batch: usize,
    pub measured: usize,
    pub naive: usize,
    pub masked: Vec<usize>,
}

impl PassReport {
    pub fn reuse_ratio(&self) -> f64 {
        self.naive as f64 / self.measured.max(1) as f64
    }

    pub fn passed(&self) -> bool {
        self.measured == self.batch
    }
}

impl fmt::Display for PassReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let avg = self.masked.iter().sum::<usize>() as f64 / self.batch.max(1) as f64;
        write!(
            f,
            "passes {}: batch={} avg_masked={avg:.1} measured={} naive={} reuse={:.1}x",
            if self.passed() { "PASS" } else { "FAIL" },
            self.batch,
            self.measured,
            self.naive,
            self.reuse_ratio()
        )
    }
}

/// Runs one gradient computation over `examples` with the model's pass
/// counter reset.
pub fn count_forward_passes<T: Scalar>(
    model: &Transformer<T>,
    examples: &[TrainingExample],
) -> Result<PassReport> {
    let instances: Vec<_> = examples.iter().map(|e| e.instance.clone()).collect();
    let seeds: Vec<u64> = (0..examples.len() as u64).collect();
    model.reset_forward_passes();
    batch_gradient(model, &instances, &seeds)?;
    let masked: Vec<usize> = examples.iter().map(|e| e.order.masked_count()).collect();
    Ok(PassReport {
        batch: examples.len(),
        measured: model.forward_passes(),
        naive: masked.iter().map(|m| 1 + m).sum(),
        masked,
    })
}
