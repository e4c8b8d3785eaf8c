use std::time::Instant;

use super::{batch_gradient, build_training_example, clip_global_norm, ObjectiveKind};
use super::{OptimizerState, TrainConfig};
use crate::assembly::PmlmInstance;
use crate::corpus::{PackedInput, Vocab};
use crate::error::{Error, Result};
use crate::masking::{BlockMaskingPolicy, CorruptionPolicy};
use crate::model::{Scalar, Transformer};
use crate::seed::{derive_seed, epoch_batch, rng_for};

const MASK_TAG: u64 = 0x3A;
const DROPOUT_TAG: u64 = 0xD0;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub objective: ObjectiveKind,
    pub masking: BlockMaskingPolicy,
    pub corruption: CorruptionPolicy,
}

/// What one update did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_ae: f64,
    pub loss_par: f64,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub ae_targets: usize,
    pub par_targets: usize,
    pub empty_targets: usize,
    pub tokens_per_sec: f64,
}

impl StepMetrics {
    /// One JSON object per line for the metrics log.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "step": self.step,
            "loss_ae": self.loss_ae,
            "loss_par": self.loss_par,
            "loss": self.loss,
            "lr": self.lr,
            "grad_norm": self.grad_norm,
            "ae_targets": self.ae_targets,
            "par_targets": self.par_targets,
            "empty_targets": self.empty_targets,
            "tokens_per_sec": self.tokens_per_sec,
        })
        .to_string()
    }
}

/// Pre-training state. Batch contents, masks and dropout are pure functions
/// of (seed, step), so a run restored at step `s` continues exactly.
pub struct Pretrainer<T: Scalar> {
    pub model: Transformer<T>,
    pub optimizer: OptimizerState<T>,
    pub config: PretrainConfig,
    vocab: Vocab,
    data: Vec<PackedInput>,
}

impl<T: Scalar> Pretrainer<T> {
    pub fn new(
        model: Transformer<T>,
        vocab: Vocab,
        data: Vec<PackedInput>,
        config: PretrainConfig,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        config.train.validate()?;
        if vocab.len() != model.config.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries, model expects {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        Ok(Pretrainer {
            model,
            optimizer: OptimizerState::new(),
            config,
            vocab,
            data,
        })
    }

    /// Completed updates.
    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn data(&self) -> &[PackedInput] {
        &self.data
    }

    /// Corpus indices of the examples in 0-based batch `step`.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let t = &self.config.train;
        epoch_batch(t.seed, self.data.len(), t.batch_size, step)
            .into_iter()
            .map(|(_, i)| i)
            .collect()
    }

    /// Instances and dropout seeds for batch `step`.
    pub fn batch(&self, step: u64) -> Result<(Vec<PmlmInstance>, Vec<u64>)> {
        let seed = self.config.train.seed;
        let batch = epoch_batch(seed, self.data.len(), self.config.train.batch_size, step);
        let mut instances = Vec::new();
        let mut seeds = Vec::new();
        for (i, (epoch, idx)) in batch.into_iter().enumerate() {
            let mut rng = rng_for(seed, &[MASK_TAG, epoch, idx as u64]);
            let ex = build_training_example(
                &self.data[idx],
                self.config.objective,
                &self.config.masking,
                &self.config.corruption,
                &self.vocab,
                &mut rng,
            )?;
            instances.push(ex.instance);
            seeds.push(derive_seed(seed, &[DROPOUT_TAG, step, i as u64]));
        }
        Ok((instances, seeds))
    }

    /// One update on the next batch.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let started = Instant::now();
        let step = self.step();
        let (instances, seeds) = self.batch(step)?;
        let (terms, mut grads) = batch_gradient(&self.model, &instances, &seeds)?;
        let grad_norm = {
            let mut mats: Vec<_> = grads.named_mut().into_iter().map(|(_, g)| g).collect();
            clip_global_norm(&mut mats, self.config.train.grad_clip)
        };
        let lr = self.config.train.schedule().lr(step + 1);
        let named_grads = grads.named();
        self.optimizer.apply(
            self.model.params.named_mut(),
            &named_grads,
            lr,
            &self.config.train.adam,
        )?;
        let tokens: usize = instances.iter().map(|i| i.len()).sum();
        let secs = started.elapsed().as_secs_f64().max(1e-9);
        Ok(StepMetrics {
            step: step + 1,
            loss_ae: terms.ae.mean(),
            loss_par: terms.par.mean(),
            loss: terms.joint_mean(),
            lr,
            grad_norm,
            ae_targets: terms.ae.count,
            par_targets: terms.par.count,
            empty_targets: terms.empty_targets,
            tokens_per_sec: tokens as f64 / secs,
        })
    }

    /// Trains until `config.train.steps` updates are done, calling
    /// `on_step` after each one.
    pub fn run(&mut self, on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>) -> Result<()> {
        self.run_until(self.config.train.steps, on_step)
    }

    /// Trains until `stop` updates are done without touching the schedule.
    pub fn run_until(
        &mut self,
        stop: u64,
        mut on_step: impl FnMut(&Self, &StepMetrics) -> Result<()>,
    ) -> Result<()> {
        while self.step() < stop.min(self.config.train.steps) {
            let m = self.train_step()?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}
