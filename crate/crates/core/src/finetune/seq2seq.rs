use crate::assembly::{build_seq2seq_input, PmlmInstance};
use crate::error::{Error, Result};
use crate::model::{Mat, Mode, ModelParameters, Scalar, Transformer};
use crate::objectives::{clip_global_norm, smoothed_cross_entropy, OptimizerState, TrainConfig};
use crate::seed::{derive_seed, epoch_batch};

const DROPOUT_TAG: u64 = 0x52;

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqMetrics {
    pub step: u64,
    /// Label-smoothed loss per target token.
    pub loss: f64,
    pub lr: f64,
    pub targets: usize,
}

impl Seq2SeqMetrics {
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "step": self.step,
            "loss": self.loss,
            "lr": self.lr,
            "targets": self.targets,
        })
        .to_string()
    }
}

/// Maximizes target likelihood read at every `[P]` row, terminal `[EOS]`
/// included, with label smoothing.
pub struct Seq2SeqTrainer<T: Scalar> {
    pub model: Transformer<T>,
    pub optimizer: OptimizerState<T>,
    pub train: TrainConfig,
    pub smoothing: f64,
    data: Vec<PmlmInstance>,
    skipped: usize,
}

impl<T: Scalar> Seq2SeqTrainer<T> {
    /// Pairs that overflow `max_len` are skipped and counted.
    pub fn new(
        model: Transformer<T>,
        pairs: &[(Vec<u32>, Vec<u32>)],
        max_len: usize,
        train: TrainConfig,
        smoothing: f64,
    ) -> Result<Self> {
        train.validate()?;
        let max_len = max_len.min(model.config.max_positions);
        let mut data = Vec::new();
        let mut skipped = 0;
        for (src, tgt) in pairs {
            match build_seq2seq_input(src, tgt, max_len) {
                Ok(inst) => data.push(inst),
                Err(Error::SequenceTooLong { .. }) => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if data.is_empty() {
            return Err(Error::Data(format!(
                "no pair fits max_len {max_len} ({skipped} skipped)"
            )));
        }
        Ok(Seq2SeqTrainer {
            model,
            optimizer: OptimizerState::new(),
            train,
            smoothing,
            data,
            skipped,
        })
    }

    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Summed smoothed loss and target count for one instance, dropout off.
    pub fn instance_loss(&self, inst: &PmlmInstance) -> Result<(f64, usize)> {
        let rows = inst.target_rows();
        let out = self.model.eval(inst, &rows)?;
        let mut loss = 0.0;
        for t in &inst.par_targets {
            let i = rows.binary_search(&t.row).expect("target row requested");
            loss += smoothed_cross_entropy(out.logits.row(i), t.token as usize, self.smoothing).0;
        }
        Ok((loss, inst.par_targets.len()))
    }

    fn example_grad(
        &self,
        inst: &PmlmInstance,
        seed: u64,
        weight: f64,
    ) -> Result<(f64, ModelParameters<T>)> {
        let rows = inst.target_rows();
        let (out, tape) = self.model.forward(inst, &rows, Mode::Train { seed })?;
        let mut d_logits = Mat::zeros(rows.len(), self.model.config.vocab_size);
        let mut loss = 0.0;
        for t in &inst.par_targets {
            let i = rows.binary_search(&t.row).expect("target row requested");
            let (l, g) = smoothed_cross_entropy(out.logits.row(i), t.token as usize, self.smoothing);
            loss += l;
            for (o, gv) in d_logits.row_mut(i).iter_mut().zip(g) {
                *o += T::of(gv * weight);
            }
        }
        let mut grads = self.model.params.zeros_like();
        self.model.backward(&tape, &d_logits, None, &mut grads)?;
        Ok((loss, grads))
    }

    pub fn train_step(&mut self) -> Result<Seq2SeqMetrics> {
        use rayon::prelude::*;

        let step = self.step();
        let batch = epoch_batch(self.train.seed, self.data.len(), self.train.batch_size, step);
        let targets: usize = batch.iter().map(|&(_, i)| self.data[i].par_targets.len()).sum();
        let weight = 1.0 / targets.max(1) as f64;
        let results: Vec<Result<(f64, ModelParameters<T>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(k, &(_, idx))| {
                let seed = derive_seed(self.train.seed, &[DROPOUT_TAG, step, k as u64]);
                self.example_grad(&self.data[idx], seed, weight)
            })
            .collect();
        let mut grads = self.model.params.zeros_like();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            grads.add_assign(&g);
        }
        {
            let mut mats: Vec<_> = grads.named_mut().into_iter().map(|(_, m)| m).collect();
            clip_global_norm(&mut mats, self.train.grad_clip);
        }
        let lr = self.train.schedule().lr(step + 1);
        let named = grads.named();
        self.optimizer
            .apply(self.model.params.named_mut(), &named, lr, &self.train.adam)?;
        Ok(Seq2SeqMetrics {
            step: step + 1,
            loss: loss * weight,
            lr,
            targets,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn pairs() -> Vec<(Vec<u32>, Vec<u32>)> {
        vec![
            (vec![6, 7, 8], vec![6, 7, 8]),
            (vec![9, 10], vec![9, 10]),
            ((6..40).collect(), vec![6]),
        ]
    }

    #[test]
    fn overflow_pairs_are_counted() {
        let model = Transformer::<f64>::new(ModelConfig::tiny(16), 2).unwrap();
        let t = Seq2SeqTrainer::new(model, &pairs(), 32, TrainConfig::default(), 0.1).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.skipped(), 1);
    }

    #[test]
    fn loss_counts_the_final_eos() {
        let model = Transformer::<f64>::new(ModelConfig::tiny(16), 2).unwrap();
        let t = Seq2SeqTrainer::new(model, &pairs(), 32, TrainConfig::default(), 0.0).unwrap();
        let inst = build_seq2seq_input(&[6, 7], &[8, 9], 32).unwrap();
        let (loss, n) = t.instance_loss(&inst).unwrap();
        assert_eq!(n, 3);
        // small random weights: near uniform over 16 tokens
        assert!((loss / 3.0 - 16f64.ln()).abs() < 0.5, "{loss}");
    }

    #[test]
    fn training_reduces_loss() {
        let model = Transformer::<f64>::new(ModelConfig::tiny(16), 2).unwrap();
        let train = TrainConfig {
            steps: 30,
            batch_size: 2,
            peak_lr: 2e-2,
            warmup_ratio: 0.0,
            ..Default::default()
        };
        let mut t = Seq2SeqTrainer::new(model, &pairs(), 32, train, 0.1).unwrap();
        let first = t.train_step().unwrap().loss;
        let mut last = first;
        for _ in 0..29 {
            last = t.train_step().unwrap().loss;
        }
        assert!(last < 0.7 * first, "{first} -> {last}");
    }
}
