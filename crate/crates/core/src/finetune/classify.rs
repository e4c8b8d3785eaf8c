use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::assembly::{build_cloze_instance, PmlmInstance};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::corpus::PackedInput;
use crate::error::{Error, Result};
use crate::masking::CorruptionPlan;
use crate::model::{Mat, Mode, ModelParameters, Scalar, Transformer};
use crate::objectives::{clip_global_norm, smoothed_cross_entropy, OptimizerState, TrainConfig};
use crate::seed::{derive_seed, epoch_batch, rng_for};

const HEAD_INIT_TAG: u64 = 0xC1;
const DROPOUT_TAG: u64 = 0xC2;

/// Linear softmax classifier over the top `[SOS]` hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    /// hidden × labels
    pub weight: Mat<T>,
    pub bias: Mat<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    /// Zero-mean normal weights with variance `2/(fan_in + fan_out)`.
    pub fn new<R: Rng + ?Sized>(hidden: usize, labels: usize, rng: &mut R) -> Self {
        let std = (2.0 / (hidden + labels) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        ClassifierHead {
            weight: Mat::from_vec(
                hidden,
                labels,
                (0..hidden * labels).map(|_| T::of(normal.sample(rng))).collect(),
            ),
            bias: Mat::zeros(1, labels),
        }
    }

    pub fn num_labels(&self) -> usize {
        self.bias.cols
    }

    pub fn logits(&self, h: &[T]) -> Vec<T> {
        (0..self.num_labels())
            .map(|j| {
                h.iter()
                    .enumerate()
                    .fold(self.bias.data[j], |acc, (i, &x)| acc + x * self.weight.at(i, j))
            })
            .collect()
    }

    pub fn named(&self) -> Vec<(String, &Mat<T>)> {
        vec![
            ("classifier.weight".into(), &self.weight),
            ("classifier.bias".into(), &self.bias),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        vec![
            ("classifier.weight".into(), &mut self.weight),
            ("classifier.bias".into(), &mut self.bias),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierMetrics {
    pub step: u64,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

impl ClassifierMetrics {
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "step": self.step,
            "loss": self.loss,
            "accuracy": self.accuracy,
            "lr": self.lr,
        })
        .to_string()
    }
}

/// Encoder view of `[SOS] TEXT [EOS]`: full attention, no targets.
fn encoder_instance(x: &PackedInput) -> PmlmInstance {
    build_cloze_instance(x, &CorruptionPlan::default())
}

/// Fine-tunes body and head (or the head alone when `freeze_body`) with
/// cross-entropy over labels.
pub struct ClassifierTrainer<T: Scalar> {
    pub model: Transformer<T>,
    pub head: ClassifierHead<T>,
    pub optimizer: OptimizerState<T>,
    pub train: TrainConfig,
    pub freeze_body: bool,
    data: Vec<(PmlmInstance, usize)>,
}

impl<T: Scalar> ClassifierTrainer<T> {
    pub fn new(
        model: Transformer<T>,
        num_labels: usize,
        data: Vec<(PackedInput, usize)>,
        train: TrainConfig,
        freeze_body: bool,
    ) -> Result<Self> {
        if num_labels == 0 {
            return Err(Error::Config("num_labels must be at least 1".into()));
        }
        if data.is_empty() {
            return Err(Error::Data("no labeled examples".into()));
        }
        if let Some(&(_, label)) = data.iter().find(|(_, l)| *l >= num_labels) {
            return Err(Error::LabelOutOfRange {
                label,
                count: num_labels,
            });
        }
        train.validate()?;
        let head = ClassifierHead::new(
            model.config.hidden_size,
            num_labels,
            &mut rng_for(train.seed, &[HEAD_INIT_TAG]),
        );
        Ok(ClassifierTrainer {
            model,
            head,
            optimizer: OptimizerState::new(),
            train,
            freeze_body,
            data: data.into_iter().map(|(x, l)| (encoder_instance(&x), l)).collect(),
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// Label distribution for one input, dropout off.
    pub fn predict(&self, x: &PackedInput) -> Result<Vec<f64>> {
        let out = self.model.eval(&encoder_instance(x), &[])?;
        let logits = self.head.logits(out.hidden.row(0));
        let (_, grad) = smoothed_cross_entropy(&logits, 0, 0.0);
        // softmax = grad + onehot(0)
        Ok(grad
            .iter()
            .enumerate()
            .map(|(i, g)| if i == 0 { g + 1.0 } else { *g })
            .collect())
    }

    /// Mean loss and accuracy over the training set, dropout off.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (inst, label) in &self.data {
            let out = self.model.eval(inst, &[])?;
            let logits = self.head.logits(out.hidden.row(0));
            loss += smoothed_cross_entropy(&logits, *label, 0.0).0;
            correct += usize::from(argmax(&logits) == *label);
        }
        let n = self.data.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }

    pub fn train_step(&mut self) -> Result<ClassifierMetrics> {
        use rayon::prelude::*;

        let step = self.step();
        let batch = epoch_batch(self.train.seed, self.data.len(), self.train.batch_size, step);
        let inv_b = 1.0 / batch.len() as f64;
        let results: Vec<Result<ExampleGrad<T>>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, &(_, idx))| {
                let seed = derive_seed(self.train.seed, &[DROPOUT_TAG, step, i as u64]);
                self.example_grad(idx, seed, inv_b)
            })
            .collect();
        let mut body = self.model.params.zeros_like();
        let mut head_w = self.head.weight.zeros_like();
        let mut head_b = self.head.bias.zeros_like();
        let (mut loss, mut correct) = (0.0, 0usize);
        for r in results {
            let g = r?;
            loss += g.loss;
            correct += usize::from(g.correct);
            head_w.add_assign(&g.head_w);
            head_b.add_assign(&g.head_b);
            if let Some(b) = g.body {
                body.add_assign(&b);
            }
        }
        {
            let mut mats: Vec<&mut Mat<T>> = vec![&mut head_w, &mut head_b];
            if !self.freeze_body {
                mats.extend(body.named_mut().into_iter().map(|(_, m)| m));
            }
            clip_global_norm(&mut mats, self.train.grad_clip);
        }
        let lr = self.train.schedule().lr(step + 1);
        let mut params = self.head.named_mut();
        let mut grads = vec![
            ("classifier.weight".to_string(), &head_w),
            ("classifier.bias".to_string(), &head_b),
        ];
        if !self.freeze_body {
            params.extend(self.model.params.named_mut());
            grads.extend(body.named());
        }
        self.optimizer.apply(params, &grads, lr, &self.train.adam)?;
        Ok(ClassifierMetrics {
            step: step + 1,
            loss: loss * inv_b,
            accuracy: correct as f64 * inv_b,
            lr,
        })
    }

    fn example_grad(&self, idx: usize, seed: u64, weight: f64) -> Result<ExampleGrad<T>> {
        let (inst, label) = &self.data[idx];
        let (out, tape) = self.model.forward(inst, &[], Mode::Train { seed })?;
        let h0 = out.hidden.row(0);
        let logits = self.head.logits(h0);
        let (loss, dz) = smoothed_cross_entropy(&logits, *label, 0.0);
        let dz: Vec<T> = dz.iter().map(|g| T::of(g * weight)).collect();
        let d = h0.len();
        let mut head_w = self.head.weight.zeros_like();
        let mut d_h0 = vec![T::zero(); d];
        for i in 0..d {
            for (j, &g) in dz.iter().enumerate() {
                *head_w.data.get_mut(i * dz.len() + j).expect("head shape") = h0[i] * g;
                d_h0[i] += self.head.weight.at(i, j) * g;
            }
        }
        let head_b = Mat::from_vec(1, dz.len(), dz);
        let body = if self.freeze_body {
            None
        } else {
            let mut d_hidden = Mat::zeros(inst.len(), d);
            d_hidden.row_mut(0).copy_from_slice(&d_h0);
            let mut g = ModelParameters::zeros_like(&self.model.params);
            let no_logits = Mat::zeros(0, self.model.config.vocab_size);
            self.model.backward(&tape, &no_logits, Some(&d_hidden), &mut g)?;
            Some(g)
        };
        Ok(ExampleGrad {
            loss,
            correct: argmax(&logits) == *label,
            head_w,
            head_b,
            body,
        })
    }

    /// Body parameters plus head tensors and the label count.
    pub fn to_checkpoint(&self, config: &RunConfig) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, config);
        ck.set_meta("kind", "classifier");
        ck.set_meta("num_labels", self.head.num_labels());
        for (name, m) in self.head.named() {
            ck.push_mat(&name, m);
        }
        ck
    }

    /// Reloads the head saved by [`Self::to_checkpoint`].
    pub fn load_head(ck: &Checkpoint) -> Result<ClassifierHead<T>> {
        Ok(ClassifierHead {
            weight: ck.mat("classifier.weight")?,
            bias: ck.mat("classifier.bias")?,
        })
    }
}

struct ExampleGrad<T> {
    loss: f64,
    correct: bool,
    head_w: Mat<T>,
    head_b: Mat<T>,
    body: Option<ModelParameters<T>>,
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, T::neg_infinity()), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}
