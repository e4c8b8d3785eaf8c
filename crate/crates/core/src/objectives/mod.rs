//! AE, PAR (and AR) losses read off a single forward pass, plus the
//! optimizer and the pre-training loop.

mod optim;
mod pretrain;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use optim::{
    adamw_update, clip_global_norm, AdamHyper, LinearSchedule, OptimizerState, TrainConfig,
};
pub use pretrain::{PretrainConfig, Pretrainer, StepMetrics};

use crate::assembly::{assemble_pmlm_input, build_cloze_instance, PmlmInstance, Target};
use crate::corpus::{PackedInput, Vocab};
use crate::error::{Error, Result};
use crate::masking::{
    plan_corruption, sample_blockwise_mask, BlockMaskingPolicy, CorruptionPolicy,
    FactorizationOrder,
};
use crate::model::{ForwardOutput, Mat, Mode, ModelParameters, Scalar, Transformer};

/// Which losses are trained; the axes of the objective ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum ObjectiveKind {
    Ae,
    Ar,
    Par,
    AeAr,
    #[default]
    AePar,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        ObjectiveKind::Ae,
        ObjectiveKind::Ar,
        ObjectiveKind::Par,
        ObjectiveKind::AeAr,
        ObjectiveKind::AePar,
    ];

    pub fn trains_ae(self) -> bool {
        matches!(self, ObjectiveKind::Ae | ObjectiveKind::AeAr | ObjectiveKind::AePar)
    }

    /// Whether pseudo tokens are appended at all.
    pub fn trains_pseudo(self) -> bool {
        !matches!(self, ObjectiveKind::Ae)
    }

    /// AR variants split every sampled block into single-token steps.
    pub fn singleton_steps(self) -> bool {
        matches!(self, ObjectiveKind::Ar | ObjectiveKind::AeAr)
    }
}

impl FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(ObjectiveKind::Ae),
            "ar" => Ok(ObjectiveKind::Ar),
            "par" => Ok(ObjectiveKind::Par),
            "ae+ar" => Ok(ObjectiveKind::AeAr),
            "ae+par" => Ok(ObjectiveKind::AePar),
            other => Err(Error::Config(format!(
                "unknown objective {other:?} (expected ae, ar, par, ae+ar or ae+par)"
            ))),
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectiveKind::Ae => "ae",
            ObjectiveKind::Ar => "ar",
            ObjectiveKind::Par => "par",
            ObjectiveKind::AeAr => "ae+ar",
            ObjectiveKind::AePar => "ae+par",
        })
    }
}

/// A training instance and the factorization order it was built from.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub instance: PmlmInstance,
    pub order: FactorizationOrder,
}

/// Samples masks for `x` and builds the instance `objective` trains on.
///
/// The masked positions and corruption plan do not depend on the
/// objective: AR only re-splits the same blocks into single steps, AE drops
/// the pseudo tokens, PAR/AR keep the `[M]` slots untargeted.
pub fn build_training_example<R: Rng + ?Sized>(
    x: &PackedInput,
    objective: ObjectiveKind,
    masking: &BlockMaskingPolicy,
    corruption: &CorruptionPolicy,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<TrainingExample> {
    let mut order = sample_blockwise_mask(x, masking, rng);
    let plan = plan_corruption(&order, vocab, corruption, rng);
    if objective.singleton_steps() {
        order = order.into_singletons();
    }
    let instance = match objective {
        ObjectiveKind::Ae => build_cloze_instance(x, &plan),
        ObjectiveKind::Par | ObjectiveKind::Ar => {
            assemble_pmlm_input(x, &order, &plan)?.without_ae_targets()
        }
        ObjectiveKind::AeAr | ObjectiveKind::AePar => assemble_pmlm_input(x, &order, &plan)?,
    };
    Ok(TrainingExample { instance, order })
}

/// Summed negative log-likelihood over a set of target rows.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TargetLoss {
    pub sum: f64,
    pub count: usize,
}

impl TargetLoss {
    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    fn add(&mut self, other: TargetLoss) {
        self.sum += other.sum;
        self.count += other.count;
    }
}

/// AE and PAR parts of the joint loss from one forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub ae: TargetLoss,
    pub par: TargetLoss,
    /// Instances whose requested targets were empty (scored as 0).
    pub empty_targets: usize,
}

impl LossTerms {
    pub fn joint_sum(&self) -> f64 {
        self.ae.sum + self.par.sum
    }

    /// Sum of the per-token means: the optimized quantity.
    pub fn joint_mean(&self) -> f64 {
        self.ae.mean() + self.par.mean()
    }

    pub fn add(&mut self, other: &LossTerms) {
        self.ae.add(other.ae);
        self.par.add(other.par);
        self.empty_targets += other.empty_targets;
    }
}

fn nll_over<T: Scalar>(out: &ForwardOutput<T>, targets: &[Target]) -> Result<TargetLoss> {
    let mut sum = 0.0;
    for t in targets {
        let logits = out.logits_at(t.row).ok_or_else(|| {
            Error::Inconsistent(format!("no logits computed for target row {}", t.row))
        })?;
        sum -= log_prob(logits, t.token as usize);
    }
    Ok(TargetLoss {
        sum,
        count: targets.len(),
    })
}

fn log_prob<T: Scalar>(logits: &[T], target: usize) -> f64 {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64c()));
    let z: f64 = logits.iter().map(|v| (v.to_f64c() - max).exp()).sum();
    logits[target].to_f64c() - max - z.ln()
}

/// `−Σ log p(x_m)` read at every `[M]` row: each masked token predicted
/// from the unmasked context only.
pub fn loss_ae<T: Scalar>(out: &ForwardOutput<T>, inst: &PmlmInstance) -> Result<TargetLoss> {
    nll_over(out, &inst.ae_targets)
}

/// `−Σ_i Σ_{m∈M_i} log p(x_m)` read at every `[P]` row. The conditioning
/// on earlier factorization steps lives entirely in the attention mask.
pub fn loss_par<T: Scalar>(out: &ForwardOutput<T>, inst: &PmlmInstance) -> Result<TargetLoss> {
    nll_over(out, &inst.par_targets)
}

/// Both losses from the same forward output.
pub fn loss_joint<T: Scalar>(out: &ForwardOutput<T>, inst: &PmlmInstance) -> Result<LossTerms> {
    let ae = loss_ae(out, inst)?;
    let par = loss_par(out, inst)?;
    Ok(LossTerms {
        ae,
        par,
        empty_targets: usize::from(ae.is_empty() && par.is_empty()),
    })
}

/// Cross-entropy against `(1−ε)·onehot + ε/V` and its gradient with
/// respect to the logits (`softmax − q`).
pub fn smoothed_cross_entropy<T: Scalar>(logits: &[T], target: usize, smoothing: f64) -> (f64, Vec<f64>) {
    let v = logits.len() as f64;
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, x| m.max(x.to_f64c()));
    let exps: Vec<f64> = logits.iter().map(|x| (x.to_f64c() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let log_z = z.ln();
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (i, (x, e)) in logits.iter().zip(&exps).enumerate() {
        let q = smoothing / v + if i == target { 1.0 - smoothing } else { 0.0 };
        let log_p = x.to_f64c() - max - log_z;
        if q > 0.0 {
            loss -= q * log_p;
        }
        grad.push(e / z - q);
    }
    (loss, grad)
}

/// Per-target weights for one batch: `1/N_ae` and `1/N_par`, so the batch
/// objective is the sum of per-token means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetWeights {
    pub ae: f64,
    pub par: f64,
}

impl TargetWeights {
    pub fn for_batch<'a>(instances: impl IntoIterator<Item = &'a PmlmInstance>) -> Self {
        let (mut ae, mut par) = (0usize, 0usize);
        for inst in instances {
            ae += inst.ae_targets.len();
            par += inst.par_targets.len();
        }
        let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
        TargetWeights {
            ae: inv(ae),
            par: inv(par),
        }
    }
}

/// One forward and one backward pass over `inst`: loss terms and the
/// gradient of `w.ae·L_AE + w.par·L_PAR`.
pub fn example_gradient<T: Scalar>(
    model: &Transformer<T>,
    inst: &PmlmInstance,
    weights: TargetWeights,
    dropout_seed: u64,
) -> Result<(LossTerms, ModelParameters<T>)> {
    let rows = inst.target_rows();
    let (out, tape) = model.forward(inst, &rows, Mode::Train { seed: dropout_seed })?;
    let terms = loss_joint(&out, inst)?;
    let vocab = model.config.vocab_size;
    let mut d_logits = Mat::zeros(rows.len(), vocab);
    let mut fill = |targets: &[Target], w: f64| {
        for t in targets {
            let i = rows.binary_search(&t.row).expect("target row requested");
            let (_, grad) = smoothed_cross_entropy(out.logits.row(i), t.token as usize, 0.0);
            for (o, g) in d_logits.row_mut(i).iter_mut().zip(grad) {
                *o += T::of(g * w);
            }
        }
    };
    fill(&inst.ae_targets, weights.ae);
    fill(&inst.par_targets, weights.par);
    let mut grads = model.params.zeros_like();
    model.backward(&tape, &d_logits, None, &mut grads)?;
    Ok((terms, grads))
}

/// Gradients of every instance summed in batch order.
pub fn batch_gradient<T: Scalar>(
    model: &Transformer<T>,
    instances: &[PmlmInstance],
    dropout_seeds: &[u64],
) -> Result<(LossTerms, ModelParameters<T>)> {
    use rayon::prelude::*;

    let weights = TargetWeights::for_batch(instances);
    let per_example: Vec<Result<(LossTerms, ModelParameters<T>)>> = instances
        .par_iter()
        .zip(dropout_seeds.par_iter())
        .map(|(inst, &seed)| example_gradient(model, inst, weights, seed))
        .collect();
    let mut terms = LossTerms::default();
    let mut total = model.params.zeros_like();
    for r in per_example {
        let (t, g) = r?;
        terms.add(&t);
        total.add_assign(&g);
    }
    Ok((terms, total))
}
