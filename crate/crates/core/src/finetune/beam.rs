use std::cmp::Ordering;

use crate::assembly::build_generation_input;
use crate::config::DecodeConfig;
use crate::corpus::{EOS_ID, MASK_ID, PAD_ID, PSEUDO_ID, SOS_ID};
use crate::error::{Error, Result};
use crate::model::{linalg::log_softmax, Scalar, Transformer};

/// `((5 + len) / 6)^α`.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens; a finished hypothesis ends in `[EOS]`.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn score(&self, alpha: f64) -> f64 {
        self.log_prob / length_penalty(self.tokens.len(), alpha)
    }

    /// Tokens without the terminating `[EOS]`.
    pub fn output(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&EOS_ID, rest)) if self.finished => rest,
            _ => &self.tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    pub best: Hypothesis,
    /// Every finished hypothesis, best first.
    pub finished: Vec<Hypothesis>,
    pub steps: usize,
}

fn generable(id: u32) -> bool {
    !matches!(id, PAD_ID | SOS_ID | MASK_ID | PSEUDO_ID)
}

/// Log-distribution of the next target token given `src` and `prefix`,
/// read at the single trailing `[P]`. Tokens that can never be generated
/// get `-inf`.
pub fn next_token_log_probs<T: Scalar>(
    model: &Transformer<T>,
    src: &[u32],
    prefix: &[u32],
) -> Result<Vec<f64>> {
    let inst = build_generation_input(src, prefix, model.config.max_positions)?;
    let row = inst.len() - 1;
    let out = model.eval(&inst, &[row])?;
    let mut logits: Vec<f64> = out.logits.row(0).iter().map(|v| v.to_f64c()).collect();
    for (id, l) in logits.iter_mut().enumerate() {
        if !generable(id as u32) {
            *l = f64::NEG_INFINITY;
        }
    }
    Ok(log_softmax(&logits))
}

fn step_budget<T: Scalar>(model: &Transformer<T>, src: &[u32], max_out: usize) -> Result<usize> {
    let max_len = model.config.max_positions;
    if src.len() + 3 > max_len {
        return Err(Error::SequenceTooLong {
            len: src.len() + 3,
            max_len,
        });
    }
    Ok(max_out.min(max_len - src.len() - 2))
}

/// Highest-probability token at every step until `[EOS]` or `max_out`.
pub fn decode_greedy<T: Scalar>(model: &Transformer<T>, src: &[u32], max_out: usize) -> Result<Hypothesis> {
    let steps = step_budget(model, src, max_out)?;
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..steps {
        let lp = next_token_log_probs(model, src, &h.tokens)?;
        let (tok, p) = lp
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        h.tokens.push(tok as u32);
        h.log_prob += p;
        if tok as u32 == EOS_ID {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Candidate order: higher log-probability first, then lexicographically
/// smaller tokens, so ties resolve the same way greedy does.
fn by_log_prob(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Beam search with length-normalized scores. Each step keeps the `beam`
/// best extensions; an extension ending in `[EOS]` is frozen. Stops when
/// `beam` hypotheses have finished, none are live, or after `max_out`
/// tokens. Returns the best finished hypothesis, or the best live one if
/// none finished.
pub fn decode_beam<T: Scalar>(model: &Transformer<T>, src: &[u32], cfg: &DecodeConfig) -> Result<BeamOutput> {
    let beam = cfg.beam.max(1);
    let steps = step_budget(model, src, cfg.max_out)?;
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut taken = 0;
    for _ in 0..steps {
        taken += 1;
        let mut candidates = Vec::new();
        for h in &live {
            let lp = next_token_log_probs(model, src, &h.tokens)?;
            for (tok, &p) in lp.iter().enumerate() {
                if p == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(tok as u32);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + p,
                    finished: tok as u32 == EOS_ID,
                });
            }
        }
        candidates.sort_by(by_log_prob);
        candidates.truncate(beam);
        live = Vec::new();
        for c in candidates {
            if c.finished {
                finished.push(c);
            } else {
                live.push(c);
            }
        }
        if finished.len() >= beam || live.is_empty() {
            break;
        }
    }
    let rank = |a: &Hypothesis, b: &Hypothesis| {
        b.score(cfg.alpha)
            .total_cmp(&a.score(cfg.alpha))
            .then_with(|| a.tokens.cmp(&b.tokens))
    };
    finished.sort_by(rank);
    live.sort_by(rank);
    let best = finished
        .first()
        .or(live.first())
        .cloned()
        .expect("beam keeps at least one hypothesis");
    Ok(BeamOutput {
        best,
        finished,
        steps: taken,
    })
}
