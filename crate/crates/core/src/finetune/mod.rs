//! Fine-tuning: a classifier on the `[SOS]` state, sequence-to-sequence
//! training through pseudo tokens, and beam-search decoding.

mod beam;
mod classify;
mod seq2seq;

use std::path::Path;

pub use beam::{
    decode_beam, decode_greedy, length_penalty, next_token_log_probs, BeamOutput, Hypothesis,
};
pub use classify::{ClassifierHead, ClassifierMetrics, ClassifierTrainer};
pub use seq2seq::{Seq2SeqMetrics, Seq2SeqTrainer};

use crate::corpus::read_utf8;
use crate::error::{Error, Result};

/// Reads `left<TAB>right` lines. Blank lines are skipped; any other line
/// without a tab is an error naming the line.
pub fn read_tsv_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_utf8(path)?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (a, b) = line.split_once('\t').ok_or_else(|| {
            Error::Data(format!("{}:{}: expected two tab-separated fields", path.display(), n + 1))
        })?;
        pairs.push((a.to_string(), b.trim_end_matches('\r').to_string()));
    }
    Ok(pairs)
}

/// Parses integer labels; the label count is one past the largest label.
pub fn parse_labels(raw: &[String]) -> Result<(Vec<usize>, usize)> {
    let labels = raw
        .iter()
        .enumerate()
        .map(|(i, s)| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Data(format!("example {}: label {s:?} is not an integer", i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let count = labels.iter().max().map_or(0, |m| m + 1);
    Ok((labels, count))
}
