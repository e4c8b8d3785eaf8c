//! Combined PMLM instances and the oracle instances they are checked against.
//!
//! Canonical layout of a combined instance: the packed input with every
//! masked position holding its corruption token (`[M]` slots), followed, per
//! factorization step, by that step's `[P]` tokens and then that step's
//! original tokens. Appended tokens reuse the position and segment id of the
//! position they stand for, so the physical order carries no meaning.

mod audit;
mod mask;

use std::fmt;
use std::ops::Range;

pub use audit::{attention_bfs, audit_leakage, LeakPath, LeakageReport};
pub use mask::{build_attention_mask, visible, AttentionMask};

use crate::corpus::{PackedInput, Vocab, EOS_ID, PSEUDO_ID, SOS_ID};
use crate::error::{Error, Result};
use crate::masking::{CorruptionPlan, FactorizationOrder};

/// Role of one token in an instance. `step` is the 0-based factorization step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenCategory {
    Context,
    ConvMask,
    Original { step: usize },
    Pseudo { step: usize },
}

impl TokenCategory {
    pub fn code(&self) -> String {
        match self {
            TokenCategory::Context => "C".into(),
            TokenCategory::ConvMask => "M".into(),
            TokenCategory::Original { step } => format!("O{}", step + 1),
            TokenCategory::Pseudo { step } => format!("P{}", step + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Target {
    pub row: usize,
    pub token: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PmlmInstance {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<usize>,
    pub segment_ids: Vec<u8>,
    pub categories: Vec<TokenCategory>,
    pub attention_mask: AttentionMask,
    /// Targets read at `[M]` rows.
    pub ae_targets: Vec<Target>,
    /// Targets read at `[P]` rows.
    pub par_targets: Vec<Target>,
}

impl PmlmInstance {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.categories
            .iter()
            .filter_map(|c| match c {
                TokenCategory::Pseudo { step } | TokenCategory::Original { step } => Some(step + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    /// Rows carrying a prediction target, AE first, deduplicated.
    pub fn target_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self
            .ae_targets
            .iter()
            .chain(&self.par_targets)
            .map(|t| t.row)
            .collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    }

    pub fn rows_of(&self, category: TokenCategory) -> Vec<usize> {
        (0..self.len())
            .filter(|&r| self.categories[r] == category)
            .collect()
    }

    /// Short human label: `x4` for content, `[M]4`, `[P]4`.
    pub fn label(&self, row: usize) -> String {
        let pos = self.position_ids[row];
        match self.categories[row] {
            TokenCategory::ConvMask => format!("[M]{pos}"),
            TokenCategory::Pseudo { .. } => format!("[P]{pos}"),
            TokenCategory::Context if self.token_ids[row] == SOS_ID => format!("[SOS]{pos}"),
            _ if self.token_ids[row] == EOS_ID => format!("[EOS]{pos}"),
            _ => format!("x{pos}"),
        }
    }

    pub fn without_ae_targets(mut self) -> Self {
        self.ae_targets.clear();
        self
    }

    /// The same instance with tokens reordered so new row `i` is old row
    /// `perm[i]`; targets follow their rows.
    pub fn permuted(&self, perm: &[usize]) -> PmlmInstance {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let remap = |ts: &[Target]| {
            ts.iter()
                .map(|t| Target {
                    row: inverse[t.row],
                    token: t.token,
                })
                .collect()
        };
        PmlmInstance {
            token_ids: perm.iter().map(|&o| self.token_ids[o]).collect(),
            position_ids: perm.iter().map(|&o| self.position_ids[o]).collect(),
            segment_ids: perm.iter().map(|&o| self.segment_ids[o]).collect(),
            categories: perm.iter().map(|&o| self.categories[o]).collect(),
            attention_mask: self.attention_mask.permute(perm),
            ae_targets: remap(&self.ae_targets),
            par_targets: remap(&self.par_targets),
        }
    }

    /// Line-oriented dump: one labelled line per token, the 0/1 grid, and
    /// the audit verdict.
    pub fn render(&self, vocab: Option<&Vocab>) -> String {
        let mut out = String::new();
        out.push_str("# tokens: row token category position segment\n");
        for r in 0..self.len() {
            let tok = vocab
                .and_then(|v| v.token(self.token_ids[r]))
                .map(|t| t.escape_debug().to_string())
                .unwrap_or_else(|| self.token_ids[r].to_string());
            out.push_str(&format!(
                "{r} {tok} {} {} {}\n",
                self.categories[r].code(),
                self.position_ids[r],
                self.segment_ids[r]
            ));
        }
        out.push_str("# mask\n");
        out.push_str(&self.attention_mask.to_string());
        out.push_str(&audit_leakage(self).to_string());
        out
    }
}

impl fmt::Display for PmlmInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render(None))
    }
}

fn base_tokens(x: &PackedInput, plan: &CorruptionPlan) -> (Vec<u32>, Vec<TokenCategory>) {
    let mut tokens = Vec::with_capacity(x.len());
    let mut cats = Vec::with_capacity(x.len());
    for (p, &orig) in x.token_ids.iter().enumerate() {
        match plan.corrupted_token(p, orig) {
            Some(tok) => {
                tokens.push(tok);
                cats.push(TokenCategory::ConvMask);
            }
            None => {
                tokens.push(orig);
                cats.push(TokenCategory::Context);
            }
        }
    }
    (tokens, cats)
}

struct Builder {
    token_ids: Vec<u32>,
    position_ids: Vec<usize>,
    segment_ids: Vec<u8>,
    categories: Vec<TokenCategory>,
    ae_targets: Vec<Target>,
    par_targets: Vec<Target>,
}

impl Builder {
    fn from_base(x: &PackedInput, plan: &CorruptionPlan, ae_targets: bool) -> Builder {
        let (token_ids, categories) = base_tokens(x, plan);
        let ae = if ae_targets {
            plan.actions()
                .map(|(p, _)| Target {
                    row: p,
                    token: x.token_ids[p],
                })
                .collect()
        } else {
            Vec::new()
        };
        Builder {
            token_ids,
            position_ids: (0..x.len()).collect(),
            segment_ids: x.segment_ids.clone(),
            categories,
            ae_targets: ae,
            par_targets: Vec::new(),
        }
    }

    fn push(&mut self, token: u32, position: usize, segment: u8, cat: TokenCategory) -> usize {
        self.token_ids.push(token);
        self.position_ids.push(position);
        self.segment_ids.push(segment);
        self.categories.push(cat);
        self.token_ids.len() - 1
    }

    fn push_pseudo(&mut self, x: &PackedInput, step: usize, positions: &[usize]) {
        for &p in positions {
            let row = self.push(PSEUDO_ID, p, x.segment_ids[p], TokenCategory::Pseudo { step });
            self.par_targets.push(Target {
                row,
                token: x.token_ids[p],
            });
        }
    }

    fn push_originals(&mut self, x: &PackedInput, step: usize, positions: &[usize]) {
        for &p in positions {
            self.push(
                x.token_ids[p],
                p,
                x.segment_ids[p],
                TokenCategory::Original { step },
            );
        }
    }

    fn finish(self) -> PmlmInstance {
        let attention_mask = build_attention_mask(&self.categories);
        PmlmInstance {
            token_ids: self.token_ids,
            position_ids: self.position_ids,
            segment_ids: self.segment_ids,
            categories: self.categories,
            attention_mask,
            ae_targets: self.ae_targets,
            par_targets: self.par_targets,
        }
    }
}

fn check_consistent(x: &PackedInput, order: &FactorizationOrder, plan: &CorruptionPlan) -> Result<()> {
    if x.segment_ids.len() != x.token_ids.len() {
        return Err(Error::Inconsistent("token/segment length mismatch".into()));
    }
    order.validate(x)?;
    plan.check_matches(order)
}

/// The one-pass instance: `[M]` slots in place, then per step its `[P]`
/// block and its original-token block. Length is `|x| + 2·masked`.
pub fn assemble_pmlm_input(
    x: &PackedInput,
    order: &FactorizationOrder,
    plan: &CorruptionPlan,
) -> Result<PmlmInstance> {
    check_consistent(x, order, plan)?;
    let mut b = Builder::from_base(x, plan, true);
    for (step, positions) in order.steps().iter().enumerate() {
        b.push_pseudo(x, step, positions);
        b.push_originals(x, step, positions);
    }
    Ok(b.finish())
}

/// Vanilla cloze instance: corruption applied in place, full bidirectional
/// attention, AE targets only.
pub fn build_cloze_instance(x: &PackedInput, plan: &CorruptionPlan) -> PmlmInstance {
    let b = Builder::from_base(x, plan, true);
    let mut inst = b.finish();
    inst.attention_mask = AttentionMask::full(inst.len());
    inst
}

/// Standalone instance for factorization step `step` (0-based): the base
/// sequence, the original tokens of every earlier step, and this step's
/// pseudo tokens, masked by the same visibility rule.
pub fn build_step_instance(
    x: &PackedInput,
    order: &FactorizationOrder,
    plan: &CorruptionPlan,
    step: usize,
) -> Result<PmlmInstance> {
    check_consistent(x, order, plan)?;
    if step >= order.len() {
        return Err(Error::StepOutOfRange {
            step,
            steps: order.len(),
        });
    }
    let mut b = Builder::from_base(x, plan, false);
    for (j, positions) in order.steps()[..step].iter().enumerate() {
        b.push_originals(x, j, positions);
    }
    b.push_pseudo(x, step, &order.steps()[step]);
    Ok(b.finish())
}

/// Rows of a combined instance that its step-`step` oracle contains, in the
/// oracle's row order.
pub fn step_rows(inst: &PmlmInstance, step: usize) -> Vec<usize> {
    (0..inst.len())
        .filter(|&r| match inst.categories[r] {
            TokenCategory::Context | TokenCategory::ConvMask => true,
            TokenCategory::Original { step: j } => j < step,
            TokenCategory::Pseudo { step: j } => j == step,
        })
        .collect()
}

/// `[SOS] SRC [EOS]` as bidirectional context, the target tokens (ending in
/// `[EOS]`) as single-token steps, and pseudo tokens for `pseudo_steps`.
fn seq2seq_layout(
    src: &[u32],
    targets: &[u32],
    pseudo_steps: Range<usize>,
    max_len: usize,
) -> Result<PmlmInstance> {
    let packed_len = src.len() + 2 + targets.len();
    if packed_len > max_len || src.len() + 2 + pseudo_steps.end > max_len {
        return Err(Error::SequenceTooLong {
            len: packed_len.max(src.len() + 2 + pseudo_steps.end),
            max_len,
        });
    }
    let mut b = Builder {
        token_ids: Vec::new(),
        position_ids: Vec::new(),
        segment_ids: Vec::new(),
        categories: Vec::new(),
        ae_targets: Vec::new(),
        par_targets: Vec::new(),
    };
    let mut ctx = Vec::with_capacity(src.len() + 2);
    ctx.push(SOS_ID);
    ctx.extend_from_slice(src);
    ctx.push(EOS_ID);
    for (p, &tok) in ctx.iter().enumerate() {
        b.push(tok, p, 0, TokenCategory::Context);
    }
    let tgt_start = ctx.len();
    for (k, &tok) in targets.iter().enumerate() {
        b.push(tok, tgt_start + k, 1, TokenCategory::Original { step: k });
    }
    for k in pseudo_steps {
        let row = b.push(PSEUDO_ID, tgt_start + k, 1, TokenCategory::Pseudo { step: k });
        if let Some(&tok) = targets.get(k) {
            b.par_targets.push(Target { row, token: tok });
        }
    }
    Ok(b.finish())
}

/// Fine-tuning view of a `(source, target)` pair: the target plus its
/// terminating `[EOS]`, each with a `[P]` at the same position. Length is
/// `|src| + 2 + 2·(|tgt| + 1)`.
pub fn build_seq2seq_input(src: &[u32], tgt: &[u32], max_len: usize) -> Result<PmlmInstance> {
    for (i, &t) in src.iter().chain(tgt).enumerate() {
        if Vocab::is_special(t) && t != crate::corpus::UNK_ID {
            return Err(Error::SpecialInSegment { id: t, index: i });
        }
    }
    let mut targets = tgt.to_vec();
    targets.push(EOS_ID);
    let n = targets.len();
    seq2seq_layout(src, &targets, 0..n, max_len)
}

/// Decoding view: the generated prefix as ordinary target tokens plus one
/// `[P]` at the next target position. The `[P]` row is the last row.
pub fn build_generation_input(src: &[u32], prefix: &[u32], max_len: usize) -> Result<PmlmInstance> {
    let k = prefix.len();
    seq2seq_layout(src, prefix, k..k + 1, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{pack_pair, MASK_ID};
    use crate::masking::CorruptionAction;

    /// `[SOS] x1..x6 [EOS] [EOS]`, so row `k` holds `x_k`.
    fn six() -> PackedInput {
        pack_pair(&[11, 12, 13, 14, 15, 16], &[], 16).unwrap()
    }

    fn fig_order(x: &PackedInput) -> FactorizationOrder {
        FactorizationOrder::new(vec![vec![4, 5], vec![2]], x).unwrap()
    }

    fn fig_instance() -> PmlmInstance {
        let x = six();
        let order = fig_order(&x);
        let plan = CorruptionPlan::all_mask(&order.masked_positions());
        assemble_pmlm_input(&x, &order, &plan).unwrap()
    }

    fn row(inst: &PmlmInstance, cat: TokenCategory, pos: usize) -> usize {
        (0..inst.len())
            .find(|&r| inst.categories[r] == cat && inst.position_ids[r] == pos)
            .unwrap()
    }

    #[test]
    fn figure_layout_and_positions() {
        let inst = fig_instance();
        let m = MASK_ID;
        let p = PSEUDO_ID;
        assert_eq!(
            inst.token_ids,
            vec![SOS_ID, 11, m, 13, m, m, 16, EOS_ID, EOS_ID, p, p, 14, 15, p, 12]
        );
        assert_eq!(
            inst.position_ids,
            vec![0, 1, 2, 3, 4, 5, 6, 7, 8, 4, 5, 4, 5, 2, 2]
        );
        assert_eq!(inst.len(), 9 + 2 * 3);
        assert_eq!(
            inst.par_targets,
            vec![
                Target { row: 9, token: 14 },
                Target { row: 10, token: 15 },
                Target { row: 13, token: 12 }
            ]
        );
        assert_eq!(inst.ae_targets.iter().map(|t| t.row).collect::<Vec<_>>(), vec![2, 4, 5]);
    }

    #[test]
    fn figure_mask_entries() {
        let inst = fig_instance();
        let m = &inst.attention_mask;
        let p2 = row(&inst, TokenCategory::Pseudo { step: 1 }, 2);
        let p4 = row(&inst, TokenCategory::Pseudo { step: 0 }, 4);
        let x4 = row(&inst, TokenCategory::Original { step: 0 }, 4);
        assert!(m.allows(p2, x4));
        assert!(!m.allows(p4, x4));
        assert!(!m.allows(6, x4));
        // context and [M] are attended by everyone
        for q in 0..inst.len() {
            for k in 0..9 {
                assert!(m.allows(q, k));
            }
        }
    }

    #[test]
    fn position_sharing_triples() {
        let inst = fig_instance();
        for pos in [2, 4, 5] {
            let rows: Vec<usize> = (0..inst.len())
                .filter(|&r| inst.position_ids[r] == pos)
                .collect();
            assert_eq!(rows.len(), 3);
            let segs: Vec<u8> = rows.iter().map(|&r| inst.segment_ids[r]).collect();
            assert!(segs.iter().all(|&s| s == segs[0]));
        }
    }

    #[test]
    fn empty_order_is_plain_input() {
        let x = six();
        let inst = assemble_pmlm_input(&x, &FactorizationOrder::empty(), &CorruptionPlan::default()).unwrap();
        assert_eq!(inst.token_ids, x.token_ids);
        assert!(inst.ae_targets.is_empty() && inst.par_targets.is_empty());
        assert_eq!(inst.attention_mask, AttentionMask::full(x.len()));
        assert!(audit_leakage(&inst).passed());
    }

    #[test]
    fn single_masked_token() {
        let x = six();
        let order = FactorizationOrder::new(vec![vec![3]], &x).unwrap();
        let plan = CorruptionPlan::all_mask(&[3]);
        let inst = assemble_pmlm_input(&x, &order, &plan).unwrap();
        assert_eq!(inst.len(), x.len() + 2);
        assert_eq!(&inst.position_ids[x.len()..], &[3, 3]);
        assert_eq!(inst.categories[x.len()], TokenCategory::Pseudo { step: 0 });
    }

    #[test]
    fn inconsistent_plan_is_rejected() {
        let x = six();
        let order = fig_order(&x);
        let plan = CorruptionPlan::all_mask(&[2, 4]);
        assert!(matches!(
            assemble_pmlm_input(&x, &order, &plan),
            Err(Error::Inconsistent(_))
        ));
    }

    #[test]
    fn injected_edge_fails_audit_with_implicit_path() {
        let mut inst = fig_instance();
        assert!(audit_leakage(&inst).passed());
        let x4 = row(&inst, TokenCategory::Original { step: 0 }, 4);
        inst.attention_mask.set(6, x4, true);
        let report = audit_leakage(&inst);
        assert!(!report.passed());
        let paths: Vec<String> = report.violations.iter().map(|v| v.to_string()).collect();
        assert!(paths.contains(&"[P]4 -> x6 -> x4".to_string()), "{paths:?}");
    }

    #[test]
    fn explicit_leak_is_detected() {
        let mut inst = fig_instance();
        let p4 = row(&inst, TokenCategory::Pseudo { step: 0 }, 4);
        let x4 = row(&inst, TokenCategory::Original { step: 0 }, 4);
        inst.attention_mask.set(p4, x4, true);
        let report = audit_leakage(&inst);
        assert!(report
            .violations
            .iter()
            .any(|v| v.rows == vec![p4, x4]));
    }

    #[test]
    fn cloze_instance_is_full_and_matches_sub_block() {
        let x = six();
        let order = fig_order(&x);
        let plan = CorruptionPlan::all_mask(&order.masked_positions());
        let cloze = build_cloze_instance(&x, &plan);
        assert_eq!(cloze.len(), x.len());
        assert_eq!(cloze.attention_mask, AttentionMask::full(x.len()));
        let big = assemble_pmlm_input(&x, &order, &plan).unwrap();
        let base: Vec<usize> = (0..x.len()).collect();
        assert_eq!(big.attention_mask.restrict(&base), cloze.attention_mask);
        assert_eq!(&big.token_ids[..x.len()], &cloze.token_ids[..]);

        let empty = build_cloze_instance(&x, &CorruptionPlan::default());
        assert_eq!(empty.token_ids, x.token_ids);
        assert!(empty.ae_targets.is_empty());
    }

    #[test]
    fn step_instances_match_figure() {
        let x = six();
        let order = fig_order(&x);
        let plan = CorruptionPlan::all_mask(&order.masked_positions());
        let s1 = build_step_instance(&x, &order, &plan, 0).unwrap();
        assert_eq!(
            s1.token_ids,
            vec![SOS_ID, 11, MASK_ID, 13, MASK_ID, MASK_ID, 16, EOS_ID, EOS_ID, PSEUDO_ID, PSEUDO_ID]
        );
        let s2 = build_step_instance(&x, &order, &plan, 1).unwrap();
        assert_eq!(&s2.token_ids[9..], &[14, 15, PSEUDO_ID]);
        assert_eq!(&s2.position_ids[9..], &[4, 5, 2]);
        assert!(matches!(
            build_step_instance(&x, &order, &plan, 2),
            Err(Error::StepOutOfRange { step: 2, steps: 2 })
        ));

        let big = assemble_pmlm_input(&x, &order, &plan).unwrap();
        for (step, oracle) in [(0, &s1), (1, &s2)] {
            let rows = step_rows(&big, step);
            assert_eq!(big.attention_mask.restrict(&rows), oracle.attention_mask);
            let toks: Vec<u32> = rows.iter().map(|&r| big.token_ids[r]).collect();
            assert_eq!(toks, oracle.token_ids);
        }
    }

    #[test]
    fn singleton_first_step_is_cloze_plus_pseudo_row() {
        let x = six();
        let order = FactorizationOrder::new(vec![vec![3]], &x).unwrap();
        let plan = CorruptionPlan::from_actions([(3, CorruptionAction::Mask)]);
        let step = build_step_instance(&x, &order, &plan, 0).unwrap();
        let cloze = build_cloze_instance(&x, &plan);
        assert_eq!(&step.token_ids[..x.len()], &cloze.token_ids[..]);
        assert_eq!(step.len(), cloze.len() + 1);
        let base: Vec<usize> = (0..x.len()).collect();
        assert_eq!(step.attention_mask.restrict(&base), cloze.attention_mask);
    }

    #[test]
    fn seq2seq_layout_and_visibility() {
        let inst = build_seq2seq_input(&[10, 11], &[12], 32).unwrap();
        assert_eq!(inst.len(), 2 + 2 + 2 * 2);
        assert_eq!(
            inst.token_ids,
            vec![SOS_ID, 10, 11, EOS_ID, 12, EOS_ID, PSEUDO_ID, PSEUDO_ID]
        );
        assert_eq!(inst.position_ids, vec![0, 1, 2, 3, 4, 5, 4, 5]);
        let (c, eos, p_c, p_eos) = (4, 5, 6, 7);
        let m = &inst.attention_mask;
        assert!(!m.allows(p_c, c));
        assert!(m.allows(p_eos, c));
        assert!(!m.allows(p_eos, eos));
        assert!(m.allows(eos, c) && m.allows(eos, eos));
        assert!(!m.allows(1, c));
        assert_eq!(
            inst.par_targets,
            vec![Target { row: p_c, token: 12 }, Target { row: p_eos, token: EOS_ID }]
        );
        assert!(audit_leakage(&inst).passed());
    }

    #[test]
    fn seq2seq_length_formula_and_overflow() {
        for n in 0..5 {
            let tgt: Vec<u32> = (0..n).map(|i| 20 + i).collect();
            let inst = build_seq2seq_input(&[10, 11, 12], &tgt, 64).unwrap();
            assert_eq!(inst.len(), 3 + 2 + 2 * (n as usize + 1));
        }
        assert!(matches!(
            build_seq2seq_input(&[10; 10], &[11; 10], 20),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn generation_input_has_single_trailing_pseudo() {
        let inst = build_generation_input(&[10, 11], &[12, 13], 32).unwrap();
        let last = inst.len() - 1;
        assert_eq!(inst.token_ids[last], PSEUDO_ID);
        assert_eq!(inst.position_ids[last], 6);
        assert_eq!(inst.categories[last], TokenCategory::Pseudo { step: 2 });
        assert!(inst.par_targets.is_empty());
        assert!(audit_leakage(&inst).passed());
    }
}
