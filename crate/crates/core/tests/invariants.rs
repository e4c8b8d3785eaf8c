//! Property tests over the data path: sampling, corruption, assembly and
//! the serialized formats.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use pmlm::assembly::{assemble_pmlm_input, build_attention_mask, build_seq2seq_input};
use pmlm::checkpoint::{Checkpoint, NamedTensor};
use pmlm::corpus::{pack_pair, PackedInput, Tokenizer, TokenizerMode, Vocab};
use pmlm::masking::{
    plan_corruption, sample_blockwise_mask, BlockMaskingPolicy, CorruptionAction,
    CorruptionPlan, CorruptionPolicy, FactorizationOrder,
};
use pmlm::{audit_leakage, TokenCategory};

const MASK: u32 = 4;
const PSEUDO: u32 = 5;

fn segments() -> impl Strategy<Value = (Vec<u32>, Vec<u32>)> {
    (
        prop::collection::vec(6u32..60, 1..40),
        prop::collection::vec(6u32..60, 0..40),
    )
}

fn policy() -> impl Strategy<Value = BlockMaskingPolicy> {
    (0.05f64..0.6, 0.0f64..1.0, 1usize..4, 0usize..5).prop_map(|(ratio, block_prob, lo, extra)| {
        BlockMaskingPolicy {
            ratio,
            block_prob,
            min_block: lo,
            max_block: lo + extra,
        }
    })
}

fn sampled(s1: &[u32], s2: &[u32], p: &BlockMaskingPolicy, seed: u64) -> (PackedInput, FactorizationOrder) {
    let x = pack_pair(s1, s2, 128).unwrap();
    let order = sample_blockwise_mask(&x, p, &mut ChaCha8Rng::seed_from_u64(seed));
    (x, order)
}

/// Which categories a query may read, stated from what each row is allowed
/// to know: context knows nothing masked, a pseudo row of step k knows the
/// originals of steps before k, an original row of step k knows steps up to k.
fn oracle_visible(q: TokenCategory, k: TokenCategory) -> bool {
    use TokenCategory::*;
    match (q, k) {
        (_, Context | ConvMask) => true,
        (Context | ConvMask, _) => false,
        (Pseudo { step: a }, Original { step: b }) => b < a,
        (Pseudo { step: a }, Pseudo { step: b }) => a == b,
        (Original { step: a }, Original { step: b }) => b <= a,
        (Original { .. }, Pseudo { .. }) => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sampler_meets_budget_with_contiguous_disjoint_steps(
        (s1, s2) in segments(), p in policy(), seed in any::<u64>()
    ) {
        let (x, order) = sampled(&s1, &s2, &p, seed);
        let usable = x.usable_len();
        let budget = ((p.ratio * usable as f64) - 1e-9).ceil().max(0.0) as usize;
        let budget = budget.min(usable);
        let total = order.masked_count();
        prop_assert!(total >= budget);
        prop_assert!(total < budget + p.max_block.max(1));

        let mut seen = BTreeSet::new();
        for step in order.steps() {
            prop_assert!(!step.is_empty());
            let len = step.len();
            prop_assert!(len == 1 || (p.min_block..=p.max_block).contains(&len));
            prop_assert!(step.windows(2).all(|w| w[1] == w[0] + 1));
            for &pos in step {
                prop_assert!(x.is_usable(pos));
                prop_assert!(seen.insert(pos), "position {} masked twice", pos);
            }
            // a block never straddles the separator
            prop_assert_eq!(x.segment_ids[step[0]], x.segment_ids[*step.last().unwrap()]);
        }
    }

    #[test]
    fn sampler_is_a_function_of_the_seed(
        (s1, s2) in segments(), p in policy(), seed in any::<u64>()
    ) {
        prop_assert_eq!(sampled(&s1, &s2, &p, seed).1, sampled(&s1, &s2, &p, seed).1);
    }

    #[test]
    fn corruption_covers_exactly_the_masked_positions(
        (s1, s2) in segments(), seed in any::<u64>()
    ) {
        let (_, order) = sampled(&s1, &s2, &BlockMaskingPolicy::default(), seed);
        let vocab = pmlm::verification::synthetic_vocab(40);
        let plan = plan_corruption(&order, &vocab, &CorruptionPolicy::default(), &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        prop_assert!(plan.check_matches(&order).is_ok());
        prop_assert_eq!(plan.len(), order.masked_count());
        for (_, action) in plan.actions() {
            if let CorruptionAction::Random(id) = action {
                prop_assert!(vocab.ordinary_ids().contains(&id));
            }
        }
    }

    #[test]
    fn assembled_instance_shape_and_mask(
        (s1, s2) in segments(), seed in any::<u64>()
    ) {
        let (x, order) = sampled(&s1, &s2, &BlockMaskingPolicy::default(), seed);
        let plan = CorruptionPlan::all_mask(&order.masked_positions());
        let inst = assemble_pmlm_input(&x, &order, &plan).unwrap();
        let m = order.masked_count();
        prop_assert_eq!(inst.len(), x.len() + 2 * m);

        // the base rows keep the input with [MASK] in the masked slots
        for pos in 0..x.len() {
            let expected = if order.step_of(pos).is_some() { MASK } else { x.token_ids[pos] };
            prop_assert_eq!(inst.token_ids[pos], expected);
            prop_assert_eq!(inst.position_ids[pos], pos);
        }
        // appended rows reuse the position of the token they stand for
        for row in x.len()..inst.len() {
            let pos = inst.position_ids[row];
            let step = order.step_of(pos).expect("appended row points at a masked position");
            match inst.categories[row] {
                TokenCategory::Pseudo { step: s } => {
                    prop_assert_eq!(s, step);
                    prop_assert_eq!(inst.token_ids[row], PSEUDO);
                }
                TokenCategory::Original { step: s } => {
                    prop_assert_eq!(s, step);
                    prop_assert_eq!(inst.token_ids[row], x.token_ids[pos]);
                }
                other => prop_assert!(false, "unexpected appended category {:?}", other),
            }
            prop_assert_eq!(inst.segment_ids[row], x.segment_ids[pos]);
        }
        prop_assert_eq!(inst.ae_targets.len(), m);
        prop_assert_eq!(inst.par_targets.len(), m);

        let n = inst.len();
        for q in 0..n {
            for k in 0..n {
                prop_assert_eq!(
                    inst.attention_mask.allows(q, k),
                    oracle_visible(inst.categories[q], inst.categories[k]),
                    "q={} k={}", q, k
                );
            }
        }
        prop_assert!(audit_leakage(&inst).passed());
    }

    #[test]
    fn audit_catches_any_forbidden_edge(
        (s1, s2) in segments(), seed in any::<u64>(), pick in any::<prop::sample::Index>()
    ) {
        let (x, order) = sampled(&s1, &s2, &BlockMaskingPolicy::default(), seed);
        let plan = CorruptionPlan::all_mask(&order.masked_positions());
        let mut inst = assemble_pmlm_input(&x, &order, &plan).unwrap();
        let n = inst.len();
        let forbidden: Vec<(usize, usize)> = (0..n)
            .flat_map(|q| (0..n).map(move |k| (q, k)))
            .filter(|&(q, k)| {
                !inst.attention_mask.allows(q, k)
                    && matches!(inst.categories[k], TokenCategory::Original { .. })
            })
            .collect();
        prop_assume!(!forbidden.is_empty());
        let (q, k) = forbidden[pick.index(forbidden.len())];
        // an edge into an original token from a row that must not know it
        let knows = |cat: TokenCategory, pos_step: usize| match cat {
            TokenCategory::Pseudo { step } => pos_step < step,
            TokenCategory::Original { step } => pos_step <= step,
            _ => false,
        };
        let TokenCategory::Original { step: ks } = inst.categories[k] else { unreachable!() };
        prop_assume!(!knows(inst.categories[q], ks));
        inst.attention_mask.set(q, k, true);
        prop_assert!(!audit_leakage(&inst).passed(), "edge {} -> {} not reported", q, k);
    }

    #[test]
    fn mask_builder_matches_oracle_on_any_category_list(
        cats in prop::collection::vec((0u8..4, 0usize..4), 1..30)
    ) {
        let cats: Vec<TokenCategory> = cats
            .into_iter()
            .map(|(c, step)| match c {
                0 => TokenCategory::Context,
                1 => TokenCategory::ConvMask,
                2 => TokenCategory::Original { step },
                _ => TokenCategory::Pseudo { step },
            })
            .collect();
        let mask = build_attention_mask(&cats);
        for (q, &cq) in cats.iter().enumerate() {
            for (k, &ck) in cats.iter().enumerate() {
                prop_assert_eq!(mask.allows(q, k), oracle_visible(cq, ck));
            }
        }
    }

    #[test]
    fn seq2seq_layout_targets_every_target_token(
        src in prop::collection::vec(6u32..60, 1..20),
        tgt in prop::collection::vec(6u32..60, 0..20),
    ) {
        let inst = build_seq2seq_input(&src, &tgt, 64).unwrap();
        // targets are the target tokens followed by the closing [EOS]
        let want: Vec<u32> = tgt.iter().copied().chain([3]).collect();
        let got: Vec<u32> = inst.par_targets.iter().map(|t| t.token).collect();
        prop_assert_eq!(got, want);
        prop_assert!(inst.ae_targets.is_empty());
        prop_assert!(audit_leakage(&inst).passed());
    }

    #[test]
    fn word_vocab_round_trips_known_text(words in prop::collection::vec("[a-z]{1,6}", 1..30)) {
        let text = words.join(" ");
        let tok = Tokenizer::new(TokenizerMode::Word, false);
        let vocab = Vocab::build(&text, 1000, &tok).unwrap();
        prop_assert_eq!(vocab.decode(&vocab.encode(&text, &tok), &tok), text);
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        tensors in prop::collection::vec(
            (1usize..5, 1usize..5).prop_flat_map(|(r, c)| {
                (Just(vec![r, c]), prop::collection::vec(-1e6f32..1e6, r * c))
            }),
            0..5,
        ),
        meta in prop::collection::vec(("[a-z]{1,8}", "[a-z0-9.]{0,8}"), 0..5),
    ) {
        let mut ck = Checkpoint::new();
        for (k, v) in &meta {
            ck.set_meta(k, v);
        }
        for (i, (dims, data)) in tensors.into_iter().enumerate() {
            ck.insert(NamedTensor { name: format!("t{i}"), dims, data });
        }
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(back, ck);
    }
}
