//! Blockwise span masking with a random factorization order, and the
//! 80/10/10 corruption policy for the in-place mask slots.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;

use crate::corpus::{PackedInput, Vocab, MASK_ID};
use crate::error::{Error, Result};

/// Ordered, disjoint, contiguous position sets. Step `i` (0-based here,
/// printed 1-based) is predicted conditioned on every earlier step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FactorizationOrder {
    steps: Vec<Vec<usize>>,
}

impl FactorizationOrder {
    pub fn empty() -> Self {
        FactorizationOrder::default()
    }

    /// Validates the steps against `x`: non-empty contiguous runs of at most
    /// `max_block` usable, pairwise-disjoint positions.
    pub fn new(steps: Vec<Vec<usize>>, x: &PackedInput) -> Result<Self> {
        let order = FactorizationOrder { steps };
        order.validate(x)?;
        Ok(order)
    }

    pub fn validate(&self, x: &PackedInput) -> Result<()> {
        let mut seen = vec![false; x.len()];
        for (i, step) in self.steps.iter().enumerate() {
            if step.is_empty() {
                return Err(Error::Inconsistent(format!("step {} is empty", i + 1)));
            }
            if step.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(Error::Inconsistent(format!(
                    "step {} is not a contiguous run: {step:?}",
                    i + 1
                )));
            }
            for &p in step {
                if p >= x.len() || !x.is_usable(p) {
                    return Err(Error::Inconsistent(format!(
                        "step {} covers unusable position {p}",
                        i + 1
                    )));
                }
                if std::mem::replace(&mut seen[p], true) {
                    return Err(Error::Inconsistent(format!(
                        "position {p} appears in more than one step"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> &[Vec<usize>] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.steps.iter().map(Vec::len).sum()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.steps.iter().flatten().copied().collect();
        all.sort_unstable();
        all
    }

    /// 0-based step index of `pos`, if masked.
    pub fn step_of(&self, pos: usize) -> Option<usize> {
        self.steps.iter().position(|s| s.contains(&pos))
    }

    /// Splits every block into singleton steps, left to right, keeping the
    /// step order: the autoregressive special case.
    pub fn into_singletons(self) -> Self {
        FactorizationOrder {
            steps: self
                .steps
                .into_iter()
                .flat_map(|s| s.into_iter().map(|p| vec![p]))
                .collect(),
        }
    }

    /// Collapses all positions into a single step.
    pub fn into_single_step(self) -> Self {
        let all = self.masked_positions();
        if all.is_empty() {
            return FactorizationOrder::empty();
        }
        FactorizationOrder { steps: vec![all] }
    }
}

impl fmt::Display for FactorizationOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .steps
            .iter()
            .map(|s| {
                s.iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        write!(f, "<{}>", parts.join(" -> "))
    }
}

/// Parameters of the blockwise sampler.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockMaskingPolicy {
    pub ratio: f64,
    pub block_prob: f64,
    pub min_block: usize,
    pub max_block: usize,
}

impl Default for BlockMaskingPolicy {
    fn default() -> Self {
        BlockMaskingPolicy {
            ratio: 0.15,
            block_prob: 0.4,
            min_block: 2,
            max_block: 6,
        }
    }
}

impl BlockMaskingPolicy {
    /// Masked-token budget for `usable` maskable positions.
    pub fn budget(&self, usable: usize) -> usize {
        // 0.15 * 20 is 3.0000000000000004 in binary; trim before ceil
        let exact = self.ratio * usable as f64;
        (exact - 1e-9).ceil().max(0.0) as usize
    }
}

const POSITION_RETRIES: usize = 64;

/// Blockwise masking: repeatedly draw a block length (`min..=max` with
/// probability `block_prob`, else 1) and a start position, appending each
/// fully unmasked span as the next step, until the budget is reached.
///
/// A start whose span overlaps a masked, special or padding position, or
/// runs off the end, is redrawn for the same length, so accepted blocks keep
/// the drawn length distribution. If no start fits the length at all, the
/// length is redrawn.
pub fn sample_blockwise_mask<R: Rng + ?Sized>(
    x: &PackedInput,
    policy: &BlockMaskingPolicy,
    rng: &mut R,
) -> FactorizationOrder {
    let n = x.len();
    let usable: Vec<bool> = (0..n).map(|p| x.is_usable(p)).collect();
    let usable_count = usable.iter().filter(|&&u| u).count();
    let budget = policy.budget(usable_count).min(usable_count);
    let mut masked = vec![false; n];
    let mut steps = Vec::new();
    let mut total = 0;

    let fits = |masked: &[bool], p: usize, l: usize| {
        p + l <= n && (p..p + l).all(|q| usable[q] && !masked[q])
    };

    while total < budget {
        let l = if rng.random::<f64>() < policy.block_prob {
            rng.random_range(policy.min_block..=policy.max_block)
        } else {
            1
        };
        if l > n {
            continue;
        }
        let mut start = None;
        for _ in 0..POSITION_RETRIES {
            let p = rng.random_range(0..n);
            if fits(&masked, p, l) {
                start = Some(p);
                break;
            }
        }
        if start.is_none() {
            let valid: Vec<usize> = (0..=n - l).filter(|&p| fits(&masked, p, l)).collect();
            if !valid.is_empty() {
                start = Some(valid[rng.random_range(0..valid.len())]);
            }
        }
        if let Some(p) = start {
            masked[p..p + l].iter_mut().for_each(|m| *m = true);
            steps.push((p..p + l).collect());
            total += l;
        }
    }
    FactorizationOrder { steps }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionAction {
    Mask,
    Random(u32),
    Keep,
}

impl fmt::Display for CorruptionAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorruptionAction::Mask => f.write_str("mask"),
            CorruptionAction::Random(id) => write!(f, "random({id})"),
            CorruptionAction::Keep => f.write_str("keep"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionPolicy {
    pub mask_prob: f64,
    pub random_prob: f64,
}

impl Default for CorruptionPolicy {
    fn default() -> Self {
        CorruptionPolicy {
            mask_prob: 0.8,
            random_prob: 0.1,
        }
    }
}

/// Per masked position: what the in-place slot holds in the AE view.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CorruptionPlan {
    actions: BTreeMap<usize, CorruptionAction>,
}

impl CorruptionPlan {
    /// Every position replaced by `[MASK]`.
    pub fn all_mask(positions: &[usize]) -> Self {
        CorruptionPlan {
            actions: positions
                .iter()
                .map(|&p| (p, CorruptionAction::Mask))
                .collect(),
        }
    }

    pub fn from_actions(actions: impl IntoIterator<Item = (usize, CorruptionAction)>) -> Self {
        CorruptionPlan {
            actions: actions.into_iter().collect(),
        }
    }

    pub fn action(&self, pos: usize) -> Option<CorruptionAction> {
        self.actions.get(&pos).copied()
    }

    pub fn actions(&self) -> impl Iterator<Item = (usize, CorruptionAction)> + '_ {
        self.actions.iter().map(|(&p, &a)| (p, a))
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Token shown at a masked position given the original token.
    pub fn corrupted_token(&self, pos: usize, original: u32) -> Option<u32> {
        self.action(pos).map(|a| match a {
            CorruptionAction::Mask => MASK_ID,
            CorruptionAction::Random(id) => id,
            CorruptionAction::Keep => original,
        })
    }

    /// The plan must cover exactly the positions in `order`.
    pub fn check_matches(&self, order: &FactorizationOrder) -> Result<()> {
        let positions = order.masked_positions();
        let planned: Vec<usize> = self.actions.keys().copied().collect();
        if positions != planned {
            return Err(Error::Inconsistent(format!(
                "corruption plan covers {planned:?} but order masks {positions:?}"
            )));
        }
        Ok(())
    }
}

/// Independently assigns mask / random / keep to every masked position.
/// Random replacements are uniform over the non-special ids.
pub fn plan_corruption<R: Rng + ?Sized>(
    order: &FactorizationOrder,
    vocab: &Vocab,
    policy: &CorruptionPolicy,
    rng: &mut R,
) -> CorruptionPlan {
    let ordinary = vocab.ordinary_ids();
    let actions = order
        .masked_positions()
        .into_iter()
        .map(|p| {
            let u = rng.random::<f64>();
            let action = if u < policy.mask_prob {
                CorruptionAction::Mask
            } else if u < policy.mask_prob + policy.random_prob {
                if ordinary.is_empty() {
                    CorruptionAction::Mask
                } else {
                    CorruptionAction::Random(rng.random_range(ordinary.clone()))
                }
            } else {
                CorruptionAction::Keep
            };
            (p, action)
        })
        .collect();
    CorruptionPlan { actions }
}
