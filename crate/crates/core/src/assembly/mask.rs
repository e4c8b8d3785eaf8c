use std::fmt;

use super::TokenCategory;

/// Square boolean attention matrix; `allows(q, k)` means row `q` may attend
/// key `k`. Realized as an additive 0 / large-negative bias in the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn new(n: usize) -> Self {
        AttentionMask {
            n,
            allow: vec![false; n * n],
        }
    }

    pub fn full(n: usize) -> Self {
        AttentionMask {
            n,
            allow: vec![true; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.n + k]
    }

    pub fn set(&mut self, q: usize, k: usize, allow: bool) {
        self.allow[q * self.n + k] = allow;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.n..(q + 1) * self.n]
    }

    /// Sub-matrix over `keep`, in the given order.
    pub fn restrict(&self, keep: &[usize]) -> AttentionMask {
        let mut out = AttentionMask::new(keep.len());
        for (a, &q) in keep.iter().enumerate() {
            for (b, &k) in keep.iter().enumerate() {
                out.set(a, b, self.allows(q, k));
            }
        }
        out
    }

    /// Rows and columns reordered so that new index `i` is old `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> AttentionMask {
        self.restrict(perm)
    }
}

impl fmt::Display for AttentionMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for q in 0..self.n {
            let row: String = self
                .row(q)
                .iter()
                .map(|&a| if a { '1' } else { '0' })
                .collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

/// Whether a token of category `query` may attend a token of category `key`.
///
/// Context and conventional-mask tokens are visible to everyone and see only
/// each other. An original token of step `i` also sees originals of steps
/// `<= i`; a pseudo token of step `i` sees originals of steps `< i` and the
/// pseudo tokens of its own step.
pub fn visible(query: TokenCategory, key: TokenCategory) -> bool {
    use TokenCategory::*;
    match (query, key) {
        (_, Context | ConvMask) => true,
        (Original { step: i }, Original { step: j }) => j <= i,
        (Pseudo { step: i }, Original { step: j }) => j < i,
        (Pseudo { step: i }, Pseudo { step: j }) => i == j,
        _ => false,
    }
}

pub fn build_attention_mask(categories: &[TokenCategory]) -> AttentionMask {
    let n = categories.len();
    let mut mask = AttentionMask::new(n);
    for (q, &cq) in categories.iter().enumerate() {
        for (k, &ck) in categories.iter().enumerate() {
            if visible(cq, ck) {
                mask.set(q, k, true);
            }
        }
    }
    mask
}
