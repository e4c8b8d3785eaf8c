//! Transitive-closure leakage audit over the attend graph.

use std::collections::VecDeque;
use std::fmt;

use super::{AttentionMask, PmlmInstance, TokenCategory};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeakPath {
    /// Rows from the leaking token to the forbidden original, inclusive.
    pub rows: Vec<usize>,
    pub labels: Vec<String>,
}

impl fmt::Display for LeakPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.labels.join(" -> "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LeakageReport {
    pub tokens: usize,
    pub violations: Vec<LeakPath>,
}

impl LeakageReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for LeakageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return writeln!(f, "audit PASS ({} tokens)", self.tokens);
        }
        writeln!(
            f,
            "audit FAIL ({} tokens, {} violations)",
            self.tokens,
            self.violations.len()
        )?;
        for v in &self.violations {
            writeln!(f, "  leak {v}")?;
        }
        Ok(())
    }
}

fn forbidden(from: TokenCategory, to: TokenCategory) -> bool {
    use TokenCategory::*;
    match (from, to) {
        (Pseudo { step: i }, Original { step: j }) => j >= i,
        (Context | ConvMask, Original { .. }) => true,
        _ => false,
    }
}

/// BFS over attention edges from `src`. `parent[k]` is the previous row
/// on one shortest path to `k` (`src` for itself), or `usize::MAX` if `k`
/// is unreachable.
pub fn attention_bfs(mask: &AttentionMask, src: usize) -> Vec<usize> {
    let n = mask.size();
    let mut parent = vec![usize::MAX; n];
    let mut queue = VecDeque::new();
    parent[src] = src;
    queue.push_back(src);
    while let Some(q) = queue.pop_front() {
        for (k, &allowed) in mask.row(q).iter().enumerate() {
            if allowed && parent[k] == usize::MAX {
                parent[k] = q;
                queue.push_back(k);
            }
        }
    }
    parent
}

/// PASS iff no pseudo token of step `i` reaches an original token of a step
/// `>= i` and no context or conventional-mask token reaches any original
/// token, over any number of attention hops. Every violating (source,
/// target) pair is reported with one shortest path.
pub fn audit_leakage(inst: &PmlmInstance) -> LeakageReport {
    let n = inst.len();
    let mask = &inst.attention_mask;
    let mut violations = Vec::new();

    for src in 0..n {
        let src_cat = inst.categories[src];
        if matches!(src_cat, TokenCategory::Original { .. }) {
            continue;
        }
        let parent = attention_bfs(mask, src);
        for dst in 0..n {
            if dst == src || parent[dst] == usize::MAX {
                continue;
            }
            if forbidden(src_cat, inst.categories[dst]) {
                let mut rows = vec![dst];
                let mut cur = dst;
                while cur != src {
                    cur = parent[cur];
                    rows.push(cur);
                }
                rows.reverse();
                let labels = rows.iter().map(|&r| inst.label(r)).collect();
                violations.push(LeakPath { rows, labels });
            }
        }
    }
    LeakageReport {
        tokens: n,
        violations,
    }
}
