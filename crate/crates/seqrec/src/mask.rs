//! Additive attention masks: causal, temporal, condition-sparse, and
//! truncation sources, plus min-like composition.
//!
//! Entries take exactly two values, open (0) or blocked (-inf). Blocked is
//! stored as a boolean so composition never has to add infinities; applying a
//! mask to attention logits goes through the masked-softmax kernel, which
//! gives blocked positions exactly zero weight.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Where a mask's blocked entries came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MaskSource {
    Causal,
    Temporal,
    Sparse,
    Truncation,
}

/// An n x n additive attention bias with entries in {0, -inf}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    blocked: Vec<bool>,
    provenance: Vec<MaskSource>,
}

impl AttentionMask {
    fn new(n: usize, blocked: Vec<bool>, provenance: Vec<MaskSource>) -> AttentionMask {
        debug_assert_eq!(blocked.len(), n * n);
        AttentionMask { n, blocked, provenance }
    }

    /// All-open mask with no provenance.
    pub fn open(n: usize) -> AttentionMask {
        AttentionMask::new(n, vec![false; n * n], Vec::new())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.n + j]
    }

    /// Additive bias value: 0 for open, -inf for blocked.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if self.is_blocked(i, j) {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    }

    pub fn provenance(&self) -> &[MaskSource] {
        &self.provenance
    }

    pub fn blocked_row(&self, i: usize) -> &[bool] {
        &self.blocked[i * self.n..(i + 1) * self.n]
    }

    pub fn blocked(&self) -> &[bool] {
        &self.blocked
    }

    /// Index of the last query position with at least one open key, if any.
    pub fn last_open_row(&self) -> Option<usize> {
        (0..self.n).rev().find(|&i| self.blocked_row(i).iter().any(|b| !b))
    }

    /// Last column that is open in the given row, if any.
    pub fn last_open_col(&self, row: usize) -> Option<usize> {
        (0..self.n).rev().find(|&j| !self.is_blocked(row, j))
    }

    /// Fraction of blocked entries in the final row (the serving query row).
    pub fn blocked_fraction_last_row(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        let row = self.blocked_row(self.n - 1);
        row.iter().filter(|&&b| b).count() as f64 / self.n as f64
    }

    /// Plain-text grid: '.' open, 'X' blocked. One row per line.
    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.n * (self.n + 1));
        for i in 0..self.n {
            for j in 0..self.n {
                s.push(if self.is_blocked(i, j) { 'X' } else { '.' });
            }
            if i + 1 < self.n {
                let _ = writeln!(s);
            }
        }
        s
    }
}

/// Causal mask: position i may attend to j iff j <= i.
pub fn build_causal_mask(n: usize) -> Result<AttentionMask> {
    if n == 0 {
        return Err(Error::Config("causal mask of an empty sequence".into()));
    }
    let mut blocked = vec![false; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            blocked[i * n + j] = true;
        }
    }
    Ok(AttentionMask::new(n, blocked, vec![MaskSource::Causal]))
}

/// Temporal mask: key j is blocked for every query iff its timestamp falls
/// in the closed interval [tau_target - delta_tau, tau_target].
pub fn build_temporal_mask(timestamps: &[u64], tau_target: u64, delta_tau: u64) -> Result<AttentionMask> {
    let n = timestamps.len();
    if n == 0 {
        return Err(Error::Config("temporal mask of an empty sequence".into()));
    }
    if timestamps.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Data("timestamps must be nondecreasing".into()));
    }
    let lo = tau_target.saturating_sub(delta_tau);
    let mut blocked = vec![false; n * n];
    for (j, &ts) in timestamps.iter().enumerate() {
        if ts >= lo && ts <= tau_target {
            for i in 0..n {
                blocked[i * n + j] = true;
            }
        }
    }
    Ok(AttentionMask::new(n, blocked, vec![MaskSource::Temporal]))
}

/// Condition-sparse mask: key j is open for every query iff its category
/// equals the target condition.
pub fn build_condition_mask(item_categories: &[u32], condition: u32) -> Result<AttentionMask> {
    let n = item_categories.len();
    if n == 0 {
        return Err(Error::Config("condition mask of an empty sequence".into()));
    }
    let mut blocked = vec![false; n * n];
    for (j, &cat) in item_categories.iter().enumerate() {
        if cat != condition {
            for i in 0..n {
                blocked[i * n + j] = true;
            }
        }
    }
    Ok(AttentionMask::new(n, blocked, vec![MaskSource::Sparse]))
}

/// Truncation mask for branch k (1-based): keys beyond position n-k+1
/// (1-based) are blocked for every query. k = 1 leaves the full history open.
pub fn build_truncation_mask(n: usize, k: usize) -> Result<AttentionMask> {
    if n == 0 {
        return Err(Error::Config("truncation mask of an empty sequence".into()));
    }
    if k < 1 || k > n {
        return Err(Error::Config(format!(
            "truncation branch index {} out of range 1..={}",
            k, n
        )));
    }
    let keep = n - k + 1; // 1-based window length
    let mut blocked = vec![false; n * n];
    for j in keep..n {
        for i in 0..n {
            blocked[i * n + j] = true;
        }
    }
    Ok(AttentionMask::new(n, blocked, vec![MaskSource::Truncation]))
}

/// Min-like union: an entry is blocked iff any source blocks it. Provenance
/// is the sorted union of source tags.
pub fn combine(masks: &[&AttentionMask]) -> Result<AttentionMask> {
    let Some(first) = masks.first() else {
        return Err(Error::Config("combine of zero masks".into()));
    };
    let n = first.n;
    for m in masks {
        if m.n != n {
            return Err(Error::Config(format!(
                "combine length mismatch: {} vs {}",
                m.n, n
            )));
        }
    }
    let mut blocked = vec![false; n * n];
    let mut provenance = Vec::new();
    for m in masks {
        for (b, &mb) in blocked.iter_mut().zip(&m.blocked) {
            *b |= mb;
        }
        for &src in &m.provenance {
            if !provenance.contains(&src) {
                provenance.push(src);
            }
        }
    }
    provenance.sort();
    Ok(AttentionMask::new(n, blocked, provenance))
}
