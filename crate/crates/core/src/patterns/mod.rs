//! Factorized connectivity patterns.
//!
//! A pattern assigns each head `m` and query position `i` a sorted set of key
//! positions `A_i^(m) ⊆ {0..=i}`. Every head always contains `i` itself, which
//! keeps each softmax row nonempty. Rows are computed on demand from closed
//! forms, so patterns over very long sequences cost no memory.

mod layout;
mod render;
mod validity;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use layout::{
    compile_block_layout, BlockSparseLayout, HeadSelect, LayoutBlock, LayoutPart, Strategy,
    DEFAULT_BLOCK,
};
pub use render::{render_layout, render_pattern, write_pgm};
pub use validity::{verify_validity, ValidityReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Strided,
    Fixed,
    Full,
    LocalOnly,
    Custom,
}

impl fmt::Display for PatternKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatternKind::Strided => "strided",
            PatternKind::Fixed => "fixed",
            PatternKind::Full => "full",
            PatternKind::LocalOnly => "local",
            PatternKind::Custom => "custom",
        })
    }
}

/// Membership rule of one head.
#[derive(Clone, Debug, PartialEq)]
pub enum HeadRule {
    /// `{0..=i}`.
    Full,
    /// `{max(0, i-l)..=i}`.
    Window { l: usize },
    /// `{j <= i : (i - j) mod l = 0}`.
    Stride { l: usize },
    /// `{j <= i : j / l = i / l}`.
    Block { l: usize },
    /// `{j <= i : j mod l ∈ residues} ∪ {i}`; `residues[r]` flags residue `r`.
    Summary { l: usize, residues: Arc<[bool]> },
    /// Union of several rules.
    Union(Vec<HeadRule>),
    /// Explicit rows, each sorted and containing its own index.
    Explicit(Arc<Vec<Vec<u32>>>),
}

impl HeadRule {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        if j > i {
            return false;
        }
        match self {
            HeadRule::Full => true,
            HeadRule::Window { l } => i - j <= *l,
            HeadRule::Stride { l } => (i - j) % l == 0,
            HeadRule::Block { l } => j / l == i / l,
            HeadRule::Summary { l, residues } => j == i || residues[j % l],
            HeadRule::Union(rules) => rules.iter().any(|r| r.contains(i, j)),
            HeadRule::Explicit(rows) => rows[i].binary_search(&(j as u32)).is_ok(),
        }
    }

    /// Sorted key positions for query `i`.
    pub fn row(&self, i: usize) -> Vec<usize> {
        match self {
            HeadRule::Full => (0..=i).collect(),
            HeadRule::Window { l } => (i.saturating_sub(*l)..=i).collect(),
            HeadRule::Stride { l } => {
                let mut v: Vec<usize> = (0..=i / l).map(|k| i - k * l).collect();
                v.reverse();
                v
            }
            HeadRule::Block { l } => ((i / l) * l..=i).collect(),
            HeadRule::Summary { l, residues } => {
                let mut v = Vec::new();
                for base in (0..=i).step_by(*l) {
                    for (r, _) in residues.iter().enumerate().filter(|(_, &on)| on) {
                        if base + r <= i {
                            v.push(base + r);
                        }
                    }
                }
                if v.last() != Some(&i) {
                    v.push(i);
                }
                v
            }
            HeadRule::Union(rules) => {
                let mut v: Vec<usize> = rules.iter().flat_map(|r| r.row(i)).collect();
                v.sort_unstable();
                v.dedup();
                v
            }
            HeadRule::Explicit(rows) => rows[i].iter().map(|&j| j as usize).collect(),
        }
    }

    /// `|row(i)|`, in closed form where one exists.
    pub fn row_len(&self, i: usize) -> usize {
        match self {
            HeadRule::Full => i + 1,
            HeadRule::Window { l } => i.min(*l) + 1,
            HeadRule::Stride { l } => i / l + 1,
            HeadRule::Block { l } => i % l + 1,
            HeadRule::Summary { l, residues } => {
                let per_block = residues.iter().filter(|&&on| on).count();
                let tail = i % l;
                let in_tail = residues[..=tail].iter().filter(|&&on| on).count();
                (i / l) * per_block + in_tail + usize::from(!residues[tail])
            }
            HeadRule::Explicit(rows) => rows[i].len(),
            HeadRule::Union(_) => self.row(i).len(),
        }
    }

    /// True when every row is a contiguous range ending at `i`.
    pub(crate) fn window_start(&self, i: usize) -> Option<usize> {
        match self {
            HeadRule::Full => Some(0),
            HeadRule::Window { l } => Some(i.saturating_sub(*l)),
            HeadRule::Block { l } => Some((i / l) * l),
            _ => None,
        }
    }
}

/// Per-head index sets over a sequence of length `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedPattern {
    n: usize,
    l: usize,
    c: usize,
    kind: PatternKind,
    heads: Vec<HeadRule>,
}

fn check_n(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Pattern("sequence length must be positive".into()));
    }
    Ok(())
}

/// Residues `{l-c, ..., l-1}` exposed by the fixed pattern's summary head.
pub fn summary_residues(l: usize, c: usize) -> Arc<[bool]> {
    (0..l).map(|r| r >= l - c).collect()
}

/// Residues given to summary head `h` of `n_heads` when heads attend to
/// distinct sub-blocks of the `c` summary columns: contiguous slices of
/// width `c / n_heads` when that divides evenly, otherwise round-robin.
pub fn distinct_summary_residues(l: usize, c: usize, h: usize, n_heads: usize) -> Arc<[bool]> {
    let lo = l - c;
    if c % n_heads == 0 {
        let w = c / n_heads;
        (0..l)
            .map(|r| r >= lo + h * w && r < lo + (h + 1) * w)
            .collect()
    } else {
        (0..l).map(|r| r >= lo && (r - lo) % n_heads == h).collect()
    }
}

impl FactorizedPattern {
    /// Local window of `l` previous positions plus every `l`-th position.
    pub fn strided(n: usize, l: usize) -> Result<Self> {
        check_n(n)?;
        if l == 0 || l > n {
            return Err(Error::Pattern(format!("stride {l} outside 1..={n}")));
        }
        Ok(Self {
            n,
            l,
            c: 0,
            kind: PatternKind::Strided,
            heads: vec![HeadRule::Window { l }, HeadRule::Stride { l }],
        })
    }

    /// Current length-`l` block plus the last `c` positions of every block.
    pub fn fixed(n: usize, l: usize, c: usize) -> Result<Self> {
        check_n(n)?;
        if l == 0 || l > n {
            return Err(Error::Pattern(format!("stride {l} outside 1..={n}")));
        }
        if c == 0 || c > l {
            return Err(Error::Pattern(format!("summary width {c} outside 1..={l}")));
        }
        Ok(Self {
            n,
            l,
            c,
            kind: PatternKind::Fixed,
            heads: vec![
                HeadRule::Block { l },
                HeadRule::Summary {
                    l,
                    residues: summary_residues(l, c),
                },
            ],
        })
    }

    pub fn full(n: usize) -> Result<Self> {
        check_n(n)?;
        Ok(Self {
            n,
            l: n,
            c: 0,
            kind: PatternKind::Full,
            heads: vec![HeadRule::Full],
        })
    }

    /// The local head of the strided pattern on its own.
    pub fn local_only(n: usize, l: usize) -> Result<Self> {
        check_n(n)?;
        if l == 0 || l > n {
            return Err(Error::Pattern(format!("window {l} outside 1..={n}")));
        }
        Ok(Self {
            n,
            l,
            c: 0,
            kind: PatternKind::LocalOnly,
            heads: vec![HeadRule::Window { l }],
        })
    }

    /// A pattern from explicit per-head rows. Each row must be within
    /// `0..=i`; `i` itself is added when missing.
    pub fn custom(n: usize, heads: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        check_n(n)?;
        let mut rules = Vec::with_capacity(heads.len());
        for (m, rows) in heads.into_iter().enumerate() {
            if rows.len() != n {
                return Err(Error::Pattern(format!(
                    "head {m} has {} rows, want {n}",
                    rows.len()
                )));
            }
            let mut fixed = Vec::with_capacity(n);
            for (i, mut row) in rows.into_iter().enumerate() {
                if let Some(&j) = row.iter().find(|&&j| j > i) {
                    return Err(Error::Pattern(format!(
                        "head {m} row {i} attends to future {j}"
                    )));
                }
                row.push(i);
                row.sort_unstable();
                row.dedup();
                fixed.push(row.into_iter().map(|j| j as u32).collect());
            }
            rules.push(HeadRule::Explicit(Arc::new(fixed)));
        }
        if rules.is_empty() {
            return Err(Error::Pattern("pattern needs at least one head".into()));
        }
        Ok(Self {
            n,
            l: 0,
            c: 0,
            kind: PatternKind::Custom,
            heads: rules,
        })
    }

    /// Fixed pattern whose single summary head is split across `n_heads`
    /// distinct residue sub-blocks; returns one two-head pattern per head.
    pub fn fixed_distinct(n: usize, l: usize, c: usize, n_heads: usize) -> Result<Vec<Self>> {
        let base = Self::fixed(n, l, c)?;
        Ok((0..n_heads.max(1))
            .map(|h| {
                let mut p = base.clone();
                p.heads[1] = HeadRule::Summary {
                    l,
                    residues: distinct_summary_residues(l, c, h, n_heads.max(1)),
                };
                p
            })
            .collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn stride(&self) -> usize {
        self.l
    }

    pub fn summary_width(&self) -> usize {
        self.c
    }

    pub fn kind(&self) -> PatternKind {
        self.kind
    }

    /// Number of factorized heads.
    pub fn p(&self) -> usize {
        self.heads.len()
    }

    pub fn head(&self, m: usize) -> &HeadRule {
        &self.heads[m]
    }

    pub fn heads(&self) -> &[HeadRule] {
        &self.heads
    }

    pub fn row(&self, m: usize, i: usize) -> Vec<usize> {
        self.heads[m].row(i)
    }

    /// `∪_m A_i^(m)`.
    pub fn union_row(&self, i: usize) -> Vec<usize> {
        if self.heads.len() == 1 {
            return self.heads[0].row(i);
        }
        HeadRule::Union(self.heads.clone()).row(i)
    }

    pub fn union_contains(&self, i: usize, j: usize) -> bool {
        self.heads.iter().any(|h| h.contains(i, j))
    }

    /// Allowed sets of every row, materialized.
    pub fn allowed_sets(&self, select: HeadSelect) -> Vec<Vec<usize>> {
        (0..self.n)
            .map(|i| match select {
                HeadSelect::Head(m) => self.row(m, i),
                HeadSelect::Merged => self.union_row(i),
            })
            .collect()
    }

    /// The rule a [`HeadSelect`] refers to.
    pub fn select(&self, select: HeadSelect) -> HeadRule {
        match select {
            HeadSelect::Head(m) => self.heads[m].clone(),
            HeadSelect::Merged if self.heads.len() == 1 => self.heads[0].clone(),
            HeadSelect::Merged => HeadRule::Union(self.heads.clone()),
        }
    }
}

/// Single head attending to the union of all heads. Identity on one-head
/// patterns.
pub fn merge_heads(pat: &FactorizedPattern) -> FactorizedPattern {
    if pat.p() == 1 {
        return pat.clone();
    }
    FactorizedPattern {
        n: pat.n,
        l: pat.l,
        c: pat.c,
        kind: PatternKind::Custom,
        heads: vec![HeadRule::Union(pat.heads.clone())],
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PatternStats {
    pub total_pairs: u64,
    pub max_row_size: usize,
    /// `|∪_m A_i^(m)|` for each position `i`.
    pub pairs_per_position: Vec<usize>,
}

/// Exact attended-pair counts of the merged pattern.
pub fn pattern_stats(pat: &FactorizedPattern) -> PatternStats {
    let merged = pat.select(HeadSelect::Merged);
    let curve: Vec<usize> = (0..pat.n).map(|i| union_len(&merged, i)).collect();
    PatternStats {
        total_pairs: curve.iter().map(|&c| c as u64).sum(),
        max_row_size: curve.iter().copied().max().unwrap_or(0),
        pairs_per_position: curve,
    }
}

fn union_len(rule: &HeadRule, i: usize) -> usize {
    match rule {
        // Window ∪ Stride overlap in {i, i-l}: inclusion-exclusion.
        HeadRule::Union(parts) => match parts.as_slice() {
            [HeadRule::Window { l: a }, HeadRule::Stride { l: b }] if a == b => {
                rule_len_pair(i, *a)
            }
            _ => rule.row_len(i),
        },
        _ => rule.row_len(i),
    }
}

fn rule_len_pair(i: usize, l: usize) -> usize {
    let window = i.min(l) + 1;
    let stride = i / l + 1;
    window + stride - 1 - usize::from(i >= l)
}

/// Pattern addressed as `kind:n[:l[:c]]`, e.g. `strided:1024:32`,
/// `fixed:1024:32:4`, `full:64`, `local:1024:32`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub kind: PatternKind,
    pub n: usize,
    pub l: usize,
    pub c: usize,
}

impl PatternSpec {
    pub fn build(&self) -> Result<FactorizedPattern> {
        match self.kind {
            PatternKind::Strided => FactorizedPattern::strided(self.n, self.l),
            PatternKind::Fixed => FactorizedPattern::fixed(self.n, self.l, self.c),
            PatternKind::Full => FactorizedPattern::full(self.n),
            PatternKind::LocalOnly => FactorizedPattern::local_only(self.n, self.l),
            PatternKind::Custom => {
                Err(Error::Pattern("custom patterns have no spec string".into()))
            }
        }
    }
}

impl FromStr for PatternSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |k: usize, what: &str| -> Result<usize> {
            parts
                .get(k)
                .ok_or_else(|| Error::Pattern(format!("'{s}': missing {what}")))?
                .parse()
                .map_err(|_| Error::Pattern(format!("'{s}': {what} is not an integer")))
        };
        let kind = match parts[0] {
            "strided" => PatternKind::Strided,
            "fixed" => PatternKind::Fixed,
            "full" | "dense" => PatternKind::Full,
            "local" | "local_only" => PatternKind::LocalOnly,
            other => return Err(Error::Pattern(format!("unknown pattern kind '{other}'"))),
        };
        let want = match kind {
            PatternKind::Full => 2,
            PatternKind::Fixed => 4,
            _ => 3,
        };
        if parts.len() != want {
            return Err(Error::Pattern(format!("'{s}': expected {want} fields")));
        }
        let n = num(1, "n")?;
        let (l, c) = match kind {
            PatternKind::Full => (n, 0),
            PatternKind::Fixed => (num(2, "l")?, num(3, "c")?),
            _ => (num(2, "l")?, 0),
        };
        Ok(Self { kind, n, l, c })
    }
}

impl fmt::Display for PatternSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PatternKind::Full => write!(f, "full:{}", self.n),
            PatternKind::Fixed => write!(f, "fixed:{}:{}:{}", self.n, self.l, self.c),
            k => write!(f, "{k}:{}:{}", self.n, self.l),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn brute_union(pat: &FactorizedPattern) -> u64 {
        let mut total = 0u64;
        for i in 0..pat.n() {
            let set: BTreeSet<usize> = (0..pat.p()).flat_map(|m| pat.row(m, i)).collect();
            total += set.len() as u64;
        }
        total
    }

    #[test]
    fn strided_rows() {
        let p = FactorizedPattern::strided(36, 6).unwrap();
        assert_eq!(p.row(0, 14), (8..=14).collect::<Vec<_>>());
        assert_eq!(p.row(1, 14), vec![2, 8, 14]);
        assert_eq!(p.row(0, 0), vec![0]);
        assert_eq!(p.row(1, 0), vec![0]);
    }

    #[test]
    fn strided_matches_definition_everywhere() {
        let (n, l) = (50, 7);
        let p = FactorizedPattern::strided(n, l).unwrap();
        for i in 0..n {
            let a1: Vec<usize> = (i.saturating_sub(l)..=i).collect();
            let a2: Vec<usize> = (0..=i).filter(|j| (i - j) % l == 0).collect();
            assert_eq!(p.row(0, i), a1);
            assert_eq!(p.row(1, i), a2);
            for m in 0..2 {
                assert_eq!(p.head(m).row_len(i), p.row(m, i).len());
            }
        }
    }

    #[test]
    fn fixed_rows() {
        let p = FactorizedPattern::fixed(16, 4, 1).unwrap();
        assert_eq!(p.row(0, 10), vec![8, 9, 10]);
        assert_eq!(p.row(1, 10), vec![3, 7, 10]);
    }

    #[test]
    fn fixed_matches_definition_everywhere() {
        let (n, l, c) = (70, 8, 3);
        let p = FactorizedPattern::fixed(n, l, c).unwrap();
        for i in 0..n {
            let a1: Vec<usize> = (0..=i).filter(|j| j / l == i / l).collect();
            let a2: Vec<usize> = (0..=i).filter(|&j| j % l >= l - c || j == i).collect();
            assert_eq!(p.row(0, i), a1);
            assert_eq!(p.row(1, i), a2);
            for m in 0..2 {
                assert_eq!(p.head(m).row_len(i), p.row(m, i).len(), "head {m} row {i}");
            }
        }
    }

    #[test]
    fn fixed_summary_band_for_stride_128() {
        let p = FactorizedPattern::fixed(512, 128, 8).unwrap();
        for i in [129, 200, 300, 511] {
            let row = p.row(1, i);
            for j in 120..128 {
                assert!(row.contains(&j), "row {i} misses {j}");
            }
        }
        for i in [257, 400] {
            let row = p.row(1, i);
            assert!((248..256).all(|j| row.contains(&j)));
        }
    }

    #[test]
    fn fixed_summary_total_matches_enumeration() {
        let p = FactorizedPattern::fixed(256, 16, 4).unwrap();
        let closed: usize = (0..256).map(|i| p.head(1).row_len(i)).sum();
        let brute: usize = (0..256usize)
            .map(|i| (0..=i).filter(|&j| j % 16 >= 12 || j == i).count())
            .sum();
        assert_eq!(closed, brute);
        assert_eq!(pattern_stats(&p).total_pairs, brute_union(&p));
    }

    #[test]
    fn full_rows_and_pair_counts() {
        let p = FactorizedPattern::full(3).unwrap();
        assert_eq!(
            p.allowed_sets(HeadSelect::Head(0)),
            vec![vec![0], vec![0, 1], vec![0, 1, 2]]
        );
        assert_eq!(
            pattern_stats(&FactorizedPattern::full(1024).unwrap()).total_pairs,
            524_800
        );
        assert_eq!(
            pattern_stats(&FactorizedPattern::full(12288).unwrap()).total_pairs,
            75_503_616
        );
    }

    #[test]
    fn strided_stats_match_enumeration() {
        let p = FactorizedPattern::strided(36, 6).unwrap();
        assert_eq!(pattern_stats(&p).total_pairs, brute_union(&p));
        let p = FactorizedPattern::strided(1024, 32).unwrap();
        let stats = pattern_stats(&p);
        assert_eq!(stats.total_pairs, brute_union(&p));
        assert!(stats.total_pairs <= 3 * 1024 * 32);
    }

    #[test]
    fn strided_vs_full_ratio_at_12288() {
        let sparse = pattern_stats(&FactorizedPattern::strided(12288, 128).unwrap()).total_pairs;
        let dense = pattern_stats(&FactorizedPattern::full(12288).unwrap()).total_pairs;
        assert!(dense as f64 / sparse as f64 >= 20.0);
    }

    #[test]
    fn merge_is_union() {
        let p = FactorizedPattern::strided(36, 6).unwrap();
        let m = merge_heads(&p);
        assert_eq!(m.p(), 1);
        assert_eq!(m.kind(), PatternKind::Custom);
        let mut want: Vec<usize> = (8..=14).collect();
        want.insert(0, 2);
        assert_eq!(m.row(0, 14), want);
        let p = FactorizedPattern::strided(64, 8).unwrap();
        assert_eq!(pattern_stats(&merge_heads(&p)).total_pairs, brute_union(&p));
        let single = FactorizedPattern::full(8).unwrap();
        assert_eq!(merge_heads(&single), single);
    }

    #[test]
    fn distinct_subblocks() {
        let r = distinct_summary_residues(16, 8, 1, 4);
        let on: Vec<usize> = (0..16).filter(|&k| r[k]).collect();
        assert_eq!(on, vec![10, 11]);
        let r = distinct_summary_residues(16, 3, 1, 2);
        let on: Vec<usize> = (0..16).filter(|&k| r[k]).collect();
        assert_eq!(on, vec![14]);
    }

    #[test]
    fn custom_rows_are_checked() {
        assert!(FactorizedPattern::custom(3, vec![vec![vec![], vec![0], vec![2, 3]]]).is_err());
        let p = FactorizedPattern::custom(3, vec![vec![vec![], vec![0], vec![0]]]).unwrap();
        assert_eq!(p.row(0, 2), vec![0, 2]);
    }

    #[test]
    fn spec_strings() {
        let s: PatternSpec = "strided:1024:32".parse().unwrap();
        assert_eq!((s.kind, s.n, s.l), (PatternKind::Strided, 1024, 32));
        assert_eq!(s.to_string(), "strided:1024:32");
        let s: PatternSpec = "fixed:64:8:2".parse().unwrap();
        assert_eq!(s.build().unwrap().summary_width(), 2);
        assert_eq!(
            "full:64"
                .parse::<PatternSpec>()
                .unwrap()
                .build()
                .unwrap()
                .p(),
            1
        );
        assert_eq!(
            "local:36:6".parse::<PatternSpec>().unwrap().kind,
            PatternKind::LocalOnly
        );
        for bad in [
            "strided:10",
            "fixed:10:4",
            "blah:3",
            "full:x",
            "strided:8:9",
        ] {
            assert!(
                bad.parse::<PatternSpec>().and_then(|s| s.build()).is_err(),
                "{bad}"
            );
        }
    }

    #[test]
    fn invalid_parameters() {
        assert!(FactorizedPattern::strided(10, 0).is_err());
        assert!(FactorizedPattern::strided(10, 11).is_err());
        assert!(FactorizedPattern::fixed(10, 4, 5).is_err());
        assert!(FactorizedPattern::fixed(10, 4, 0).is_err());
    }
}
