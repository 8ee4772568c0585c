//! Block-level schedules for the sparse kernel.
//!
//! A layout is made of one or more parts. Each part views the attention
//! matrix through a pair of coordinate maps (virtual row/column to global
//! position) and lists the `b×b` tiles of that virtual matrix that hold at
//! least one attended pair, with a bit-mask per tile. Parts of a merged head
//! cover disjoint sets of pairs, so every pair is computed exactly once.

use serde::{Deserialize, Serialize};

use super::{FactorizedPattern, HeadRule};
use crate::error::{Error, Result};

pub const DEFAULT_BLOCK: usize = 32;

/// Marks a padding slot in a coordinate map.
const PAD: u32 = u32::MAX;

/// Which head of a pattern a layout or allowed-set query refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelect {
    Head(usize),
    /// Union of all heads.
    Merged,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    LocalWindow,
    StridedTranspose,
    FixedColumns,
    GatherFallback,
}

/// One `b×b` tile; bit `r·b + c` of `mask` is row `r`, column `c`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutBlock {
    pub row: u32,
    pub col: u32,
    pub mask: Vec<u64>,
}

impl LayoutBlock {
    pub fn get(&self, b: usize, r: usize, c: usize) -> bool {
        let k = r * b + c;
        self.mask[k / 64] >> (k % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.mask.iter().map(|w| w.count_ones() as usize).sum()
    }
}

#[derive(Clone, Debug)]
pub struct LayoutPart {
    pub strategy: Strategy,
    /// Virtual row to global row, `u32::MAX` for padding.
    pub row_map: Vec<u32>,
    /// Virtual column to global column, `u32::MAX` for padding.
    pub col_map: Vec<u32>,
    pub blocks: Vec<LayoutBlock>,
    /// Explicit rows of the gather fallback, indexed by global row; empty
    /// for blocked strategies.
    pub gather: Vec<Vec<u32>>,
    block: usize,
    nnz: usize,
}

impl LayoutPart {
    /// Attended pairs in this part.
    pub fn nnz(&self) -> usize {
        self.nnz
    }

    /// Visits every covered `(i, j)` in schedule order: block by block, then
    /// row-major inside a block.
    #[inline]
    pub fn for_each_pair<F: FnMut(usize, usize)>(&self, mut f: F) {
        if self.strategy == Strategy::GatherFallback {
            for (i, row) in self.gather.iter().enumerate() {
                for &j in row {
                    f(i, j as usize);
                }
            }
            return;
        }
        let b = self.block;
        if b.is_power_of_two() {
            let shift = b.trailing_zeros();
            self.visit_blocks(|k| (k >> shift, k & (b - 1)), f);
        } else {
            self.visit_blocks(|k| (k / b, k % b), f);
        }
    }

    #[inline(always)]
    fn visit_blocks<F: FnMut(usize, usize)>(
        &self,
        split: impl Fn(usize) -> (usize, usize),
        mut f: F,
    ) {
        let b = self.block;
        for blk in &self.blocks {
            let r0 = blk.row as usize * b;
            let c0 = blk.col as usize * b;
            for (w, &word) in blk.mask.iter().enumerate() {
                let mut bits = word;
                while bits != 0 {
                    let (r, c) = split(w * 64 + bits.trailing_zeros() as usize);
                    bits &= bits - 1;
                    f(self.row_map[r0 + r] as usize, self.col_map[c0 + c] as usize);
                }
            }
        }
    }

    fn identity_maps(&self) -> bool {
        let ident = |m: &[u32]| {
            m.iter()
                .enumerate()
                .all(|(v, &g)| g == PAD || g as usize == v)
        };
        ident(&self.row_map) && ident(&self.col_map)
    }
}

/// Compiled schedule for one head (or the merged head) of a pattern.
#[derive(Clone, Debug)]
pub struct BlockSparseLayout {
    n: usize,
    block: usize,
    head: HeadSelect,
    parts: Vec<LayoutPart>,
}

impl BlockSparseLayout {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn block(&self) -> usize {
        self.block
    }

    pub fn head(&self) -> HeadSelect {
        self.head
    }

    pub fn parts(&self) -> &[LayoutPart] {
        &self.parts
    }

    pub fn strategies(&self) -> Vec<Strategy> {
        self.parts.iter().map(|p| p.strategy).collect()
    }

    /// Tiles over all parts.
    pub fn block_count(&self) -> usize {
        self.parts.iter().map(|p| p.blocks.len()).sum()
    }

    /// Attended pairs over all parts.
    pub fn nnz(&self) -> usize {
        self.parts.iter().map(|p| p.nnz).sum()
    }

    pub fn for_each_pair<F: FnMut(usize, usize)>(&self, mut f: F) {
        for part in &self.parts {
            part.for_each_pair(&mut f);
        }
    }

    /// Covered pairs grouped by row, each row sorted.
    pub fn covered_rows(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.n];
        self.for_each_pair(|i, j| rows[i].push(j));
        for r in &mut rows {
            r.sort_unstable();
        }
        rows
    }

    /// Tiles whose row index is below their column index in a part whose
    /// maps are the identity, i.e. tiles above the global diagonal.
    pub fn upper_blocks(&self) -> usize {
        self.parts
            .iter()
            .filter(|p| p.strategy != Strategy::GatherFallback && p.identity_maps())
            .map(|p| p.blocks.iter().filter(|b| b.row < b.col).count())
            .sum()
    }

    /// Checks that the covered pairs are exactly the pairs of `pat`'s
    /// selected head, each covered once, none above the diagonal.
    pub fn audit(&self, pat: &FactorizedPattern) -> Result<()> {
        let n = self.n;
        if n != pat.n() {
            return Err(Error::Pattern(format!(
                "layout for n={n}, pattern has n={}",
                pat.n()
            )));
        }
        let rule = pat.select(self.head);
        let words = n.div_ceil(64);
        let mut seen = vec![0u64; n * words];
        let mut bad: Option<String> = None;
        self.for_each_pair(|i, j| {
            if bad.is_some() {
                return;
            }
            if i >= n || j > i {
                bad = Some(format!("pair ({i}, {j}) outside the causal triangle"));
            } else if !rule.contains(i, j) {
                bad = Some(format!("pair ({i}, {j}) is not in the pattern"));
            } else {
                let w = &mut seen[i * words + j / 64];
                if *w >> (j % 64) & 1 == 1 {
                    bad = Some(format!("pair ({i}, {j}) covered twice"));
                }
                *w |= 1 << (j % 64);
            }
        });
        if let Some(msg) = bad {
            return Err(Error::Pattern(msg));
        }
        for i in 0..n {
            let have: usize = seen[i * words..(i + 1) * words]
                .iter()
                .map(|w| w.count_ones() as usize)
                .sum();
            let want = rule.row_len(i);
            if have != want {
                return Err(Error::Pattern(format!(
                    "row {i} covers {have} pairs, pattern has {want}"
                )));
            }
        }
        if self.upper_blocks() != 0 {
            return Err(Error::Pattern("tile above the diagonal".into()));
        }
        Ok(())
    }
}

/// Compiles the selected head of `pat` into `b×b` tiles.
///
/// Contiguous windows are tiled in place, residue classes are tiled after
/// regrouping positions by residue so each class becomes a dense lower
/// triangle, and summary columns are gathered to the front. A merged head
/// compiles each component in turn, dropping pairs an earlier component
/// already covers.
///
/// # Panics
/// If `b == 0`.
pub fn compile_block_layout(
    pat: &FactorizedPattern,
    head: HeadSelect,
    b: usize,
) -> BlockSparseLayout {
    assert!(b >= 1, "block size must be positive");
    let rule = pat.select(head);
    let n = pat.n();
    let mut parts = Vec::new();
    compile_rule(&rule, n, b, &[], &mut parts);
    parts.retain(|p| p.nnz > 0);
    BlockSparseLayout {
        n,
        block: b,
        head,
        parts,
    }
}

fn compile_rule(
    rule: &HeadRule,
    n: usize,
    b: usize,
    earlier: &[HeadRule],
    out: &mut Vec<LayoutPart>,
) {
    let fresh =
        |i: usize, j: usize| rule.contains(i, j) && !earlier.iter().any(|r| r.contains(i, j));
    match rule {
        HeadRule::Full | HeadRule::Window { .. } | HeadRule::Block { .. } => {
            out.push(local_window(rule, n, b, fresh))
        }
        HeadRule::Stride { l } => out.push(strided_transpose(*l, n, b, fresh)),
        HeadRule::Summary { l, residues } => {
            out.push(fixed_columns(n, b, |j| residues[j % l], fresh))
        }
        HeadRule::Explicit(_) => out.push(gather(rule, n, b, fresh)),
        HeadRule::Union(rules) => {
            let mut seen: Vec<HeadRule> = earlier.to_vec();
            for r in rules {
                compile_rule(r, n, b, &seen, out);
                seen.push(r.clone());
            }
        }
    }
}

fn padded(len: usize, b: usize) -> usize {
    len.div_ceil(b) * b
}

fn identity_map(n: usize, b: usize) -> Vec<u32> {
    (0..padded(n, b))
        .map(|v| if v < n { v as u32 } else { PAD })
        .collect()
}

/// Fills the masks of candidate tiles and drops empty ones.
fn build_part(
    strategy: Strategy,
    b: usize,
    row_map: Vec<u32>,
    col_map: Vec<u32>,
    candidates: impl Iterator<Item = (usize, usize)>,
    keep: impl Fn(usize, usize, usize, usize) -> bool,
) -> LayoutPart {
    let words = (b * b).div_ceil(64);
    let mut blocks = Vec::new();
    let mut nnz = 0;
    for (br, bc) in candidates {
        let mut mask = vec![0u64; words];
        let mut any = false;
        for r in 0..b {
            let i = row_map[br * b + r];
            if i == PAD {
                continue;
            }
            for c in 0..b {
                let vc = bc * b + c;
                let j = col_map[vc];
                if j != PAD && keep(i as usize, j as usize, br * b + r, vc) {
                    let k = r * b + c;
                    mask[k / 64] |= 1 << (k % 64);
                    nnz += 1;
                    any = true;
                }
            }
        }
        if any {
            blocks.push(LayoutBlock {
                row: br as u32,
                col: bc as u32,
                mask,
            });
        }
    }
    LayoutPart {
        strategy,
        row_map,
        col_map,
        blocks,
        gather: Vec::new(),
        block: b,
        nnz,
    }
}

fn local_window(
    rule: &HeadRule,
    n: usize,
    b: usize,
    keep: impl Fn(usize, usize) -> bool,
) -> LayoutPart {
    let nb = n.div_ceil(b);
    let candidates = (0..nb).flat_map(|br| {
        let start = rule.window_start(br * b).expect("contiguous rule") / b;
        (start..=br).map(move |bc| (br, bc))
    });
    build_part(
        Strategy::LocalWindow,
        b,
        identity_map(n, b),
        identity_map(n, b),
        candidates,
        |i, j, _, _| keep(i, j),
    )
}

/// Positions regrouped by residue mod `l`: residue `g` occupies virtual
/// slots `g·m .. g·m + m` in increasing order, with each group padded to a
/// whole number of tiles.
fn strided_transpose(
    l: usize,
    n: usize,
    b: usize,
    keep: impl Fn(usize, usize) -> bool,
) -> LayoutPart {
    let mb = n.div_ceil(l).div_ceil(b);
    let m = mb * b;
    let map: Vec<u32> = (0..l * m)
        .map(|v| {
            let j = (v % m) * l + v / m;
            if j < n {
                j as u32
            } else {
                PAD
            }
        })
        .collect();
    let candidates = (0..l).flat_map(move |g| {
        (0..mb).flat_map(move |tr| (0..=tr).map(move |tc| (g * mb + tr, g * mb + tc)))
    });
    build_part(
        Strategy::StridedTranspose,
        b,
        map.clone(),
        map,
        candidates,
        |i, j, _, _| keep(i, j),
    )
}

/// Summary columns first (padded to whole tiles), then an identity copy of
/// the columns that carries each row's own position when it is not a
/// summary column.
fn fixed_columns(
    n: usize,
    b: usize,
    is_summary: impl Fn(usize) -> bool,
    keep: impl Fn(usize, usize) -> bool,
) -> LayoutPart {
    let summary: Vec<u32> = (0..n)
        .filter(|&j| is_summary(j))
        .map(|j| j as u32)
        .collect();
    let sp = padded(summary.len(), b);
    let mut col_map = summary.clone();
    col_map.resize(sp, PAD);
    col_map.extend(identity_map(n, b));
    let nb = n.div_ceil(b);
    let candidates = (0..nb).flat_map(|br| {
        let last = ((br + 1) * b).min(n) - 1;
        let k = summary.partition_point(|&j| j as usize <= last);
        (0..k.div_ceil(b))
            .map(move |bc| (br, bc))
            .chain([(br, sp / b + br)])
    });
    build_part(
        Strategy::FixedColumns,
        b,
        identity_map(n, b),
        col_map,
        candidates,
        |i, j, _, vc| {
            let allowed = if vc < sp {
                j <= i
            } else {
                j == i && !is_summary(j)
            };
            allowed && keep(i, j)
        },
    )
}

fn gather(rule: &HeadRule, n: usize, b: usize, keep: impl Fn(usize, usize) -> bool) -> LayoutPart {
    let rows: Vec<Vec<u32>> = (0..n)
        .map(|i| {
            rule.row(i)
                .into_iter()
                .filter(|&j| keep(i, j))
                .map(|j| j as u32)
                .collect()
        })
        .collect();
    LayoutPart {
        strategy: Strategy::GatherFallback,
        row_map: identity_map(n, 1),
        col_map: identity_map(n, 1),
        blocks: Vec::new(),
        nnz: rows.iter().map(Vec::len).sum(),
        gather: rows,
        block: b,
    }
}
