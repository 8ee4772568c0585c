use serde::Serialize;

use super::{FactorizedPattern, HeadSelect};

/// Outcome of the connectivity check.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ValidityReport {
    pub valid: bool,
    /// Attention steps allowed.
    pub p_used: usize,
    /// First `(j, i)` pair, scanning `i` then `j` upwards, with no path of at
    /// most `p_used` steps.
    pub witness: Option<(usize, usize)>,
    /// Longest shortest path over all pairs `j <= i`; `None` when some pair
    /// is not connected at all.
    pub max_path_length: Option<usize>,
    /// For two-head patterns: whether every pair is joined by a path that
    /// takes head 1 and then head 2, as in the original construction.
    pub ordered_valid: Option<bool>,
}

/// Square bit matrix; row `i` only ever has bits `0..=i` set.
struct BitRows {
    words: usize,
    bits: Vec<u64>,
}

impl BitRows {
    fn new(n: usize) -> Self {
        let words = n.div_ceil(64);
        Self {
            words,
            bits: vec![0; n * words],
        }
    }

    fn row(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    fn row_mut(&mut self, i: usize) -> &mut [u64] {
        &mut self.bits[i * self.words..(i + 1) * self.words]
    }

    fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.words + j / 64] |= 1 << (j % 64);
    }

    /// Whether bits `0..=i` of row `i` are all set.
    fn row_full(&self, i: usize) -> bool {
        let row = self.row(i);
        let full_words = (i + 1) / 64;
        if row[..full_words].iter().any(|&w| w != u64::MAX) {
            return false;
        }
        let rem = (i + 1) % 64;
        rem == 0 || row[full_words] & ((1u64 << rem) - 1) == (1u64 << rem) - 1
    }

    fn first_missing(&self, i: usize) -> usize {
        (0..=i)
            .find(|&j| self.row(i)[j / 64] & (1 << (j % 64)) == 0)
            .expect("row is not full")
    }
}

fn adjacency(pat: &FactorizedPattern, select: HeadSelect) -> (Vec<Vec<usize>>, BitRows) {
    let n = pat.n();
    let rows = pat.allowed_sets(select);
    let mut bits = BitRows::new(n);
    for (i, row) in rows.iter().enumerate() {
        for &j in row {
            bits.set(i, j);
        }
        bits.set(i, i);
    }
    (rows, bits)
}

/// One more step of every path: `next[i] = ∪_{a ∈ A_i} cur[a]`.
fn step(rows: &[Vec<usize>], cur: &BitRows) -> BitRows {
    let n = rows.len();
    let mut next = BitRows::new(n);
    for (i, row) in rows.iter().enumerate() {
        let used = i / 64 + 1;
        let dst = &mut next.row_mut(i)[..used];
        for &a in row {
            for (d, &s) in dst.iter_mut().zip(&cur.row(a)[..used]) {
                *d |= s;
            }
        }
    }
    next
}

/// Checks that every position `j` reaches every later position `i` through
/// at most `p_allowed` attention steps over the union of all heads.
///
/// Runs a breadth-first search from all sources at once, one bit-matrix per
/// level, so memory is `n²/8` bytes per level.
pub fn verify_validity(pat: &FactorizedPattern, p_allowed: usize) -> ValidityReport {
    let n = pat.n();
    let (rows, one_step) = adjacency(pat, HeadSelect::Merged);

    let mut level = 1;
    let mut reach = one_step;
    let mut witness = None;
    let mut max_path_length = None;
    if p_allowed == 0 {
        witness = (1..n).next().map(|i| (0, i));
    }
    loop {
        let full: Vec<bool> = (0..n).map(|i| reach.row_full(i)).collect();
        let all_full = full.iter().all(|&f| f);
        if level == p_allowed && !all_full {
            let i = full.iter().position(|&f| !f).unwrap();
            witness = Some((reach.first_missing(i), i));
        }
        if all_full {
            max_path_length = Some(if n == 1 { 0 } else { level });
            break;
        }
        let next = step(&rows, &reach);
        if next.bits == reach.bits {
            break;
        }
        reach = next;
        level += 1;
    }
    let valid = matches!(max_path_length, Some(len) if len <= p_allowed);
    if !valid && witness.is_none() {
        // converged below p_allowed with pairs that are never connected
        if let Some(i) = (0..n).find(|&i| !reach.row_full(i)) {
            witness = Some((reach.first_missing(i), i));
        }
    }
    ValidityReport {
        valid,
        p_used: p_allowed,
        witness: if valid { None } else { witness },
        max_path_length,
        ordered_valid: (pat.p() == 2).then(|| ordered_two_step(pat)),
    }
}

/// `j ∈ A_a^(1)` and `a ∈ A_i^(2)` for some `a`, for every `j <= i`.
fn ordered_two_step(pat: &FactorizedPattern) -> bool {
    let n = pat.n();
    let (_, first) = adjacency(pat, HeadSelect::Head(0));
    let second: Vec<Vec<usize>> = (0..n).map(|i| pat.row(1, i)).collect();
    let reach = step(&second, &first);
    (0..n).all(|i| reach.row_full(i))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    /// Plain per-source BFS on the union graph with edges i -> j, j < i.
    fn bfs_distances(pat: &FactorizedPattern) -> Vec<Vec<Option<usize>>> {
        let n = pat.n();
        let rows = pat.allowed_sets(HeadSelect::Merged);
        (0..n)
            .map(|src| {
                let mut dist = vec![None; n];
                dist[src] = Some(0);
                let mut q = VecDeque::from([src]);
                while let Some(u) = q.pop_front() {
                    for &v in &rows[u] {
                        if dist[v].is_none() {
                            dist[v] = Some(dist[u].unwrap() + 1);
                            q.push_back(v);
                        }
                    }
                }
                dist
            })
            .collect()
    }

    fn oracle(pat: &FactorizedPattern, p: usize) -> (bool, Option<(usize, usize)>, Option<usize>) {
        let d = bfs_distances(pat);
        let mut witness = None;
        let mut longest = Some(0);
        for i in 0..pat.n() {
            for j in 0..=i {
                match d[i][j] {
                    Some(k) => longest = longest.map(|m: usize| m.max(k)),
                    None => longest = None,
                }
                if witness.is_none() && d[i][j].is_none_or(|k| k > p) {
                    witness = Some((j, i));
                }
            }
        }
        (witness.is_none(), witness, longest)
    }

    #[test]
    fn strided_36_is_valid_in_two_steps() {
        let pat = FactorizedPattern::strided(36, 6).unwrap();
        let r = verify_validity(&pat, 2);
        assert!(r.valid);
        assert_eq!(r.max_path_length, Some(2));
        assert_eq!(r.ordered_valid, Some(true));
        assert_eq!(oracle(&pat, 2).0, true);
    }

    #[test]
    fn fixed_64_is_valid_in_two_steps() {
        let pat = FactorizedPattern::fixed(64, 8, 2).unwrap();
        let r = verify_validity(&pat, 2);
        assert!(r.valid);
        assert_eq!(r.ordered_valid, Some(true));
        assert!(oracle(&pat, 2).0);
    }

    #[test]
    fn local_only_fails_with_witness() {
        let pat = FactorizedPattern::local_only(36, 6).unwrap();
        let r = verify_validity(&pat, 2);
        assert!(!r.valid);
        let (valid, witness, longest) = oracle(&pat, 2);
        assert!(!valid);
        assert_eq!(r.witness, witness);
        assert_eq!(r.witness, Some((0, 13)));
        assert_eq!(r.max_path_length, longest);
        // position 0 is more than two windows before 20 as well
        let d = bfs_distances(&pat);
        assert!(d[20][0].unwrap() > 2);
    }

    #[test]
    fn full_is_valid_in_one_step() {
        let r = verify_validity(&FactorizedPattern::full(64).unwrap(), 1);
        assert!(r.valid);
        assert_eq!(r.max_path_length, Some(1));
    }

    #[test]
    fn agrees_with_bfs_oracle_on_assorted_patterns() {
        let pats = [
            FactorizedPattern::strided(50, 5).unwrap(),
            FactorizedPattern::strided(40, 3).unwrap(),
            FactorizedPattern::fixed(45, 6, 1).unwrap(),
            FactorizedPattern::local_only(30, 4).unwrap(),
            FactorizedPattern::custom(
                6,
                vec![vec![vec![], vec![], vec![1], vec![2], vec![3], vec![4]]],
            )
            .unwrap(),
        ];
        for pat in &pats {
            for p in 1..=3 {
                let r = verify_validity(pat, p);
                let (valid, witness, longest) = oracle(pat, p);
                assert_eq!(r.valid, valid, "{pat:?} p={p}");
                assert_eq!(r.witness, witness);
                assert_eq!(r.max_path_length, longest);
                assert_eq!(r.valid, r.max_path_length.is_some_and(|m| m <= p));
            }
        }
    }
}
