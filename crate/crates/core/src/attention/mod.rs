//! Multi-head attention over factorized patterns.
//!
//! Inputs are stacked sequences: a `(batch·n) × d` matrix whose rows
//! `b·n .. (b+1)·n` are sequence `b`. Queries, keys and values come from one
//! matrix each, with head `h` owning a contiguous slice of columns. Heads are
//! concatenated and multiplied by `W_p`.
//!
//! [`sparse_attention`] runs the block-sparse kernel; [`dense_attention`]
//! builds the same computation from dense tape ops with masked softmax and
//! serves as the reference.

mod kernel;

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::patterns::{
    compile_block_layout, BlockSparseLayout, FactorizedPattern, HeadSelect, PatternKind,
};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{matmul, matmul_nt, Tensor};

pub use kernel::{sparse_attend, KernelCounters, KernelOutput};

/// Largest `n` the dense reference accepts by default.
pub const DEFAULT_ORACLE_LIMIT: usize = 4096;

/// Per-head projection widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub d: usize,
    pub n_h: usize,
    /// Query/key width per head.
    pub dq: usize,
    /// Value width per head.
    pub dv: usize,
}

impl HeadShape {
    /// `half_qk` halves the query and key widths.
    pub fn new(d: usize, n_h: usize, half_qk: bool) -> Result<Self> {
        if n_h == 0 || d % n_h != 0 {
            return Err(Error::Config(format!(
                "width {d} is not divisible by {n_h} heads"
            )));
        }
        let dv = d / n_h;
        let dq = if half_qk { dv / 2 } else { dv };
        if dq == 0 {
            return Err(Error::Config(format!(
                "head width {dv} is too small to halve"
            )));
        }
        Ok(Self { d, n_h, dq, dv })
    }
}

/// Attention weights. `wq`/`wk` are `d × (n_h·dq)`, `wv` is `d × d`, `wp`
/// is `d × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub shape: HeadShape,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wp: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn zeros(shape: HeadShape) -> Self {
        let HeadShape { d, n_h, dq, .. } = shape;
        Self {
            shape,
            wq: Tensor::zeros(&[d, n_h * dq]),
            wk: Tensor::zeros(&[d, n_h * dq]),
            wv: Tensor::zeros(&[d, d]),
            wp: Tensor::zeros(&[d, d]),
        }
    }

    /// Records the weights on a tape as trainable leaves.
    pub fn on_tape(&self, tape: &mut Tape<T>) -> AttentionVars {
        AttentionVars {
            shape: self.shape,
            wq: tape.param(self.wq.clone()),
            wk: tape.param(self.wk.clone()),
            wv: tape.param(self.wv.clone()),
            wp: tape.param(self.wp.clone()),
        }
    }
}

/// [`AttentionParams`] recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub shape: HeadShape,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wp: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadStrategy {
    /// Layer `r` uses factorized head `r mod p` in every attention head.
    #[default]
    Interleaved,
    /// Every attention head uses the union of the factorized heads.
    Merged,
    /// Attention heads are split evenly across the factorized heads.
    Multihead,
}

/// Factorized head used by each of the `n_h` attention heads of layer `r`.
/// Under `Multihead`, attention head `h` takes factorized head `⌊h·p/n_h⌋`.
pub fn apply_head_strategy(
    r: usize,
    strategy: HeadStrategy,
    p: usize,
    n_h: usize,
) -> Vec<HeadSelect> {
    match strategy {
        HeadStrategy::Interleaved => vec![HeadSelect::Head(r % p); n_h],
        HeadStrategy::Merged if p == 1 => vec![HeadSelect::Head(0); n_h],
        HeadStrategy::Merged => vec![HeadSelect::Merged; n_h],
        HeadStrategy::Multihead => (0..n_h).map(|h| HeadSelect::Head(h * p / n_h)).collect(),
    }
}

/// The pattern one attention head follows, with its compiled layout.
#[derive(Clone, Debug)]
pub struct HeadPlan {
    pub pattern: Arc<FactorizedPattern>,
    pub select: HeadSelect,
    pub layout: Arc<BlockSparseLayout>,
}

/// Everything one attention layer needs: a plan per attention head.
#[derive(Clone, Debug)]
pub struct AttentionPlan {
    n: usize,
    heads: Vec<HeadPlan>,
}

impl AttentionPlan {
    pub fn new(heads: Vec<HeadPlan>) -> Result<Self> {
        let n = heads
            .first()
            .map(|h| h.pattern.n())
            .ok_or_else(|| Error::Config("no heads".into()))?;
        for h in &heads {
            if h.pattern.n() != n || h.layout.n() != n || h.layout.head() != h.select {
                return Err(Error::Pattern("heads disagree on pattern or layout".into()));
            }
        }
        Ok(Self { n, heads })
    }

    /// All `n_h` heads on the same head of `pat`.
    pub fn uniform(
        pat: &FactorizedPattern,
        select: HeadSelect,
        n_h: usize,
        block: usize,
    ) -> Result<Self> {
        let pattern = Arc::new(pat.clone());
        let layout = Arc::new(compile_block_layout(pat, select, block));
        Self::new(
            (0..n_h)
                .map(|_| HeadPlan {
                    pattern: pattern.clone(),
                    select,
                    layout: layout.clone(),
                })
                .collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn heads(&self) -> &[HeadPlan] {
        &self.heads
    }

    /// Materialized allowed sets of every head.
    pub fn allowed_sets(&self) -> Vec<Arc<Vec<Vec<usize>>>> {
        let mut cache: Vec<(*const BlockSparseLayout, Arc<Vec<Vec<usize>>>)> = Vec::new();
        self.heads
            .iter()
            .map(|h| {
                let key = Arc::as_ptr(&h.layout);
                if let Some((_, a)) = cache.iter().find(|(k, _)| *k == key) {
                    return a.clone();
                }
                let a = Arc::new(h.pattern.allowed_sets(h.select));
                cache.push((key, a.clone()));
                a
            })
            .collect()
    }

    /// Coverage audit of every distinct layout against its pattern.
    pub fn audit(&self) -> Result<()> {
        let mut done: Vec<*const BlockSparseLayout> = Vec::new();
        for h in &self.heads {
            let key = Arc::as_ptr(&h.layout);
            if !done.contains(&key) {
                h.layout.audit(&h.pattern)?;
                done.push(key);
            }
        }
        Ok(())
    }
}

/// Per-layer plans for a whole stack, compiled once.
#[derive(Clone, Debug)]
pub struct AttentionPlanner {
    plans: Vec<Arc<AttentionPlan>>,
}

impl AttentionPlanner {
    /// With `distinct_subblocks` on a fixed pattern, attention head `h`
    /// reads its own share of the summary columns.
    pub fn new(
        pat: &FactorizedPattern,
        strategy: HeadStrategy,
        n_h: usize,
        block: usize,
        distinct_subblocks: bool,
    ) -> Result<Self> {
        let per_head: Vec<Arc<FactorizedPattern>> =
            if distinct_subblocks && pat.kind() == PatternKind::Fixed {
                FactorizedPattern::fixed_distinct(pat.n(), pat.stride(), pat.summary_width(), n_h)?
                    .into_iter()
                    .map(Arc::new)
                    .collect()
            } else {
                vec![Arc::new(pat.clone()); n_h]
            };
        let period = match strategy {
            HeadStrategy::Interleaved => pat.p(),
            _ => 1,
        };
        let mut layouts: HashMap<(usize, HeadSelect), Arc<BlockSparseLayout>> = HashMap::new();
        let mut plans = Vec::with_capacity(period);
        for r in 0..period {
            let selects = apply_head_strategy(r, strategy, pat.p(), n_h);
            let heads = selects
                .into_iter()
                .enumerate()
                .map(|(h, select)| {
                    // heads sharing a pattern share one layout
                    let owner = if Arc::ptr_eq(&per_head[h], &per_head[0]) || !distinct_subblocks {
                        0
                    } else {
                        h
                    };
                    let layout = layouts
                        .entry((owner, select))
                        .or_insert_with(|| {
                            Arc::new(compile_block_layout(&per_head[h], select, block))
                        })
                        .clone();
                    HeadPlan {
                        pattern: per_head[h].clone(),
                        select,
                        layout,
                    }
                })
                .collect();
            let plan = AttentionPlan::new(heads)?;
            if cfg!(debug_assertions) && plan.n() <= 8192 {
                plan.audit()?;
            }
            plans.push(Arc::new(plan));
        }
        Ok(Self { plans })
    }

    pub fn layer(&self, r: usize) -> &Arc<AttentionPlan> {
        &self.plans[r % self.plans.len()]
    }
}

/// `X·W_q`, `X·W_k`, `X·W_v`.
pub fn project<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &AttentionVars,
) -> Result<(Var, Var, Var)> {
    Ok((
        tape.matmul(x, vars.wq)?,
        tape.matmul(x, vars.wk)?,
        tape.matmul(x, vars.wv)?,
    ))
}

/// Block-sparse attention of Q, K, V already on the tape; returns the
/// concatenated heads before `W_p`.
pub fn attend_sparse<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    plan: &Arc<AttentionPlan>,
) -> Result<Var> {
    let grad = tape.requires_grad(q) || tape.requires_grad(k) || tape.requires_grad(v);
    let res = sparse_attend(tape.value(q), tape.value(k), tape.value(v), plan, grad)?;
    let op = kernel::SparseAttendOp {
        plan: plan.clone(),
        probs: res.probs,
    };
    tape.custom(&[q, k, v], res.out, Box::new(op))
}

/// Dense reference for Q, K, V on the tape: full logit matrices, masked
/// softmax per head, one head and one sequence at a time.
pub fn attend_dense<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    n_h: usize,
    allowed: &[Arc<Vec<Vec<usize>>>],
    limit: usize,
) -> Result<Var> {
    let n = allowed.first().map(|a| a.len()).unwrap_or(0);
    let rows = tape.value(q).rows();
    if n == 0 || rows % n != 0 || (allowed.len() != 1 && allowed.len() != n_h) {
        return Err(shape_err(
            "dense_attention",
            format!(
                "{rows} rows, {} allowed-set tables of length {n}",
                allowed.len()
            ),
        ));
    }
    if n > limit {
        return Err(Error::Config(format!(
            "dense reference limited to n <= {limit}, got {n}"
        )));
    }
    let dq = tape.value(q).cols() / n_h;
    let dv = tape.value(v).cols() / n_h;
    let inv_root = T::one() / T::of(dq as f64).sqrt();
    let mut seqs = Vec::with_capacity(rows / n);
    for b in 0..rows / n {
        let (qb, kb, vb) = (
            tape.slice_rows(q, b * n, n)?,
            tape.slice_rows(k, b * n, n)?,
            tape.slice_rows(v, b * n, n)?,
        );
        let mut heads = Vec::with_capacity(n_h);
        for h in 0..n_h {
            let qh = tape.slice_cols(qb, h * dq, dq)?;
            let kh = tape.slice_cols(kb, h * dq, dq)?;
            let vh = tape.slice_cols(vb, h * dv, dv)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, inv_root)?;
            let p = tape.masked_softmax(s, allowed[h.min(allowed.len() - 1)].clone())?;
            heads.push(tape.matmul(p, vh)?);
        }
        seqs.push(if n_h == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        });
    }
    if seqs.len() == 1 {
        Ok(seqs[0])
    } else {
        tape.concat_rows(&seqs)
    }
}

/// Full attention layer through the block-sparse kernel.
pub fn sparse_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &AttentionVars,
    plan: &Arc<AttentionPlan>,
) -> Result<Var> {
    if plan.heads().len() != vars.shape.n_h {
        return Err(Error::Config(format!(
            "plan has {} heads, weights have {}",
            plan.heads().len(),
            vars.shape.n_h
        )));
    }
    let (q, k, v) = project(tape, x, vars)?;
    let o = attend_sparse(tape, q, k, v, plan)?;
    tape.matmul(o, vars.wp)
}

/// Full attention layer through the dense reference. `allowed` holds one
/// table shared by all heads or one per head.
pub fn dense_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    vars: &AttentionVars,
    allowed: &[Arc<Vec<Vec<usize>>>],
) -> Result<Var> {
    let (q, k, v) = project(tape, x, vars)?;
    let o = attend_dense(tape, q, k, v, vars.shape.n_h, allowed, DEFAULT_ORACLE_LIMIT)?;
    tape.matmul(o, vars.wp)
}

/// Tape-free forward pass through the kernel, for inference and timing.
pub fn sparse_attention_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    plan: &AttentionPlan,
) -> Result<(Tensor<T>, KernelCounters)> {
    let q = matmul(x, &params.wq)?;
    let k = matmul(x, &params.wk)?;
    let v = matmul(x, &params.wv)?;
    let res = sparse_attend(&q, &k, &v, plan, false)?;
    Ok((matmul(&res.out, &params.wp)?, res.counters))
}

/// Tape-free dense attention over one sequence: every head forms its full
/// `n × n` logit matrix, masks pairs where `mask(i, j)` is false and
/// normalizes row by row. The logit matrix may take at most `max_bytes`.
pub fn dense_attention_forward<T: Scalar>(
    x: &Tensor<T>,
    params: &AttentionParams<T>,
    mask: &dyn Fn(usize, usize) -> bool,
    max_bytes: usize,
) -> Result<(Tensor<T>, KernelCounters)> {
    let n = x.rows();
    let bytes = n.saturating_mul(n).saturating_mul(std::mem::size_of::<T>());
    if bytes > max_bytes {
        return Err(Error::Config(format!(
            "dense logits for n = {n} need {bytes} bytes, limit is {max_bytes}"
        )));
    }
    let HeadShape { n_h, dq, dv, .. } = params.shape;
    let q = matmul(x, &params.wq)?;
    let k = matmul(x, &params.wk)?;
    let v = matmul(x, &params.wv)?;
    let scale = T::one() / T::of(dq as f64).sqrt();
    let mut out = Tensor::zeros(&[n, n_h * dv]);
    let mut counters = KernelCounters::default();
    for h in 0..n_h {
        let mut s = matmul_nt(&q.slice_cols(h * dq, dq), &k.slice_cols(h * dq, dq))?;
        for i in 0..n {
            let row = s.row_mut(i);
            let mut m = T::neg_infinity();
            for (j, z) in row.iter_mut().enumerate() {
                if mask(i, j) {
                    *z *= scale;
                    m = m.max(*z);
                    counters.pairs += 1;
                    counters.upper_pairs += u64::from(j > i);
                } else {
                    *z = T::neg_infinity();
                }
            }
            if m == T::neg_infinity() {
                return Err(Error::EmptyAllowedRow { row: i });
            }
            let mut sum = T::zero();
            for z in row.iter_mut() {
                *z = (*z - m).exp();
                sum += *z;
            }
            let inv = T::one() / sum;
            for z in row.iter_mut() {
                *z *= inv;
            }
        }
        let o = matmul(&s, &v.slice_cols(h * dv, dv))?;
        for i in 0..n {
            out.row_mut(i)[h * dv..(h + 1) * dv].copy_from_slice(o.row(i));
        }
        counters.macs += (n * n * (dq + dv)) as u64;
    }
    Ok((matmul(&out, &params.wp)?, counters))
}

#[cfg(test)]
mod tests;
