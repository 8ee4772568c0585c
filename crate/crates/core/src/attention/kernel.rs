//! Block-sparse attention over precomputed Q, K, V.
//!
//! Each (sequence, head) is processed independently. For a head, the
//! layout's pairs are visited three times in the same fixed order: logits
//! and row maxima, then exponentials and row sums, then normalized weights
//! and the weighted sum of values. Rows whose pairs span several layout
//! parts are normalized over all of them.

use std::sync::Arc;

use super::AttentionPlan;
use crate::error::{shape_err, Result};
use crate::patterns::BlockSparseLayout;
use crate::scalar::Scalar;
use crate::tape::CustomOp;
use crate::tensor::{axpy, dot, Tensor};

/// Work done by one kernel call.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KernelCounters {
    /// Multiply-accumulates in `Q·Kᵀ` and `P·V`.
    pub macs: u64,
    /// Attended (query, key) pairs.
    pub pairs: u64,
    /// Pairs with key after query; always zero for a valid layout.
    pub upper_pairs: u64,
}

impl std::ops::AddAssign for KernelCounters {
    fn add_assign(&mut self, o: Self) {
        self.macs += o.macs;
        self.pairs += o.pairs;
        self.upper_pairs += o.upper_pairs;
    }
}

/// Row-major view of one projection: row `r`, head `h` is
/// `data[r·stride + h·width ..][..width]`.
#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    stride: usize,
    width: usize,
}

impl<'a, T: Scalar> View<'a, T> {
    fn new(t: &'a Tensor<T>, n_h: usize) -> Self {
        Self {
            data: t.data(),
            stride: t.cols(),
            width: t.cols() / n_h,
        }
    }

    #[inline]
    fn at(&self, r: usize, h: usize) -> &'a [T] {
        let s = r * self.stride + h * self.width;
        &self.data[s..s + self.width]
    }
}

fn check_inputs<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    plan: &AttentionPlan,
) -> Result<()> {
    let n_h = plan.heads().len();
    let n = plan.n();
    let ok = q.shape().len() == 2
        && q.shape() == k.shape()
        && v.shape().len() == 2
        && v.rows() == q.rows()
        && q.rows() % n == 0
        && q.cols() % n_h == 0
        && v.cols() % n_h == 0;
    if !ok {
        return Err(shape_err(
            "sparse_attention",
            format!(
                "q {:?}, k {:?}, v {:?} for n={n}, {n_h} heads",
                q.shape(),
                k.shape(),
                v.shape()
            ),
        ));
    }
    Ok(())
}

/// `q·k / √dq` for one pair.
#[inline]
pub(crate) fn logit<T: Scalar>(q: &[T], k: &[T], root: T) -> T {
    dot(q, k) / root
}

/// Scaled logits of one head over `layout`'s pairs, in visiting order.
#[cfg(test)]
pub(crate) fn head_logits<T: Scalar>(
    layout: &BlockSparseLayout,
    q: &Tensor<T>,
    k: &Tensor<T>,
    n_h: usize,
    h: usize,
    row0: usize,
) -> Vec<T> {
    let (q, k) = (View::new(q, n_h), View::new(k, n_h));
    let root = T::of(q.width as f64).sqrt();
    let mut out = Vec::with_capacity(layout.nnz());
    layout.for_each_pair(|i, j| out.push(logit(q.at(row0 + i, h), k.at(row0 + j, h), root)));
    out
}

struct Scratch<T> {
    row_max: Vec<T>,
    row_sum: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
fn forward_head<T: Scalar>(
    layout: &BlockSparseLayout,
    q: View<T>,
    k: View<T>,
    v: View<T>,
    out: &mut [T],
    h: usize,
    row0: usize,
    probs: &mut Vec<T>,
    scratch: &mut Scratch<T>,
    counters: &mut KernelCounters,
) {
    let root = T::of(q.width as f64).sqrt();
    let Scratch { row_max, row_sum } = scratch;
    row_max.fill(T::neg_infinity());
    row_sum.fill(T::zero());
    probs.clear();
    probs.reserve(layout.nnz());
    let mut upper = 0u64;
    layout.for_each_pair(|i, j| {
        upper += u64::from(j > i);
        let s = logit(q.at(row0 + i, h), k.at(row0 + j, h), root);
        if s > row_max[i] {
            row_max[i] = s;
        }
        probs.push(s);
    });
    let mut idx = 0;
    layout.for_each_pair(|i, _| {
        let e = (probs[idx] - row_max[i]).exp();
        probs[idx] = e;
        row_sum[i] += e;
        idx += 1;
    });
    let dv = v.width;
    let mut idx = 0;
    layout.for_each_pair(|i, j| {
        let p = probs[idx] / row_sum[i];
        probs[idx] = p;
        let o = (row0 + i) * v.stride + h * dv;
        axpy(p, v.at(row0 + j, h), &mut out[o..o + dv]);
        idx += 1;
    });
    let pairs = probs.len() as u64;
    counters.pairs += pairs;
    counters.macs += pairs * (q.width + dv) as u64;
    counters.upper_pairs += upper;
}

/// Result of [`sparse_attend`].
pub struct KernelOutput<T> {
    /// `(batch·n) × (n_h·dv)`, heads side by side.
    pub out: Tensor<T>,
    /// Attention weights per (sequence, head), in the layout's visiting
    /// order.
    pub probs: Vec<Vec<T>>,
    pub counters: KernelCounters,
}

/// Attention of every head of `plan` over stacked sequences of length `n`.
/// `q` and `k` are `(batch·n) × (n_h·dq)`, `v` is `(batch·n) × (n_h·dv)`.
pub fn sparse_attend<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    plan: &AttentionPlan,
    keep_probs: bool,
) -> Result<KernelOutput<T>> {
    check_inputs(q, k, v, plan)?;
    let n = plan.n();
    let n_h = plan.heads().len();
    let batch = q.rows() / n;
    let (qv, kv, vv) = (View::new(q, n_h), View::new(k, n_h), View::new(v, n_h));
    let mut out = Tensor::zeros(&[q.rows(), v.cols()]);
    let mut scratch = Scratch {
        row_max: vec![T::zero(); n],
        row_sum: vec![T::zero(); n],
    };
    let mut counters = KernelCounters::default();
    let mut probs = Vec::new();
    let mut buf = Vec::new();
    for b in 0..batch {
        for (h, head) in plan.heads().iter().enumerate() {
            forward_head(
                &head.layout,
                qv,
                kv,
                vv,
                out.data_mut(),
                h,
                b * n,
                &mut buf,
                &mut scratch,
                &mut counters,
            );
            if keep_probs {
                probs.push(std::mem::take(&mut buf));
            }
        }
    }
    Ok(KernelOutput {
        out,
        probs,
        counters,
    })
}

/// Tape record of [`sparse_attend`]; keeps the attention weights.
pub(crate) struct SparseAttendOp<T> {
    pub plan: Arc<AttentionPlan>,
    pub probs: Vec<Vec<T>>,
}

impl<T: Scalar> CustomOp<T> for SparseAttendOp<T> {
    fn name(&self) -> &'static str {
        "sparse_attention"
    }

    fn saved_tensors(&self) -> usize {
        1
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let n = self.plan.n();
        let n_h = self.plan.heads().len();
        let batch = q.rows() / n;
        let (qv, kv, vv) = (View::new(q, n_h), View::new(k, n_h), View::new(v, n_h));
        let (ov, gv) = (View::new(output, n_h), View::new(grad, n_h));
        let (dq, dv) = (qv.width, vv.width);
        let root = T::of(dq as f64).sqrt();
        let mut gq = Tensor::zeros(q.shape());
        let mut gk = Tensor::zeros(k.shape());
        let mut gvt = Tensor::zeros(v.shape());
        let mut delta = vec![T::zero(); n];
        for b in 0..batch {
            let row0 = b * n;
            for (h, head) in self.plan.heads().iter().enumerate() {
                let probs = &self.probs[b * n_h + h];
                for (i, d) in delta.iter_mut().enumerate() {
                    *d = dot(gv.at(row0 + i, h), ov.at(row0 + i, h));
                }
                let (gq_data, gk_data, gv_data) = (gq.data_mut(), gk.data_mut(), gvt.data_mut());
                let mut idx = 0;
                head.layout.for_each_pair(|i, j| {
                    let p = probs[idx];
                    idx += 1;
                    let g_out = gv.at(row0 + i, h);
                    let vo = (row0 + j) * vv.stride + h * dv;
                    axpy(p, g_out, &mut gv_data[vo..vo + dv]);
                    let ds = p * (dot(g_out, vv.at(row0 + j, h)) - delta[i]) / root;
                    let qo = (row0 + i) * qv.stride + h * dq;
                    axpy(ds, kv.at(row0 + j, h), &mut gq_data[qo..qo + dq]);
                    let ko = (row0 + j) * kv.stride + h * dq;
                    axpy(ds, qv.at(row0 + i, h), &mut gk_data[ko..ko + dq]);
                });
            }
        }
        Ok(vec![Some(gq), Some(gk), Some(gvt)])
    }
}
