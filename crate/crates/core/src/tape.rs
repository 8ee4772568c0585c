//! Reverse-mode automatic differentiation over whole tensors.
//!
//! A [`Tape`] records every op in execution order; [`Tape::backward`] walks
//! it in reverse. [`Tape::checkpoint`] runs a segment on a scratch tape,
//! keeps only the segment output, and re-executes the segment during the
//! backward pass to recover its internal activations.

use std::cell::Cell;
use std::collections::VecDeque;
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::nn::{self, NormStats};
use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule for ops defined outside this module.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients for each input, given the op's inputs, output and the
    /// incoming output gradient. `None` means "no contribution".
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;

    /// Number of auxiliary tensors the op keeps alive for backward.
    fn saved_tensors(&self) -> usize {
        0
    }
}

/// A pure tensor function that can be re-executed during backward.
pub type SegmentFn<T> = Rc<dyn Fn(&mut Tape<T>, &[Var]) -> Result<Var>>;

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: NormStats<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    MaskedSoftmax {
        x: Var,
        allowed: Arc<Vec<Vec<usize>>>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Gather {
        table: Var,
        index: Arc<Vec<usize>>,
    },
    Bits {
        logits: Var,
        targets: Arc<Vec<usize>>,
        probs: Tensor<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
    Checkpoint {
        inputs: Vec<Var>,
        f: SegmentFn<T>,
        seeds: Vec<u64>,
    },
}

impl<T: Scalar> Op<T> {
    fn saved_tensors(&self) -> usize {
        match self {
            Op::LayerNorm { .. } | Op::Dropout { .. } | Op::Bits { .. } => 1,
            Op::Custom { op, .. } => op.saved_tensors(),
            _ => 0,
        }
    }
}

struct Entry<T: Scalar> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    peak_retained: usize,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Largest number of tensors held at once during the backward pass,
    /// counting recomputed segments.
    pub fn peak_retained(&self) -> usize {
        self.peak_retained
    }
}

pub struct Tape<T: Scalar> {
    entries: Vec<Entry<T>>,
    deterministic: bool,
    check_finite: bool,
    in_segment: bool,
    // Seeds drawn inside a segment, replayed when it is recomputed.
    drawn_seeds: Vec<u64>,
    replay_seeds: VecDeque<u64>,
    peak_forward: Cell<usize>,
}

impl<T: Scalar> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.entries.len())
            .field("deterministic", &self.deterministic)
            .finish()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            deterministic: true,
            check_finite: true,
            in_segment: false,
            drawn_seeds: Vec::new(),
            replay_seeds: VecDeque::new(),
            peak_forward: Cell::new(0),
        }
    }

    /// In deterministic mode, randomness inside checkpointed segments must
    /// come from explicit seeds.
    pub fn with_deterministic(mut self, on: bool) -> Self {
        self.deterministic = on;
        self
    }

    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    fn child(&self) -> Self {
        Self {
            deterministic: self.deterministic,
            check_finite: self.check_finite,
            in_segment: true,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tensors currently held: one value per entry plus saved auxiliaries.
    pub fn retained_tensors(&self) -> usize {
        self.entries.len()
            + self
                .entries
                .iter()
                .map(|e| e.op.saved_tensors())
                .sum::<usize>()
    }

    /// Largest transient retained count seen while building checkpointed
    /// segments during the forward pass.
    pub fn peak_forward_retained(&self) -> usize {
        self.peak_forward.get().max(self.retained_tensors())
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.entries[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.entries[v.0].requires_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.entries.len() {
            Ok(())
        } else {
            Err(Error::UnknownVar(v.0))
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        self.push_rc(Rc::new(value), op, name)
    }

    fn push_rc(&mut self, value: Rc<Tensor<T>>, op: Op<T>, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self
                .inputs_of(&op)
                .iter()
                .any(|v| self.entries[v.0].requires_grad),
        };
        self.entries.push(Entry {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.entries.len() - 1))
    }

    fn inputs_of(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Sum(x)
            | Op::Gelu(x)
            | Op::Dropout { x, .. }
            | Op::MaskedSoftmax { x, .. }
            | Op::SliceCols { x, .. }
            | Op::SliceRows { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::Bits { logits, .. } => vec![*logits],
            Op::Custom { inputs, .. } | Op::Checkpoint { inputs, .. } => inputs.clone(),
        }
    }

    /// A trainable input: gradients are reported for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf_rc(Rc::new(value), true)
    }

    /// A constant input: no gradient flows to it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf_rc(Rc::new(value), false)
    }

    fn leaf_rc(&mut self, value: Rc<Tensor<T>>, requires_grad: bool) -> Var {
        self.entries.push(Entry {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.entries.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(out, Op::Add(a, b), "add")
    }

    /// `x[rows×d] + bias[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(shape_err(
                "add_row",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, bias), "add_row")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.check(x)?;
        let out = self.value(x).scale(s);
        self.push(out, Op::Scale(x, s), "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), "sum")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let out = nn::gelu(self.value(x));
        self.push(out, Op::Gelu(x), "gelu")
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        for v in [x, gain, bias] {
            self.check(v)?;
        }
        let (out, stats) = nn::layer_norm(self.value(x), self.value(gain), self.value(bias))?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            "layer_norm",
        )
    }

    /// Inverted dropout. The mask is a pure function of `seed`, so a
    /// recomputed segment regenerates it exactly.
    ///
    /// Without a seed, a fresh one is drawn; inside a checkpointed segment in
    /// deterministic mode that is an error.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: Option<u64>) -> Result<Var> {
        self.check(x)?;
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let seed = match seed {
            Some(s) => s,
            None => self.draw_seed()?,
        };
        let keep = T::of(1.0 / (1.0 - rate));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let out = Tensor::from_fn(xv.shape(), |k| xv.data()[k] * mask[k]);
        self.push(out, Op::Dropout { x, mask }, "dropout")
    }

    fn draw_seed(&mut self) -> Result<u64> {
        if self.in_segment {
            if self.deterministic {
                return Err(Error::UnseededSegment);
            }
            if let Some(s) = self.replay_seeds.pop_front() {
                return Ok(s);
            }
        }
        let s = rand::rng().random();
        self.drawn_seeds.push(s);
        Ok(s)
    }

    pub fn masked_softmax(&mut self, x: Var, allowed: Arc<Vec<Vec<usize>>>) -> Result<Var> {
        self.check(x)?;
        let out = nn::masked_softmax(self.value(x), &allowed)?;
        self.push(out, Op::MaskedSoftmax { x, allowed }, "masked_softmax")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if start + len > xv.cols() || len == 0 {
            return Err(shape_err(
                "slice_cols",
                format!("{start}+{len} of {:?}", xv.shape()),
            ));
        }
        let out = xv.slice_cols(start, len);
        self.push(out, Op::SliceCols { x, start }, "slice_cols")
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        for &x in xs {
            self.check(x)?;
        }
        let rows = self.value(xs[0]).rows();
        if xs.iter().any(|&x| self.value(x).rows() != rows) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let width: usize = xs.iter().map(|&x| self.value(x).cols()).sum();
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for &x in xs {
                data.extend_from_slice(self.value(x).row(i));
            }
        }
        let out = Tensor::new(vec![rows, width], data)?;
        self.push(out, Op::ConcatCols(xs.to_vec()), "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        if start + len > xv.rows() || len == 0 {
            return Err(shape_err(
                "slice_rows",
                format!("{start}+{len} of {:?}", xv.shape()),
            ));
        }
        let out = xv.slice_rows(start, len);
        self.push(out, Op::SliceRows { x, start }, "slice_rows")
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        for &x in xs {
            self.check(x)?;
        }
        let cols = self.value(xs[0]).cols();
        if xs.iter().any(|&x| self.value(x).cols() != cols) {
            return Err(shape_err("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let rows = data.len() / cols;
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push(out, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    /// Row lookup: `out[r] = table[index[r]]`.
    pub fn gather(&mut self, table: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        self.check(table)?;
        let tv = self.value(table);
        let (rows, d) = (tv.rows(), tv.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::TokenOutOfRange {
                token: bad,
                vocab: rows,
            });
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index.iter() {
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::new(vec![index.len(), d], data)?;
        self.push(out, Op::Gather { table, index }, "gather")
    }

    /// Mean bits per target under row-wise softmax of `logits`.
    pub fn bits_per_byte(&mut self, logits: Var, targets: Arc<Vec<usize>>) -> Result<Var> {
        self.check(logits)?;
        let (bits, probs) = nn::bits_per_byte(self.value(logits), &targets)?;
        self.push(
            Tensor::scalar(bits),
            Op::Bits {
                logits,
                targets,
                probs,
            },
            "bits_per_byte",
        )
    }

    /// Records an op whose forward was computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var> {
        for &x in inputs {
            self.check(x)?;
        }
        let name = op.name();
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            name,
        )
    }

    /// Runs `f` without keeping its intermediates; they are recomputed
    /// during backward. The forward value is identical to `f(inputs)`.
    pub fn checkpoint(&mut self, f: SegmentFn<T>, inputs: &[Var]) -> Result<Var> {
        for &x in inputs {
            self.check(x)?;
        }
        let mut sub = self.child();
        let leaves: Vec<Var> = inputs
            .iter()
            .map(|&v| {
                sub.leaf_rc(
                    self.entries[v.0].value.clone(),
                    self.entries[v.0].requires_grad,
                )
            })
            .collect();
        let out = f(&mut sub, &leaves)?;
        let value = sub.entries[out.0].value.clone();
        let transient = self.retained_tensors() + sub.peak_forward_retained();
        self.peak_forward
            .set(self.peak_forward.get().max(transient));
        let seeds = std::mem::take(&mut sub.drawn_seeds);
        drop(sub);
        self.push_rc(
            value,
            Op::Checkpoint {
                inputs: inputs.to_vec(),
                f,
                seeds,
            },
            "checkpoint",
        )
    }

    /// Gradients of a scalar `loss` with respect to every variable.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        self.backward_with_seed(loss, Tensor::full(lv.shape(), T::one()))
    }

    /// Vector-Jacobian product: backpropagates `seed` from `output`.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        self.check(output)?;
        if seed.shape() != self.value(output).shape() {
            return Err(shape_err(
                "backward",
                format!(
                    "seed {:?} for output {:?}",
                    seed.shape(),
                    self.value(output).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.entries.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        let base = self.retained_tensors();
        let mut peak = base;
        for id in (0..=output.0).rev() {
            let entry = &self.entries[id];
            if !entry.requires_grad || matches!(entry.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contributions = self.op_backward(entry, &g, base, &mut peak)?;
            grads[id] = Some(g);
            for (v, dg) in contributions {
                if !self.entries[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dg),
                    slot @ None => *slot = Some(dg),
                }
            }
        }
        Ok(Gradients {
            grads,
            peak_retained: peak,
        })
    }

    fn op_backward(
        &self,
        entry: &Entry<T>,
        g: &Tensor<T>,
        base: usize,
        peak: &mut usize,
    ) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| -> &Tensor<T> { &self.entries[v.0].value };
        let out = match &entry.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => vec![
                (*a, tensor::matmul_nt(g, val(*b))?),
                (*b, tensor::matmul_tn(val(*a), g)?),
            ],
            Op::Transpose(x) => vec![(*x, g.transpose())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::AddRow(x, bias) => {
                let mut db = Tensor::zeros(val(*bias).shape());
                for i in 0..g.rows() {
                    for (d, &gv) in db.data_mut().iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                vec![(*x, g.clone()), (*bias, db)]
            }
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)?),
                (*b, g.zip_map(val(*a), |x, y| x * y)?),
            ],
            Op::Scale(x, s) => vec![(*x, g.scale(*s))],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Gelu(x) => vec![(*x, nn::gelu_grad(val(*x), g))],
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let (dx, dg, db) = nn::layer_norm_grad(val(*x), val(*gain), stats, g);
                vec![(*x, dx), (*gain, dg), (*bias, db)]
            }
            Op::Dropout { x, mask } => {
                let d = Tensor::from_fn(g.shape(), |k| g.data()[k] * mask[k]);
                vec![(*x, d)]
            }
            Op::MaskedSoftmax { x, allowed } => {
                vec![(*x, nn::masked_softmax_grad(&entry.value, g, allowed))]
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut d = Tensor::zeros(xv.shape());
                let w = g.cols();
                for i in 0..g.rows() {
                    d.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                }
                vec![(*x, d)]
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                let mut res = Vec::with_capacity(xs.len());
                for &x in xs {
                    let w = val(x).cols();
                    res.push((x, g.slice_cols(off, w)));
                    off += w;
                }
                res
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let mut d = Tensor::zeros(xv.shape());
                let c = g.cols();
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                vec![(*x, d)]
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                let mut res = Vec::with_capacity(xs.len());
                for &x in xs {
                    let r = val(x).rows();
                    res.push((x, g.slice_rows(off, r)));
                    off += r;
                }
                res
            }
            Op::Gather { table, index } => {
                let mut d = Tensor::zeros(val(*table).shape());
                for (r, &i) in index.iter().enumerate() {
                    tensor::axpy(T::one(), g.row(r), d.row_mut(i));
                }
                vec![(*table, d)]
            }
            Op::Bits {
                logits,
                targets,
                probs,
            } => {
                let rows = probs.rows();
                let s = g.item() / T::of(rows as f64 * std::f64::consts::LN_2);
                let mut d = probs.scale(s);
                for (i, &t) in targets.iter().enumerate() {
                    d.row_mut(i)[t] -= s;
                }
                vec![(*logits, d)]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let ds = op.backward(&ins, &entry.value, g)?;
                inputs
                    .iter()
                    .zip(ds)
                    .filter_map(|(&v, d)| d.map(|d| (v, d)))
                    .collect()
            }
            Op::Checkpoint { inputs, f, seeds } => {
                let mut sub = self.child();
                sub.replay_seeds = seeds.iter().copied().collect();
                let leaves: Vec<Var> = inputs
                    .iter()
                    .map(|&v| {
                        sub.leaf_rc(
                            self.entries[v.0].value.clone(),
                            self.entries[v.0].requires_grad,
                        )
                    })
                    .collect();
                let out = f(&mut sub, &leaves)?;
                let sub_grads = sub.backward_with_seed(out, g.clone())?;
                *peak = (*peak).max(base + sub_grads.peak_retained());
                let mut sub_grads = sub_grads;
                inputs
                    .iter()
                    .zip(&leaves)
                    .filter_map(|(&v, &l)| sub_grads.take(l).map(|d| (v, d)))
                    .collect()
            }
        };
        Ok(out)
    }
}

/// Central finite differences of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<T: Scalar>(
    f: impl Fn(&Tensor<T>) -> T,
    x: &Tensor<T>,
    eps: T,
) -> Tensor<T> {
    let mut probe = x.clone();
    let two_eps = eps + eps;
    Tensor::from_fn(x.shape(), |k| {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[k] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[k] = orig;
        (up - down) / two_eps
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let diff: f64 = a.zip_map(b, |x, y| (x - y) * (x - y)).unwrap().sum().sqrt();
        let scale = a.sum_sq().sqrt().max(b.sum_sq().sqrt()).max(1e-12);
        diff / scale
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut t = Tape::<f64>::new();
        let x = t.param(random(&[3, 4], 1));
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 12]);
    }

    #[test]
    fn grad_of_square_sum() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.param(random(&[2, 2], 1));
        assert!(matches!(t.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let t = Tape::<f64>::new();
        assert!(matches!(t.backward(Var(3)), Err(Error::UnknownVar(3))));
    }

    #[test]
    fn finite_diff_basics() {
        let x = random(&[5], 2);
        let g = finite_diff_grad(|t: &Tensor<f64>| t.sum(), &x, 1e-5);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let x = Tensor::scalar(3.0f64);
        let g = finite_diff_grad(|t: &Tensor<f64>| t.item() * t.item(), &x, 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    /// A two-layer toy network touching every differentiable op.
    fn toy(t: &mut Tape<f64>, p: &[Var], x: Var) -> Var {
        let h = t.matmul(x, p[0]).unwrap();
        let h = t.add_row(h, p[1]).unwrap();
        let h = t.layer_norm(h, p[2], p[3]).unwrap();
        let h = t.gelu(h).unwrap();
        let ht = t.transpose(h).unwrap();
        let gram = t.matmul(h, ht).unwrap();
        let gram = t.scale(gram, 0.5).unwrap();
        let allowed: Arc<Vec<Vec<usize>>> = Arc::new((0..4).map(|i| (0..=i).collect()).collect());
        let a = t.masked_softmax(gram, allowed).unwrap();
        let h2 = t.matmul(a, h).unwrap();
        let left = t.slice_cols(h2, 0, 3).unwrap();
        let right = t.slice_cols(h2, 3, 3).unwrap();
        let swapped = t.concat_cols(&[right, left]).unwrap();
        let top = t.slice_rows(swapped, 0, 2).unwrap();
        let bottom = t.slice_rows(swapped, 2, 2).unwrap();
        let stacked = t.concat_rows(&[bottom, top]).unwrap();
        let y = t.matmul(stacked, p[4]).unwrap();
        let y = t.mul(y, y).unwrap();
        t.bits_per_byte(y, Arc::new(vec![1, 0, 4, 2])).unwrap()
    }

    #[test]
    fn toy_model_matches_finite_differences() {
        let params = vec![
            random(&[5, 6], 10),
            random(&[6], 11),
            random(&[6], 12),
            random(&[6], 13),
            random(&[6, 5], 14),
        ];
        let x = random(&[4, 5], 15);
        let mut t = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| t.param(p.clone())).collect();
        let xv = t.constant(x.clone());
        let loss = toy(&mut t, &vars, xv);
        let grads = t.backward(loss).unwrap();
        for (k, p) in params.iter().enumerate() {
            let numeric = finite_diff_grad(
                |probe| {
                    let mut t = Tape::new();
                    let vars: Vec<Var> = params
                        .iter()
                        .enumerate()
                        .map(|(j, q)| t.param(if j == k { probe.clone() } else { q.clone() }))
                        .collect();
                    let xv = t.constant(x.clone());
                    let l = toy(&mut t, &vars, xv);
                    t.value(l).item()
                },
                p,
                1e-5,
            );
            let err = rel_err(grads.get(vars[k]).unwrap(), &numeric);
            assert!(err <= 1e-5, "param {k}: rel err {err}");
        }
    }

    #[test]
    fn gather_scatters_gradient() {
        let mut t = Tape::<f64>::new();
        let table = t.param(random(&[4, 2], 3));
        let rows = t.gather(table, Arc::new(vec![1, 1, 3])).unwrap();
        let s = t.sum(rows).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(
            g.get(table).unwrap().data(),
            &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0]
        );
    }

    #[test]
    fn identity_checkpoint_passes_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.param(random(&[2, 3], 4));
        let f: SegmentFn<f64> = Rc::new(|_t, ins| Ok(ins[0]));
        let y = t.checkpoint(f, &[x]).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 6]);
    }

    fn block(t: &mut Tape<f64>, ins: &[Var], seed: Option<u64>) -> Result<Var> {
        let h = t.matmul(ins[0], ins[1])?;
        let h = t.gelu(h)?;
        let h = t.dropout(h, 0.3, seed)?;
        t.add(h, ins[0])
    }

    #[test]
    fn checkpoint_is_bitwise_equal_to_direct() {
        let x0 = random(&[4, 4], 5);
        let ws: Vec<Tensor<f64>> = (0..6).map(|k| random(&[4, 4], 20 + k)).collect();
        let run = |ckpt: bool| {
            let mut t = Tape::new();
            let ws: Vec<Var> = ws.iter().map(|w| t.param(w.clone())).collect();
            let mut h = t.param(x0.clone());
            for (k, &w) in ws.iter().enumerate() {
                let seed = Some(100 + k as u64);
                h = if ckpt {
                    let f: SegmentFn<f64> = Rc::new(move |t, ins| block(t, ins, seed));
                    t.checkpoint(f, &[h, w]).unwrap()
                } else {
                    block(&mut t, &[h, w], seed).unwrap()
                };
            }
            let s = t.sum(h).unwrap();
            let out = t.value(s).item();
            let g = t.backward(s).unwrap();
            let grads: Vec<Vec<u64>> = ws
                .iter()
                .map(|&w| {
                    g.get(w)
                        .unwrap()
                        .data()
                        .iter()
                        .map(|v| v.to_bits())
                        .collect()
                })
                .collect();
            (out.to_bits(), grads, g.peak_retained())
        };
        let (direct_out, direct_grads, direct_peak) = run(false);
        let (ck_out, ck_grads, ck_peak) = run(true);
        assert_eq!(direct_out, ck_out);
        assert_eq!(direct_grads, ck_grads);
        assert!(ck_peak < direct_peak, "{ck_peak} !< {direct_peak}");
    }

    #[test]
    fn unseeded_dropout_in_deterministic_segment_is_rejected() {
        let mut t = Tape::<f64>::new();
        let x = t.param(random(&[2, 2], 6));
        let f: SegmentFn<f64> = Rc::new(|t, ins| t.dropout(ins[0], 0.5, None));
        assert!(matches!(t.checkpoint(f, &[x]), Err(Error::UnseededSegment)));
    }

    #[test]
    fn unseeded_dropout_replays_in_relaxed_mode() {
        let mut t = Tape::<f64>::new().with_deterministic(false);
        let x = t.param(random(&[8, 8], 7));
        let f: SegmentFn<f64> = Rc::new(|t, ins| t.dropout(ins[0], 0.5, None));
        let y = t.checkpoint(f, &[x]).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        // the gradient is the mask the forward actually used
        let (xv, yv) = (t.value(x), t.value(y));
        for ((gv, &a), &b) in g
            .get(x)
            .unwrap()
            .data()
            .iter()
            .zip(xv.data())
            .zip(yv.data())
        {
            assert_eq!(*gv, b / a);
        }
    }

    #[test]
    fn non_finite_forward_is_detected() {
        let mut t = Tape::<f64>::new();
        let x = t.param(Tensor::scalar(f64::MAX));
        assert!(matches!(t.scale(x, 10.0), Err(Error::NonFinite("scale"))));
    }
}
