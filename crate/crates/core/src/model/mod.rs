//! The Sparse Transformer network over byte tokens.
//!
//! Tokens are embedded, summed with positional embeddings, passed through
//! `N` pre-activation residual blocks and projected to vocabulary logits
//! after a final layer norm. Each block adds an attention branch and a
//! feedforward branch to the trunk:
//!
//! ```text
//! a = dropout(attention(norm(H)))
//! b = dropout(ff(norm(H + a)))
//! H' = H + a + b
//! ```
//!
//! Inputs are shifted by one: position 0 reads a fixed BOS byte (0) and
//! position `i` reads token `i - 1`, so the logits at `i` predict token `i`.

mod checkpoint;

use std::rc::Rc;
use std::sync::{Arc, OnceLock};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    dense_attention, sparse_attention, AttentionParams, AttentionPlan, AttentionPlanner,
    AttentionVars, HeadShape, HeadStrategy,
};
use crate::error::{Error, Result};
use crate::patterns::{FactorizedPattern, PatternKind, DEFAULT_BLOCK};
use crate::rng::{dropout_seed, stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tape::{SegmentFn, Tape, Var};
use crate::tensor::Tensor;

pub use checkpoint::{
    read_container, write_container, RawRecord, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

/// Byte fed to position 0.
pub const BOS: u8 = 0;

/// Scale of every initial weight distribution.
pub const INIT_SCALE: f64 = 0.125;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternConfig {
    pub kind: PatternKind,
    /// Stride `l`; ignored by `full`.
    #[serde(default)]
    pub stride: usize,
    /// Summary width `c` of the fixed pattern.
    #[serde(default)]
    pub summary: usize,
}

impl PatternConfig {
    pub fn build(&self, n: usize) -> Result<FactorizedPattern> {
        match self.kind {
            PatternKind::Strided => FactorizedPattern::strided(n, self.stride),
            PatternKind::Fixed => FactorizedPattern::fixed(n, self.stride, self.summary),
            PatternKind::Full => FactorizedPattern::full(n),
            PatternKind::LocalOnly => FactorizedPattern::local_only(n, self.stride),
            PatternKind::Custom => {
                Err(Error::Config("custom patterns cannot be configured".into()))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Row and column in a matrix as wide as the stride.
    #[default]
    Attention,
    /// Mixed-radix coordinates of the data, e.g. `[height, width, channels]`.
    Data,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionalConfig {
    #[serde(default)]
    pub mode: PositionMode,
    /// Extent of each data coordinate, outermost first. Data mode only.
    #[serde(default)]
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    /// Context length `n`.
    pub n_ctx: usize,
    pub pattern: PatternConfig,
    #[serde(default)]
    pub head_strategy: HeadStrategy,
    #[serde(default)]
    pub positional: PositionalConfig,
    /// Width of the feedforward hidden layer relative to `d_model`.
    #[serde(default = "default_ff_mult")]
    pub ff_mult: f64,
    #[serde(default)]
    pub dropout: f64,
    /// Halve the query and key widths.
    #[serde(default)]
    pub half_qk: bool,
    /// Give each head of a fixed pattern its own summary residues.
    #[serde(default)]
    pub distinct_subblocks: bool,
    #[serde(default = "default_block")]
    pub block: usize,
    /// Recompute each residual block during backward instead of storing
    /// its activations.
    #[serde(default = "default_true")]
    pub recompute: bool,
}

fn default_vocab() -> usize {
    256
}

fn default_ff_mult() -> f64 {
    4.0
}

fn default_block() -> usize {
    DEFAULT_BLOCK
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// A small strided model with default settings.
    pub fn small(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        n_ctx: usize,
        stride: usize,
    ) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            vocab: 256,
            n_ctx,
            pattern: PatternConfig {
                kind: PatternKind::Strided,
                stride,
                summary: 0,
            },
            head_strategy: HeadStrategy::Interleaved,
            positional: PositionalConfig::default(),
            ff_mult: 4.0,
            dropout: 0.0,
            half_qk: false,
            distinct_subblocks: false,
            block: DEFAULT_BLOCK,
            recompute: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=256).contains(&self.vocab) {
            return bad(format!("vocab {} outside 2..=256", self.vocab));
        }
        if self.n_layers == 0 {
            return bad("n_layers must be at least 1".into());
        }
        if self.ff_mult != 2.0 && self.ff_mult != 4.0 {
            return bad(format!("ff_mult {} is neither 2.0 nor 4.0", self.ff_mult));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.block == 0 {
            return bad("block must be positive".into());
        }
        HeadShape::new(self.d_model, self.n_heads, self.half_qk)?;
        self.pattern.build(self.n_ctx)?;
        if self.positional.mode == PositionMode::Data {
            let dims = &self.positional.dims;
            if dims.is_empty() || dims.contains(&0) {
                return bad(format!("data dims {dims:?} must be nonempty and positive"));
            }
            if dims.iter().product::<usize>() < self.n_ctx {
                return bad(format!(
                    "data dims {dims:?} cover fewer than {} positions",
                    self.n_ctx
                ));
            }
        }
        Ok(())
    }

    pub fn ff_width(&self) -> usize {
        (self.ff_mult * self.d_model as f64) as usize
    }

    pub fn head_shape(&self) -> Result<HeadShape> {
        HeadShape::new(self.d_model, self.n_heads, self.half_qk)
    }

    /// Stride used by attention-mode positional embeddings.
    fn pos_stride(&self) -> usize {
        match self.pattern.kind {
            PatternKind::Full if self.pattern.stride == 0 => self.n_ctx,
            _ => self.pattern.stride.max(1),
        }
    }

    /// Row count of each positional table.
    pub fn pos_table_sizes(&self) -> Vec<usize> {
        match self.positional.mode {
            PositionMode::Attention => {
                let l = self.pos_stride();
                vec![self.n_ctx.div_ceil(l), l]
            }
            PositionMode::Data => self.positional.dims.clone(),
        }
    }

    /// Coordinates of position `i`, one per positional table.
    pub fn pos_coords(&self, i: usize) -> Vec<usize> {
        match self.positional.mode {
            PositionMode::Attention => {
                let l = self.pos_stride();
                vec![i / l, i % l]
            }
            PositionMode::Data => {
                let dims = &self.positional.dims;
                let mut rest = i;
                let mut out = vec![0; dims.len()];
                for (k, &e) in dims.iter().enumerate().rev() {
                    out[k] = rest % e;
                    rest /= e;
                }
                out
            }
        }
    }
}

/// Weights of one residual block.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub norm1_gain: Tensor<T>,
    pub norm1_bias: Tensor<T>,
    pub attn: AttentionParams<T>,
    pub norm2_gain: Tensor<T>,
    pub norm2_bias: Tensor<T>,
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

const LAYER_FIELDS: [&str; 12] = [
    "norm1.gain",
    "norm1.bias",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wp",
    "norm2.gain",
    "norm2.bias",
    "ff.w1",
    "ff.b1",
    "ff.w2",
    "ff.b2",
];

impl<T: Scalar> LayerParams<T> {
    fn fields(&self) -> [&Tensor<T>; 12] {
        [
            &self.norm1_gain,
            &self.norm1_bias,
            &self.attn.wq,
            &self.attn.wk,
            &self.attn.wv,
            &self.attn.wp,
            &self.norm2_gain,
            &self.norm2_bias,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 12] {
        [
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.attn.wq,
            &mut self.attn.wk,
            &mut self.attn.wv,
            &mut self.attn.wp,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

/// All weights of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// `v × d` token embedding.
    pub embed: Tensor<T>,
    /// One table per positional coordinate.
    pub pos: Vec<Tensor<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
    /// `d × v` output projection.
    pub out: Tensor<T>,
}

impl<T: Scalar> ModelParams<T> {
    /// Every parameter with its checkpoint name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = vec![("embed.token".to_string(), &self.embed)];
        v.extend(
            self.pos
                .iter()
                .enumerate()
                .map(|(j, t)| (format!("embed.pos.{j}"), t)),
        );
        for (r, layer) in self.layers.iter().enumerate() {
            v.extend(
                LAYER_FIELDS
                    .iter()
                    .zip(layer.fields())
                    .map(|(f, t)| (format!("layers.{r}.{f}"), t)),
            );
        }
        v.push(("final_norm.gain".into(), &self.final_gain));
        v.push(("final_norm.bias".into(), &self.final_bias));
        v.push(("out".into(), &self.out));
        v
    }

    /// Mutable parameters in the order of [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.embed];
        v.extend(self.pos.iter_mut());
        for layer in &mut self.layers {
            v.extend(layer.fields_mut());
        }
        v.push(&mut self.final_gain);
        v.push(&mut self.final_bias);
        v.push(&mut self.out);
        v
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Zero weights of the right shapes.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, v, f) = (cfg.d_model, cfg.vocab, cfg.ff_width());
        let shape = cfg.head_shape()?;
        Ok(Self {
            embed: Tensor::zeros(&[v, d]),
            pos: cfg
                .pos_table_sizes()
                .iter()
                .map(|&s| Tensor::zeros(&[s, d]))
                .collect(),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    norm1_gain: Tensor::full(&[d], T::one()),
                    norm1_bias: Tensor::zeros(&[d]),
                    attn: AttentionParams::zeros(shape),
                    norm2_gain: Tensor::full(&[d], T::one()),
                    norm2_bias: Tensor::zeros(&[d]),
                    w1: Tensor::zeros(&[d, f]),
                    b1: Tensor::zeros(&[f]),
                    w2: Tensor::zeros(&[f, d]),
                    b2: Tensor::zeros(&[d]),
                })
                .collect(),
            final_gain: Tensor::full(&[d], T::one()),
            final_bias: Tensor::zeros(&[d]),
            out: Tensor::zeros(&[d, v]),
        })
    }

    /// Rebuilds parameters from named tensors; every name must be present
    /// with the expected shape.
    pub fn from_named(
        cfg: &ModelConfig,
        mut lookup: impl FnMut(&str) -> Option<Tensor<T>>,
    ) -> Result<Self> {
        let mut params = Self::zeros(cfg)?;
        let names: Vec<(String, Vec<usize>)> = params
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), slot) in names.into_iter().zip(params.tensors_mut()) {
            let t = lookup(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            embed: self.embed.cast(),
            pos: self.pos.iter().map(Tensor::cast).collect(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    norm1_gain: l.norm1_gain.cast(),
                    norm1_bias: l.norm1_bias.cast(),
                    attn: AttentionParams {
                        shape: l.attn.shape,
                        wq: l.attn.wq.cast(),
                        wk: l.attn.wk.cast(),
                        wv: l.attn.wv.cast(),
                        wp: l.attn.wp.cast(),
                    },
                    norm2_gain: l.norm2_gain.cast(),
                    norm2_bias: l.norm2_bias.cast(),
                    w1: l.w1.cast(),
                    b1: l.b1.cast(),
                    w2: l.w2.cast(),
                    b2: l.b2.cast(),
                })
                .collect(),
            final_gain: self.final_gain.cast(),
            final_bias: self.final_bias.cast(),
            out: self.out.cast(),
        }
    }

    /// Records every parameter on `tape`, trainable or constant.
    pub fn on_tape(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor<T>| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let embed = put(&self.embed);
        let pos = self.pos.iter().map(&mut put).collect();
        let layers = self
            .layers
            .iter()
            .map(|l| LayerVars {
                vars: l.fields().map(&mut put),
                shape: l.attn.shape,
            })
            .collect();
        let final_gain = put(&self.final_gain);
        let final_bias = put(&self.final_bias);
        let out = put(&self.out);
        ModelVars {
            embed,
            pos,
            layers,
            final_gain,
            final_bias,
            out,
        }
    }
}

/// One block's parameters on a tape, in [`LAYER_FIELDS`] order.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub vars: [Var; 12],
    pub shape: HeadShape,
}

impl LayerVars {
    fn attention(&self) -> AttentionVars {
        AttentionVars {
            shape: self.shape,
            wq: self.vars[2],
            wk: self.vars[3],
            wv: self.vars[4],
            wp: self.vars[5],
        }
    }
}

/// [`ModelParams`] recorded on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: Var,
    pub pos: Vec<Var>,
    pub layers: Vec<LayerVars>,
    pub final_gain: Var,
    pub final_bias: Var,
    pub out: Var,
}

impl ModelVars {
    /// All variables in the order of [`ModelParams::named`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.embed];
        v.extend(&self.pos);
        for l in &self.layers {
            v.extend(l.vars);
        }
        v.extend([self.final_gain, self.final_bias, self.out]);
        v
    }
}

/// Initial weights drawn from the init stream of `seed`.
///
/// Weight matrices are normal with standard deviation `0.125/√d_in`; the
/// token embedding uses `0.125/√d`, positional tables `0.125/√(d·n_emb)`.
/// `W_2` and `W_p` are further scaled by `1/√(2N)`. Biases and the output
/// projection start at zero, norm gains at one.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    let mut p = ModelParams::<T>::zeros(cfg)?;
    let mut rng = stream_rng(seed, Stream::Init);
    let d = cfg.d_model as f64;
    let depth = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
    let fill = |t: &mut Tensor<T>, std: f64, rng: &mut rand_chacha::ChaCha8Rng| {
        let dist = Normal::new(0.0, std).expect("positive std");
        for x in t.data_mut() {
            *x = T::of(dist.sample(rng));
        }
    };
    fill(&mut p.embed, INIT_SCALE / d.sqrt(), &mut rng);
    let n_emb = p.pos.len() as f64;
    for t in &mut p.pos {
        fill(t, INIT_SCALE / (d * n_emb).sqrt(), &mut rng);
    }
    let f = cfg.ff_width() as f64;
    for l in &mut p.layers {
        fill(&mut l.attn.wq, INIT_SCALE / d.sqrt(), &mut rng);
        fill(&mut l.attn.wk, INIT_SCALE / d.sqrt(), &mut rng);
        fill(&mut l.attn.wv, INIT_SCALE / d.sqrt(), &mut rng);
        fill(&mut l.attn.wp, INIT_SCALE / d.sqrt() * depth, &mut rng);
        fill(&mut l.w1, INIT_SCALE / d.sqrt(), &mut rng);
        fill(&mut l.w2, INIT_SCALE / f.sqrt() * depth, &mut rng);
    }
    Ok(p)
}

/// Which attention implementation a forward pass uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Kernel {
    #[default]
    Sparse,
    /// Dense masked reference; limited to short contexts.
    Dense,
}

/// Per-call switches of the forward pass.
#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// `(seed, step)` enabling dropout; `None` evaluates without dropout.
    pub dropout: Option<(u64, u64)>,
    /// Overrides the configured recomputation setting.
    pub recompute: Option<bool>,
    pub kernel: Kernel,
}

/// Values of one forward pass, block by block.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub h0: Tensor<T>,
    /// Attention branch output of each block.
    pub a: Vec<Tensor<T>>,
    /// Feedforward branch output of each block.
    pub b: Vec<Tensor<T>>,
    pub hn: Tensor<T>,
    pub logits: Tensor<T>,
}

/// A configured network: compiled attention schedules for every layer.
#[derive(Debug)]
pub struct Model {
    cfg: ModelConfig,
    pattern: FactorizedPattern,
    planner: AttentionPlanner,
    allowed: Vec<OnceLock<Vec<Arc<Vec<Vec<usize>>>>>>,
}

struct BlockCtx {
    plan: Arc<AttentionPlan>,
    allowed: Option<Vec<Arc<Vec<Vec<usize>>>>>,
    rate: f64,
    seeds: [Option<u64>; 2],
}

impl BlockCtx {
    /// One residual block; returns `(H', a, b)`.
    fn run<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        h: Var,
        lv: &LayerVars,
    ) -> Result<(Var, Var, Var)> {
        let v = &lv.vars;
        let x = tape.layer_norm(h, v[0], v[1])?;
        let attn = match &self.allowed {
            Some(allowed) => dense_attention(tape, x, &lv.attention(), allowed)?,
            None => sparse_attention(tape, x, &lv.attention(), &self.plan)?,
        };
        let a = tape.dropout(attn, self.rate, self.seeds[0])?;
        let ha = tape.add(h, a)?;
        let y = tape.layer_norm(ha, v[6], v[7])?;
        let hidden = tape.matmul(y, v[8])?;
        let hidden = tape.add_row(hidden, v[9])?;
        let hidden = tape.gelu(hidden)?;
        let f = tape.matmul(hidden, v[10])?;
        let f = tape.add_row(f, v[11])?;
        let b = tape.dropout(f, self.rate, self.seeds[1])?;
        let out = tape.add(ha, b)?;
        Ok((out, a, b))
    }
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let pattern = cfg.pattern.build(cfg.n_ctx)?;
        let planner = AttentionPlanner::new(
            &pattern,
            cfg.head_strategy,
            cfg.n_heads,
            cfg.block,
            cfg.distinct_subblocks,
        )?;
        let period = match cfg.head_strategy {
            HeadStrategy::Interleaved => pattern.p(),
            _ => 1,
        };
        Ok(Self {
            cfg,
            pattern,
            planner,
            allowed: (0..period).map(|_| OnceLock::new()).collect(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn pattern(&self) -> &FactorizedPattern {
        &self.pattern
    }

    pub fn plan(&self, layer: usize) -> &Arc<AttentionPlan> {
        self.planner.layer(layer)
    }

    fn check_tokens(&self, tokens: &[u8]) -> Result<usize> {
        let n = self.cfg.n_ctx;
        if tokens.is_empty() || tokens.len() % n != 0 {
            return Err(Error::Config(format!(
                "{} tokens is not a whole number of {n}-token sequences",
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab) {
            return Err(Error::TokenOutOfRange {
                token: t as usize,
                vocab: self.cfg.vocab,
            });
        }
        Ok(tokens.len() / n)
    }

    /// Inputs shifted right by one within each sequence, BOS first.
    pub fn shifted_inputs(&self, tokens: &[u8]) -> Vec<usize> {
        let n = self.cfg.n_ctx;
        tokens
            .chunks(n)
            .flat_map(|seq| std::iter::once(BOS).chain(seq[..n - 1].iter().copied()))
            .map(usize::from)
            .collect()
    }

    /// Token plus positional embeddings of the shifted inputs.
    pub fn embed<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        tokens: &[u8],
    ) -> Result<Var> {
        let batch = self.check_tokens(tokens)?;
        let n = self.cfg.n_ctx;
        let mut h = tape.gather(vars.embed, Arc::new(self.shifted_inputs(tokens)))?;
        let coords: Vec<Vec<usize>> = (0..n).map(|i| self.cfg.pos_coords(i)).collect();
        for (j, &table) in vars.pos.iter().enumerate() {
            let index: Vec<usize> = (0..batch * n).map(|r| coords[r % n][j]).collect();
            let e = tape.gather(table, Arc::new(index))?;
            h = tape.add(h, e)?;
        }
        Ok(h)
    }

    fn block_ctx(&self, r: usize, opts: &ForwardOptions) -> BlockCtx {
        let rate = if opts.dropout.is_some() {
            self.cfg.dropout
        } else {
            0.0
        };
        let seeds = match opts.dropout {
            Some((seed, step)) if rate > 0.0 => {
                [0, 1].map(|site| Some(dropout_seed(seed, step, r, site)))
            }
            _ => [None, None],
        };
        let allowed = (opts.kernel == Kernel::Dense).then(|| {
            self.allowed[r % self.allowed.len()]
                .get_or_init(|| self.plan(r).allowed_sets())
                .clone()
        });
        BlockCtx {
            plan: self.plan(r).clone(),
            allowed,
            rate,
            seeds,
        }
    }

    /// Residual stack after embedding; returns `H_N`.
    pub fn trunk<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        h0: Var,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let recompute = opts.recompute.unwrap_or(self.cfg.recompute);
        let mut h = h0;
        for (r, lv) in vars.layers.iter().enumerate() {
            let ctx = self.block_ctx(r, opts);
            h = if recompute {
                let lv = *lv;
                let f: SegmentFn<T> = Rc::new(move |t: &mut Tape<T>, ins: &[Var]| {
                    let mut local = lv;
                    local.vars.copy_from_slice(&ins[1..]);
                    Ok(ctx.run(t, ins[0], &local)?.0)
                });
                let mut inputs = vec![h];
                inputs.extend(lv.vars);
                tape.checkpoint(f, &inputs)?
            } else {
                ctx.run(tape, h, lv)?.0
            };
        }
        Ok(h)
    }

    /// Logits for every position of every sequence in `tokens`, which holds
    /// whole sequences of `n_ctx` bytes back to back.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        tokens: &[u8],
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let h0 = self.embed(tape, vars, tokens)?;
        let hn = self.trunk(tape, vars, h0, opts)?;
        let y = tape.layer_norm(hn, vars.final_gain, vars.final_bias)?;
        tape.matmul(y, vars.out)
    }

    /// Mean bits per byte of `tokens` under the model.
    pub fn loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        tokens: &[u8],
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let logits = self.forward(tape, vars, tokens, opts)?;
        let targets: Vec<usize> = tokens.iter().map(|&t| usize::from(t)).collect();
        tape.bits_per_byte(logits, Arc::new(targets))
    }

    /// Logits without recording gradients.
    pub fn logits<T: Scalar>(&self, params: &ModelParams<T>, tokens: &[u8]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = params.on_tape(&mut tape, false);
        let opts = ForwardOptions {
            recompute: Some(false),
            ..Default::default()
        };
        let out = self.forward(&mut tape, &vars, tokens, &opts)?;
        Ok(tape.value(out).clone())
    }

    /// Forward pass keeping every branch output.
    pub fn trace<T: Scalar>(
        &self,
        params: &ModelParams<T>,
        tokens: &[u8],
        kernel: Kernel,
    ) -> Result<ForwardTrace<T>> {
        let mut tape = Tape::new();
        let vars = params.on_tape(&mut tape, false);
        let opts = ForwardOptions {
            kernel,
            ..Default::default()
        };
        let h0 = self.embed(&mut tape, &vars, tokens)?;
        let mut h = h0;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (r, lv) in vars.layers.iter().enumerate() {
            let (next, av, bv) = self.block_ctx(r, &opts).run(&mut tape, h, lv)?;
            a.push(tape.value(av).clone());
            b.push(tape.value(bv).clone());
            h = next;
        }
        let y = tape.layer_norm(h, vars.final_gain, vars.final_bias)?;
        let logits = tape.matmul(y, vars.out)?;
        Ok(ForwardTrace {
            h0: tape.value(h0).clone(),
            a,
            b,
            hn: tape.value(h).clone(),
            logits: tape.value(logits).clone(),
        })
    }
}
