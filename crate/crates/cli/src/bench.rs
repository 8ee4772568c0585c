//! Forward-pass timing of dense and block-sparse attention.
//!
//! "dense" is full causal attention with materialized `n × n` logits;
//! "sparse" is the block-sparse kernel on the requested pattern with merged
//! heads. Before any timing the kernel is checked against the dense path
//! masked to the same pattern.

use std::time::Instant;

use anyhow::{bail, Result};
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use sparse_transformer::attention::{
    dense_attention_forward, sparse_attention_forward, AttentionParams, AttentionPlan, HeadShape,
};
use sparse_transformer::patterns::{FactorizedPattern, HeadSelect, DEFAULT_BLOCK};
use sparse_transformer::rng::{stream_rng, Stream};
use sparse_transformer::Tensor;

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub d: usize,
    pub n_heads: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Largest dense logit matrix allowed, in bytes.
    pub dense_limit: usize,
    /// Largest tolerated max abs difference in the cross-check.
    pub tolerance: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            d: 256,
            n_heads: 4,
            repeats: 5,
            seed: 0,
            dense_limit: 2 << 30,
            tolerance: 1e-4,
        }
    }
}

/// One timed run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchSample {
    #[serde(rename = "impl")]
    pub implementation: &'static str,
    pub n: usize,
    pub d: usize,
    pub repeat: usize,
    pub ms: f64,
    pub mac_count: u64,
}

/// Median over repeats.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    #[serde(rename = "impl")]
    pub implementation: &'static str,
    pub n: usize,
    pub d: usize,
    pub ms: f64,
    pub mac_count: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub pattern: String,
    pub max_abs_diff: f64,
    pub samples: Vec<BenchSample>,
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn row(&self, implementation: &str) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.implementation == implementation)
    }
}

fn random_inputs(n: usize, opts: &BenchOptions) -> Result<(Tensor<f32>, AttentionParams<f32>)> {
    let shape = HeadShape::new(opts.d, opts.n_heads, false)?;
    let mut rng = stream_rng(opts.seed, Stream::Init);
    let d = opts.d;
    let w = Normal::new(0.0, 1.0 / (d as f64).sqrt())?;
    let mut draw = |shape: &[usize], dist: &Normal<f64>| {
        Tensor::from_fn(shape, |_| dist.sample(&mut rng) as f32)
    };
    let unit = Normal::new(0.0, 1.0)?;
    let x = draw(&[n, d], &unit);
    let params = AttentionParams {
        shape,
        wq: draw(&[d, d], &w),
        wk: draw(&[d, d], &w),
        wv: draw(&[d, d], &w),
        wp: draw(&[d, d], &w),
    };
    Ok((x, params))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Cross-checks, then times `repeats` forward passes of each implementation.
pub fn run_bench(pat: &FactorizedPattern, opts: &BenchOptions) -> Result<BenchReport> {
    if opts.repeats == 0 {
        bail!("repeats must be positive");
    }
    let n = pat.n();
    let (x, params) = random_inputs(n, opts)?;
    let plan = AttentionPlan::uniform(pat, HeadSelect::Merged, opts.n_heads, DEFAULT_BLOCK)?;
    let (sparse_out, _) = sparse_attention_forward(&x, &params, &plan)?;
    let (masked_out, _) = dense_attention_forward(
        &x,
        &params,
        &|i, j| pat.union_contains(i, j),
        opts.dense_limit,
    )?;
    let diff = sparse_out.max_abs_diff(&masked_out);
    if !(diff <= opts.tolerance) {
        bail!(
            "cross-check failed: sparse and dense differ by {diff:e}; refusing to report timings"
        );
    }
    let mut samples = Vec::new();
    for repeat in 0..opts.repeats {
        let t = Instant::now();
        let (_, c) = dense_attention_forward(&x, &params, &|i, j| j <= i, opts.dense_limit)?;
        samples.push(BenchSample {
            implementation: "dense",
            n,
            d: opts.d,
            repeat,
            ms: t.elapsed().as_secs_f64() * 1e3,
            mac_count: c.macs,
        });
        let t = Instant::now();
        let (_, c) = sparse_attention_forward(&x, &params, &plan)?;
        samples.push(BenchSample {
            implementation: "sparse",
            n,
            d: opts.d,
            repeat,
            ms: t.elapsed().as_secs_f64() * 1e3,
            mac_count: c.macs,
        });
    }
    let rows = ["dense", "sparse"]
        .into_iter()
        .map(|name| {
            let mine: Vec<&BenchSample> = samples
                .iter()
                .filter(|s| s.implementation == name)
                .collect();
            BenchRow {
                implementation: name,
                n,
                d: opts.d,
                ms: median(mine.iter().map(|s| s.ms).collect()),
                mac_count: mine[0].mac_count,
            }
        })
        .collect();
    Ok(BenchReport {
        pattern: pat.kind().to_string(),
        max_abs_diff: diff,
        samples,
        rows,
    })
}
