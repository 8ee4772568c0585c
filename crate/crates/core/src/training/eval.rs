use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

/// Windows evaluated per forward pass.
const EVAL_BATCH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub min_context: usize,
    pub bpb: f64,
    /// Positions that contributed to `bpb`.
    pub scored: usize,
    pub windows: usize,
}

/// Positions scored when windows of `n` advance by `n - min_context` over
/// `len` bytes.
pub fn scored_positions(len: usize, n: usize, min_context: usize) -> usize {
    if len < n || min_context >= n {
        return 0;
    }
    let stride = n - min_context;
    ((len - n) / stride + 1) * stride
}

fn token_bits(row: &[f64], target: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&z| (z - m).exp()).sum();
    (sum.ln() + m - row[target]) * std::f64::consts::LOG2_E
}

/// Mean bits per byte of `data`, scoring only positions that see at least
/// `min_context` earlier bytes of their window.
///
/// Windows of `n_ctx` bytes start every `n_ctx - min_context` bytes, so
/// every scored byte is scored exactly once.
pub fn evaluate_min_context<T: Scalar>(
    model: &Model,
    params: &ModelParams<T>,
    data: &[u8],
    min_context: usize,
) -> Result<EvalReport> {
    let n = model.config().n_ctx;
    if min_context >= n {
        return Err(Error::Config(format!(
            "min_context {min_context} must be below n_ctx {n}"
        )));
    }
    if data.len() < n {
        return Err(Error::CorpusTooSmall {
            len: data.len(),
            need: n,
        });
    }
    let stride = n - min_context;
    let starts: Vec<usize> = (0..=(data.len() - n) / stride)
        .map(|w| w * stride)
        .collect();
    let mut total = 0.0;
    let mut scored = 0;
    for chunk in starts.chunks(EVAL_BATCH) {
        let tokens: Vec<u8> = chunk
            .iter()
            .flat_map(|&s| &data[s..s + n])
            .copied()
            .collect();
        let logits = model.logits(params, &tokens)?;
        for w in 0..chunk.len() {
            for k in min_context..n {
                let r = w * n + k;
                let row: Vec<f64> = logits.row(r).iter().map(|x| x.f64()).collect();
                total += token_bits(&row, usize::from(tokens[r]));
                scored += 1;
            }
        }
    }
    Ok(EvalReport {
        min_context,
        bpb: total / scored as f64,
        scored,
        windows: starts.len(),
    })
}

/// Mean bits per byte over consecutive non-overlapping windows.
pub fn evaluate<T: Scalar>(
    model: &Model,
    params: &ModelParams<T>,
    data: &[u8],
) -> Result<EvalReport> {
    evaluate_min_context(model, params, data, 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    /// Bytes to generate.
    pub length: usize,
    /// 0 picks the most likely byte.
    pub temperature: f64,
    pub seed: u64,
    /// Bytes that condition the first prediction.
    pub prompt: Vec<u8>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            length: 256,
            temperature: 1.0,
            seed: 0,
            prompt: Vec::new(),
        }
    }
}

/// Autoregressive sampling from `softmax(logits / temperature)`.
///
/// Every byte reruns the full forward pass over the last `n_ctx - 1` bytes;
/// ties at temperature 0 go to the lowest byte value.
pub fn sample<T: Scalar>(
    model: &Model,
    params: &ModelParams<T>,
    opts: &SampleOptions,
) -> Result<Vec<u8>> {
    let t = opts.temperature;
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Config(format!(
            "temperature {t} must be finite and non-negative"
        )));
    }
    let n = model.config().n_ctx;
    let mut rng = stream_rng(opts.seed, Stream::Sampling);
    let mut seq = opts.prompt.clone();
    for _ in 0..opts.length {
        let context = &seq[seq.len().saturating_sub(n - 1)..];
        let pos = context.len();
        let mut window = context.to_vec();
        window.resize(n, 0);
        let logits = model.logits(params, &window)?;
        let row: Vec<f64> = logits.row(pos).iter().map(|x| x.f64()).collect();
        let next = if t == 0.0 {
            let mut best = 0;
            for (k, &z) in row.iter().enumerate() {
                if z > row[best] {
                    best = k;
                }
            }
            best
        } else {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = row.iter().map(|&z| ((z - m) / t).exp()).collect();
            WeightedIndex::new(&weights)
                .map_err(|e| Error::Config(format!("sampling weights: {e}")))?
                .sample(&mut rng)
        };
        seq.push(next as u8);
    }
    Ok(seq.split_off(opts.prompt.len()))
}
