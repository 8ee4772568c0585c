use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    init_params, read_container, write_container, ForwardOptions, Model, ModelConfig, ModelParams,
};
use crate::rng::{stream_rng, Stream};
use crate::scalar::{DType, Scalar};
use crate::tape::Tape;
use crate::tensor::Tensor;

use super::optim::{adam_step, clip_gradients, OptState};
use super::{lr_schedule, TrainConfig};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub lr: f64,
    pub bpb: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// `None` in deterministic mode.
    pub wall_ms: Option<f64>,
}

/// Non-overlapping `n`-byte windows of a corpus, visited in a fresh random
/// order every epoch.
#[derive(Clone, Debug)]
pub struct WindowSampler {
    n: usize,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl WindowSampler {
    pub fn new(corpus_len: usize, n: usize, seed: u64) -> Result<Self> {
        if corpus_len < n + 1 {
            return Err(Error::CorpusTooSmall {
                len: corpus_len,
                need: n + 1,
            });
        }
        let order: Vec<usize> = (0..corpus_len / n).collect();
        Ok(Self {
            n,
            cursor: order.len(),
            order,
            rng: stream_rng(seed, Stream::Batch),
        })
    }

    pub fn windows(&self) -> usize {
        self.order.len()
    }

    /// Start offset of the next window.
    pub fn next_offset(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let w = self.order[self.cursor];
        self.cursor += 1;
        w * self.n
    }

    /// `batch` windows concatenated.
    pub fn next_batch(&mut self, corpus: &[u8], batch: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(batch * self.n);
        for _ in 0..batch {
            let o = self.next_offset();
            out.extend_from_slice(&corpus[o..o + self.n]);
        }
        out
    }
}

/// Parameters and optimizer state of a run in progress.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState<T> {
    pub params: ModelParams<T>,
    pub opt: OptState<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: StepHeader,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepHeader {
    pub step: u64,
}

/// A checkpoint as read from disk.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub params: ModelParams<T>,
    /// Absent when the file holds weights only.
    pub opt: Option<OptState<T>>,
}

fn cast_record<T: Scalar>(r: &crate::model::RawRecord) -> Result<Tensor<T>> {
    match r.dtype {
        DType::F32 => Ok(r.to_tensor::<f32>()?.cast()),
        DType::F64 => Ok(r.to_tensor::<f64>()?.cast()),
    }
}

/// Reads a checkpoint written by [`Trainer::save`], converting to `T`.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let (text, records) = read_container(path)?;
    let header: CheckpointHeader =
        toml::from_str(&text).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let mut by_name: HashMap<&str, &crate::model::RawRecord> = HashMap::new();
    for r in &records {
        if by_name.insert(r.name.as_str(), r).is_some() {
            return Err(Error::Format(format!("duplicate tensor {}", r.name)));
        }
    }
    let mut used = 0;
    let mut take = |name: &str| -> Option<Result<Tensor<T>>> {
        let r = by_name.get(name)?;
        used += 1;
        Some(cast_record(r))
    };
    let mut failure = None;
    let params = ModelParams::from_named(&header.model, |name| match take(name)? {
        Ok(t) => Some(t),
        Err(e) => {
            failure = Some(e);
            None
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let params = params?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let opt = if by_name.contains_key(format!("opt.m.{}", names[0]).as_str()) {
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, (_, p)) in names.iter().zip(params.named()) {
            for (prefix, dst) in [("opt.m", &mut m), ("opt.v", &mut v)] {
                let key = format!("{prefix}.{name}");
                let t =
                    take(&key).ok_or_else(|| Error::Format(format!("missing tensor {key}")))??;
                if t.shape() != p.shape() {
                    return Err(Error::Format(format!(
                        "{key}: shape {:?}, expected {:?}",
                        t.shape(),
                        p.shape()
                    )));
                }
                dst.push(t);
            }
        }
        Some(OptState {
            step: header.state.step,
            m,
            v,
        })
    } else {
        None
    };
    if used != records.len() {
        return Err(Error::Format(format!(
            "{} unexpected tensors in checkpoint",
            records.len() - used
        )));
    }
    Ok(Checkpoint {
        header,
        params,
        opt,
    })
}

/// Stepwise trainer over one corpus.
#[derive(Debug)]
pub struct Trainer<T: Scalar> {
    model: Model,
    cfg: TrainConfig,
    state: TrainerState<T>,
    sampler: WindowSampler,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh parameters from the init stream of `cfg.seed`.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, corpus_len: usize) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&model_cfg, cfg.seed)?;
        let opt = OptState::new(params.named().into_iter().map(|(_, t)| t));
        let sampler = WindowSampler::new(corpus_len, model_cfg.n_ctx, cfg.seed)?;
        Ok(Self {
            model: Model::new(model_cfg)?,
            cfg,
            state: TrainerState { params, opt },
            sampler,
        })
    }

    /// Continues the run saved at `path`, replaying the batch order up to
    /// its step.
    pub fn resume(path: &Path, corpus_len: usize) -> Result<Self> {
        let ckpt = load_checkpoint::<T>(path)?;
        let opt = ckpt
            .opt
            .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
        let mut t = Self::new(ckpt.header.model, ckpt.header.train, corpus_len)?;
        for _ in 0..opt.step * t.cfg.batch_size as u64 {
            t.sampler.next_offset();
        }
        t.state = TrainerState {
            params: ckpt.params,
            opt,
        };
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainerState<T> {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut TrainerState<T> {
        &mut self.state
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.state.params
    }

    pub fn into_params(self) -> ModelParams<T> {
        self.state.params
    }

    pub fn step_count(&self) -> u64 {
        self.state.opt.step
    }

    pub fn finished(&self) -> bool {
        self.state.opt.step >= self.cfg.total_steps
    }

    /// Forward, backward, clip and update on the next batch.
    pub fn step(&mut self, corpus: &[u8]) -> Result<StepMetrics> {
        let start = Instant::now();
        let step = self.state.opt.step + 1;
        let tokens = self.sampler.next_batch(corpus, self.cfg.batch_size);
        let mut tape = Tape::new().with_finite_checks(false);
        let vars = self.state.params.on_tape(&mut tape, true);
        let opts = ForwardOptions {
            dropout: Some((self.cfg.seed, step)),
            ..Default::default()
        };
        let loss = self.model.loss(&mut tape, &vars, &tokens, &opts)?;
        let bpb = tape.value(loss).item().f64();
        if !bpb.is_finite() {
            return Err(Error::Diverged {
                step: step as usize,
                loss: bpb,
            });
        }
        let mut grads = tape.backward(loss)?;
        drop(tape);
        let mut g: Vec<Tensor<T>> = vars
            .all()
            .into_iter()
            .zip(self.state.params.named())
            .map(|(v, (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let grad_norm = clip_gradients(&mut g, self.cfg.clip_norm);
        let lr = lr_schedule(step, &self.cfg);
        let mut params = self.state.params.tensors_mut();
        adam_step(&mut params, &g, &mut self.state.opt, lr, &self.cfg).map_err(|e| match e {
            Error::NonFiniteGradient(k) => {
                let idx: usize = k.trim_start_matches('#').parse().unwrap_or(0);
                let name = self.state.params.named().get(idx).map(|(n, _)| n.clone());
                Error::NonFiniteGradient(name.unwrap_or(k))
            }
            e => e,
        })?;
        Ok(StepMetrics {
            step,
            lr,
            bpb,
            grad_norm,
            wall_ms: (!self.cfg.deterministic).then(|| start.elapsed().as_secs_f64() * 1e3),
        })
    }

    /// Writes parameters, optimizer moments and the run header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = CheckpointHeader {
            model: self.model.config().clone(),
            train: self.cfg.clone(),
            state: StepHeader {
                step: self.state.opt.step,
            },
        };
        let text = toml::to_string(&header)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let named = self.state.params.named();
        let mut records: Vec<(String, &Tensor<T>)> = named.clone();
        for (prefix, moments) in [("opt.m", &self.state.opt.m), ("opt.v", &self.state.opt.v)] {
            records.extend(
                named
                    .iter()
                    .zip(moments)
                    .map(|((n, _), t)| (format!("{prefix}.{n}"), t)),
            );
        }
        write_container(path, &text, &records)
    }
}

/// Runs `train_cfg.total_steps` steps, logging one JSON line per step to
/// `metrics` and saving to `checkpoint` periodically and at the end.
pub fn train<T: Scalar>(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    corpus: &[u8],
    metrics: Option<&mut dyn Write>,
    checkpoint: Option<&Path>,
) -> Result<Trainer<T>> {
    let mut trainer = Trainer::new(model_cfg, train_cfg, corpus.len())?;
    trainer.run(corpus, metrics, checkpoint)?;
    Ok(trainer)
}

impl<T: Scalar> Trainer<T> {
    /// Steps until `total_steps`, logging and checkpointing like [`train`].
    pub fn run(
        &mut self,
        corpus: &[u8],
        metrics: Option<&mut dyn Write>,
        checkpoint: Option<&Path>,
    ) -> Result<()> {
        self.run_until(self.cfg.total_steps, corpus, metrics, checkpoint)
    }

    /// Steps until `stop` (capped at `total_steps`), then flushes the log
    /// and saves a checkpoint.
    pub fn run_until(
        &mut self,
        stop: u64,
        corpus: &[u8],
        mut metrics: Option<&mut dyn Write>,
        checkpoint: Option<&Path>,
    ) -> Result<()> {
        let stop = stop.min(self.cfg.total_steps);
        let every = self.cfg.checkpoint_every;
        while self.state.opt.step < stop {
            let m = self.step(corpus)?;
            if let Some(w) = metrics.as_deref_mut() {
                let line = serde_json::to_string(&m).expect("metrics serialize");
                writeln!(w, "{line}")?;
            }
            if let Some(path) = checkpoint {
                if every > 0 && m.step % every == 0 && m.step < stop {
                    self.save(path)?;
                }
            }
        }
        if let Some(w) = metrics {
            w.flush()?;
        }
        if let Some(path) = checkpoint {
            self.save(path)?;
        }
        Ok(())
    }
}
