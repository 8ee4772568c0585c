use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sparse_transformer::model::{Model, PositionMode};
use sparse_transformer::patterns::{
    compile_block_layout, pattern_stats, render_layout, render_pattern, verify_validity,
    HeadSelect, PatternSpec, DEFAULT_BLOCK,
};
use sparse_transformer::training::{
    evaluate_min_context, load_checkpoint, sample, SampleOptions, Trainer,
};

use crate::bench::{run_bench, BenchOptions};
use crate::config::RunConfig;
use crate::corpus::{load_corpus, periodic_corpus};
use crate::mulaw;

/// Factorized sparse attention toolkit.
#[derive(Debug, Parser)]
#[command(name = "sptx", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check that every position can reach every later one in p steps.
    Verify {
        #[arg(long)]
        pattern: PatternSpec,
        #[arg(long, default_value_t = 2)]
        p: usize,
    },
    /// Write the connectivity matrix as a PGM image.
    Viz {
        #[arg(long)]
        pattern: PatternSpec,
        /// Head index, or `merged` for the union of heads.
        #[arg(long, default_value = "merged")]
        head: String,
        /// Draw the compiled block layout instead of the pattern.
        #[arg(long)]
        layout: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attended-pair counts of a pattern.
    Stats {
        #[arg(long)]
        pattern: PatternSpec,
    },
    /// Time dense and sparse attention forward passes.
    Bench {
        #[arg(long)]
        pattern: PatternSpec,
        #[arg(long, default_value_t = 256)]
        d: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Memory cap for the dense logits, in MiB.
        #[arg(long, default_value_t = 2048)]
        dense_limit_mb: usize,
        /// Also write every sample as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a byte corpus.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: PathBuf,
        /// Run directory for the config echo, metrics and checkpoint.
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps in total, saving a resumable checkpoint.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Bits per byte of a corpus under a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Minimum context lengths, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        min_context: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate bytes from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        length: usize,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// File whose bytes condition the sample.
        #[arg(long)]
        prompt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a periodic synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 1 << 20)]
        len: usize,
        #[arg(long, default_value_t = 64)]
        period: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert between 16-bit little-endian PCM and 8-bit mu-law bytes.
    Mulaw {
        #[arg(value_enum)]
        direction: Direction,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Direction {
    Encode,
    Decode,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run config; the bundled small config when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.peak_lr=1e-3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("train.seed={s}"));
        }
        if self.deterministic {
            overrides.push("train.deterministic=true".into());
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn json_line(out: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

#[derive(Serialize)]
struct Stats {
    pattern: String,
    n: usize,
    total_pairs: u64,
    max_row_size: usize,
    dense_pairs: u64,
    dense_ratio: f64,
    pairs_per_n_sqrt_n: f64,
}

/// Runs one command, writing its report to `out`; returns the exit code.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<u8> {
    match cli.command {
        Command::Verify { pattern, p } => {
            let pat = pattern.build()?;
            let report = verify_validity(&pat, p);
            json_line(out, &report)?;
            Ok(if report.valid { 0 } else { 1 })
        }
        Command::Viz {
            pattern,
            head,
            layout,
            out: path,
        } => {
            let pat = pattern.build()?;
            let select = match head.as_str() {
                "merged" => HeadSelect::Merged,
                h => {
                    let m: usize = h.parse().with_context(|| format!("head '{h}'"))?;
                    if m >= pat.p() {
                        bail!("head {m} out of range for {} heads", pat.p());
                    }
                    HeadSelect::Head(m)
                }
            };
            if layout {
                render_layout(&compile_block_layout(&pat, select, DEFAULT_BLOCK), &path)?;
            } else {
                render_pattern(&pat, select, &path)?;
            }
            writeln!(out, "wrote {}", path.display())?;
            Ok(0)
        }
        Command::Stats { pattern } => {
            let pat = pattern.build()?;
            let s = pattern_stats(&pat);
            let n = pat.n() as u64;
            let dense = n * (n + 1) / 2;
            json_line(
                out,
                &Stats {
                    pattern: pattern.to_string(),
                    n: pat.n(),
                    total_pairs: s.total_pairs,
                    max_row_size: s.max_row_size,
                    dense_pairs: dense,
                    dense_ratio: dense as f64 / s.total_pairs as f64,
                    pairs_per_n_sqrt_n: s.total_pairs as f64 / (n as f64 * (n as f64).sqrt()),
                },
            )?;
            Ok(0)
        }
        Command::Bench {
            pattern,
            d,
            heads,
            repeats,
            seed,
            dense_limit_mb,
            out: samples_path,
        } => {
            let pat = pattern.build()?;
            let opts = BenchOptions {
                d,
                n_heads: heads,
                repeats,
                seed,
                dense_limit: dense_limit_mb << 20,
                ..Default::default()
            };
            let report = run_bench(&pat, &opts)?;
            if let Some(p) = samples_path {
                let mut w = BufWriter::new(File::create(&p)?);
                for s in &report.samples {
                    json_line(&mut w, s)?;
                }
                w.flush()?;
            }
            for r in &report.rows {
                json_line(out, r)?;
            }
            Ok(0)
        }
        Command::Train {
            config,
            corpus,
            out: dir,
            resume,
            stop_at,
        } => {
            train_command(&config, &corpus, &dir, resume, stop_at, out)?;
            Ok(0)
        }
        Command::Eval {
            checkpoint,
            corpus,
            min_context,
            out: report_path,
        } => {
            let ckpt = load_checkpoint::<f32>(&checkpoint)?;
            let model = Model::new(ckpt.header.model)?;
            let data = load_corpus(&corpus)?.bytes;
            let mut file = report_path.map(File::create).transpose()?;
            for m in min_context {
                let r = evaluate_min_context(&model, &ckpt.params, &data, m)?;
                json_line(out, &r)?;
                if let Some(f) = file.as_mut() {
                    json_line(f, &r)?;
                }
            }
            Ok(0)
        }
        Command::Sample {
            checkpoint,
            length,
            temperature,
            seed,
            prompt,
            out: path,
        } => {
            let ckpt = load_checkpoint::<f32>(&checkpoint)?;
            let model = Model::new(ckpt.header.model)?;
            let prompt = match prompt {
                Some(p) => fs::read(&p).with_context(|| format!("reading {}", p.display()))?,
                None => Vec::new(),
            };
            let opts = SampleOptions {
                length,
                temperature,
                seed,
                prompt,
            };
            let bytes = sample(&model, &ckpt.params, &opts)?;
            fs::write(&path, &bytes)?;
            writeln!(out, "wrote {} bytes to {}", bytes.len(), path.display())?;
            Ok(0)
        }
        Command::Synth {
            len,
            period,
            seed,
            out: path,
        } => {
            fs::write(&path, periodic_corpus(len, period, seed)?)?;
            writeln!(out, "wrote {len} bytes to {}", path.display())?;
            Ok(0)
        }
        Command::Mulaw {
            direction,
            input,
            out: path,
        } => {
            let data = fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let converted = match direction {
                Direction::Encode => mulaw::encode_pcm(&data),
                Direction::Decode => mulaw::decode_pcm(&data),
            };
            fs::write(&path, &converted)?;
            writeln!(out, "wrote {} bytes to {}", converted.len(), path.display())?;
            Ok(0)
        }
    }
}

/// Paths inside a run directory.
pub fn run_files(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join("config.toml"),
        dir.join("metrics.ndjson"),
        dir.join("model.ckpt"),
    )
}

fn train_command(
    args: &ConfigArgs,
    corpus: &Path,
    dir: &Path,
    resume: bool,
    stop_at: Option<u64>,
    out: &mut dyn Write,
) -> Result<()> {
    let data = load_corpus(corpus)?;
    fs::create_dir_all(dir)?;
    let (config_path, metrics_path, ckpt_path) = run_files(dir);
    let mut trainer = if resume {
        Trainer::<f32>::resume(&ckpt_path, data.bytes.len())
            .with_context(|| format!("resuming from {}", ckpt_path.display()))?
    } else {
        let mut cfg = args.resolve()?;
        if let Some(meta) = data.meta {
            if cfg.model.positional.mode == PositionMode::Data
                && cfg.model.positional.dims.is_empty()
            {
                cfg.model.positional.dims = meta.dims();
            }
        }
        fs::write(&config_path, cfg.to_toml())?;
        Trainer::<f32>::new(cfg.model, cfg.train, data.bytes.len())?
    };
    let metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume)
        .truncate(!resume)
        .open(&metrics_path)?;
    let mut metrics = BufWriter::new(metrics);
    let stop = stop_at.unwrap_or(u64::MAX);
    trainer.run_until(stop, &data.bytes, Some(&mut metrics), Some(&ckpt_path))?;
    writeln!(
        out,
        "trained to step {}; checkpoint {}",
        trainer.step_count(),
        ckpt_path.display()
    )?;
    Ok(())
}
