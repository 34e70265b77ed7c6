//! Elastic-depth inference: scoring, schedule sweeps, sampling, and compute accounting.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::diagnostics::{self, DiagnosticsReport};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::{LoopedModel, ModelConfig, TokenBatch, Variant};
use crate::tensor::{Scalar, Tensor};
use crate::trajectory::{ScheduleGrid, Trajectory};

/// Logits `[B, T, V]` after running `trajectory`'s loops.
pub fn elastic_forward<T: Scalar>(model: &LoopedModel<T>, tokens: &TokenBatch, trajectory: &Trajectory) -> Result<Tensor<T>> {
    model.logits(tokens, trajectory)
}

/// One window of a sliding-window evaluation: inputs `tokens[start..start+len]`, of which
/// only targets at window positions `first_scored..len` count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Window {
    start: usize,
    len: usize,
    first_scored: usize,
}

fn sliding_windows(n_tokens: usize, context: usize, stride: usize) -> Vec<Window> {
    let last_target = n_tokens - 1;
    let mut windows = Vec::new();
    let mut scored_through = 0; // highest target index scored so far
    let mut start = 0;
    loop {
        let end = (start + context).min(last_target); // last target index in this window
        let len = end - start;
        let first_target = scored_through.max(start) + 1;
        windows.push(Window { start, len, first_scored: first_target - start - 1 });
        scored_through = end;
        if end == last_target {
            break;
        }
        start += stride;
    }
    windows
}

/// `exp(mean NLL)` over windows of the context length advancing by `stride`. Every target
/// token is scored once, with as much left context as its window provides.
pub fn perplexity<T: Scalar>(
    model: &LoopedModel<T>,
    tokens: &[usize],
    trajectory: &Trajectory,
    stride: usize,
    batch_size: usize,
) -> Result<f64> {
    let (nll, count) = total_nll(model, tokens, trajectory, stride, batch_size)?;
    Ok((nll / count as f64).exp())
}

/// Summed NLL and number of scored targets.
pub fn total_nll<T: Scalar>(
    model: &LoopedModel<T>,
    tokens: &[usize],
    trajectory: &Trajectory,
    stride: usize,
    batch_size: usize,
) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Err(Error::Corpus(format!("need at least 2 tokens to score, got {}", tokens.len())));
    }
    let context = model.config().context_length;
    if stride == 0 || stride > context {
        return Err(Error::Config(format!("stride {stride} must lie in 1..={context}")));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    model.check_budget(trajectory)?;
    let windows = sliding_windows(tokens.len(), context, stride);

    let mut nll = 0.0;
    let mut count = 0;
    // Consecutive windows of equal length share a batch.
    let mut i = 0;
    while i < windows.len() {
        let len = windows[i].len;
        let mut j = i;
        while j < windows.len() && j - i < batch_size && windows[j].len == len {
            j += 1;
        }
        let group = &windows[i..j];
        let ids: Vec<usize> = group.iter().flat_map(|w| tokens[w.start..w.start + len].iter().copied()).collect();
        let logits = model.logits(&TokenBatch::new(ids, group.len(), len)?, trajectory)?;
        let vocab = logits.last_dim();
        let data = logits.data();
        for (b, w) in group.iter().enumerate() {
            for pos in w.first_scored..len {
                let row = &data[(b * len + pos) * vocab..(b * len + pos + 1) * vocab];
                nll += row_nll(row, tokens[w.start + pos + 1])?;
                count += 1;
            }
        }
        i = j;
    }
    Ok((nll, count))
}

fn row_nll<T: Scalar>(row: &[T], target: usize) -> Result<f64> {
    let picked = row
        .get(target)
        .ok_or_else(|| Error::Index(format!("target {target} outside vocabulary of {}", row.len())))?
        .as_f64();
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln();
    Ok(lse - picked)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRecord {
    pub schedule: String,
    pub ppl: f64,
    pub anisotropy: f64,
    pub curvature: f64,
    pub entropy: f64,
    pub cka_offdiag: f64,
    #[serde(skip)]
    pub trajectory: Trajectory,
}

/// Every grid schedule of one budget, sorted by perplexity.
#[derive(Clone, Debug)]
pub struct SweepResult {
    pub budget: usize,
    pub records: Vec<SweepRecord>,
}

impl SweepResult {
    pub fn best(&self) -> &SweepRecord {
        &self.records[0]
    }

    pub fn worst(&self) -> &SweepRecord {
        self.records.last().unwrap()
    }

    pub fn spread(&self) -> f64 {
        self.worst().ppl - self.best().ppl
    }

    /// The record of the equal-step schedule.
    pub fn uniform(&self) -> &SweepRecord {
        self.records.iter().find(|r| r.trajectory.is_uniform()).expect("grid enumeration contains the uniform schedule")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        write_atomic(path, &w.into_inner().map_err(|e| Error::Io(e.into_error()))?)
    }
}

pub struct SweepOptions<'a> {
    pub stride: usize,
    pub batch_size: usize,
    /// Prompts whose hidden states feed the diagnostic columns; may be empty.
    pub prompts: &'a [Vec<usize>],
    pub last_tokens: usize,
}

/// Evaluates every composition of `L` grid units into `budget` steps on the same tokens.
pub fn trajectory_sweep<T: Scalar>(
    model: &LoopedModel<T>,
    tokens: &[usize],
    budget: usize,
    opts: &SweepOptions<'_>,
) -> Result<SweepResult> {
    let grid = ScheduleGrid::new(model.config().max_loops)?;
    let schedules = grid.enumerate(budget)?;
    let mut records = Vec::with_capacity(schedules.len());
    for trajectory in schedules {
        let ppl = perplexity(model, tokens, &trajectory, opts.stride, opts.batch_size)?;
        let (anisotropy, curvature, entropy, cka_offdiag) = if opts.prompts.is_empty() {
            (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
        } else {
            let snaps = diagnostics::collect_snapshots(model, opts.prompts, &trajectory, opts.last_tokens)?;
            let rep = DiagnosticsReport::from_snapshots(&snaps)?;
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            (mean(&rep.anisotropy), mean(&rep.curvature), mean(&rep.entropy), rep.mean_offdiag_cka())
        };
        records.push(SweepRecord {
            schedule: trajectory.to_string(),
            ppl,
            anisotropy,
            curvature,
            entropy,
            cka_offdiag,
            trajectory,
        });
    }
    records.sort_by(|a, b| a.ppl.total_cmp(&b.ppl));
    Ok(SweepResult { budget, records })
}

/// Autoregressive sampling without a KV cache. Temperature 0 picks the argmax.
pub fn generate<T: Scalar, R: Rng + ?Sized>(
    model: &LoopedModel<T>,
    prompt: &[usize],
    trajectory: &Trajectory,
    max_new: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Contract("prompt is empty".into()));
    }
    if !(temperature >= 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be non-negative")));
    }
    model.check_budget(trajectory)?;
    let context = model.config().context_length;
    if prompt.len() > context {
        log::warn!("prompt of {} tokens truncated to the last {context}", prompt.len());
    }
    let mut out = prompt.to_vec();
    for _ in 0..max_new {
        let window = &out[out.len().saturating_sub(context)..];
        let logits = model.logits(&TokenBatch::single(window.to_vec())?, trajectory)?;
        let v = logits.last_dim();
        let last: Vec<f64> = logits.data()[logits.numel() - v..].iter().map(|x| x.as_f64()).collect();
        let next = if temperature == 0.0 {
            // First maximal index, so ties resolve deterministically.
            last.iter().enumerate().fold(0, |best, (i, &x)| if x > last[best] { i } else { best })
        } else {
            let max = last.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = last.iter().map(|&x| ((x - max) / temperature).exp()).collect();
            WeightedIndex::new(&weights)
                .map_err(|e| Error::NonFinite(format!("sampling weights: {e}")))?
                .sample(rng)
        };
        out.push(next);
    }
    Ok(out)
}

/// Affine compute model `C(ℓ) = C_io + ℓ·C_1` for one batch of `batch × seq_len` tokens.
/// Counts `2·m·n·p` per matmul, attention scores and value mixing included.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlopsModel {
    pub c_io: f64,
    pub c_1: f64,
}

impl FlopsModel {
    pub fn new(config: &ModelConfig, batch: usize, seq_len: usize) -> Self {
        let n = (batch * seq_len) as f64;
        let d = config.d_model as f64;
        let d_ff = config.d_ff as f64;
        let t = seq_len as f64;
        let per_block_tokens = 2.0 * n * (3.0 * d * d + d * d + 2.0 * d * d_ff);
        let attention = 4.0 * batch as f64 * t * t * d;
        // Conditioning is computed once per loop for the whole batch.
        let fourier = config.fourier_width as f64;
        let (embedders, heads) = match config.variant {
            Variant::LoopFormer => (2.0, 1.0),
            Variant::Tmlt => (1.0, 1.0),
            _ => (0.0, 0.0),
        };
        let conditioning = embedders * 2.0 * (fourier * d + d * d);
        let modulation = heads * 2.0 * d * 4.0 * d;
        let k = config.blocks_per_loop as f64;
        Self {
            c_io: 2.0 * n * d * config.vocab_size as f64,
            c_1: conditioning + k * (per_block_tokens + attention + modulation),
        }
    }

    /// Cost of `loops` passes through the shared stack plus embedding and unembedding.
    pub fn flops(&self, loops: usize) -> f64 {
        self.c_io + loops as f64 * self.c_1
    }

    pub fn training_overhead(&self, max_loops: usize) -> f64 {
        training_overhead(max_loops, self.c_io, self.c_1)
    }
}

/// Expected dual-trajectory training cost relative to a single `L`-loop pass:
/// `(2·C_io + 1.5·L·C_1) / (C_io + L·C_1)`, using `E[S] = L/2`.
pub fn training_overhead(max_loops: usize, c_io: f64, c_1: f64) -> f64 {
    // Same ratio written as 1.5 + 0.5·C_io/(C_io + L·C_1), exact when C_io = 0.
    let l = max_loops as f64;
    1.5 + 0.5 * c_io / (c_io + l * c_1)
}

/// Matmul FLOPs recorded by one value-only forward pass.
pub fn measured_forward_flops<T: Scalar>(model: &LoopedModel<T>, tokens: &TokenBatch, trajectory: &Trajectory) -> Result<u64> {
    let mut g = Graph::inference();
    model.forward(&mut g, tokens, trajectory, false)?;
    Ok(g.flops())
}
