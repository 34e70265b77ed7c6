//! Dual-trajectory training: the long-route LM loss, a sampled shortcut's LM loss, and a
//! stop-gradient consistency term, optimized with AdamW under warmup plus cosine decay.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{Batch, Corpus};
use crate::error::{Error, Result};
use crate::eval::perplexity;
use crate::io::{save_checkpoint, write_atomic, CheckpointMeta};
use crate::model::{LoopedModel, Variant};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};
use crate::trajectory::{ScheduleGrid, Trajectory};

/// Early-exit recipes for the looped baselines.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EeMode {
    #[default]
    None,
    /// Cross-entropy averaged over the exits of every loop.
    NaiveEe,
    /// As `naive_ee`, plus consistency of every early exit with the final hidden state.
    EeCons,
}

/// What the consistency term compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyTarget {
    /// Mean squared error between final hidden states. The residual stream is unnormalized,
    /// and at desk scale this target drives its norm up without bound within a few hundred
    /// steps.
    Hidden,
    /// Per-token reverse KL from the shortcut's distribution to the long route's.
    #[default]
    Logits,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub ee_mode: EeMode,
    pub consistency: ConsistencyTarget,
    /// Steps between validation passes; 0 validates only before and after training.
    pub eval_interval: usize,
    /// Validation tokens scored per budget (from the start of the split).
    pub eval_tokens: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 0.1,
            peak_lr: 6e-4,
            min_lr: 6e-5,
            warmup_steps: 400,
            total_steps: 5000,
            weight_decay: 0.2,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            batch_size: 4,
            grad_clip: 1.0,
            seed: 0,
            ee_mode: EeMode::None,
            consistency: ConsistencyTarget::Logits,
            eval_interval: 500,
            eval_tokens: 16_384,
            checkpoint_interval: 1000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_lr > 0.0 && self.min_lr <= self.peak_lr) {
            return Err(Error::Config(format!("need 0 < min_lr ({}) <= peak_lr ({})", self.min_lr, self.peak_lr)));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.grad_clip > 0.0) || !(self.weight_decay >= 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("grad_clip and adam_eps must be positive, weight_decay non-negative".into()));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, cosine decay to `min_lr` at `total_steps`, then flat.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    if step >= cfg.total_steps {
        return cfg.min_lr;
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + (PI * progress).cos())
}

/// Loss terms of one step. With the dual-trajectory objective `total = loss_l +
/// λ₁·loss_s + λ₂·loss_cons`. In the early-exit modes `loss_l` is the last exit's loss,
/// `loss_s` the mean over earlier exits, and `total = mean over all exits + λ₂·loss_cons`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub loss_l: f64,
    pub loss_s: f64,
    pub loss_cons: f64,
    pub total: f64,
    pub shortcut: Option<Trajectory>,
}

impl LossBreakdown {
    pub fn shortcut_budget(&self) -> usize {
        self.shortcut.as_ref().map_or(0, |t| t.budget())
    }
}

/// Graph handles of the objective's terms.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveVars {
    pub loss_l: Var,
    pub loss_s: Option<Var>,
    pub loss_cons: Option<Var>,
    pub total: Var,
}

/// Whether a step of this model and config draws a shortcut trajectory.
pub fn uses_shortcut<T: Scalar>(model: &LoopedModel<T>, cfg: &TrainConfig) -> bool {
    model.config().variant == Variant::LoopFormer && cfg.ee_mode == EeMode::None && model.config().max_loops >= 2
}

/// Draws the step's shortcut schedule when the objective needs one.
pub fn sample_shortcut<T: Scalar, R: Rng + ?Sized>(
    model: &LoopedModel<T>,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Option<Trajectory>> {
    if uses_shortcut(model, cfg) {
        ScheduleGrid::new(model.config().max_loops)?.sample_shortcut(rng).map(Some)
    } else {
        Ok(None)
    }
}

/// Builds the training objective on `g`. `shortcut` is the sampled short trajectory of the
/// dual-trajectory objective; without it the objective is plain max-trajectory CE (or the
/// early-exit recipe when `ee_mode` asks for it).
pub fn objective<T: Scalar>(
    model: &LoopedModel<T>,
    g: &mut Graph<T>,
    batch: &Batch,
    cfg: &TrainConfig,
    shortcut: Option<&Trajectory>,
) -> Result<ObjectiveVars> {
    let mcfg = model.config();
    let full = Trajectory::max(mcfg.max_budget())?;
    let h0 = model.embed(g, &batch.inputs)?;

    if cfg.ee_mode != EeMode::None {
        if !mcfg.variant.is_looped() {
            return Err(Error::Config("early-exit training needs a looped variant".into()));
        }
        return early_exit_objective(model, g, h0, &full, batch, cfg);
    }

    let h_l = *model.run_loops(g, h0, &full, false)?.last().unwrap();
    let logits_l = model.lm_head(g, h_l)?;
    let loss_l = g.cross_entropy(logits_l, &batch.targets)?;
    let Some(shortcut) = shortcut else {
        return Ok(ObjectiveVars { loss_l, loss_s: None, loss_cons: None, total: loss_l });
    };

    let h_s = *model.run_loops(g, h0, shortcut, false)?.last().unwrap();
    let logits_s = model.lm_head(g, h_s)?;
    let loss_s = g.cross_entropy(logits_s, &batch.targets)?;
    let loss_cons = match cfg.consistency {
        ConsistencyTarget::Hidden => {
            let target = g.stop_gradient(h_l);
            g.mse(target, h_s)?
        }
        ConsistencyTarget::Logits => {
            let target = g.stop_gradient(logits_l);
            g.reverse_kl(logits_s, target)?
        }
    };
    let ws = g.scale(loss_s, cfg.lambda1);
    let wc = g.scale(loss_cons, cfg.lambda2);
    let total = g.add(loss_l, ws)?;
    let total = g.add(total, wc)?;
    Ok(ObjectiveVars { loss_l, loss_s: Some(loss_s), loss_cons: Some(loss_cons), total })
}

fn early_exit_objective<T: Scalar>(
    model: &LoopedModel<T>,
    g: &mut Graph<T>,
    h0: Var,
    full: &Trajectory,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<ObjectiveVars> {
    let hiddens = model.run_loops(g, h0, full, true)?;
    let exits = &hiddens[1..];
    let l = exits.len();
    let mut losses = Vec::with_capacity(l);
    for &h in exits {
        let logits = model.lm_head(g, h)?;
        losses.push(g.cross_entropy(logits, &batch.targets)?);
    }
    let loss_l = losses[l - 1];
    let mut ce_sum = losses[0];
    for &x in &losses[1..] {
        ce_sum = g.add(ce_sum, x)?;
    }
    let mut total = g.scale(ce_sum, 1.0 / l as f64);
    let loss_s = if l > 1 {
        let early = g.sub(ce_sum, loss_l)?;
        Some(g.scale(early, 1.0 / (l - 1) as f64))
    } else {
        None
    };

    let mut loss_cons = None;
    if cfg.ee_mode == EeMode::EeCons && l > 1 {
        let target = g.stop_gradient(exits[l - 1]);
        let mut sum = g.mse(target, exits[0])?;
        for &h in &exits[1..l - 1] {
            let term = g.mse(target, h)?;
            sum = g.add(sum, term)?;
        }
        let cons = g.scale(sum, 1.0 / (l - 1) as f64);
        let wc = g.scale(cons, cfg.lambda2);
        total = g.add(total, wc)?;
        loss_cons = Some(cons);
    }
    Ok(ObjectiveVars { loss_l, loss_s, loss_cons, total })
}

fn scalar_of<T: Scalar>(g: &Graph<T>, v: Option<Var>) -> Result<f64> {
    v.map_or(Ok(0.0), |v| Ok(g.value(v).item()?.as_f64()))
}

/// Value of every term, for logging.
pub fn breakdown<T: Scalar>(g: &Graph<T>, vars: &ObjectiveVars, shortcut: Option<&Trajectory>) -> Result<LossBreakdown> {
    Ok(LossBreakdown {
        loss_l: scalar_of(g, Some(vars.loss_l))?,
        loss_s: scalar_of(g, vars.loss_s)?,
        loss_cons: scalar_of(g, vars.loss_cons)?,
        total: scalar_of(g, Some(vars.total))?,
        shortcut: shortcut.cloned(),
    })
}

/// AdamW moments and step count, one buffer pair per parameter in store order.
#[derive(Clone, Debug)]
pub struct AdamW<T: Scalar = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update with the gradients currently in `store`. Refuses non-finite gradients
    /// before touching any parameter.
    pub fn update(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} buffers for {} parameters",
                self.m.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter() {
            if !p.grad.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {} is not finite", p.name)));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.decays() { lr * self.weight_decay } else { 0.0 };
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            for (((x, &g), m), v) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g.as_f64();
                let mi = self.beta1 * m.as_f64() + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v.as_f64() + (1.0 - self.beta2) * g * g;
                *m = T::of(mi);
                *v = T::of(vi);
                let mut xi = x.as_f64();
                xi -= decay * xi;
                xi -= lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
                *x = T::of(xi);
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    let norm = store.grad_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        store.scale_grads(T::of(max_norm / norm));
    }
    Ok(norm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossBreakdown,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Forward, backward, clip, and one AdamW update at the schedule's rate for `step`.
pub fn training_step<T: Scalar, R: Rng + ?Sized>(
    model: &mut LoopedModel<T>,
    opt: &mut AdamW<T>,
    batch: &Batch,
    cfg: &TrainConfig,
    step: usize,
    rng: &mut R,
) -> Result<StepReport> {
    let shortcut = sample_shortcut(model, cfg, rng)?;
    let mut g = Graph::new();
    let vars = objective(model, &mut g, batch, cfg, shortcut.as_ref())?;
    let losses = breakdown(&g, &vars, shortcut.as_ref())?;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite(format!("loss is {} at step {step}", losses.total)));
    }
    model.params.zero_grads();
    g.backward_into(vars.total, &mut model.params)?;
    drop(g);
    let grad_norm = clip_grad_norm(&mut model.params, cfg.grad_clip)?;
    let lr = lr_schedule(step, cfg);
    opt.update(&mut model.params, lr)?;
    Ok(StepReport { losses, lr, grad_norm })
}

/// One metrics-log row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_l: f64,
    pub loss_s: f64,
    pub loss_cons: f64,
    pub total: f64,
    #[serde(rename = "S")]
    pub shortcut_budget: usize,
    pub schedule: String,
}

impl StepRecord {
    fn new(step: usize, r: &StepReport) -> Self {
        Self {
            step,
            lr: r.lr,
            loss_l: r.losses.loss_l,
            loss_s: r.losses.loss_s,
            loss_cons: r.losses.loss_cons,
            total: r.losses.total,
            shortcut_budget: r.losses.shortcut_budget(),
            schedule: r.losses.shortcut.as_ref().map(|t| t.to_string()).unwrap_or_default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: usize,
    pub budget: usize,
    pub ppl: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub validation: Vec<ValidationRecord>,
}

impl TrainReport {
    /// Validation perplexity at `budget` from the latest pass.
    pub fn final_ppl(&self, budget: usize) -> Option<f64> {
        self.validation.iter().rev().find(|r| r.budget == budget).map(|r| r.ppl)
    }

    pub fn write_csvs(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("metrics.csv"), &to_csv(&self.steps)?)?;
        write_atomic(&dir.join("validation.csv"), &to_csv(&self.validation)?)
    }
}

fn to_csv<S: Serialize>(rows: &[S]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Budgets validated during training: 1, L/2, and L.
pub fn validation_budgets(max_budget: usize) -> Vec<usize> {
    let mut b = vec![1, (max_budget / 2).max(1), max_budget];
    b.dedup();
    b
}

/// Uniform-schedule validation perplexities at [`validation_budgets`].
pub fn validate<T: Scalar>(model: &LoopedModel<T>, corpus: &Corpus, cfg: &TrainConfig, step: usize) -> Result<Vec<ValidationRecord>> {
    let tokens = &corpus.val[..corpus.val.len().min(cfg.eval_tokens.max(2))];
    let context = model.config().context_length;
    let stride = (context / 2).max(1);
    validation_budgets(model.config().max_budget())
        .into_iter()
        .map(|budget| {
            let ppl = perplexity(model, tokens, &Trajectory::uniform(budget)?, stride, cfg.batch_size)?;
            Ok(ValidationRecord { step, budget, ppl })
        })
        .collect()
}

/// Where and how a training run persists its outputs.
#[derive(Clone, Debug, Default)]
pub struct RunOutputs {
    pub dir: Option<PathBuf>,
    /// Metadata stored alongside parameters in each checkpoint.
    pub meta: CheckpointMeta,
}

impl RunOutputs {
    fn checkpoint(&self, model: &LoopedModel, opt: &AdamW, cfg: &TrainConfig, step: usize, name: &str) -> Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join("checkpoints").join(name);
            save_checkpoint(&path, model, Some(cfg), Some(opt), step as u64, &self.meta)?;
        }
        Ok(())
    }
}

/// Runs `total_steps` steps from a fresh optimizer. Validation at budgets {1, L/2, L}
/// happens before the first step, every `eval_interval` steps, and after the last.
pub fn train(model: &mut LoopedModel, corpus: &Corpus, cfg: &TrainConfig, outputs: &RunOutputs) -> Result<TrainReport> {
    cfg.validate()?;
    let mut opt = AdamW::new(&model.params, cfg);
    let seq_len = model.config().context_length;
    if corpus.train.len() <= seq_len {
        return Err(Error::Corpus(format!(
            "training split of {} tokens is shorter than one window of {}",
            corpus.train.len(),
            seq_len + 1
        )));
    }
    if let Some(dir) = &outputs.dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut shortcut_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut report = TrainReport::default();
    report.validation.extend(validate(model, corpus, cfg, 0)?);

    for step in 0..cfg.total_steps {
        let batch = Batch::sample(&corpus.train, cfg.batch_size, seq_len, &mut data_rng)?;
        let r = match training_step(model, &mut opt, &batch, cfg, step, &mut shortcut_rng) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                log::error!("halting at step {step}: {e}");
                outputs.checkpoint(model, &opt, cfg, step, "emergency.lpfm")?;
                if let Some(dir) = &outputs.dir {
                    report.write_csvs(dir)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if step % 100 == 0 {
            log::info!(
                "step {step} lr {:.2e} total {:.4} L {:.4} S {:.4} cons {:.5} |g| {:.3}",
                r.lr,
                r.losses.total,
                r.losses.loss_l,
                r.losses.loss_s,
                r.losses.loss_cons,
                r.grad_norm
            );
        }
        report.steps.push(StepRecord::new(step, &r));
        let done = step + 1;
        if cfg.eval_interval > 0 && done % cfg.eval_interval == 0 && done < cfg.total_steps {
            let v = validate(model, corpus, cfg, done)?;
            for rec in &v {
                log::info!("step {done} validation ppl at budget {}: {:.3}", rec.budget, rec.ppl);
            }
            report.validation.extend(v);
        }
        if cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && done < cfg.total_steps {
            outputs.checkpoint(model, &opt, cfg, done, &format!("step_{done:06}.lpfm"))?;
        }
    }

    report.validation.extend(validate(model, corpus, cfg, cfg.total_steps)?);
    outputs.checkpoint(model, &opt, cfg, cfg.total_steps, "final.lpfm")?;
    if let Some(dir) = &outputs.dir {
        report.write_csvs(dir)?;
    }
    Ok(report)
}
