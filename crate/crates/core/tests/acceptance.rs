//! End-to-end acceptance criteria. Each test prints one `PASS`/`FAIL` line to stderr
//! (uncaptured) before asserting.
//!
//! The three desk-scale criteria share two 5000-step training runs. Their final checkpoints
//! are cached under the cargo target directory and reused while the configuration matches.

mod common;

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;

use looped_lm::diagnostics::{self, anisotropy, cka, curvature, prompt_entropy, DiagnosticsReport, Matrix};
use looped_lm::eval::{perplexity, trajectory_sweep, training_overhead, FlopsModel, SweepOptions};
use looped_lm::io::{load_checkpoint, CheckpointMeta};
use looped_lm::trajectory::binomial;
use looped_lm::training::{objective, train, training_step, AdamW, ConsistencyTarget, RunOutputs};
use looped_lm::{
    Batch, EeMode, Graph, LoopedModel, ModelConfig, RunConfig, ScheduleGrid, Tensor, TokenBatch,
    TrainConfig, Trajectory, Variant,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use common::{finite_difference_check, random_batch, randomize_biases, randomize_modulation, tiny_config};

fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("criterion {n:>2} {} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{}", line.trim_end());
}

fn grads_of(model: &LoopedModel<f64>) -> Vec<Tensor<f64>> {
    model.params.iter().map(|(_, p)| p.grad.clone()).collect()
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = std::time::Instant::now();
    let mut model = LoopedModel::<f64>::init_with(tiny_config(Variant::LoopFormer), 11).unwrap();
    randomize_modulation(&mut model, 0.3, 12);
    randomize_biases(&mut model, 0.05, 13);
    let batch = random_batch(17, 2, 8, 14);
    let cfg = TrainConfig { consistency: ConsistencyTarget::Hidden, ..TrainConfig::default() };
    let shortcut = ScheduleGrid::new(3).unwrap().from_units(&[2, 1]).unwrap();

    let mut g = Graph::new();
    let vars = objective(&model, &mut g, &batch, &cfg, Some(&shortcut)).unwrap();
    model.params.zero_grads();
    g.backward_into(vars.total, &mut model.params).unwrap();
    let analytic = grads_of(&model);

    // The consistency target is a stop-gradient, so the probe holds it at its value under
    // the unperturbed parameters and rebuilds the objective from model pieces around it.
    let full = Trajectory::max(3).unwrap();
    let endpoint = |m: &LoopedModel<f64>, g: &mut Graph<f64>, traj: &Trajectory| {
        let h0 = m.embed(g, &batch.inputs).unwrap();
        *m.run_loops(g, h0, traj, false).unwrap().last().unwrap()
    };
    let frozen_target = {
        let mut g = Graph::inference();
        let h = endpoint(&model, &mut g, &full);
        g.value(h).clone()
    };
    let loss = |m: &LoopedModel<f64>| {
        let mut g = Graph::inference();
        let h_l = endpoint(m, &mut g, &full);
        let h_s = endpoint(m, &mut g, &shortcut);
        let logits_l = m.lm_head(&mut g, h_l).unwrap();
        let logits_s = m.lm_head(&mut g, h_s).unwrap();
        let ce_l = g.cross_entropy(logits_l, &batch.targets).unwrap();
        let ce_s = g.cross_entropy(logits_s, &batch.targets).unwrap();
        let target = g.constant(frozen_target.clone());
        let cons = g.mse(target, h_s).unwrap();
        let value = |v| g.value(v).item().unwrap();
        value(ce_l) + cfg.lambda1 * value(ce_s) + cfg.lambda2 * value(cons)
    };
    let composed_gap = (loss(&model) - g.value(vars.total).item().unwrap()).abs();
    let (checked, failures) = finite_difference_check(&mut model, &loss, &analytic, 1e-3, 1e-3, 1e-6);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "{checked} parameter elements, {} outside rel 1e-3 / abs 1e-6, objective vs recomposed {composed_gap:.1e}, {secs:.1}s{}",
        failures.len(),
        failures.first().map(|f| format!("; first: {f}")).unwrap_or_default()
    );
    verdict(1, "gradient correctness", failures.is_empty() && composed_gap <= 1e-12 && secs < 120.0, &detail);
}

fn random_schedule(max_loops: usize, rng: &mut ChaCha8Rng) -> Trajectory {
    let m = rng.random_range(1..=max_loops);
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    Trajectory::validate(&raw.iter().map(|x| x / sum).collect::<Vec<_>>()).unwrap()
}

#[test]
fn criterion_02_identity_at_init() {
    let mut worst: f64 = 0.0;
    let mut runs = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for variant in [Variant::LoopFormer, Variant::Tmlt] {
        let cfg = ModelConfig { variant, ..ModelConfig::desk() };
        let model = LoopedModel::init(cfg.clone(), 3).unwrap();
        let ids: Vec<usize> = (0..64).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
        let tokens = TokenBatch::new(ids, 2, 32).unwrap();
        let mut g = Graph::inference();
        let h0 = model.embed(&mut g, &tokens).unwrap();
        let backbone = model.lm_head(&mut g, h0).unwrap();
        let reference = g.value(backbone).clone();
        let mut schedules: Vec<Trajectory> = (1..=cfg.max_loops).map(|m| Trajectory::uniform(m).unwrap()).collect();
        schedules.extend((0..20).map(|_| random_schedule(cfg.max_loops, &mut rng)));
        for s in &schedules {
            worst = worst.max(model.logits(&tokens, s).unwrap().max_abs_diff(&reference));
            runs += 1;
        }
    }
    verdict(2, "identity at initialization", worst <= 1e-6, &format!("{runs} schedules, max |Δlogit| = {worst:.3e}"));
}

/// Gradient of `λ₂·L_cons` through the full objective graph, and the same quantity with the
/// max-trajectory endpoint computed in a separate graph and fed back as a constant.
fn isolation_gap(consistency: ConsistencyTarget) -> (f64, f64) {
    let mut model = LoopedModel::<f64>::init_with(tiny_config(Variant::LoopFormer), 31).unwrap();
    randomize_modulation(&mut model, 0.3, 32);
    randomize_biases(&mut model, 0.05, 33);
    let batch = random_batch(17, 2, 8, 34);
    let cfg = TrainConfig { consistency, ..TrainConfig::default() };
    let shortcut = ScheduleGrid::new(3).unwrap().from_units(&[1, 2]).unwrap();
    let full = Trajectory::max(3).unwrap();

    let mut g = Graph::new();
    let vars = objective(&model, &mut g, &batch, &cfg, Some(&shortcut)).unwrap();
    let weighted = g.scale(vars.loss_cons.unwrap(), cfg.lambda2);
    model.params.zero_grads();
    g.backward_into(weighted, &mut model.params).unwrap();
    let through_objective = grads_of(&model);

    let endpoint = |m: &LoopedModel<f64>, g: &mut Graph<f64>, traj: &Trajectory| {
        let h0 = m.embed(g, &batch.inputs).unwrap();
        let h = *m.run_loops(g, h0, traj, false).unwrap().last().unwrap();
        match consistency {
            ConsistencyTarget::Hidden => h,
            ConsistencyTarget::Logits => m.lm_head(g, h).unwrap(),
        }
    };
    let frozen = {
        let mut g = Graph::inference();
        let v = endpoint(&model, &mut g, &full);
        g.value(v).clone()
    };
    let consistency_loss = |g: &mut Graph<f64>, target, student| match consistency {
        ConsistencyTarget::Hidden => g.mse(target, student).unwrap(),
        ConsistencyTarget::Logits => g.reverse_kl(student, target).unwrap(),
    };

    let mut g = Graph::new();
    let target = g.constant(frozen);
    let student = endpoint(&model, &mut g, &shortcut);
    let loss = consistency_loss(&mut g, target, student);
    let weighted = g.scale(loss, cfg.lambda2);
    model.params.zero_grads();
    g.backward_into(weighted, &mut model.params).unwrap();
    let with_frozen = grads_of(&model);

    // Sensitivity: letting gradient flow into the long route must change the result.
    let mut g = Graph::new();
    let target = endpoint(&model, &mut g, &full);
    let student = endpoint(&model, &mut g, &shortcut);
    let loss = consistency_loss(&mut g, target, student);
    let weighted = g.scale(loss, cfg.lambda2);
    model.params.zero_grads();
    g.backward_into(weighted, &mut model.params).unwrap();
    let unstopped = grads_of(&model);

    let max_diff = |a: &[Tensor<f64>], b: &[Tensor<f64>]| a.iter().zip(b).map(|(x, y)| x.max_abs_diff(y)).fold(0.0, f64::max);
    (max_diff(&through_objective, &with_frozen), max_diff(&through_objective, &unstopped))
}

#[test]
fn criterion_03_stop_gradient_isolation() {
    let (hidden, hidden_leak) = isolation_gap(ConsistencyTarget::Hidden);
    let (logits, logits_leak) = isolation_gap(ConsistencyTarget::Logits);
    let ok = hidden <= 1e-6 && logits <= 1e-6 && hidden_leak > 1e-6 && logits_leak > 1e-6;
    verdict(
        3,
        "stop-gradient isolation",
        ok,
        &format!(
            "max |Δgrad| hidden {hidden:.2e}, logits {logits:.2e} (without the stop: {hidden_leak:.2e}, {logits_leak:.2e})"
        ),
    );
}

fn count_compositions(total: usize, parts: usize) -> u64 {
    if parts == 1 {
        return u64::from(total >= 1);
    }
    (1..total).map(|first| count_compositions(total - first, parts - 1)).sum()
}

/// Chi-square p-value of `sample_shortcut` draws against the target law: `S` uniform on
/// `1..L-1`, then uniform among the `C(L-1, S-1)` compositions with `S` parts.
fn shortcut_uniformity(loops: usize, draws: usize, seed: u64) -> f64 {
    let grid = ScheduleGrid::new(loops).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for _ in 0..draws {
        *counts.entry(grid.sample_shortcut(&mut rng).unwrap().to_string()).or_default() += 1;
    }
    let mut stat = 0.0;
    let mut categories = 0;
    for s in 1..loops {
        for t in grid.enumerate(s).unwrap() {
            let expected = draws as f64 / ((loops - 1) as f64 * binomial(loops - 1, s - 1) as f64);
            let observed = counts.remove(&t.to_string()).unwrap_or(0) as f64;
            stat += (observed - expected).powi(2) / expected;
            categories += 1;
        }
    }
    assert!(counts.is_empty(), "draws outside the support: {counts:?}");
    1.0 - ChiSquared::new((categories - 1) as f64).unwrap().cdf(stat)
}

#[test]
fn criterion_04_trajectory_combinatorics() {
    let mut mismatches = Vec::new();
    for l in 1..=12 {
        let grid = ScheduleGrid::new(l).unwrap();
        for m in 1..=l {
            let listed = grid.enumerate(m).unwrap();
            let brute = count_compositions(l, m);
            let closed = binomial(l - 1, m - 1);
            let distinct: std::collections::HashSet<String> = listed.iter().map(|t| t.to_string()).collect();
            if listed.len() as u64 != brute || brute != closed || distinct.len() != listed.len() {
                mismatches.push(format!("L={l} M={m}: {} listed, {brute} brute, {closed} closed", listed.len()));
            }
        }
    }
    let p: Vec<(usize, f64)> = [3, 4, 6].iter().map(|&l| (l, shortcut_uniformity(l, 100_000, 40 + l as u64))).collect();
    let ok = mismatches.is_empty() && p.iter().all(|&(_, p)| p > 0.01);
    let detail = format!(
        "counts match C(L-1, M-1) for L <= 12 ({} mismatches); chi-square p {}",
        mismatches.len(),
        p.iter().map(|(l, p)| format!("L={l}: {p:.3}")).collect::<Vec<_>>().join(", ")
    );
    verdict(4, "trajectory combinatorics", ok, &detail);
}

#[test]
fn criterion_05_flops_overhead() {
    let exact = (2..=64).all(|l| [1.0, 3.5e6, 1.7e12].iter().all(|&c1| training_overhead(l, 0.0, c1) == 1.5));

    let cfg = ModelConfig::desk();
    let (batch, seq_len) = (2, cfg.context_length);
    let fm = FlopsModel::new(&cfg, batch, seq_len);
    let overhead = fm.training_overhead(cfg.max_loops);

    let model = LoopedModel::init(cfg.clone(), 5).unwrap();
    let ids: Vec<usize> = (0..batch * seq_len).map(|i| (i * 31 + 7) % cfg.vocab_size).collect();
    let tokens = TokenBatch::new(ids, batch, seq_len).unwrap();
    let mut worst: f64 = 0.0;
    for loops in 1..=cfg.max_loops {
        let measured = looped_lm::eval::measured_forward_flops(&model, &tokens, &Trajectory::uniform(loops).unwrap()).unwrap();
        worst = worst.max((measured as f64 - fm.flops(loops)).abs() / fm.flops(loops));
    }
    let ok = exact && overhead > 1.5 && overhead < 2.0 && worst <= 0.05;
    verdict(
        5,
        "FLOPs overhead",
        ok,
        &format!("C_io = 0 gives 1.5 exactly: {exact}; desk overhead {overhead:.4}; worst counter deviation {:.3}%", worst * 100.0),
    );
}

// Independent dense-array oracles for the four representation metrics.

type Rows = Vec<Vec<f64>>;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

fn oracle_anisotropy(h: &Rows) -> f64 {
    let mut pairs = Vec::new();
    for i in 0..h.len() {
        for j in i + 1..h.len() {
            pairs.push(cosine(&h[i], &h[j]));
        }
    }
    pairs.iter().sum::<f64>() / pairs.len() as f64
}

fn oracle_curvature(h: &Rows) -> f64 {
    let diffs: Rows = h.windows(2).map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect()).collect();
    let angles: Vec<f64> = diffs.windows(2).map(|w| cosine(&w[0], &w[1]).clamp(-1.0, 1.0).acos()).collect();
    angles.iter().sum::<f64>() / angles.len() as f64
}

/// Cyclic Jacobi rotations on a symmetric matrix; returns its eigenvalues.
fn jacobi_eigenvalues(mut a: Rows) -> Vec<f64> {
    let n = a.len();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i][i]).collect()
}

fn oracle_entropy(h: &Rows) -> f64 {
    let t = h.len();
    let mut gram: Rows = (0..t).map(|i| (0..t).map(|j| dot(&h[i], &h[j])).collect()).collect();
    let trace: f64 = (0..t).map(|i| gram[i][i]).sum();
    for row in &mut gram {
        for v in row.iter_mut() {
            *v /= trace;
        }
    }
    let e: f64 = jacobi_eigenvalues(gram).into_iter().filter(|&l| l > 1e-15).map(|l| -l * l.ln()).sum();
    e / (t as f64).ln()
}

/// Kernel form: `tr(K̃ L̃) / sqrt(tr(K̃ K̃) tr(L̃ L̃))` with doubly centered Gram matrices.
fn oracle_cka(x: &Rows, y: &Rows) -> f64 {
    let t = x.len();
    let centered_gram = |h: &Rows| -> Rows {
        let k: Rows = (0..t).map(|i| (0..t).map(|j| dot(&h[i], &h[j])).collect()).collect();
        let row_mean: Vec<f64> = k.iter().map(|r| r.iter().sum::<f64>() / t as f64).collect();
        let all_mean = row_mean.iter().sum::<f64>() / t as f64;
        (0..t).map(|i| (0..t).map(|j| k[i][j] - row_mean[i] - row_mean[j] + all_mean).collect()).collect()
    };
    let (kx, ky) = (centered_gram(x), centered_gram(y));
    let tr = |a: &Rows, b: &Rows| (0..t).map(|i| (0..t).map(|j| a[i][j] * b[j][i]).sum::<f64>()).sum::<f64>();
    tr(&kx, &ky) / (tr(&kx, &kx) * tr(&ky, &ky)).sqrt()
}

fn to_matrix(h: &Rows) -> Matrix {
    Matrix::from_fn(h.len(), h[0].len(), |i, j| h[i][j])
}

fn random_rows(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Rows {
    (0..t).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// Gram-Schmidt on random vectors.
fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Rows {
    let mut q: Rows = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for u in &q {
            let p = dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    q
}

#[test]
fn criterion_06_diagnostics_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut oracle_gap: f64 = 0.0;
    let mut invariance_gap: f64 = 0.0;
    for _ in 0..100 {
        let h = random_rows(&mut rng, 8, 4);
        let y = random_rows(&mut rng, 8, 4);
        let m = to_matrix(&h);
        let my = to_matrix(&y);
        for (got, want) in [
            (anisotropy(&m).unwrap(), oracle_anisotropy(&h)),
            (curvature(&m).unwrap(), oracle_curvature(&h)),
            (prompt_entropy(&m).unwrap(), oracle_entropy(&h)),
            (cka(&m, &my).unwrap(), oracle_cka(&h, &y)),
        ] {
            oracle_gap = oracle_gap.max((got - want).abs());
        }

        let q = to_matrix(&random_orthogonal(&mut rng, 4));
        let c: f64 = rng.random_range(0.2..5.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let offset = Matrix::from_fn(8, 4, |_, j| [0.3, -1.7, 2.2, 0.9][j]);
        let rotated = &m * &q;
        let scaled = &m * c.abs();
        let row_scaled = Matrix::from_fn(8, 4, |i, j| m[(i, j)] * (1.0 + i as f64 * 0.37));
        let moved = &m + &offset;
        for (a, b) in [
            (anisotropy(&rotated).unwrap(), anisotropy(&m).unwrap()),
            (anisotropy(&row_scaled).unwrap(), anisotropy(&m).unwrap()),
            (curvature(&rotated).unwrap(), curvature(&m).unwrap()),
            (curvature(&scaled).unwrap(), curvature(&m).unwrap()),
            (curvature(&moved).unwrap(), curvature(&m).unwrap()),
            (prompt_entropy(&rotated).unwrap(), prompt_entropy(&m).unwrap()),
            (prompt_entropy(&scaled).unwrap(), prompt_entropy(&m).unwrap()),
            (cka(&m, &m).unwrap(), 1.0),
            (cka(&m, &rotated).unwrap(), 1.0),
            (cka(&m, &(&m * c + &offset)).unwrap(), 1.0),
            (cka(&rotated, &my).unwrap(), cka(&m, &my).unwrap()),
            (cka(&m, &my).unwrap(), cka(&my, &m).unwrap()),
        ] {
            invariance_gap = invariance_gap.max((a - b).abs());
        }
    }
    verdict(
        6,
        "diagnostics oracle equivalence",
        oracle_gap <= 1e-6 && invariance_gap <= 1e-6,
        &format!("100 random 8x4 matrices: max oracle gap {oracle_gap:.2e}, max invariance gap {invariance_gap:.2e}"),
    );
}

struct DeskRuns {
    loopformer: LoopedModel,
    naive_ee: LoopedModel,
    val: Vec<usize>,
    cfg: RunConfig,
}

fn run_config(variant: Variant, ee_mode: EeMode) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model.variant = variant;
    cfg.train.ee_mode = ee_mode;
    cfg
}

/// Loads the cached final checkpoint when it was produced by the same configuration,
/// otherwise trains from scratch and leaves a fresh cache behind.
fn trained(name: &str, cfg: &RunConfig) -> LoopedModel {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let path = dir.join("checkpoints").join("final.lpfm");
    if let Ok(ck) = load_checkpoint(&path) {
        if ck.model.config() == &cfg.model && ck.train.as_ref() == Some(&cfg.train) && ck.step == cfg.train.total_steps as u64 {
            return ck.model;
        }
    }
    let _ = std::io::stderr()
        .write_all(format!("training {name} for {} steps into {}\n", cfg.train.total_steps, dir.display()).as_bytes());
    let corpus = cfg.data.corpus().unwrap();
    let mut model = LoopedModel::init(cfg.model.clone(), cfg.train.seed).unwrap();
    let outputs = RunOutputs { dir: Some(dir), meta: CheckpointMeta::for_tokenizer(&corpus.tokenizer) };
    train(&mut model, &corpus, &cfg.train, &outputs).unwrap();
    model
}

fn desk_runs() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let cfg = run_config(Variant::LoopFormer, EeMode::None);
        let loopformer = trained("loopformer", &cfg);
        let naive_ee = trained("base_loop_naive_ee", &run_config(Variant::BaseLoop, EeMode::NaiveEe));
        let corpus = cfg.data.corpus().unwrap();
        let mut val = corpus.val;
        if let Some(max) = cfg.eval.max_tokens {
            val.truncate(max);
        }
        DeskRuns { loopformer, naive_ee, val, cfg }
    })
}

#[test]
fn criterion_07_elastic_depth_trend() {
    let runs = desk_runs();
    let stride = runs.cfg.model.context_length / 2;
    let ppl: Vec<f64> = [1, 2, 4]
        .iter()
        .map(|&m| perplexity(&runs.loopformer, &runs.val, &Trajectory::uniform(m).unwrap(), stride, runs.cfg.eval.batch_size).unwrap())
        .collect();
    let gap_21 = 1.0 - ppl[1] / ppl[0];
    let gap_42 = 1.0 - ppl[2] / ppl[1];
    verdict(
        7,
        "desk elastic-depth trend",
        gap_21 >= 0.01 && gap_42 >= 0.01,
        &format!(
            "ppl M=1 {:.4}, M=2 {:.4}, M=4 {:.4}; relative gains {:.2}% and {:.2}%",
            ppl[0],
            ppl[1],
            ppl[2],
            gap_21 * 100.0,
            gap_42 * 100.0
        ),
    );
}

#[test]
fn criterion_08_collapse_contrast() {
    let runs = desk_runs();
    let ctx = runs.cfg.model.context_length;
    let prompts: Vec<Vec<usize>> = runs.val.chunks_exact(ctx).take(runs.cfg.diagnostics.prompts).map(<[usize]>::to_vec).collect();
    let full = Trajectory::max(runs.cfg.model.max_loops).unwrap();
    let offdiag = |m: &LoopedModel| {
        let snaps = diagnostics::collect_snapshots(m, &prompts, &full, runs.cfg.diagnostics.last_tokens).unwrap();
        DiagnosticsReport::from_snapshots(&snaps).unwrap().mean_offdiag_cka()
    };
    let (lf, ee) = (offdiag(&runs.loopformer), offdiag(&runs.naive_ee));
    verdict(
        8,
        "collapse contrast",
        ee - lf >= 0.02,
        &format!("mean off-diagonal CKA loopformer {lf:.4}, naive_ee base_loop {ee:.4}, difference {:.4}", ee - lf),
    );
}

#[test]
fn criterion_09_sweep_nontriviality() {
    let runs = desk_runs();
    let opts = SweepOptions {
        stride: runs.cfg.model.context_length / 2,
        batch_size: runs.cfg.eval.batch_size,
        prompts: &[],
        last_tokens: runs.cfg.diagnostics.last_tokens,
    };
    let sweep = trajectory_sweep(&runs.loopformer, &runs.val, 2, &opts).unwrap();
    let ok = sweep.records.len() == 3 && sweep.spread() > 0.0 && sweep.best().ppl <= sweep.uniform().ppl;
    let rows: Vec<String> = sweep.records.iter().map(|r| format!("{} {:.4}", r.schedule, r.ppl)).collect();
    verdict(
        9,
        "sweep nontriviality",
        ok,
        &format!("{}; spread {:.4}, best {:.4} vs uniform {:.4}", rows.join(", "), sweep.spread(), sweep.best().ppl, sweep.uniform().ppl),
    );
}

#[test]
fn criterion_10_overfit_one_batch() {
    let cfg = RunConfig::default();
    let corpus = cfg.data.corpus().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let batch = Batch::sample(&corpus.train, cfg.train.batch_size, cfg.model.context_length, &mut rng).unwrap();
    let train_cfg = TrainConfig { total_steps: 500, warmup_steps: 20, ..cfg.train.clone() };
    let mut model = LoopedModel::init(cfg.model.clone(), 0).unwrap();
    let mut opt = AdamW::new(&model.params, &train_cfg);
    let mut first = None;
    let mut last = f64::NAN;
    for step in 0..train_cfg.total_steps {
        let report = training_step(&mut model, &mut opt, &batch, &train_cfg, step, &mut rng).unwrap();
        first.get_or_insert(report.losses.total);
        last = report.losses.total;
    }
    let first = first.unwrap();
    let reduction = 1.0 - last / first;
    verdict(
        10,
        "overfit sanity",
        reduction >= 0.9,
        &format!("total loss {first:.4} -> {last:.4} over 500 steps ({:.1}% reduction)", reduction * 100.0),
    );
}
