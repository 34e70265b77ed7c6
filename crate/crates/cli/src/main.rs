use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use looped_lm::config::RunConfig;
use looped_lm::diagnostics::{collect_snapshots, DiagnosticsReport};
use looped_lm::eval::{generate, perplexity, trajectory_sweep, FlopsModel, SweepOptions};
use looped_lm::io::{load_checkpoint, write_atomic, Checkpoint, CheckpointMeta};
use looped_lm::training::{train, ConsistencyTarget, EeMode, RunOutputs};
use looped_lm::{LoopedModel, Trajectory, Variant};

#[derive(Parser)]
#[command(name = "looped-lm", version, about = "Train and evaluate looped decoders with elastic depth")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; keys it omits come from the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base settings: `desk` or `large-1b`.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Directory for checkpoints, metrics, and config echoes.
    #[arg(long, global = true, env = "LOOPED_LM_RUN_DIR", default_value = "runs/default")]
    run_dir: PathBuf,
    /// Checkpoint to load; defaults to `<run-dir>/checkpoints/final.lpfm`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints plus metrics.csv.
    Train(TrainArgs),
    /// Validation perplexity at one schedule.
    Eval(ScheduleArgs),
    /// Perplexity of every grid schedule of one budget.
    Sweep {
        #[arg(long)]
        budget: usize,
    },
    /// Per-step representation metrics and the cross-step CKA matrix.
    Diagnose(ScheduleArgs),
    /// Sample a continuation of a prompt.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 200)]
        max_new: usize,
        #[arg(long, default_value_t = 0.8)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
    /// Compute model: C_io, C_1, C(l) per loop count, and the training overhead.
    Flops,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long, value_parser = parse_ee_mode)]
    ee_mode: Option<EeMode>,
    /// Consistency term of the dual objective: `logits` or `hidden`.
    #[arg(long, value_parser = parse_consistency)]
    consistency: Option<ConsistencyTarget>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    loops: Option<usize>,
    /// Text files to train on, replacing the configured corpus.
    #[arg(long, num_args = 1..)]
    corpus: Vec<PathBuf>,
}

#[derive(Args, Clone)]
struct ScheduleArgs {
    /// Uniform schedule with this many loops.
    #[arg(long)]
    budget: Option<usize>,
    /// Explicit schedule, `uniform:M` or comma-separated steps.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    stride: Option<usize>,
}

fn parse_ee_mode(s: &str) -> Result<EeMode, String> {
    match s {
        "none" => Ok(EeMode::None),
        "naive_ee" => Ok(EeMode::NaiveEe),
        "ee_cons" => Ok(EeMode::EeCons),
        _ => Err(format!("unknown ee mode {s:?}")),
    }
}

fn parse_consistency(s: &str) -> Result<ConsistencyTarget, String> {
    match s {
        "logits" => Ok(ConsistencyTarget::Logits),
        "hidden" => Ok(ConsistencyTarget::Hidden),
        _ => Err(format!("unknown consistency target {s:?}")),
    }
}

fn base_config(common: &Common) -> anyhow::Result<RunConfig> {
    let preset = RunConfig::preset(&common.preset)?;
    let Some(path) = &common.config else { return Ok(preset) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    // Keys in the file override the preset's.
    let mut merged: toml::Table = toml::from_str(&preset.to_toml()?)?;
    let overrides: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    for (section, value) in overrides {
        match (merged.get_mut(&section), value) {
            (Some(toml::Value::Table(base)), toml::Value::Table(over)) => base.extend(over),
            (_, value) => {
                merged.insert(section, value);
            }
        }
    }
    Ok(RunConfig::from_toml(&toml::to_string(&merged)?)?)
}

fn echo_config(run_dir: &Path, name: &str, cfg: &RunConfig) -> anyhow::Result<()> {
    write_atomic(&run_dir.join(name), cfg.to_toml()?.as_bytes())?;
    Ok(())
}

fn open_checkpoint(common: &Common) -> anyhow::Result<Checkpoint> {
    let path = common.checkpoint.clone().unwrap_or_else(|| common.run_dir.join("checkpoints").join("final.lpfm"));
    load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))
}

fn resolve_schedule(args: &ScheduleArgs, cfg: &RunConfig, model: &LoopedModel) -> anyhow::Result<Trajectory> {
    let text = args.schedule.clone().or_else(|| cfg.eval.schedule.clone());
    let trajectory = match (text, args.budget.or(cfg.eval.budget)) {
        (Some(s), _) => s.parse()?,
        (None, Some(m)) => Trajectory::uniform(m)?,
        (None, None) => Trajectory::uniform(model.config().max_budget())?,
    };
    model.check_budget(&trajectory)?;
    Ok(trajectory)
}

fn eval_tokens(cfg: &RunConfig, meta: &CheckpointMeta) -> anyhow::Result<Vec<usize>> {
    let (mut tokens, unknown) = cfg.data.val_tokens(&meta.tokenizer())?;
    if unknown > 0 {
        log::warn!("{unknown} evaluation characters mapped to the unknown id");
    }
    if let Some(max) = cfg.eval.max_tokens {
        tokens.truncate(max.max(2));
    }
    Ok(tokens)
}

fn stride(args: &ScheduleArgs, cfg: &RunConfig, model: &LoopedModel) -> usize {
    args.stride.or(cfg.eval.stride).unwrap_or((model.config().context_length / 2).max(1))
}

fn prompts(tokens: &[usize], count: usize, context: usize) -> Vec<Vec<usize>> {
    tokens.chunks_exact(context).take(count).map(<[usize]>::to_vec).collect()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = &cli.common;
    let mut cfg = base_config(common)?;
    fs::create_dir_all(&common.run_dir)?;
    match cli.command {
        Command::Train(args) => {
            let t = &mut cfg.train;
            t.total_steps = args.steps.unwrap_or(t.total_steps);
            t.warmup_steps = args.warmup.unwrap_or(t.warmup_steps.min(t.total_steps.saturating_sub(1)));
            t.seed = args.seed.unwrap_or(t.seed);
            t.ee_mode = args.ee_mode.unwrap_or(t.ee_mode);
            t.consistency = args.consistency.unwrap_or(t.consistency);
            t.batch_size = args.batch_size.unwrap_or(t.batch_size);
            cfg.model.variant = args.variant.unwrap_or(cfg.model.variant);
            cfg.model.max_loops = args.loops.unwrap_or(cfg.model.max_loops);
            if !args.corpus.is_empty() {
                cfg.data.files = args.corpus;
            }
            let corpus = cfg.data.corpus()?;
            if corpus.tokenizer.vocab_size() != cfg.model.vocab_size {
                log::info!("vocab_size set to {} by the tokenizer", corpus.tokenizer.vocab_size());
                cfg.model.vocab_size = corpus.tokenizer.vocab_size();
            }
            cfg.validate()?;
            echo_config(&common.run_dir, "config.toml", &cfg)?;
            let mut model = LoopedModel::init(cfg.model.clone(), cfg.train.seed)?;
            log::info!("{} parameters", model.num_params());
            let outputs = RunOutputs {
                dir: Some(common.run_dir.clone()),
                meta: CheckpointMeta::for_tokenizer(&corpus.tokenizer),
            };
            let report = train(&mut model, &corpus, &cfg.train, &outputs)?;
            for r in report.validation.iter().filter(|r| r.step == cfg.train.total_steps) {
                println!("budget {}\tppl {:.4}", r.budget, r.ppl);
            }
        }
        Command::Eval(args) => {
            let ck = open_checkpoint(common)?;
            cfg.model = ck.model.config().clone();
            let trajectory = resolve_schedule(&args, &cfg, &ck.model)?;
            let tokens = eval_tokens(&cfg, &ck.meta)?;
            echo_config(&common.run_dir, "eval-config.toml", &cfg)?;
            let ppl = perplexity(&ck.model, &tokens, &trajectory, stride(&args, &cfg, &ck.model), cfg.eval.batch_size)?;
            println!("schedule {trajectory}\ttokens {}\tppl {ppl:.4}", tokens.len());
        }
        Command::Sweep { budget } => {
            let ck = open_checkpoint(common)?;
            cfg.model = ck.model.config().clone();
            let tokens = eval_tokens(&cfg, &ck.meta)?;
            echo_config(&common.run_dir, "sweep-config.toml", &cfg)?;
            let context = cfg.model.context_length;
            let prompt_set = prompts(&tokens, cfg.diagnostics.prompts, context);
            let opts = SweepOptions {
                stride: cfg.eval.stride.unwrap_or((context / 2).max(1)),
                batch_size: cfg.eval.batch_size,
                prompts: &prompt_set,
                last_tokens: cfg.diagnostics.last_tokens,
            };
            let result = trajectory_sweep(&ck.model, &tokens, budget, &opts)?;
            result.write_csv(&common.run_dir.join("sweep.csv"))?;
            for r in &result.records {
                println!("{}\t{:.4}", r.schedule, r.ppl);
            }
            println!("best {:.4} worst {:.4} spread {:.4}", result.best().ppl, result.worst().ppl, result.spread());
        }
        Command::Diagnose(args) => {
            let ck = open_checkpoint(common)?;
            cfg.model = ck.model.config().clone();
            let trajectory = resolve_schedule(&args, &cfg, &ck.model)?;
            let tokens = eval_tokens(&cfg, &ck.meta)?;
            let prompt_set = prompts(&tokens, cfg.diagnostics.prompts, cfg.model.context_length);
            if prompt_set.is_empty() {
                bail!("validation split is shorter than one context window");
            }
            echo_config(&common.run_dir, "diagnose-config.toml", &cfg)?;
            let snaps = collect_snapshots(&ck.model, &prompt_set, &trajectory, cfg.diagnostics.last_tokens)?;
            let report = DiagnosticsReport::from_snapshots(&snaps)?;
            report.write_csvs(&common.run_dir.join("diag"))?;
            println!("step\tt\tanisotropy\tcurvature\tentropy");
            for s in 0..report.times.len() {
                println!(
                    "{s}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
                    report.times[s], report.anisotropy[s], report.curvature[s], report.entropy[s]
                );
            }
            println!("mean off-diagonal cka {:.4}", report.mean_offdiag_cka());
        }
        Command::Generate { prompt, max_new, temperature, seed, schedule } => {
            let ck = open_checkpoint(common)?;
            cfg.model = ck.model.config().clone();
            let trajectory = resolve_schedule(&schedule, &cfg, &ck.model)?;
            let tokenizer = ck.meta.tokenizer();
            let (ids, unknown) = tokenizer.encode_lossy(prompt.as_bytes());
            if unknown > 0 {
                log::warn!("{unknown} prompt characters mapped to the unknown id");
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = generate(&ck.model, &ids, &trajectory, max_new, temperature, &mut rng)?;
            println!("{}", String::from_utf8_lossy(&tokenizer.decode(&out)?));
        }
        Command::Flops => {
            echo_config(&common.run_dir, "flops-config.toml", &cfg)?;
            let m = &cfg.model;
            let f = FlopsModel::new(m, cfg.train.batch_size, m.context_length);
            println!("batch {} x {} tokens", cfg.train.batch_size, m.context_length);
            println!("C_io\t{:.6e}", f.c_io);
            println!("C_1\t{:.6e}", f.c_1);
            for l in 1..=m.max_loops {
                println!("C({l})\t{:.6e}", f.flops(l));
            }
            if m.max_loops >= 2 {
                println!("training_overhead\t{:.6}", f.training_overhead(m.max_loops));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<looped_lm::Error>().map_or("error", |e| e.kind());
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{kind}]: {msg}");
            ExitCode::FAILURE
        }
    }
}
