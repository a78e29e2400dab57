//! Implementation of the `gmflow` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime failure (including failed
//! self-test checks), 2 on usage errors. Every file is written through a
//! temporary sibling and a rename.

pub mod args;
mod io;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::Parser;
use serde::Serialize;

use gmflow::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint};
use gmflow::data::colorize::colorize_flow;
use gmflow::data::flo::{read_flo, write_flo};
use gmflow::data::metrics::compute_metrics;
use gmflow::model::{gmflow_forward, ForwardOptions};
use gmflow::selftest::{run_selftest, Level};
use gmflow::train::{LogRecord, TrainConfig, Trainer};

pub use args::{Cli, Command};
use args::{EvalArgs, InferArgs, LevelArg, SelftestArgs, TrainArgs};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation; exit code 2.
    Usage(String),
    /// Failure while doing the work; exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(mut a) => {
            a.seed = cli.seed;
            a.deterministic = cli.deterministic;
            cmd_train(a)
        }
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Selftest(a) => cmd_selftest(a),
    }
}

fn check_output_dir(path: &Path) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    if !dir.is_dir() {
        return Err(usage(format!("output directory {} does not exist", dir.display())));
    }
    Ok(())
}

fn check_input(path: &Path) -> Result<(), CliError> {
    if !path.is_file() {
        return Err(usage(format!("input file {} does not exist", path.display())));
    }
    Ok(())
}

/// Resolved training invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub config: TrainConfig,
    pub out: PathBuf,
    pub log: PathBuf,
    pub resume: Option<PathBuf>,
}

/// Merges flags with the optional config file and checks every path.
pub fn plan_training(args: TrainArgs) -> Result<TrainPlan, CliError> {
    let args = match &args.config {
        Some(path) => {
            check_input(path)?;
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file: TrainArgs =
                serde_json::from_str(&text).map_err(|e| usage(format!("config file {}: {e}", path.display())))?;
            args.merged_with(file)
        }
        None => args,
    };
    let out = args.out.clone().ok_or_else(|| usage("missing output path (--out)"))?;
    check_output_dir(&out)?;
    let log = args.log.clone().unwrap_or_else(|| out.with_extension("jsonl"));
    check_output_dir(&log)?;
    if let Some(r) = &args.resume {
        check_input(r)?;
    }

    let mut cfg = TrainConfig::default();
    macro_rules! set {
        ($src:ident => $($dst:tt)+) => {
            if let Some(v) = args.$src {
                cfg.$($dst)+ = v;
            }
        };
    }
    set!(iters => iterations);
    set!(batch => batch_size);
    set!(dim => model.dim);
    set!(blocks => model.num_blocks);
    set!(splits => model.splits);
    set!(lr => optimizer.lr);
    set!(weight_decay => optimizer.weight_decay);
    set!(propagation_warmup => propagation_warmup);
    set!(max_disp => data.max_disp);
    set!(blur => data.blur);
    set!(occluders => data.occluder_prob);
    set!(data_seed => data.seed);
    set!(val_every => val_every);
    set!(val_samples => val_samples);
    set!(seed => seed);
    if let Some(s) = args.size {
        cfg.data.height = s;
        cfg.data.width = s;
    }
    cfg.model.refine |= args.refine;
    cfg.deterministic |= args.deterministic;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(TrainPlan {
        config: cfg,
        out,
        log,
        resume: args.resume,
    })
}

fn checkpoint_for(trainer: &Trainer<f32>) -> Checkpoint<f32> {
    let mut ckpt = Checkpoint::from_state(&trainer.state);
    ckpt.metadata.extra = serde_json::json!({ "train": trainer.cfg });
    ckpt
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let plan = plan_training(args)?;
    let state = match &plan.resume {
        Some(path) => {
            let ckpt = load_checkpoint::<f32>(path).with_context(|| format!("loading {}", path.display()))?;
            Some(
                ckpt.into_state()
                    .ok_or_else(|| anyhow!("{} has no optimizer state to resume from", path.display()))?,
            )
        }
        None => None,
    };
    let mut lines = match (&plan.resume, std::fs::read_to_string(&plan.log)) {
        (Some(_), Ok(text)) => io::log_prefix(&text, state.as_ref().map_or(0, |s| s.iteration)),
        _ => String::new(),
    };
    let mut trainer = Trainer::<f32>::new(plan.config.clone(), state).context("setting up training")?;
    log::info!(
        "training {} parameters for {} iterations",
        trainer.state.weights.param_count(),
        plan.config.iterations
    );
    trainer
        .run(|t, rec: &LogRecord| {
            lines.push_str(&serde_json::to_string(rec).expect("record serializes"));
            lines.push('\n');
            write_atomic(&plan.log, lines.as_bytes())?;
            save_checkpoint(&checkpoint_for(t), &plan.out)
        })
        .context("training")?;
    save_checkpoint(&checkpoint_for(&trainer), &plan.out).context("writing checkpoint")?;
    write_atomic(&plan.log, lines.as_bytes()).context("writing log")?;
    Ok(())
}

fn sibling(out: &Path, suffix: &str, ext: &str) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn cmd_infer(args: InferArgs) -> Result<(), CliError> {
    for p in [&args.checkpoint, &args.image1, &args.image2] {
        check_input(p)?;
    }
    check_output_dir(&args.out)?;
    if !(args.occlusion_alpha >= 0.0 && args.occlusion_beta >= 0.0) {
        return Err(usage("occlusion thresholds must be non-negative"));
    }
    let ckpt =
        load_checkpoint::<f32>(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let cfg = ckpt.weights.config;
    if let Some(d) = args.dim {
        if d != cfg.dim {
            return Err(CliError::Runtime(anyhow!(
                "checkpoint {} has feature dimension {} but --dim {} was requested",
                args.checkpoint.display(),
                cfg.dim,
                d
            )));
        }
    }
    let images = io::read_pair(&args.image1, &args.image2)?;
    let opts = ForwardOptions {
        propagate: !args.no_propagation,
        bidirectional: args.bidir,
        occlusion_alpha: args.occlusion_alpha,
        occlusion_beta: args.occlusion_beta,
    };
    let out = gmflow_forward(&images, &ckpt.weights, &opts).context("inference")?;
    write_flo(&args.out, &out.flow).context("writing flow")?;
    if args.viz {
        io::write_rgb(&sibling(&args.out, "", "png"), &colorize_flow(&out.flow, None))?;
    }
    if let (Some(b), Some(occ)) = (&out.backward, &out.occlusion) {
        write_flo(&sibling(&args.out, "_backward", "flo"), b).context("writing backward flow")?;
        io::write_mask(&sibling(&args.out, "_occlusion", "png"), occ)?;
        if args.viz {
            io::write_rgb(&sibling(&args.out, "_backward", "png"), &colorize_flow(b, None))?;
        }
    }
    Ok(())
}

/// The fields printed by `gmflow eval`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub epe_all: f64,
    pub epe_matched: f64,
    pub epe_unmatched: f64,
    pub s0_10: f64,
    pub s10_40: f64,
    pub s40plus: f64,
    pub f1_all: f64,
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    check_input(&args.pred)?;
    check_input(&args.gt)?;
    if let Some(o) = &args.occlusion {
        check_input(o)?;
    }
    let pred = read_flo::<f64>(&args.pred).with_context(|| format!("reading {}", args.pred.display()))?;
    let gt = read_flo::<f64>(&args.gt).with_context(|| format!("reading {}", args.gt.display()))?;
    let occ = args.occlusion.as_deref().map(io::read_mask).transpose()?;
    let m = compute_metrics(&pred, &gt, occ.as_ref(), None).context("computing metrics")?;
    let report = EvalReport {
        epe_all: m.epe_all,
        epe_matched: m.epe_matched,
        epe_unmatched: m.epe_unmatched,
        s0_10: m.s0_10,
        s10_40: m.s10_40,
        s40plus: m.s40plus,
        f1_all: m.f1_all,
    };
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn cmd_selftest(args: SelftestArgs) -> Result<(), CliError> {
    let level = match args.level {
        LevelArg::Quick => Level::Quick,
        LevelArg::Full => Level::Full,
    };
    let report = if args.inject_fault {
        gmflow::matching::with_inverted_matching(|| run_selftest(level))
    } else {
        run_selftest(level)
    };
    let mut stdout = std::io::stdout().lock();
    if args.json {
        let _ = writeln!(stdout, "{}", serde_json::to_string(&report).expect("report serializes"));
    } else {
        for c in &report.checks {
            let mark = if c.passed { "ok  " } else { "FAIL" };
            let _ = writeln!(stdout, "{mark} {:<24} {:>7.2}s  {}", c.name, c.seconds, c.detail);
        }
    }
    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(anyhow!("failed checks: {}", failed.join(", "))))
    }
}
