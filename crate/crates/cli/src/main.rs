use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use lhsynth_core::latlab::{
    detect_lhps, parse_grid, render_svg, sweep, Clock, LatencyProfile, LhpRule, MeasureConfig, NativeBackend,
    SyntheticBackend, SyntheticCurveSpec,
};
use lhsynth_core::synthflow::{
    acquire_profile, bench_checkpoint, evaluate_checkpoint, load_flow_checkpoint, unix_timestamp, EvalSplit, Flow,
    FlowConfig, FlowReport, ProfileSource, CHECKPOINT_FILE,
};
use lhsynth_core::Error;

/// Latency-hysteresis-guided grow-and-prune synthesis of H-LSTM models.
///
/// Log verbosity follows the LHSYNTH_LOG environment variable
/// (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "lhsynth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep square matmul latency over a dimension grid and write a profile CSV.
    Profile {
        /// Grid as start:stop:step (inclusive).
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 50)]
        runs: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        /// `native`, or `synthetic:<curve.toml>`.
        #[arg(long, default_value = "native")]
        backend: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect latency hysteresis points in a profile.
    Analyze {
        #[arg(long)]
        profile: PathBuf,
        /// Hysteresis report (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Optional SVG plot with LHPs marked.
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = RuleArg::PrefixMin)]
        rule: RuleArg,
    },
    /// Run the grow-and-prune synthesis flow.
    Synthesize {
        #[arg(long)]
        config: PathBuf,
        /// Latency profile steering row/column growth.
        #[arg(long, conflicts_with = "sweep")]
        profile: Option<PathBuf>,
        /// Measure the profile with the config's [latency.sweep] settings.
        #[arg(long)]
        sweep: bool,
        /// Skip row/column pruning and growth.
        #[arg(long)]
        cpu_mode: bool,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perplexity of a checkpointed model on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Valid)]
        split: SplitArg,
    },
    /// Print the step table of a flow output directory.
    Report {
        #[arg(long)]
        flow: PathBuf,
    },
    /// Model forward latency of a checkpoint.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        reps: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    PrefixMin,
    Pareto,
}

impl From<RuleArg> for LhpRule {
    fn from(r: RuleArg) -> Self {
        match r {
            RuleArg::PrefixMin => LhpRule::PrefixMin,
            RuleArg::Pareto => LhpRule::Pareto,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for EvalSplit {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => EvalSplit::Train,
            SplitArg::Valid => EvalSplit::Valid,
            SplitArg::Test => EvalSplit::Test,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LHSYNTH_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

/// 2 for configuration and usage problems, 1 for everything else.
fn exit_code(e: &anyhow::Error) -> ExitCode {
    let usage = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<Error>(),
            Some(Error::Config(_)) | Some(Error::Version { .. })
        )
    });
    if usage {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Profile {
            grid,
            batch,
            runs,
            warmup,
            backend,
            seed,
            out,
        } => profile(&grid, batch, runs, warmup, &backend, seed, &out),
        Command::Analyze { profile, out, svg, rule } => analyze(&profile, &out, svg.as_deref(), rule.into()),
        Command::Synthesize {
            config,
            profile,
            sweep,
            cpu_mode,
            resume,
            out,
        } => synthesize(&config, profile, sweep, cpu_mode, resume, &out),
        Command::Eval {
            checkpoint,
            corpus,
            split,
        } => {
            let ckpt = load_flow_checkpoint(&checkpoint).with_context(|| checkpoint.display().to_string())?;
            let text = std::fs::read_to_string(&corpus).with_context(|| corpus.display().to_string())?;
            let ppl = evaluate_checkpoint(&ckpt, &text, split.into())?;
            println!("perplexity {ppl}");
            Ok(())
        }
        Command::Report { flow } => {
            let report = FlowReport::load(&flow).with_context(|| format!("no flow report in {}", flow.display()))?;
            print!("{}", report.render_table());
            Ok(())
        }
        Command::Bench { checkpoint, batch, reps } => {
            let ckpt = load_flow_checkpoint(&checkpoint).with_context(|| checkpoint.display().to_string())?;
            let s = bench_checkpoint(&ckpt, batch, reps)?;
            println!("median_ns {} p95_ns {} mean_ns {} runs {}", s.median_ns, s.p95_ns, s.mean_ns, s.runs);
            Ok(())
        }
    }
}

fn profile(grid: &str, batch: usize, runs: usize, warmup: usize, backend: &str, seed: u64, out: &Path) -> anyhow::Result<()> {
    let grid = parse_grid(grid)?;
    if batch == 0 {
        return Err(Error::Config("--batch must be positive".into()).into());
    }
    let cfg = MeasureConfig {
        warmup_runs: warmup,
        measured_runs: runs,
    };
    let result = if backend == "native" {
        sweep(&mut NativeBackend::new(seed), &grid, batch, cfg, unix_timestamp())
    } else if let Some(spec_path) = backend.strip_prefix("synthetic:") {
        let text = std::fs::read_to_string(spec_path).with_context(|| spec_path.to_string())?;
        let spec = SyntheticCurveSpec::from_toml(&text)?;
        let stamp = match spec.clock {
            Clock::Virtual => "virtual".to_string(),
            Clock::BusyWait => unix_timestamp(),
        };
        sweep(&mut SyntheticBackend::new(spec)?, &grid, batch, cfg, stamp)
    } else {
        return Err(Error::Config(format!("unknown backend {backend:?}; use native or synthetic:<file>")).into());
    };
    let profile = match result {
        Ok(p) => p,
        Err(failure) => {
            if !failure.partial.samples.is_empty() {
                let partial = out.with_extension("partial.csv");
                failure.partial.save(&partial)?;
                eprintln!("partial profile saved to {}", partial.display());
            }
            return Err(failure.error.into());
        }
    };
    profile.save(out)?;
    println!("{} points written to {}", profile.samples.len(), out.display());
    Ok(())
}

fn analyze(profile: &Path, out: &Path, svg: Option<&Path>, rule: LhpRule) -> anyhow::Result<()> {
    let p = LatencyProfile::load(profile)?;
    let map = detect_lhps(&p, rule)?;
    let report = map.report();
    std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    if let Some(svg) = svg {
        let title = format!("{} (batch {})", p.hardware_id, p.batch);
        std::fs::write(svg, render_svg(&map, &title))?;
    }
    println!(
        "{} LHPs over {} points, redundancy {}",
        report.lhp_count, report.grid_points, report.redundancy_percent
    );
    Ok(())
}

fn synthesize(
    config: &Path,
    profile: Option<PathBuf>,
    sweep: bool,
    cpu_mode: bool,
    resume: bool,
    out: &Path,
) -> anyhow::Result<()> {
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut flow = if resume && ckpt_path.exists() {
        info!("resuming from {}", ckpt_path.display());
        Flow::resume(&ckpt_path, Some(out))?
    } else {
        let mut cfg = FlowConfig::load(config).with_context(|| config.display().to_string())?;
        cfg.cpu_mode |= cpu_mode;
        let source = match (profile, sweep) {
            (Some(p), _) => Some(ProfileSource::File(p)),
            (None, true) => Some(ProfileSource::Sweep),
            (None, false) => cfg.profile_source(),
        };
        let profile = match source {
            Some(src) => Some(acquire_profile(&cfg, &src)?),
            None if cfg.cpu_mode => None,
            None => {
                return Err(anyhow!(Error::Config(
                    "no latency profile: pass --profile <file> or --sweep, or configure one".into()
                )))
            }
        };
        if let Some(p) = &profile {
            std::fs::create_dir_all(out)?;
            p.save(&out.join("profile.csv"))?;
        }
        Flow::new(cfg, profile, Some(out))?
    };
    let report = flow.run()?;
    print!("{}", report.render_table());
    Ok(())
}
