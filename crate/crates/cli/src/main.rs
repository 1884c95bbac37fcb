use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use ifr_cli::commands::{self, GRAD_CHECK_FD_LIMIT, GRAD_CHECK_UNROLL_LIMIT};
use ifr_cli::compare::{compare_command, CompareRequest};
use ifr_cli::diagnose::{diagnose, DiagnoseProfile, DiagnoseRequest};
use ifr_cli::error::container_code;
use ifr_cli::{exit_code, CliError, ExperimentConfig, Workspace};
use ifr_core::blocks::{ChannelMultiplier, CountOptions, CountProfile, Strategy};
use ifr_core::gradcheck::GradCheckOptions;

#[derive(Parser)]
#[command(name = "ifr", version, about = "Implicit feature refinement experiments")]
struct Cli {
    /// Directory that relative output and input paths resolve against.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset container.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one head; writes a checkpoint and a metrics CSV.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train a grid of heads on one dataset and seed.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Entries `name[:depth]`; names are strategies or plain-conv.
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        /// Solver budgets for implicit entries without a depth.
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<usize>,
        /// Double-residual settings to run, e.g. `on,off`.
        #[arg(long, value_delimiter = ',', value_parser = parse_on_off)]
        double_residual: Vec<bool>,
        /// Also write one checkpoint per successful cell.
        #[arg(long)]
        save_checkpoints: bool,
    },
    /// Print exact parameter counts.
    ParamCount {
        #[arg(long)]
        profile: String,
        #[arg(long, default_value = "implicit-broyden")]
        strategy: String,
        /// Stage count or solver budget; defaults to 4 stages or 15 iterations.
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        multiplier: Vec<String>,
        #[arg(long)]
        exclude_bias: bool,
        #[arg(long)]
        exclude_gn_affine: bool,
    },
    /// Unroll traces, spectral radii and implicit gaps on fresh inputs.
    Diagnose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        steps: usize,
        #[arg(long, default_value_t = 10)]
        inputs: usize,
        #[arg(long, default_value_t = 12_345)]
        seed: u64,
        /// Spectral-radius probes spread along the unroll, the last at its end.
        #[arg(long, default_value_t = 5)]
        radius_probes: usize,
        /// `checkpoint`, or `linear` for the scalar map h <- 0.5 h + 1.
        #[arg(long, default_value = "checkpoint")]
        profile: String,
    },
    /// Compare implicit gradients with finite differences and unrolled backprop.
    GradCheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Test hook: scale the hidden-state VJP so the check must fail.
        #[arg(long, hide = true)]
        break_vjp: bool,
    },
}

fn parse_on_off(s: &str) -> Result<bool, String> {
    match s {
        "on" | "true" => Ok(true),
        "off" | "false" => Ok(false),
        other => Err(format!("expected on or off, got '{other}'")),
    }
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path)
}

fn run(cli: Cli) -> Result<()> {
    let flag = cli.output_dir.as_deref();
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = load(&config)?;
            let ws = Workspace::new(flag, Some(&cfg));
            let o = commands::gen_data(&cfg, &ws, &out)?;
            println!("samples: {}", o.count);
            println!("sha256: {}", o.checksum);
            println!("wrote {}", o.path.display());
        }
        Command::Train { config } => {
            let cfg = load(&config)?;
            let ws = Workspace::new(flag, Some(&cfg));
            let o = commands::train_command(&cfg, &ws)?;
            println!(
                "trained {} for {} iterations: held-out IoU {:.4}",
                o.model.config.strategy, cfg.train.total_iters, o.final_eval.mean_iou
            );
            println!("wrote {}", o.metrics_csv.display());
            println!("wrote {}", o.checkpoint.display());
        }
        Command::Compare {
            config,
            strategies,
            budgets,
            double_residual,
            save_checkpoints,
        } => {
            let cfg = load(&config)?;
            let ws = Workspace::new(flag, Some(&cfg));
            let req = CompareRequest {
                strategies: &strategies,
                budgets: &budgets,
                double_residual: &double_residual,
                save_checkpoints,
            };
            for r in compare_command(&cfg, &ws, &req)? {
                match &r.outcome {
                    Ok(run) => println!("{:>3} {:<32} IoU {:.4}", r.index, r.spec.label, run.eval.mean_iou),
                    Err(e) => println!("{:>3} {:<32} failed: {e}", r.index, r.spec.label),
                }
            }
        }
        Command::ParamCount {
            profile,
            strategy,
            depth,
            multiplier,
            exclude_bias,
            exclude_gn_affine,
        } => {
            let profile: CountProfile = profile.parse()?;
            let strategy: Strategy = strategy.parse()?;
            let multipliers = multiplier
                .iter()
                .map(|m| if m == "all" { Ok(ChannelMultiplier::ALL.to_vec()) } else { Ok(vec![m.parse()?]) })
                .collect::<Result<Vec<_>>>()?
                .concat();
            let opts = CountOptions {
                include_bias: !exclude_bias,
                include_gn_affine: !exclude_gn_affine,
            };
            for line in commands::param_count(profile, strategy, depth, &multipliers, opts)? {
                println!("{line}");
            }
        }
        Command::Diagnose {
            checkpoint,
            steps,
            inputs,
            seed,
            radius_probes,
            profile,
        } => {
            let ws = Workspace::new(flag, None);
            let req = DiagnoseRequest {
                profile: profile.parse::<DiagnoseProfile>()?,
                checkpoint,
                steps,
                inputs,
                seed,
                radius_probes,
            };
            let o = diagnose(&req, &ws)?;
            match o.max_final_radius() {
                Some(r) => println!("max spectral radius at the last iterate: {r:.4}"),
                None => println!("max spectral radius at the last iterate: n/a"),
            }
            if let Some(g) = o.reports.iter().filter_map(|r| r.implicit_gap).reduce(f64::max) {
                println!("max implicit gap: {g:.3e}");
            }
            for note in o.annotations() {
                println!("note: {note}");
            }
        }
        Command::GradCheck {
            config,
            trials,
            seed,
            break_vjp,
        } => {
            let cfg = config.as_deref().map(load).transpose()?;
            let ws = Workspace::new(flag, cfg.as_ref());
            let mut opts = cfg.map(|c| c.grad_check).unwrap_or_else(GradCheckOptions::default);
            if let Some(t) = trials {
                if t == 0 {
                    return Err(CliError::config("--trials must be at least 1").into());
                }
                opts.trials = t;
            }
            if let Some(s) = seed {
                opts.seed = s;
            }
            if break_vjp {
                opts.vjp_distortion = Some(0.9);
            }
            let report = commands::grad_check_command(&opts, &ws)?;
            println!(
                "{} trials: max relative error {:.3e} vs finite differences (limit {GRAD_CHECK_FD_LIMIT:e}), \
                 {:.3e} vs unrolled backprop (limit {GRAD_CHECK_UNROLL_LIMIT:e})",
                report.trials.len(),
                report.max_fd_rel(),
                report.max_unroll_rel()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are configuration errors; help and version succeed.
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match container_code(&e) {
                Some(code) => eprintln!("error [{code}]: {e:#}"),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
