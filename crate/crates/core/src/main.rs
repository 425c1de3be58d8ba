use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use taskfuse::adversary::NoiseKind;
use taskfuse::harness::{self, ExperimentConfig, ABLATION_SIZES};

#[derive(Parser)]
#[command(name = "taskfuse", version, about = "Multi-task model fusion over an adversarial MIMO multiple-access channel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run this seed only.
    #[arg(long)]
    seed: Option<u64>,
    /// Run this regime only: ideal, worst_sum_rate or worst_strongest_user.
    #[arg(long)]
    regime: Option<NoiseKind>,
    /// Output directory; overrides TASKFUSE_OUT and output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Materialise every task's splits.
    GenTasks(Common),
    /// Fine-tune every user and write checkpoints and task vectors.
    Finetune(Common),
    /// Per-regime link metrics.
    ChannelSim(Common),
    /// One fusion cell.
    Fuse {
        #[command(flatten)]
        common: Common,
        /// Comma-separated task ids; defaults to the first N tasks for the smallest configured N.
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
    },
    /// The full regime × combination × seed sweep.
    Run(Common),
    /// Defense mode × few-shot size grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Few-shot samples per class to try.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
    },
    /// Clean-merge accuracy over the lambda grid.
    LambdaSweep(Common),
    /// Rebuild aggregates and images from an existing results.csv.
    Plot(Common),
}

struct Setup {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn setup(c: &Common) -> Result<Setup> {
    let mut cfg = harness::load_config(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seeds = vec![s];
    }
    if let Some(r) = c.regime {
        cfg.regimes = vec![r];
    }
    if let Some(j) = c.jobs {
        if j == 0 {
            bail!("--jobs must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(j).build_global().context("worker pool")?;
    }
    let out = harness::resolve_output_dir(&cfg, c.out.as_deref());
    Ok(Setup { cfg, out })
}

fn checkpoints(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenTasks(c) => {
            let s = setup(&c)?;
            let dir = s.out.join("tasks");
            let n = harness::generate_tasks(&s.cfg, &dir)?;
            println!("wrote {n} tasks under {}", dir.display());
        }
        Command::Finetune(c) => {
            let s = setup(&c)?;
            let written = harness::finetune_all(&s.cfg, &checkpoints(&s.out))?;
            println!("wrote {} task vectors under {}", written.len(), checkpoints(&s.out).display());
        }
        Command::ChannelSim(c) => {
            let s = setup(&c)?;
            let rows = harness::channel_rows(&s.cfg)?;
            let path = s.out.join("channel.csv");
            harness::write_csv(&path, &rows)?;
            for r in &rows {
                println!("{} seed {}: snr {:.2} dB, mean mu {:.4}, sum rate {:.3}", r.regime, r.seed, r.snr_db, r.mean_mu, r.sum_rate);
            }
            println!("wrote {}", path.display());
        }
        Command::Fuse { common, tasks } => {
            let s = setup(&common)?;
            let regime = s.cfg.regimes[0];
            let seed = s.cfg.seeds[0];
            let members: Vec<usize> = if tasks.is_empty() {
                let n = *s.cfg.task_counts.iter().min().expect("validated");
                (0..n).collect()
            } else {
                tasks.iter().map(|t| s.cfg.task_index(t)).collect::<Result<_, _>>()?
            };
            let rows = harness::fuse_one(&s.cfg, regime, seed, &members, Some(&checkpoints(&s.out)))?;
            for r in &rows {
                println!("{} {} {}: mean normalized accuracy {:.4}", r.regime, r.combination_id, r.defense_mode, r.mean_normalized_accuracy);
            }
            let path = s.out.join("fuse.csv");
            harness::write_results(&path, &rows)?;
            println!("wrote {}", path.display());
        }
        Command::Run(c) => {
            let s = setup(&c)?;
            let out = harness::run_sweep(&s.cfg, Some(&checkpoints(&s.out)))?;
            harness::emit_outputs(&s.out, &out)?;
            println!("wrote {} rows to {}", out.rows.len(), s.out.join("results.csv").display());
            if !out.failures.is_empty() {
                eprintln!("{} cells failed; see {}", out.failures.len(), s.out.join("failures.csv").display());
            }
        }
        Command::Ablate { common, sizes } => {
            let s = setup(&common)?;
            let sizes = if sizes.is_empty() { ABLATION_SIZES.to_vec() } else { sizes };
            let limit = s.cfg.tasks.iter().map(|t| t.samples_fewshot_per_class).min().unwrap_or(0);
            if let Some(bad) = sizes.iter().find(|&&k| k == 0 || k > limit) {
                bail!("few-shot size {bad} outside [1, {limit}]");
            }
            let (rows, failures) = harness::run_ablation(&s.cfg, &sizes, Some(&checkpoints(&s.out)))?;
            if rows.is_empty() {
                bail!("every ablation cell failed");
            }
            harness::write_csv(&s.out.join("ablation.csv"), &rows)?;
            let summary = harness::summarize_ablation(&rows);
            harness::write_csv(&s.out.join("ablation_summary.csv"), &summary)?;
            for r in &summary {
                println!("{} {} k={}: {:.4}", r.regime, r.defense_mode, r.fewshot_per_class, r.mean);
            }
            if !failures.is_empty() {
                harness::write_csv(&s.out.join("ablation_failures.csv"), &failures)?;
                eprintln!("{} ablation cells failed", failures.len());
            }
        }
        Command::LambdaSweep(c) => {
            let s = setup(&c)?;
            let rows = harness::run_lambda_sweep(&s.cfg, Some(&checkpoints(&s.out)))?;
            harness::write_csv(&s.out.join("lambda_sweep.csv"), &rows)?;
            for (n, l) in harness::best_lambdas(&rows) {
                println!("N={n}: best lambda {l}");
            }
        }
        Command::Plot(c) => {
            let s = setup(&c)?;
            let n = harness::replot(&s.out)?;
            println!("wrote {n} images under {}", s.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
