//! Command-line front end: `train`, `sweep`, `verify` and `aggregate`.
//!
//! Exit codes: 0 on success, 1 when a run, check or aggregation fails, 2 for
//! usage and configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sqrt_trust::envs::EnvName;
use sqrt_trust::learners::Algorithm;
use sqrt_trust::runner::verify::{run_checks, VerifyOptions, CHECKS};
use sqrt_trust::runner::{
    aggregate_dir, expand_grid, parse_axis, resolve_output_root, run_sweep, train_seeds, write_sweep_summary,
    ConfigMap, ExperimentConfig, RunStatus, SweepAxis,
};

#[derive(Parser)]
#[command(name = "sqrt-trust", version, about = "Square-root-ratio trust-region policy optimization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration under each requested seed.
    Train(RunArgs),
    /// Train the Cartesian product of one or more hyperparameter axes.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Grid axis as `axis=v1,v2,...`; axes are epsilon, beta, lr, batch_size, entropy_coef.
        #[arg(long = "grid", value_name = "AXIS=VALUES", required = true)]
        grid: Vec<String>,
    },
    /// Run the numerical verification suite.
    Verify {
        /// Print the check names and exit.
        #[arg(long)]
        list: bool,
        /// Run only the named checks (repeatable).
        #[arg(long = "only", value_name = "NAME")]
        only: Vec<String>,
        /// Scale the closed-form Bhattacharyya coefficient by (1 + DELTA).
        #[arg(long = "perturb-bc", value_name = "DELTA", default_value_t = 0.0)]
        perturb_bc: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate completed runs into iqm_report.csv and curves.csv.
    Aggregate {
        /// Directory searched for runs (default: output root).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where the reports go (default: the searched directory).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

fn env_name(s: &str) -> std::result::Result<String, String> {
    s.parse::<EnvName>().map(|e| e.as_str().to_string()).map_err(|e| e.to_string())
}

fn algo_name(s: &str) -> std::result::Result<String, String> {
    s.parse::<Algorithm>().map(|a| a.as_str().to_string()).map_err(|e| e.to_string())
}

#[derive(Args)]
struct RunArgs {
    /// Key/value configuration file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = env_name)]
    env: Option<String>,
    #[arg(long, value_parser = algo_name)]
    algo: Option<String>,
    /// Seed list: `k`, `a,b,c` or inclusive range `a..b`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long = "lambda-pen")]
    lambda_pen: Option<f64>,
    #[arg(long)]
    regularizer: Option<String>,
    #[arg(long = "entropy-coef")]
    entropy_coef: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "rollout-len")]
    rollout_len: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "gae-lambda")]
    gae_lambda: Option<f64>,
    /// Saturation bound for the log-ratio, or `none`.
    #[arg(long = "saturation-c")]
    saturation_c: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "minibatch-size")]
    minibatch_size: Option<usize>,
    /// Comma-separated hidden widths, e.g. `64,64`.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long = "eval-every")]
    eval_every: Option<u64>,
    #[arg(long = "eval-episodes")]
    eval_episodes: Option<usize>,
    #[arg(long = "allow-zero-beta")]
    allow_zero_beta: bool,
    /// Worker threads for independent seeds.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    /// Config file first, then every flag that was given on top of it.
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut map = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                ConfigMap::parse(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => ConfigMap::default(),
        };
        // A flag replaces whichever of the two synonyms the file used.
        if self.batch_size.is_some() || self.rollout_len.is_some() {
            map.remove("batch_size");
            map.remove("rollout_len");
        }
        let mut set = |key: &str, value: Option<String>| -> Result<()> {
            if let Some(v) = value {
                map.set(key, v)?;
            }
            Ok(())
        };
        let f = |v: Option<f64>| v.map(|x| format!("{x:?}"));
        set("env", self.env.clone())?;
        set("algo", self.algo.clone())?;
        set("seeds", self.seeds.clone())?;
        set("steps", self.steps.map(|v| v.to_string()))?;
        set("epsilon", f(self.epsilon))?;
        set("beta", f(self.beta))?;
        set("lambda_pen", f(self.lambda_pen))?;
        set("regularizer", self.regularizer.clone())?;
        set("entropy_coef", f(self.entropy_coef))?;
        set("lr", f(self.lr))?;
        set("gamma", f(self.gamma))?;
        set("gae_lambda", f(self.gae_lambda))?;
        set("saturation_c", self.saturation_c.clone())?;
        set("epochs", self.epochs.map(|v| v.to_string()))?;
        set("minibatch_size", self.minibatch_size.map(|v| v.to_string()))?;
        set("hidden", self.hidden.clone())?;
        set("eval_every", self.eval_every.map(|v| v.to_string()))?;
        set("eval_episodes", self.eval_episodes.map(|v| v.to_string()))?;
        if self.allow_zero_beta {
            set("allow_zero_beta", Some("true".into()))?;
        }
        set("out", self.out.as_ref().map(|p| p.display().to_string()))?;
        set("batch_size", self.batch_size.map(|v| v.to_string()))?;
        set("rollout_len", self.rollout_len.map(|v| v.to_string()))?;
        Ok(ExperimentConfig::from_map(&map)?)
    }

    fn root(&self, cfg: &ExperimentConfig) -> PathBuf {
        resolve_output_root(cfg.output_root.as_deref())
    }
}

/// Marks an error as a usage/configuration problem (exit 2).
struct Usage(anyhow::Error);

fn cmd_train(args: &RunArgs) -> std::result::Result<bool, Usage> {
    let cfg = args.resolve().map_err(Usage)?;
    let root = args.root(&cfg);
    let outcomes = train_seeds(&cfg, &root, args.jobs).map_err(|e| Usage(e.into()))?;
    let mut ok = true;
    for o in &outcomes {
        match o.status {
            RunStatus::Completed => println!(
                "seed {}: completed, final eval {}  ({})",
                o.seed,
                o.final_eval.map_or("n/a".into(), |v| format!("{v:.2}")),
                o.dir.display()
            ),
            RunStatus::Failed => {
                ok = false;
                println!("seed {}: FAILED: {}", o.seed, o.error.as_deref().unwrap_or("unknown error"));
            }
        }
    }
    Ok(ok)
}

fn cmd_sweep(args: &RunArgs, grid: &[String]) -> std::result::Result<bool, Usage> {
    let cfg = args.resolve().map_err(Usage)?;
    let axes = grid
        .iter()
        .map(|g| parse_axis(g))
        .collect::<sqrt_trust::Result<Vec<_>>>()
        .map_err(|e| Usage(e.into()))?;
    let cells = expand_grid(&cfg, &axes).map_err(|e| Usage(e.into()))?;
    let root = args.root(&cfg);
    log::info!("sweep: {} cells x {} seeds under {}", cells.len(), cfg.seeds.len(), root.display());
    let run = || -> Result<bool> {
        let summaries = run_sweep(&cells, &root, args.jobs)?;
        fs::create_dir_all(&root).with_context(|| format!("creating {}", root.display()))?;
        let path = root.join("sweep_summary.csv");
        let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        let names: Vec<SweepAxis> = axes.iter().map(|(a, _)| *a).collect();
        write_sweep_summary(std::io::BufWriter::new(file), &names, &summaries)?;
        let failed: usize = summaries
            .iter()
            .map(|s| s.outcomes.iter().filter(|o| o.status == RunStatus::Failed).count())
            .sum();
        println!("{} cells written to {}", summaries.len(), path.display());
        if failed > 0 {
            println!("{failed} seed runs failed");
        }
        Ok(failed == 0)
    };
    run().or_else(|e| {
        eprintln!("error: {e:#}");
        Ok(false)
    })
}

fn cmd_verify(list: bool, only: &[String], perturb_bc: f64, seed: u64) -> std::result::Result<bool, Usage> {
    if list {
        for (name, description, _) in CHECKS {
            println!("{name:<20} {description}");
        }
        return Ok(true);
    }
    if let Some(bad) = only.iter().find(|o| !CHECKS.iter().any(|c| c.0 == o.as_str())) {
        return Err(Usage(anyhow::anyhow!("unknown check '{bad}' (see --list)")));
    }
    let opts = VerifyOptions {
        seed,
        bc_perturbation: perturb_bc,
    };
    let results = run_checks(&opts, only);
    for r in &results {
        println!("{:<4} {:<20} {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} checks passed", results.len() - failed, results.len());
    Ok(failed == 0)
}

fn cmd_aggregate(out: Option<&Path>, dest: Option<&Path>) -> Result<bool> {
    let root = resolve_output_root(out);
    if !root.is_dir() {
        bail!("no run directory at {}", root.display());
    }
    let dest = dest.map_or_else(|| root.clone(), Path::to_path_buf);
    let report = aggregate_dir(&root, &dest)?;
    for (path, why) in &report.skipped {
        eprintln!("warning: skipped {}: {why}", path.display());
    }
    for row in &report.rows {
        println!(
            "{} {} ent={} beta_or_eps={}: IQM {:.2} over {} seeds",
            row.label.env, row.label.algorithm, row.label.entropy_coef, row.label.beta_or_eps, row.iqm, row.n_seeds
        );
    }
    println!("reports written to {}", dest.display());
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Sweep { run, grid } => cmd_sweep(run, grid),
        Command::Verify {
            list,
            only,
            perturb_bc,
            seed,
        } => cmd_verify(*list, only, *perturb_bc, *seed),
        Command::Aggregate { out, dest } => cmd_aggregate(out.as_deref(), dest.as_deref()).or_else(|e| {
            eprintln!("error: {e:#}");
            Ok(false)
        }),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
