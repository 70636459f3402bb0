use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use dpzero::harness::{
    read_config, run_experiment, sweep_dimension, write_sweep, ExperimentConfig, CONFIG_KEYS,
};
use dpzero::optimizers::{
    derive_params_alg1_rank, derive_params_alg1_smooth, derive_params_dpzero, derive_params_zo_gd, Algorithm,
    HyperParams,
};
use dpzero::validation::{run_suite, Sampler, SuiteOptions};
use dpzero::Error;

/// Differentially private zeroth-order optimization experiments.
#[derive(Parser, Debug)]
#[command(name = "dpzero", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every seed of a config; write traces and a summary.
    Run(ConfigArgs),
    /// Repeat a config across dimensions and fit log-log slopes.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated dimensions.
        #[arg(long, value_delimiter = ',', required = true)]
        dims: Vec<usize>,
        /// Comma-separated algorithms (default: alg1,dpzero).
        #[arg(long, value_delimiter = ',')]
        algorithms: Vec<String>,
    },
    /// Print derived hyperparameters without running.
    Params {
        #[command(flatten)]
        config: ConfigArgs,
        /// Print every derivation instead of the configured algorithm's.
        #[arg(long)]
        all: bool,
    },
    /// Run the Monte Carlo validation suite; JSON lines on stdout.
    Validate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tenfold fewer samples.
        #[arg(long)]
        quick: bool,
        /// Use a broken direction sampler (negative test).
        #[arg(long)]
        corrupt_sampler: bool,
    },
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set budget.eps=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Replace the seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long)]
    force: bool,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_usage_error() || matches!(e, Error::WouldOverwrite { .. }) {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn keys_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (JSON paths, settable with --set):\n");
    for (k, unit) in CONFIG_KEYS {
        s.push_str(&format!("  {k:<width$}  {unit}\n"));
    }
    s
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, Failure> {
    let path: &Path = &args.config;
    let mut cfg = match read_config(path) {
        Ok(c) => c,
        // a missing or unreadable config is a usage problem
        Err(e @ Error::Io { .. }) => return Err(Failure::Usage(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let mut sets = args.sets.clone();
    if let Some(seed) = args.seed {
        sets.push(format!("seeds=[{seed}]"));
    }
    if !sets.is_empty() {
        cfg = cfg.with_overrides(&sets)?;
    }
    if let Some(out) = &args.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn print_params(label: &str, hp: &HyperParams) {
    let v = serde_json::json!({
        "derivation": label,
        "algorithm": hp.algorithm,
        "alpha": hp.alpha,
        "T": hp.iterations,
        "lambda": hp.lambda,
        "C": if hp.clip.is_finite() { Some(hp.clip) } else { None },
        "sigma": hp.sigma,
        "smoothed_lipschitz": hp.smoothed_lipschitz,
    });
    println!("{v}");
}

fn cmd_run(args: &ConfigArgs) -> Result<(), Failure> {
    let cfg = load(args)?;
    if args.print_config {
        println!("{}", cfg.to_json_pretty());
        return Ok(());
    }
    let started = Instant::now();
    let exp = run_experiment(&cfg, args.force)?;
    for t in &exp.traces {
        let f = t.footer.as_ref().expect("completed run");
        println!(
            "seed {:>6}  tau {:>6}  final_grad_norm_sq {:.6e}  clips {}",
            t.header.seed, f.tau, f.final_grad_norm_sq, f.clip_total
        );
    }
    println!(
        "mean_final_grad_norm_sq {:.6e} +/- {:.2e} ({} seeds)",
        exp.summary.mean_final_grad_norm_sq,
        exp.summary.stderr,
        exp.summary.seeds.len()
    );
    eprintln!(
        "wrote {} ({:.2}s)",
        cfg.output_dir.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_sweep(args: &ConfigArgs, dims: &[usize], algorithms: &[String]) -> Result<(), Failure> {
    let cfg = load(args)?;
    if args.print_config {
        println!("{}", cfg.to_json_pretty());
        return Ok(());
    }
    let algs: Vec<Algorithm> = if algorithms.is_empty() {
        vec![Algorithm::Alg1, Algorithm::DpZero]
    } else {
        algorithms
            .iter()
            .map(|a| a.parse::<Algorithm>())
            .collect::<Result<_, _>>()?
    };
    let table = sweep_dimension(&cfg, dims, &algs)?;
    let path = write_sweep(&table, &cfg.output_dir, args.force)?;
    println!("{:<8} {:>8} {:>16} {:>12}", "alg", "d", "mean", "stderr");
    for r in &table.rows {
        println!(
            "{:<8} {:>8} {:>16.6e} {:>12.2e}",
            r.algorithm.as_str(),
            r.d,
            r.summary.mean_final_grad_norm_sq,
            r.summary.stderr
        );
    }
    for s in &table.slopes {
        match s.slope {
            Some(v) => println!("slope {:<8} {v:.4}", s.algorithm.as_str()),
            None => println!("slope {:<8} n/a", s.algorithm.as_str()),
        }
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn cmd_params(args: &ConfigArgs, all: bool) -> Result<(), Failure> {
    let cfg = load(args)?;
    if args.print_config {
        println!("{}", cfg.to_json_pretty());
        return Ok(());
    }
    let summary = cfg.problem.summary(cfg.x0.as_deref())?;
    if all {
        let b = &cfg.budget;
        print_params("alg1_smooth", &derive_params_alg1_smooth(&summary, b)?);
        print_params("alg1_rank", &derive_params_alg1_rank(&summary, b)?);
        print_params("dpzero", &derive_params_dpzero(&summary, b)?);
        print_params("zo-gd", &derive_params_zo_gd(&summary, b)?);
    } else {
        print_params("effective", &cfg.hyperparams(&summary)?);
    }
    Ok(())
}

fn cmd_validate(seed: u64, quick: bool, corrupt: bool) -> Result<(), Failure> {
    let opts = SuiteOptions {
        seed,
        quick,
        sampler: if corrupt { Sampler::Unnormalized } else { Sampler::Sphere },
    };
    let reports = run_suite(&opts)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!("{}", r.to_json_line());
        if !r.pass {
            failed.push(r.check.clone());
        }
    }
    if failed.is_empty() {
        eprintln!("all {} checks passed", reports.len());
        Ok(())
    } else {
        Err(Failure::Runtime(format!("failed checks: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    let help = keys_help();
    let mut cmd = Cli::command().after_long_help(help.clone());
    for name in ["run", "sweep", "params"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(help.clone()));
    }
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep {
            config,
            dims,
            algorithms,
        } => cmd_sweep(config, dims, algorithms),
        Command::Params { config, all } => cmd_params(config, *all),
        Command::Validate {
            seed,
            quick,
            corrupt_sampler,
        } => cmd_validate(*seed, *quick, *corrupt_sampler),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
