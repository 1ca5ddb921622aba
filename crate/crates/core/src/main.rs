use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lambda_greedy::error::{Error, Result};
use lambda_greedy::exact::{
    finite_variance_check, lambda_return_values, squared_return_model, stationary_distribution,
};
use lambda_greedy::greedy::LambdaSchedule;
use lambda_greedy::harness::{
    default_alpha_grid, default_eta_grid, ringworld_suite, run_averaged, sweep, write_results, write_sweep, Experiment,
    ExperimentConfig, SweepCriterion,
};
use lambda_greedy::mdp::StateFn;

#[derive(Parser)]
#[command(name = "lambda-greedy", version, about = "Ring-world experiments for state-based trace adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one config and write errors.csv, final_lambda.csv and manifest.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sweep step sizes for one config and write the grid plus the best cell's results.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated step sizes (default 0.1·2^j, j = −6..6).
        #[arg(long, value_delimiter = ',')]
        alphas: Option<Vec<f64>>,
        /// Comma-separated auxiliary ratios (default eleven powers of two).
        #[arg(long, value_delimiter = ',')]
        etas: Option<Vec<f64>>,
        #[arg(long, value_enum, default_value = "auc")]
        criterion: Criterion,
        #[command(flatten)]
        common: Common,
    },
    /// Run the full ring-world matrix, one subdirectory per config.
    Suite {
        #[command(flatten)]
        common: Common,
    },
    /// Print exact values, second moments, variances and the stationary distribution.
    Oracle {
        #[arg(long)]
        config: PathBuf,
    },
    /// Report the finite-variance check for a config's trace parameters.
    CheckVariance {
        #[arg(long)]
        config: PathBuf,
        /// Constant λ̄ of the squared-return recursion.
        #[arg(long, default_value_t = 1.0)]
        lambda_bar: f64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Criterion {
    Auc,
    Final,
}

#[derive(Args)]
struct Common {
    /// Base seed; run i uses seed + i.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "results")]
    out: PathBuf,
    /// Worker threads for independent runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
}

impl Common {
    fn apply(&self, config: &mut ExperimentConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            config.base_seed = seed;
        }
        if let Some(runs) = self.runs {
            config.n_runs = runs;
        }
        if let Some(steps) = self.steps {
            config.n_steps = Some(steps);
        }
        if let Some(alpha) = self.alpha {
            config.alpha = alpha;
        }
        if let Some(eta) = self.eta {
            config.eta = eta;
        }
        config.validate()
    }
}

/// Reads a config, reporting syntax errors as `path:line:column: message`.
fn load_config(path: &Path) -> std::result::Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    match ExperimentConfig::from_json(&text) {
        Ok(c) => Ok(c),
        Err(Error::Json(e)) => Err(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())),
        Err(e) => Err(format!("{}: {e}", path.display())),
    }
}

fn run_one(config: &ExperimentConfig, out: &Path, jobs: usize) -> Result<f64> {
    let avg = run_averaged(config, jobs)?;
    write_results(out, config, &avg)?;
    Ok(avg.area_under_curve())
}

fn print_oracle(config: &ExperimentConfig) -> Result<()> {
    let exp = Experiment::new(config)?;
    let d = stationary_distribution(&exp.model, &exp.behavior)?;
    println!("state,v,m2,variance,d");
    for s in 0..exp.model.n_states() {
        println!("{s},{},{},{},{}", exp.exact.v[s], exp.exact.m2[s], exp.exact.reported_variance(s), d[s]);
    }
    Ok(())
}

fn check_variance(config: &ExperimentConfig, lambda_bar: f64) -> Result<bool> {
    let exp = Experiment::new(config)?;
    let n = exp.model.n_states();
    let lambda = match config.schedule {
        LambdaSchedule::Fixed { value } => value,
        _ => 1.0,
    };
    let lambda = StateFn::constant(n, lambda)?;
    let lambda_bar = StateFn::constant(n, lambda_bar)?;
    let zeros = vec![0.0; n];
    let v = lambda_return_values(&exp.model, &exp.target, &exp.gamma, &lambda, &zeros)?;
    let sq = squared_return_model(
        &exp.model,
        &exp.target,
        &exp.behavior,
        &exp.gamma,
        &lambda,
        &lambda_bar,
        &zeros,
        v.as_slice(),
    )?;
    let check = finite_variance_check(&sq);
    println!(
        "sigma_max={} spectral_radius={} {}",
        check.max_singular_value,
        check.spectral_radius,
        if check.passes { "PASS" } else { "FAIL" }
    );
    Ok(check.passes)
}

fn execute(command: Command) -> std::result::Result<(), String> {
    let fail = |e: Error| e.to_string();
    match command {
        Command::Run { config, common } => {
            let mut c = load_config(&config)?;
            common.apply(&mut c).map_err(fail)?;
            let auc = run_one(&c, &common.out, common.jobs).map_err(fail)?;
            println!("{}: mean error {auc}", c.name);
        }
        Command::Sweep { config, alphas, etas, criterion, common } => {
            let mut c = load_config(&config)?;
            common.apply(&mut c).map_err(fail)?;
            let alphas = alphas.unwrap_or_else(default_alpha_grid);
            let etas = etas.unwrap_or_else(default_eta_grid);
            let criterion = match criterion {
                Criterion::Auc => SweepCriterion::AreaUnderCurve,
                Criterion::Final => SweepCriterion::FinalError,
            };
            let result = sweep(&c, &alphas, &etas, criterion, common.jobs).map_err(fail)?;
            write_sweep(&common.out, &result).map_err(fail)?;
            let best = result.best_cell();
            let best_config = ExperimentConfig { alpha: best.alpha, eta: best.eta, ..c };
            run_one(&best_config, &common.out.join("best"), common.jobs).map_err(fail)?;
            println!("best alpha={} eta={} score={}", best.alpha, best.eta, best.score);
        }
        Command::Suite { common } => {
            let mut index = csv::Writer::from_path({
                std::fs::create_dir_all(&common.out).map_err(|e| e.to_string())?;
                common.out.join("summary.csv")
            })
            .map_err(|e| e.to_string())?;
            index.write_record(["name", "mean_error"]).map_err(|e| e.to_string())?;
            for mut c in ringworld_suite(common.seed.unwrap_or(0), 100) {
                common.apply(&mut c).map_err(fail)?;
                let auc = run_one(&c, &common.out.join(&c.name), common.jobs).map_err(fail)?;
                index.write_record([c.name.clone(), auc.to_string()]).map_err(|e| e.to_string())?;
                println!("{}: mean error {auc}", c.name);
            }
            index.flush().map_err(|e| e.to_string())?;
        }
        Command::Oracle { config } => print_oracle(&load_config(&config)?).map_err(fail)?,
        Command::CheckVariance { config, lambda_bar } => {
            check_variance(&load_config(&config)?, lambda_bar).map_err(fail)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
