use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fin_cli::check::run_checks;
use fin_cli::config::{KChoice, RunConfig, SimulateConfig};
use fin_cli::simulate::run_simulation;
use fin_cli::{auto_select_k, exit_code, load_dataset, run, CliError};
use fin_core::simulation::{Density, Scenario};

#[derive(Parser)]
#[command(name = "fin", version, about = "Latent factor regression for main effects and interactions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the model to a CSV data set.
    Fit(FitArgs),
    /// Run the simulation benchmark.
    Simulate(SimArgs),
    /// Run the numeric self-checks.
    Check {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Report the number of factors chosen by the explained-variation rule.
    SelectK(DataArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// TOML configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    covariate_file: Option<PathBuf>,
    #[arg(long)]
    lod_file: Option<PathBuf>,
    #[arg(long)]
    response: Option<String>,
    #[arg(long, value_delimiter = ',')]
    exposures: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    log10: Option<Vec<String>>,
    #[arg(long)]
    no_standardize: bool,
    #[arg(long)]
    k_threshold: Option<f64>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Number of factors or "auto".
    #[arg(long)]
    k: Option<KChoice>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    interaction_level: Option<f64>,
    /// Polynomial order of the latent regression.
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    record_lambda: bool,
    /// Run every block on one thread.
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,
    #[arg(long)]
    k_true: Option<usize>,
    #[arg(long, value_parser = parse_density)]
    density: Option<Density>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    k: Option<KChoice>,
    #[arg(long)]
    level: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    match s {
        "factor" => Ok(Scenario::Factor),
        "linear" => Ok(Scenario::Linear),
        "independent" => Ok(Scenario::Independent),
        _ => Err(format!("unknown scenario {s:?} (factor, linear, independent)")),
    }
}

fn parse_density(s: &str) -> Result<Density, String> {
    match s {
        "sparse" => Ok(Density::Sparse),
        "dense" => Ok(Density::Dense),
        _ => Err(format!("unknown density {s:?} (sparse, dense)")),
    }
}

fn base_config(a: &DataArgs) -> anyhow::Result<RunConfig> {
    let mut c = match &a.config {
        Some(p) => RunConfig::from_toml_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &a.data {
        c.data = v.clone();
    }
    if let Some(v) = &a.covariate_file {
        c.covariate_file = Some(v.clone());
    }
    if let Some(v) = &a.lod_file {
        c.lod_file = Some(v.clone());
    }
    if let Some(v) = &a.response {
        c.response = v.clone();
    }
    if let Some(v) = &a.exposures {
        c.exposures = v.clone();
    }
    if let Some(v) = &a.covariates {
        c.covariates = v.clone();
    }
    if let Some(v) = &a.log10 {
        c.log10 = v.clone();
    }
    if a.no_standardize {
        c.standardize = false;
    }
    if let Some(v) = a.k_threshold {
        c.k_threshold = v;
    }
    Ok(c)
}

fn fit_config(a: &FitArgs) -> anyhow::Result<RunConfig> {
    let mut c = base_config(&a.data)?;
    if let Some(v) = &a.output {
        c.output = v.clone();
    }
    if let Some(v) = a.k {
        c.k = v;
    }
    if let Some(v) = a.chains {
        c.n_chains = v;
    }
    if let Some(v) = a.level {
        c.level = v;
    }
    if let Some(v) = a.interaction_level {
        c.interaction_level = Some(v);
    }
    if let Some(v) = a.order {
        c.higher_order = v;
    }
    if let Some(v) = a.iterations {
        c.sampler.n_iter = v;
    }
    if let Some(v) = a.burn_in {
        c.sampler.n_burn = v;
    }
    if let Some(v) = a.seed {
        c.sampler.seed = v;
    }
    if a.record_lambda {
        c.record_lambda = true;
    }
    if a.serial {
        c.sampler.parallel = false;
    }
    Ok(c)
}

fn sim_config(a: &SimArgs) -> anyhow::Result<SimulateConfig> {
    let mut c = match &a.config {
        Some(p) => SimulateConfig::from_toml_file(p)?,
        None => SimulateConfig::default(),
    };
    let s = &mut c.scenario;
    if let Some(v) = a.p {
        s.p = v;
    }
    if let Some(v) = a.n_train {
        s.n_train = v;
    }
    if let Some(v) = a.n_test {
        s.n_test = v;
    }
    if let Some(v) = a.scenario {
        s.scenario = v;
    }
    if let Some(v) = a.k_true {
        s.k_true = Some(v);
    }
    if let Some(v) = a.density {
        s.density = v;
    }
    if let Some(v) = a.noise_sd {
        s.noise_sd = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = &a.output {
        c.output = v.clone();
    }
    if let Some(v) = a.replicates {
        c.replicates = v;
    }
    if let Some(v) = a.k {
        c.k = v;
    }
    if let Some(v) = a.level {
        c.level = v;
    }
    if let Some(v) = a.iterations {
        c.sampler.n_iter = v;
    }
    if let Some(v) = a.burn_in {
        c.sampler.n_burn = v;
    }
    Ok(c)
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Fit(a) => {
            let cfg = fit_config(&a)?;
            let s = run(&cfg)?;
            println!(
                "k = {}, {} draws, min pooled ESS {:.0}; results in {}",
                s.k,
                s.n_draws,
                s.diagnostics.min_pooled_ess,
                s.output.display()
            );
        }
        Command::Simulate(a) => {
            let cfg = sim_config(&a)?;
            let results = run_simulation(&cfg)?;
            println!("seed  test_mse  main_mse  frobenius  tp_main  tn_main  tp_int  tn_int  coverage  min_ess");
            for r in &results {
                let m = &r.metrics;
                println!(
                    "{:<5} {:>8.3} {:>9.4} {:>10.3} {:>8.2} {:>8.2} {:>7.2} {:>7.2} {:>9.3} {:>8.0}",
                    r.seed,
                    m.test_mse,
                    m.main_mse,
                    m.frobenius,
                    m.tp_main,
                    m.tn_main,
                    m.tp_int,
                    m.tn_int,
                    r.predictive_coverage,
                    r.min_ess
                );
            }
            println!("results in {}", cfg.output.display());
        }
        Command::Check { seed } => {
            let results = run_checks(seed);
            let failed = results.iter().filter(|c| !c.pass).count();
            for c in &results {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if failed > 0 {
                return Err(CliError::CheckFailed(failed).into());
            }
        }
        Command::SelectK(a) => {
            let cfg = base_config(&a)?;
            if cfg.data.as_os_str().is_empty() || cfg.response.is_empty() {
                return Err(CliError::Config("select-k needs --data and --response".into()).into());
            }
            let data = load_dataset(&cfg).context("loading data")?;
            let sel = auto_select_k(&data, cfg.k_threshold)?;
            println!("k = {} ({:.1}% of the variation)", sel.k, 100.0 * sel.explained);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
