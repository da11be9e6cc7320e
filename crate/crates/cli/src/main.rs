use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use wesper::distributions::DistributionSpec;
use wesper::{
    build_grid, density_curve, estimate, find_support_mixture, sample_spectrum, EstimationConfig, GradientMode,
    GridStrategy, Noise, SimulationConfig, SpectralDistribution, WeightDistribution, WeightInput,
};

mod error;
mod io;

use error::{CliError, CliResult};
use io::{num, RunManifest};

#[derive(Parser)]
#[command(name = "wesper", version, about = "Spectra of weighted sample covariance matrices")]
struct Cli {
    /// Maximum number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the eigenvalues of one weighted sample covariance matrix.
    Sample(SampleArgs),
    /// Support of the limiting spectral law, as JSON.
    Support(SupportArgs),
    /// Limiting density on an arcsine grid, as CSV.
    Density(DensityArgs),
    /// Estimate the population spectrum from observed eigenvalues.
    Estimate(EstimateArgs),
}

#[derive(Args, Debug)]
struct PopulationArgs {
    /// Population spectrum as `atom:weight` pairs, e.g. `1:0.2,3:0.4,10:0.4`.
    #[arg(long, conflicts_with = "h_file")]
    h: Option<String>,
    /// JSON distribution (`{"kind":"dirac",...}`) or an `estimate` result.
    #[arg(long)]
    h_file: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WeightKindArg {
    Identity,
    Ewma,
    Uniform,
    Dirac,
}

#[derive(Args, Debug)]
struct WeightArgs {
    /// Kind of weight law.
    #[arg(long, value_enum, default_value = "identity")]
    d_kind: WeightKindArg,
    /// Parameter of the ewma and uniform kinds.
    #[arg(long)]
    alpha: Option<f64>,
    /// Atoms of the dirac kind as `atom:weight` pairs.
    #[arg(long)]
    d_atoms: Option<String>,
    /// JSON weight law; overrides the other weight options.
    #[arg(long)]
    d_file: Option<String>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum NoiseArg {
    Gaussian,
    Student,
}

#[derive(Args, Debug)]
struct NoiseArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    noise: NoiseArg,
    /// Degrees of freedom of the student noise.
    #[arg(long, default_value_t = 20.0)]
    nu: f64,
}

impl NoiseArgs {
    fn noise(&self) -> Noise {
        match self.noise {
            NoiseArg::Gaussian => Noise::Gaussian,
            NoiseArg::Student => Noise::Student { nu: self.nu },
        }
    }
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    population: PopulationArgs,
    #[command(flatten)]
    weights: WeightArgs,
    #[command(flatten)]
    noise: NoiseArgs,
    /// Dimension.
    #[arg(short = 'n', long)]
    n: usize,
    /// Concentration ratio n/N.
    #[arg(short = 'c', long)]
    c: f64,
    #[arg(long, env = "WESPER_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SupportArgs {
    #[command(flatten)]
    population: PopulationArgs,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(short = 'c', long)]
    c: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StrategyArg {
    Uniform,
    Frequentist,
    Mixed,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Interior grid points shared between the support intervals.
    #[arg(long, default_value_t = wesper::grid::DEFAULT_OMEGA)]
    omega: usize,
    /// Defaults to mixed when sample eigenvalues are available, uniform
    /// otherwise.
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long, default_value_t = wesper::grid::DEFAULT_MU)]
    mu: f64,
}

impl GridArgs {
    fn strategy(&self, have_eigs: bool) -> GridStrategy {
        match (self.strategy, have_eigs) {
            (Some(StrategyArg::Uniform), _) | (None, false) => GridStrategy::Uniform,
            (Some(StrategyArg::Frequentist), _) => GridStrategy::Frequentist,
            (Some(StrategyArg::Mixed), _) | (None, true) => GridStrategy::Mixed { mu: self.mu },
        }
    }
}

#[derive(Args, Debug)]
struct DensityArgs {
    #[command(flatten)]
    population: PopulationArgs,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(short = 'c', long)]
    c: f64,
    #[command(flatten)]
    grid: GridArgs,
    /// Sample eigenvalues (CSV) for the frequentist and mixed strategies.
    #[arg(long)]
    eigs: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum GradientArg {
    Analytic,
    FiniteDifference,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    /// Observed eigenvalues (CSV, first column).
    #[arg(long)]
    eigs: String,
    /// Observed weights (CSV, first column), `N = round(n / c)` values.
    #[arg(long)]
    weights: Option<String>,
    #[command(flatten)]
    weight_law: WeightArgs,
    #[arg(short = 'c', long)]
    c: f64,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    #[arg(long, default_value_t = 4)]
    replicas: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, value_enum, default_value = "analytic")]
    gradient: GradientArg,
    #[command(flatten)]
    noise: NoiseArgs,
    #[command(flatten)]
    grid: GridArgs,
    /// Clip observed eigenvalues above this quantile before fitting.
    #[arg(long)]
    clip_quantile: Option<f64>,
    /// Stop after the optimisation, without support and density.
    #[arg(long)]
    skip_density: bool,
    #[arg(long, env = "WESPER_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_pairs(text: &str, what: &str) -> CliResult<(Vec<f64>, Vec<f64>)> {
    let mut atoms = Vec::new();
    let mut weights = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (a, w) = item
            .split_once(':')
            .ok_or_else(|| CliError::usage(format!("{what}: expected atom:weight, got {item:?}")))?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::usage(format!("{what}: cannot parse {s:?}")))
        };
        atoms.push(parse(a)?);
        weights.push(parse(w)?);
    }
    if atoms.is_empty() {
        return Err(CliError::usage(format!("{what}: no atoms given")));
    }
    Ok((atoms, weights))
}

fn population(args: &PopulationArgs, manifest: &mut RunManifest) -> CliResult<SpectralDistribution> {
    if let Some(text) = &args.h {
        let (atoms, weights) = parse_pairs(text, "--h")?;
        return Ok(SpectralDistribution::new(atoms, weights)?);
    }
    let path = args
        .h_file
        .as_deref()
        .ok_or_else(|| CliError::usage("a population spectrum is required (--h or --h-file)"))?;
    let bytes = io::read_bytes(path)?;
    manifest.record_input(path, &bytes);
    let doc = io::parse_json(path, &bytes)?;
    if let Some(tau) = doc.get("tau_hat") {
        let tau: Vec<f64> =
            serde_json::from_value(tau.clone()).map_err(|e| CliError::parse(path, format!("tau_hat: {e}")))?;
        return Ok(SpectralDistribution::uniform(tau)?);
    }
    let spec: DistributionSpec = serde_json::from_value(doc).map_err(|e| CliError::parse(path, e.to_string()))?;
    Ok(SpectralDistribution::from_spec(&spec)?)
}

fn weight_law(args: &WeightArgs, manifest: &mut RunManifest) -> CliResult<WeightDistribution> {
    if let Some(path) = &args.d_file {
        let bytes = io::read_bytes(path)?;
        manifest.record_input(path, &bytes);
        let spec: DistributionSpec =
            serde_json::from_slice(&bytes).map_err(|e| CliError::parse(path, e.to_string()))?;
        return Ok(WeightDistribution::from_spec(&spec)?);
    }
    let alpha = || args.alpha.ok_or_else(|| CliError::usage("--alpha is required for this weight kind"));
    Ok(match args.d_kind {
        WeightKindArg::Identity => WeightDistribution::identity(),
        WeightKindArg::Ewma => WeightDistribution::ewma(alpha()?)?,
        WeightKindArg::Uniform => WeightDistribution::uniform(alpha()?)?,
        WeightKindArg::Dirac => {
            let text = args
                .d_atoms
                .as_deref()
                .ok_or_else(|| CliError::usage("--d-atoms is required for dirac weights"))?;
            let (atoms, weights) = parse_pairs(text, "--d-atoms")?;
            WeightDistribution::dirac(atoms, weights)?
        }
    })
}

fn spec_json<T: serde::Serialize>(spec: &T) -> Value {
    serde_json::to_value(spec).expect("distribution spec serialises")
}

fn cmd_sample(args: &SampleArgs) -> CliResult<String> {
    let seed = args.seed.unwrap_or(0);
    let mut manifest = RunManifest::new("sample", Some(seed), Value::Null);
    let h = population(&args.population, &mut manifest)?;
    let d = weight_law(&args.weights, &mut manifest)?;
    let noise = args.noise.noise();
    let config = SimulationConfig {
        n: args.n,
        c: args.c,
        noise,
        seed,
        h,
        d,
    };
    manifest.config = json!({
        "n": args.n,
        "c": args.c,
        "big_n": config.big_n(),
        "noise": noise,
        "h": spec_json(&config.h.to_spec()),
        "d": spec_json(&config.d.to_spec()),
    });
    let spectrum = sample_spectrum(&config)?;
    let mut out = manifest.comment_lines();
    out.push_str("eigenvalue\n");
    for x in &spectrum.eigenvalues {
        out.push_str(&num(*x));
        out.push('\n');
    }
    Ok(out)
}

fn cmd_support(args: &SupportArgs) -> CliResult<String> {
    let mut manifest = RunManifest::new("support", None, Value::Null);
    let h = population(&args.population, &mut manifest)?;
    let d = weight_law(&args.weights, &mut manifest)?;
    manifest.config = json!({ "c": args.c, "h": spec_json(&h.to_spec()), "d": spec_json(&d.to_spec()) });
    let s = find_support_mixture(&h, &d, args.c, None)?;
    let doc = json!({
        "manifest": manifest,
        "intervals": s.intervals,
        "zero_mass": s.zero_mass,
        "boundaries": s.boundaries,
    });
    Ok(format!("{}\n", serde_json::to_string_pretty(&doc).expect("support serialises")))
}

fn check_omega(omega: usize) -> CliResult<()> {
    if omega == 0 {
        return Err(CliError::usage("--omega must be positive"));
    }
    Ok(())
}

fn cmd_density(args: &DensityArgs) -> CliResult<String> {
    check_omega(args.grid.omega)?;
    let mut manifest = RunManifest::new("density", None, Value::Null);
    let h = population(&args.population, &mut manifest)?;
    let d = weight_law(&args.weights, &mut manifest)?;
    let eigs = match &args.eigs {
        Some(path) => {
            let bytes = io::read_bytes(path)?;
            manifest.record_input(path, &bytes);
            Some(io::parse_column(path, &bytes)?)
        }
        None => None,
    };
    let strategy = args.grid.strategy(eigs.is_some());
    manifest.config = json!({
        "c": args.c,
        "omega": args.grid.omega,
        "strategy": strategy,
        "h": spec_json(&h.to_spec()),
        "d": spec_json(&d.to_spec()),
    });
    let support = find_support_mixture(&h, &d, args.c, None)?;
    let grid = build_grid(&support, args.grid.omega, strategy, eigs.as_deref())?;
    let curve = density_curve(&h, &d, args.c, &grid, support.zero_mass)?;
    let mut out = manifest.comment_lines();
    out.push_str(&format!("# zero_mass={}\n", num(curve.zero_mass)));
    out.push_str("xi,density\n");
    for (x, f) in curve.xi.iter().zip(&curve.density) {
        out.push_str(&format!("{},{}\n", num(*x), num(*f)));
    }
    Ok(out)
}

fn cmd_estimate(args: &EstimateArgs) -> CliResult<(String, Option<CliError>)> {
    check_omega(args.grid.omega)?;
    let seed = args.seed.unwrap_or(0);
    let mut manifest = RunManifest::new("estimate", Some(seed), Value::Null);
    let bytes = io::read_bytes(&args.eigs)?;
    manifest.record_input(&args.eigs, &bytes);
    let obs = io::parse_column(&args.eigs, &bytes)?;
    let (weights, weight_echo) = match &args.weights {
        Some(path) => {
            let bytes = io::read_bytes(path)?;
            manifest.record_input(path, &bytes);
            (WeightInput::Samples(io::parse_column(path, &bytes)?), json!({ "samples": path }))
        }
        None => {
            let d = weight_law(&args.weight_law, &mut manifest)?;
            let echo = spec_json(&d.to_spec());
            (WeightInput::Distribution(d), echo)
        }
    };
    let config = EstimationConfig {
        iterations: args.iters,
        replicas: args.replicas,
        learning_rate: args.lr,
        gradient: match args.gradient {
            GradientArg::Analytic => GradientMode::Analytic,
            GradientArg::FiniteDifference => GradientMode::FiniteDifference,
        },
        seed,
        noise: args.noise.noise(),
        omega: args.grid.omega,
        grid_strategy: args.grid.strategy(true),
        clip_quantile: args.clip_quantile,
        skip_density: args.skip_density,
        ..EstimationConfig::default()
    };
    manifest.config = json!({ "c": args.c, "n": obs.len(), "d": weight_echo, "estimation": config });
    let r = estimate(&obs, &weights, args.c, &config)?;
    let density = r.density.as_ref().map(|dc| {
        json!({
            "xi": dc.xi,
            "density": dc.density,
            "degenerate": dc.degenerate,
            "zero_mass": dc.zero_mass,
        })
    });
    let doc = json!({
        "manifest": manifest,
        "tau_hat": r.tau_hat,
        "intervals": r.support.as_ref().map(|s| &s.intervals),
        "zero_mass": r.support.as_ref().map(|s| s.zero_mass),
        "grid": r.grid.as_ref().map(|g| json!({ "points": g.points, "omegas": g.omegas, "strategy": g.strategy })),
        "density": density,
        "loss_trace": r.loss_trace,
        "warnings": r.warnings,
        "support_error": r.support_error,
    });
    let failure = r
        .support_error
        .as_ref()
        .map(|e| CliError::Numerical(format!("support stage failed, wrote partial result: {e}")));
    Ok((format!("{}\n", serde_json::to_string_pretty(&doc).expect("result serialises")), failure))
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::usage("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot configure threads: {e}")))?;
    }
    match &cli.command {
        Command::Sample(a) => io::emit(a.out.as_deref(), &cmd_sample(a)?),
        Command::Support(a) => io::emit(a.out.as_deref(), &cmd_support(a)?),
        Command::Density(a) => io::emit(a.out.as_deref(), &cmd_density(a)?),
        Command::Estimate(a) => {
            let (text, failure) = cmd_estimate(a)?;
            io::emit(a.out.as_deref(), &text)?;
            failure.map_or(Ok(()), Err)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
