//! Thin command-line front end over the library; see the crate
//! examples for programmatic use.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gwsnmm::cli::{cmd_fit, cmd_map, cmd_replicate, cmd_simulate, RunConfig};

#[derive(Parser)]
#[command(
    name = "gwsnmm",
    about = "Geographically weighted, doubly robust spatio-temporal treatment-effect estimation",
    version
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Randomness seed (required unless set in the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic panel and write it as CSV.
    Simulate {
        /// Effect surface: S1, S2, S3, or zero.
        #[arg(long)]
        scenario: Option<String>,
        /// Number of subjects.
        #[arg(long)]
        n: Option<usize>,
        /// Largest time index (the panel has K+1 waves).
        #[arg(long, short = 'K')]
        horizon: Option<usize>,
        /// Informative non-response: on or off.
        #[arg(long)]
        missingness: Option<String>,
    },
    /// Estimate spatial effects at target locations from a panel CSV.
    Fit {
        /// Panel CSV path.
        #[arg(long)]
        panel: Option<PathBuf>,
        /// Blip family (lag1_linear, lag1_modified, gaussian_lag,
        /// modified_linear:<covariates>).
        #[arg(long)]
        blip: Option<String>,
        /// Inverse-probability response weighting: on or off.
        #[arg(long)]
        ipw: Option<String>,
        /// Non-response instrument covariate name.
        #[arg(long)]
        instrument: Option<String>,
        /// Target grid declaration, e.g. "33:47:7 x -123:-115:8".
        #[arg(long)]
        grid: Option<String>,
        /// Targets CSV with columns s1,s2.
        #[arg(long)]
        targets: Option<PathBuf>,
        /// Zip3 centroid CSV whose rows become targets.
        #[arg(long)]
        targets_zip3: Option<PathBuf>,
        /// Bootstrap replicates.
        #[arg(long)]
        bootstrap_b: Option<usize>,
        /// Confidence level in (0, 1).
        #[arg(long)]
        ci_level: Option<f64>,
        /// Covariate imputation policy: none or locf.
        #[arg(long)]
        impute: Option<String>,
    },
    /// Re-run the Monte Carlo study and write the summary table.
    Replicate {
        /// Which study: 1 (complete data) or 2 (non-response).
        #[arg(long)]
        table: Option<usize>,
        /// Monte Carlo replicates.
        #[arg(long)]
        reps: Option<usize>,
        /// Subjects per replicate.
        #[arg(long)]
        n: Option<usize>,
        /// Largest time index per replicate.
        #[arg(long, short = 'K')]
        horizon: Option<usize>,
        /// Bootstrap replicates inside each Monte Carlo replicate.
        #[arg(long)]
        bootstrap_b: Option<usize>,
    },
    /// Convert an effects CSV to GeoJSON (and a plot-ready grid), or a
    /// GeoJSON file back to CSV.
    Map {
        /// Input file: .csv or .geojson.
        input: PathBuf,
    },
}

fn parse_on_off(value: &str) -> Result<bool, String> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(format!("expected on/off, got {other:?}")),
    }
}

fn run(cli: Cli) -> gwsnmm::Result<()> {
    let mut config = match &cli.global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.global.seed {
        config.seed = Some(seed);
    }
    if let Some(threads) = cli.global.threads {
        config.threads = threads;
    }
    if let Some(dir) = &cli.global.out_dir {
        config.out_dir = dir.clone();
    }
    if config.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.threads)
            .build_global()
            .map_err(|e| gwsnmm::Error::Validation(format!("thread pool: {e}")))?;
    }

    match cli.command {
        Command::Simulate { scenario, n, horizon, missingness } => {
            if let Some(s) = scenario {
                config.simulate.scenario = s;
            }
            if let Some(n) = n {
                config.simulate.n = n;
            }
            if let Some(k) = horizon {
                config.simulate.horizon = k;
            }
            if let Some(m) = missingness {
                config.simulate.missingness =
                    parse_on_off(&m).map_err(gwsnmm::Error::Validation)?;
            }
            cmd_simulate(&config)?;
        }
        Command::Fit {
            panel,
            blip,
            ipw,
            instrument,
            grid,
            targets,
            targets_zip3,
            bootstrap_b,
            ci_level,
            impute,
        } => {
            if let Some(p) = panel {
                config.panel.path = Some(p);
            }
            if let Some(b) = blip {
                config.estimator.blip = b;
            }
            if let Some(i) = ipw {
                config.estimator.ipw = parse_on_off(&i).map_err(gwsnmm::Error::Validation)?;
            }
            if let Some(i) = instrument {
                config.estimator.instrument = Some(i);
            }
            if let Some(g) = grid {
                config.targets.grid = Some(g);
                config.targets.file = None;
                config.targets.zip3 = None;
            }
            if let Some(t) = targets {
                config.targets.file = Some(t);
                config.targets.grid = None;
                config.targets.zip3 = None;
            }
            if let Some(z) = targets_zip3 {
                config.targets.zip3 = Some(z);
                config.targets.grid = None;
                config.targets.file = None;
            }
            if let Some(b) = bootstrap_b {
                config.inference.bootstrap_b = b;
            }
            if let Some(l) = ci_level {
                config.inference.ci_level = l;
            }
            if let Some(i) = impute {
                config.panel.impute = Some(i);
            }
            cmd_fit(&config)?;
        }
        Command::Replicate { table, reps, n, horizon, bootstrap_b } => {
            if let Some(t) = table {
                config.replicate.table = t;
            }
            if let Some(r) = reps {
                config.replicate.reps = r;
            }
            if let Some(n) = n {
                config.replicate.n = n;
            }
            if let Some(k) = horizon {
                config.replicate.horizon = k;
            }
            if let Some(b) = bootstrap_b {
                config.replicate.bootstrap_b = b;
            }
            cmd_replicate(&config)?;
        }
        Command::Map { input } => {
            cmd_map(&config, &input)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
