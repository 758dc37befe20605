//! Batch front end: each subcommand validates its configuration, runs one
//! stage of the transect extremes workflow, and writes artifacts atomically
//! with a manifest. Exit codes: 0 ok, 1 computation failure, 2 input error,
//! 3 config error. Errors print one machine-parsable line on stderr.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

mod config;
mod error;
mod stages;

use config::{pick, require, FileConfig, TransectSpec};
use error::{input_err, CliError};
use msce::diagnostics::{ParamsSource, DEFAULT_KL_BINS, DEFAULT_KL_BOOT, DEFAULT_VALIDATION_PROBS};
use msce::io::{self, ChainDoc};
use msce::mcmc::MCMCConfig;
use msce::model::{MSCEParams, DEFAULT_KAPPA_UNIT, DEFAULT_N_NOD, DEFAULT_RHO_UNIT_KM};
use msce::seed::stage_seed;
use msce::synth::SynthSpec;

fn parse_latlon(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected lat,lon degrees, got {s:?}"));
    }
    let lat = parts[0].trim().parse::<f64>().map_err(|_| format!("bad latitude {:?}", parts[0]))?;
    let lon = parts[1].trim().parse::<f64>().map_err(|_| format!("bad longitude {:?}", parts[1]))?;
    Ok([lat, lon])
}

fn parse_pair(s: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected lo,hi, got {s:?}"));
    }
    let lo = parts[0].trim().parse::<f64>().map_err(|_| format!("bad number {:?}", parts[0]))?;
    let hi = parts[1].trim().parse::<f64>().map_err(|_| format!("bad number {:?}", parts[1]))?;
    Ok([lo, hi])
}

#[derive(Parser)]
#[command(
    name = "msce",
    version,
    about = "Transect extremes workflow: registration, marginal models, spatial conditional dependence"
)]
struct Cli {
    /// JSON config document; flags override file values
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker thread cap [default: machine parallelism; env MSCE_THREADS]
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Project per-quantity track CSVs onto transect locations
    Register {
        /// Track CSV per quantity, conditioning quantity first
        #[arg(long, value_name = "CSV", num_args = 1..)]
        tracks: Vec<PathBuf>,
        /// Quantity names, conditioning first (comma separated)
        #[arg(long, value_delimiter = ',', value_name = "NAMES")]
        quantities: Option<Vec<String>>,
        /// Transect start [format: lat,lon degrees]
        #[arg(long, value_parser = parse_latlon, value_name = "LAT,LON")]
        transect_start: Option<[f64; 2]>,
        /// Transect end [format: lat,lon degrees]
        #[arg(long, value_parser = parse_latlon, value_name = "LAT,LON")]
        transect_end: Option<[f64; 2]>,
        /// Transect locations including the conditioning one
        #[arg(long, value_name = "N")]
        n_locations: Option<usize>,
        /// Max matched distance before a pass is rejected [default: 50]
        #[arg(long, value_name = "KM")]
        max_dist_km: Option<f64>,
        /// Pass grouping window [default: 2]
        #[arg(long, value_name = "HOURS")]
        pass_window_hours: Option<f64>,
        /// Registered CSV out; a .transect.json sidecar is written next to it
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
    /// Fit penalized directional-seasonal marginal models per column
    FitMargins {
        /// Registered CSV
        #[arg(long, value_name = "CSV")]
        registered: PathBuf,
        /// Transect sidecar [default: <registered>.transect.json]
        #[arg(long, value_name = "JSON")]
        transect: Option<PathBuf>,
        /// Threshold quantile per bin [default: 0.7]
        #[arg(long)]
        tau: Option<f64>,
        /// Penalty grid, comma separated [default: 10 log-spaced in 0.01..1000]
        #[arg(long, value_delimiter = ',', value_name = "L1,L2,..")]
        lambda_grid: Option<Vec<f64>>,
        /// Cross-validation folds [default: 5]
        #[arg(long)]
        folds: Option<usize>,
        /// Bootstrap members per column [default: 100]
        #[arg(long)]
        n_boot: Option<usize>,
        /// Bootstrap threshold quantile range [format: lo,hi] [default: 0.6,0.8]
        #[arg(long, value_parser = parse_pair, value_name = "LO,HI")]
        tau_range: Option<[f64; 2]>,
        /// Minimum exceedances per non-empty bin [default: 20]
        #[arg(long)]
        min_exceedances: Option<usize>,
        /// Master seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Margins JSON out
        #[arg(long, value_name = "JSON")]
        out: PathBuf,
    },
    /// Transform registered values to standard Laplace scale
    Transform {
        #[arg(long, value_name = "CSV")]
        registered: PathBuf,
        /// Transect sidecar [default: <registered>.transect.json]
        #[arg(long, value_name = "JSON")]
        transect: Option<PathBuf>,
        /// Margins JSON from fit-margins
        #[arg(long, value_name = "JSON")]
        margins: PathBuf,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
    /// Map Laplace-scale registered values back to physical scale
    Invert {
        #[arg(long, value_name = "CSV")]
        registered: PathBuf,
        /// Transect sidecar [default: <registered>.transect.json]
        #[arg(long, value_name = "JSON")]
        transect: Option<PathBuf>,
        /// Margins JSON from fit-margins
        #[arg(long, value_name = "JSON")]
        margins: PathBuf,
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
    /// Simulate n-year return levels under one fitted marginal
    ReturnLevels {
        /// Margins JSON from fit-margins
        #[arg(long, value_name = "JSON")]
        margins: PathBuf,
        /// Quantity name as listed in the margins document
        #[arg(long)]
        quantity: String,
        /// Transect location index, 0 is the conditioning one [default: 0]
        #[arg(long)]
        location: Option<usize>,
        /// Return period in years
        #[arg(long)]
        years: f64,
        /// JSON array of 16 annual event rates per covariate bin
        #[arg(long, value_name = "JSON")]
        rate_file: PathBuf,
        /// Simulated n-year maxima [default: 10000]
        #[arg(long)]
        n_sims: Option<usize>,
        /// Master seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Summary JSON out
        #[arg(long, value_name = "JSON")]
        out: PathBuf,
    },
    /// Estimate the spatial conditional extremes model by adaptive MCMC
    FitMsce {
        /// Conditioned CSV with .meta.json sidecar (alternative to --registered)
        #[arg(long, value_name = "CSV")]
        data: Option<PathBuf>,
        /// Laplace-scale registered CSV, conditioned on threshold exceedances
        #[arg(long, value_name = "CSV")]
        registered: Option<PathBuf>,
        /// Transect sidecar [default: <registered>.transect.json]
        #[arg(long, value_name = "JSON")]
        transect: Option<PathBuf>,
        /// Conditioning threshold quantile [default: 0.75]
        #[arg(long)]
        u_quantile: Option<f64>,
        /// Nodes per parameter profile [default: 5]
        #[arg(long)]
        n_nod: Option<usize>,
        /// Correlation distance unit [default: 100]
        #[arg(long, value_name = "KM")]
        rho_unit_km: Option<f64>,
        /// Correlation shape unit [default: 5]
        #[arg(long)]
        kappa_unit: Option<f64>,
        /// Warmup sweeps [default: 250]
        #[arg(long)]
        n1: Option<usize>,
        /// Adaptive iterations [default: 19750]
        #[arg(long)]
        n2: Option<usize>,
        /// Starting-point search draws [default: 2000]
        #[arg(long)]
        n_random_search: Option<usize>,
        /// Fixed-kernel weight in the proposal mixture [default: 0.05]
        #[arg(long)]
        epsilon: Option<f64>,
        /// Fraction of the adaptive chain discarded [default: 0.25]
        #[arg(long)]
        burn_in_frac: Option<f64>,
        /// Master seed; the chain seed derives from it [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Thinning factor for stored samples [default: 10]
        #[arg(long)]
        thin: Option<usize>,
        /// Independent chains; extras go to <out>.1.json, ... [default: 1]
        #[arg(long)]
        chains: Option<usize>,
        /// Chain JSON out
        #[arg(long, value_name = "JSON")]
        out: PathBuf,
    },
    /// Simulate conditioned events under a fitted dependence model
    Simulate {
        /// Posterior chain JSON; parameters are drawn per simulation
        #[arg(long, value_name = "JSON")]
        chain: Option<PathBuf>,
        /// Fixed parameter JSON (alternative to --chain)
        #[arg(long, value_name = "JSON")]
        params: Option<PathBuf>,
        /// Remote distances for --params, comma separated km
        #[arg(long, value_delimiter = ',', value_name = "KM,..")]
        distances: Option<Vec<f64>>,
        /// Conditioning level as a Laplace quantile [default: 0.75]
        #[arg(long)]
        x_quantile: Option<f64>,
        /// Simulated events [default: 1000]
        #[arg(long)]
        n_sims: Option<usize>,
        /// Master seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Simulations CSV out
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
    /// Validate a fitted model against the conditioned data
    Diagnose {
        /// Posterior chain JSON
        #[arg(long, value_name = "JSON")]
        chain: PathBuf,
        /// Conditioned CSV with .meta.json sidecar (alternative to --registered)
        #[arg(long, value_name = "CSV")]
        data: Option<PathBuf>,
        /// Laplace-scale registered CSV
        #[arg(long, value_name = "CSV")]
        registered: Option<PathBuf>,
        /// Transect sidecar [default: <registered>.transect.json]
        #[arg(long, value_name = "JSON")]
        transect: Option<PathBuf>,
        /// Conditioning threshold quantile for --registered [default: 0.75]
        #[arg(long)]
        u_quantile: Option<f64>,
        /// Diagnostic conditioning level [default: 0.75]
        #[arg(long)]
        x_quantile: Option<f64>,
        /// Simulations per comparison [default: 1000]
        #[arg(long)]
        n_sims: Option<usize>,
        /// KL bootstrap replicates [default: 500]
        #[arg(long)]
        n_boot: Option<usize>,
        /// KL histogram bins [default: 25]
        #[arg(long)]
        n_bins: Option<usize>,
        /// Validation probabilities [default: 0.025,0.25,0.5,0.75,0.975]
        #[arg(long, value_delimiter = ',', value_name = "P,..")]
        probs: Option<Vec<f64>>,
        /// Profile grid size over the remote span [default: 25]
        #[arg(long)]
        grid_points: Option<usize>,
        /// Explicit profile grid in km, overrides --grid-points
        #[arg(long, value_delimiter = ',', value_name = "KM,..")]
        grid: Option<Vec<f64>>,
        /// Master seed [default: 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for profiles, quantiles, kl, residual pairs
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
    /// Generate verification data from known parameters
    Synth {
        #[command(subcommand)]
        mode: SynthCmd,
    },
    /// Run all seven stages on synthetic data from one config
    Pipeline {
        /// Output directory [default: the config's out_dir]
        #[arg(long, value_name = "DIR")]
        out_dir: Option<PathBuf>,
        /// Master seed override
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Draw conditioned Laplace-scale events from true parameters
    Conditioned {
        /// Generation spec JSON [default: the config's synth block]
        #[arg(long, value_name = "JSON")]
        spec: Option<PathBuf>,
        /// Data CSV out; a .meta.json sidecar is written next to it
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
    },
    /// Generate covariate-structured physical-scale data
    Physical {
        /// Generation spec JSON [default: the config's synth block]
        #[arg(long, value_name = "JSON")]
        spec: Option<PathBuf>,
        /// Registered CSV out; a .transect.json sidecar is written next to it
        #[arg(long, value_name = "CSV")]
        out: PathBuf,
        /// Also explode the dataset into per-quantity track CSVs here
        #[arg(long, value_name = "DIR")]
        tracks_dir: Option<PathBuf>,
        /// Track point jitter around the locations [default: 1]
        #[arg(long, value_name = "KM")]
        jitter_km: Option<f64>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments")
                .trim()
                .trim_start_matches("error: ");
            eprintln!("error[E_CONFIG]: {first}");
            std::process::exit(3);
        }
    };
    let threads = match resolve_threads(cli.threads) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(e.exit_code());
        }
    };
    msce::configure_threads(threads);
    if let Err(e) = run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("MSCE_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| {
                CliError::Config(format!("MSCE_THREADS is not a thread count: {v:?}"))
            })?),
            Err(std::env::VarError::NotPresent) => None,
            Err(e) => return Err(CliError::Config(format!("MSCE_THREADS: {e}"))),
        },
    };
    if n == Some(0) {
        return Err(CliError::Config("thread count must be at least 1".to_string()));
    }
    Ok(n)
}

fn check_unit(v: f64, what: &str) -> Result<f64, CliError> {
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(CliError::Config(format!("{what} must lie in (0, 1), got {v}")))
    }
}

fn check_pos(v: f64, what: &str) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Config(format!("{what} must be positive, got {v}")))
    }
}

fn resolve_transect(
    start: Option<[f64; 2]>,
    end: Option<[f64; 2]>,
    n: Option<usize>,
    file: Option<&TransectSpec>,
) -> Result<TransectSpec, CliError> {
    match (start, end, n, file) {
        (Some(s), Some(e), Some(n), _) => Ok(TransectSpec { start: s, end: e, n_locations: n }),
        (s, e, n, Some(f)) => Ok(TransectSpec {
            start: s.unwrap_or(f.start),
            end: e.unwrap_or(f.end),
            n_locations: n.unwrap_or(f.n_locations),
        }),
        _ => Err(CliError::Config(
            "transect geometry required: --transect-start/--transect-end/--n-locations or a config transect block".to_string(),
        )),
    }
}

/// Synth spec from --spec, else the config's synth block. Returns the paths
/// read so manifests can record them.
fn resolve_synth_spec(
    spec: Option<PathBuf>,
    file: &FileConfig,
    config_path: Option<&PathBuf>,
) -> Result<(SynthSpec, Vec<PathBuf>), CliError> {
    match spec {
        Some(p) => {
            let s: SynthSpec = io::read_json(&p).map_err(input_err)?;
            Ok((s, vec![p]))
        }
        None => {
            let s = file.synth.clone().ok_or_else(|| {
                CliError::Config("synth spec required: --spec or a config synth block".to_string())
            })?;
            Ok((s, config_path.into_iter().cloned().collect()))
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_ref())?;
    match cli.command {
        Command::Register {
            tracks,
            quantities,
            transect_start,
            transect_end,
            n_locations,
            max_dist_km,
            pass_window_hours,
            out,
        } => {
            let quantities = require(quantities, file.quantities.clone(), "quantities")?;
            let tracks = if tracks.is_empty() {
                require(None, file.tracks.clone(), "tracks")?
            } else {
                tracks
            };
            if tracks.len() != quantities.len() {
                return Err(CliError::Config(format!(
                    "{} track files for {} quantities",
                    tracks.len(),
                    quantities.len()
                )));
            }
            let tspec =
                resolve_transect(transect_start, transect_end, n_locations, file.transect.as_ref())?;
            let transect = tspec.build()?;
            let max_dist =
                check_pos(pick(max_dist_km, file.max_dist_km, config::D_MAX_DIST_KM), "max-dist-km")?;
            let window = check_pos(
                pick(pass_window_hours, file.pass_window_hours, config::D_PASS_WINDOW_HOURS),
                "pass-window-hours",
            )?;
            stages::register_core(&quantities, &tracks, &transect, max_dist, window, &out)?;
            Ok(())
        }
        Command::FitMargins {
            registered,
            transect,
            tau,
            lambda_grid,
            folds,
            n_boot,
            tau_range,
            min_exceedances,
            seed,
            out,
        } => {
            let tau = check_unit(pick(tau, file.tau, config::D_TAU), "tau")?;
            let range = pick(tau_range, file.tau_range, config::D_TAU_RANGE);
            if !(range[0] > 0.0 && range[1] < 1.0 && range[0] <= range[1]) {
                return Err(CliError::Config(format!(
                    "tau-range must satisfy 0 < lo <= hi < 1, got {},{}",
                    range[0], range[1]
                )));
            }
            let grid = pick(lambda_grid, file.lambda_grid.clone(), config::default_lambda_grid());
            if grid.is_empty() || grid.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
                return Err(CliError::Config("lambda-grid must be non-negative numbers".into()));
            }
            let folds = pick(folds, file.folds, config::D_FOLDS);
            if grid.len() > 1 && folds < 2 {
                return Err(CliError::Config("folds must be at least 2".into()));
            }
            let knobs = stages::MarginKnobs {
                tau,
                lambda_grid: grid,
                folds,
                n_boot: pick(n_boot, file.n_boot, config::D_N_BOOT).max(1),
                tau_range: (range[0], range[1]),
                min_exceedances: pick(min_exceedances, file.min_exceedances, config::D_MIN_EXCEEDANCES),
                seed: pick(seed, file.seed, config::D_SEED),
            };
            let tpath = transect.unwrap_or_else(|| io::transect_path(&registered));
            stages::margins_core(&registered, &tpath, &knobs, &out)?;
            Ok(())
        }
        Command::Transform { registered, transect, margins, out } => {
            let tpath = transect.unwrap_or_else(|| io::transect_path(&registered));
            stages::transform_core(&registered, &tpath, &margins, true, &out)?;
            Ok(())
        }
        Command::Invert { registered, transect, margins, out } => {
            let tpath = transect.unwrap_or_else(|| io::transect_path(&registered));
            stages::transform_core(&registered, &tpath, &margins, false, &out)?;
            Ok(())
        }
        Command::ReturnLevels { margins, quantity, location, years, rate_file, n_sims, seed, out } => {
            check_pos(years, "years")?;
            stages::return_levels_core(
                &margins,
                &quantity,
                location.unwrap_or(0),
                &rate_file,
                years,
                pick(n_sims, file.n_sims, config::D_RL_SIMS),
                pick(seed, file.seed, config::D_SEED),
                &out,
            )?;
            Ok(())
        }
        Command::FitMsce {
            data,
            registered,
            transect,
            u_quantile,
            n_nod,
            rho_unit_km,
            kappa_unit,
            n1,
            n2,
            n_random_search,
            epsilon,
            burn_in_frac,
            seed,
            thin,
            chains,
            out,
        } => {
            let u_q =
                check_unit(pick(u_quantile, file.u_quantile, config::D_U_QUANTILE), "u-quantile")?;
            let (dataset, inputs) =
                stages::load_conditioned(data.as_ref(), registered.as_ref(), transect.as_ref(), u_q)?;
            let master = pick(seed, file.seed, config::D_SEED);
            let defaults = MCMCConfig::default();
            let knobs = stages::FitKnobs {
                n_nod: pick(n_nod, file.n_nod, DEFAULT_N_NOD).max(1),
                rho_unit_km: check_pos(
                    pick(rho_unit_km, file.rho_unit_km, DEFAULT_RHO_UNIT_KM),
                    "rho-unit-km",
                )?,
                kappa_unit: check_pos(
                    pick(kappa_unit, file.kappa_unit, DEFAULT_KAPPA_UNIT),
                    "kappa-unit",
                )?,
                mcmc: MCMCConfig {
                    n1: pick(n1, file.n1, defaults.n1),
                    n2: pick(n2, file.n2, defaults.n2),
                    n_random_search: pick(n_random_search, file.n_random_search, defaults.n_random_search),
                    epsilon: pick(epsilon, file.epsilon, defaults.epsilon),
                    burn_in_frac: pick(burn_in_frac, file.burn_in_frac, defaults.burn_in_frac),
                    seed: stage_seed(master, "fit-msce"),
                },
                thin: pick(thin, file.thin, config::D_THIN).max(1),
                chains: pick(chains, file.chains, config::D_CHAINS).max(1),
                seed: master,
            };
            stages::fit_msce_core(&dataset, &inputs, &knobs, &out)?;
            Ok(())
        }
        Command::Simulate { chain, params, distances, x_quantile, n_sims, seed, out } => {
            let x_q =
                check_unit(pick(x_quantile, file.x_quantile, config::D_X_QUANTILE), "x-quantile")?;
            let n_sims = pick(n_sims, file.n_sims, config::D_N_SIMS).max(1);
            let master = pick(seed, file.seed, config::D_SEED);
            match (chain, params) {
                (Some(cpath), None) => {
                    let doc: ChainDoc = io::read_json(&cpath).map_err(input_err)?;
                    let pc = doc.to_chain();
                    stages::simulate_core(
                        ParamsSource::Chain { layout: &doc.layout, chain: &pc },
                        doc.distances_km.len(),
                        doc.quantities.len(),
                        &doc.distances_km,
                        x_q,
                        n_sims,
                        master,
                        &[cpath.clone()],
                        &out,
                    )?;
                }
                (None, Some(ppath)) => {
                    let p: MSCEParams = io::read_json(&ppath).map_err(input_err)?;
                    let d = distances.ok_or_else(|| {
                        CliError::Config("--distances is required with --params".to_string())
                    })?;
                    stages::simulate_core(
                        ParamsSource::Fixed(&p),
                        d.len(),
                        p.m(),
                        &d,
                        x_q,
                        n_sims,
                        master,
                        &[ppath.clone()],
                        &out,
                    )?;
                }
                _ => {
                    return Err(CliError::Config(
                        "exactly one of --chain and --params is required".to_string(),
                    ))
                }
            }
            Ok(())
        }
        Command::Diagnose {
            chain,
            data,
            registered,
            transect,
            u_quantile,
            x_quantile,
            n_sims,
            n_boot,
            n_bins,
            probs,
            grid_points,
            grid,
            seed,
            out_dir,
        } => {
            let u_q =
                check_unit(pick(u_quantile, file.u_quantile, config::D_U_QUANTILE), "u-quantile")?;
            let x_q =
                check_unit(pick(x_quantile, file.x_quantile, config::D_X_QUANTILE), "x-quantile")?;
            let (dataset, mut inputs) =
                stages::load_conditioned(data.as_ref(), registered.as_ref(), transect.as_ref(), u_q)?;
            let doc: ChainDoc = io::read_json(&chain).map_err(input_err)?;
            inputs.push(chain.clone());
            let probs = pick(probs, file.probs.clone(), DEFAULT_VALIDATION_PROBS.to_vec());
            let grid = match grid {
                Some(g) => g,
                None => stages::default_grid(
                    dataset.distances_km(),
                    pick(grid_points, file.grid_points, config::D_GRID_POINTS).max(1),
                ),
            };
            let knobs = stages::DiagKnobs {
                x_quantile: x_q,
                n_sims: pick(n_sims, file.n_sims, config::D_N_SIMS).max(1),
                n_boot: pick(n_boot, file.kl_boot, DEFAULT_KL_BOOT),
                n_bins: pick(n_bins, file.kl_bins, DEFAULT_KL_BINS),
                probs,
                grid,
                seed: pick(seed, file.seed, config::D_SEED),
            };
            stages::diagnose_core(&dataset, &doc, &inputs, &knobs, &out_dir)?;
            Ok(())
        }
        Command::Synth { mode } => match mode {
            SynthCmd::Conditioned { spec, out } => {
                let (s, inputs) = resolve_synth_spec(spec, &file, cli.config.as_ref())?;
                stages::synth_conditioned_core(&s, &inputs, &out)?;
                Ok(())
            }
            SynthCmd::Physical { spec, out, tracks_dir, jitter_km } => {
                let (s, inputs) = resolve_synth_spec(spec, &file, cli.config.as_ref())?;
                let transect = match &file.transect {
                    Some(t) => t.build()?,
                    None => stages::transect_from_distances(&s.distances_km)?,
                };
                let jitter = pick(jitter_km, file.jitter_km, config::D_JITTER_KM);
                stages::synth_physical_core(
                    &s,
                    &transect,
                    &inputs,
                    &out,
                    tracks_dir.as_deref(),
                    jitter,
                )?;
                Ok(())
            }
        },
        Command::Pipeline { out_dir, seed } => {
            let config_path = cli
                .config
                .as_ref()
                .ok_or_else(|| CliError::Config("pipeline requires --config".to_string()))?;
            let out = out_dir
                .or_else(|| file.out_dir.clone())
                .ok_or_else(|| CliError::Config("missing required setting: out_dir".to_string()))?;
            stages::pipeline_core(&file, config_path, &out, seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latlon_parsing() {
        assert_eq!(parse_latlon("61.0,-2.5").unwrap(), [61.0, -2.5]);
        assert!(parse_latlon("61.0").is_err());
        assert!(parse_latlon("a,b").is_err());
    }

    #[test]
    fn threads_env_rejects_garbage() {
        assert!(resolve_threads(Some(0)).is_err());
        assert_eq!(resolve_threads(Some(3)).unwrap(), Some(3));
    }
}
