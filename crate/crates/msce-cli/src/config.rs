use std::path::PathBuf;

use msce::geo::{GeoPoint, Transect};
use msce::synth::SynthSpec;
use serde::Deserialize;

use crate::error::{config_err, CliError};

/// Transect geometry as written in config files and flags.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransectSpec {
    /// [lat_deg, lon_deg]
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub n_locations: usize,
}

impl TransectSpec {
    pub fn build(&self) -> Result<Transect, CliError> {
        let start = GeoPoint::new(self.start[0], self.start[1]).map_err(config_err)?;
        let end = GeoPoint::new(self.end[0], self.end[1]).map_err(config_err)?;
        Transect::build(start, end, self.n_locations).map_err(config_err)
    }
}

/// The single JSON configuration document. Every field is optional here;
/// subcommands demand what they need and flags win over file values.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub transect: Option<TransectSpec>,
    /// Conditioning quantity first.
    pub quantities: Option<Vec<String>>,
    /// Track CSV per quantity, same order as `quantities`.
    pub tracks: Option<Vec<PathBuf>>,
    pub max_dist_km: Option<f64>,
    pub pass_window_hours: Option<f64>,
    pub u_quantile: Option<f64>,
    pub tau: Option<f64>,
    pub tau_range: Option<[f64; 2]>,
    pub lambda_grid: Option<Vec<f64>>,
    pub folds: Option<usize>,
    pub n_boot: Option<usize>,
    pub min_exceedances: Option<usize>,
    pub n_nod: Option<usize>,
    pub rho_unit_km: Option<f64>,
    pub kappa_unit: Option<f64>,
    pub n1: Option<usize>,
    pub n2: Option<usize>,
    pub n_random_search: Option<usize>,
    pub epsilon: Option<f64>,
    pub burn_in_frac: Option<f64>,
    pub thin: Option<usize>,
    pub chains: Option<usize>,
    /// Master seed; every stage derives its own from this and its name.
    pub seed: Option<u64>,
    pub x_quantile: Option<f64>,
    pub n_sims: Option<usize>,
    pub kl_boot: Option<usize>,
    pub kl_bins: Option<usize>,
    pub probs: Option<Vec<f64>>,
    pub grid_points: Option<usize>,
    pub jitter_km: Option<f64>,
    /// Generation truth for `pipeline` and as a file-borne default for
    /// `synth` when `--spec` is not given.
    pub synth: Option<SynthSpec>,
    pub out_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: Option<&PathBuf>) -> Result<Self, CliError> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let bytes = std::fs::read(p)
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                serde_json::from_slice(&bytes)
                    .map_err(|e| config_err(format!("{}: {e}", p.display())))
            }
        }
    }
}

pub const D_MAX_DIST_KM: f64 = 50.0;
pub const D_PASS_WINDOW_HOURS: f64 = 2.0;
pub const D_U_QUANTILE: f64 = 0.75;
pub const D_TAU: f64 = 0.7;
pub const D_TAU_RANGE: [f64; 2] = [0.6, 0.8];
pub const D_FOLDS: usize = 5;
pub const D_N_BOOT: usize = 100;
pub const D_MIN_EXCEEDANCES: usize = 20;
pub const D_THIN: usize = 10;
pub const D_CHAINS: usize = 1;
pub const D_SEED: u64 = 0;
pub const D_X_QUANTILE: f64 = 0.75;
pub const D_N_SIMS: usize = 1000;
pub const D_RL_SIMS: usize = 10000;
pub const D_GRID_POINTS: usize = 25;
pub const D_JITTER_KM: f64 = 1.0;

/// Ten log-spaced penalties from 0.01 to 1000.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..10).map(|i| 10f64.powf(-2.0 + 5.0 * i as f64 / 9.0)).collect()
}

/// Flag value if present, else config value, else the default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Flag value if present, else config value, else a config error naming the
/// missing setting.
pub fn require<T>(flag: Option<T>, file: Option<T>, what: &str) -> Result<T, CliError> {
    flag.or(file)
        .ok_or_else(|| CliError::Config(format!("missing required setting: {what}")))
}
