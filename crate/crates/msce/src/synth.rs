//! Synthetic data generation: conditioned Laplace-scale draws from known
//! dependence parameters, physical-scale covariate data for marginal fits,
//! and track explosion so the full registration pipeline can run on
//! generated fixtures.

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec;
use crate::geo::{GeoPoint, Pass, RegisteredDataset, RegisteredEvent, Transect, TrackObservation};
use crate::marginal::BinScheme;
use crate::model::{ConditionedModel, LaplaceDataset, MSCEParams, ModelError};
use crate::seed::task_seed;
use crate::stats::{gp_quantile, std_laplace_quantile, StatsError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    BadSpec(&'static str),
    #[error("physical generation needs a marginal spec with one truth per bin")]
    MissingBinSpec,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Geo(#[from] crate::geo::GeoError),
}

/// Per-bin generating truth for physical-scale data: a uniform body on
/// [body_min, threshold_u] with probability tau, a GP tail above.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinTruth {
    pub tau: f64,
    pub threshold_u: f64,
    pub body_min: f64,
    pub sigma: f64,
    pub xi: f64,
}

/// Covariate-structured physical generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalSpec {
    /// Exactly one truth per covariate bin (16).
    pub bins: Vec<BinTruth>,
    /// First event timestamp (RFC 3339); events step by `step_hours`.
    #[serde(default = "default_start")]
    pub start_iso: String,
    #[serde(default = "default_step_hours")]
    pub step_hours: f64,
}

fn default_start() -> String {
    "2015-01-01T00:00:00Z".to_string()
}

fn default_step_hours() -> f64 {
    7.0
}

/// Everything needed to generate verification data from known parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub quantities: Vec<String>,
    pub n_events: usize,
    pub u_quantile: f64,
    pub seed: u64,
    pub true_params: MSCEParams,
    pub distances_km: Vec<f64>,
    #[serde(default)]
    pub physical: Option<PhysicalSpec>,
}

impl SynthSpec {
    fn validate(&self) -> Result<(), SynthError> {
        if self.n_events < 1 {
            return Err(SynthError::BadSpec("n_events must be at least 1"));
        }
        if !(self.u_quantile > 0.0 && self.u_quantile < 1.0) {
            return Err(SynthError::BadSpec("u_quantile must lie in (0, 1)"));
        }
        if self.quantities.len() != self.true_params.m() {
            return Err(SynthError::BadSpec("quantity names must match parameter blocks"));
        }
        Ok(())
    }
}

/// Standard Laplace draw truncated above the u_quantile level, by inverse
/// CDF; strictly exceeds the threshold.
pub(crate) fn truncated_laplace_draw<R: Rng>(u_quantile: f64, rng: &mut R) -> f64 {
    let mut v: f64 = rng.random();
    while v == 0.0 {
        v = rng.random();
    }
    let p = u_quantile + (1.0 - u_quantile) * v;
    std_laplace_quantile(p).expect("p inside (0, 1)")
}

/// Draws conditioned events from the true parameters: truncated-Laplace
/// conditioning values and remote vectors assembled from copula residuals.
pub fn generate_conditioned(spec: &SynthSpec) -> Result<LaplaceDataset, SynthError> {
    spec.validate()?;
    let u = std_laplace_quantile(spec.u_quantile)?;
    // fails here, before any sampling, when the truth is not positive definite
    let model = ConditionedModel::new(&spec.true_params, &spec.distances_km)?;
    let rows: Vec<Result<(f64, Vec<f64>), StatsError>> =
        exec::map_indexed(spec.n_events, |i| {
            let mut rng = ChaCha12Rng::seed_from_u64(task_seed(spec.seed, i as u64));
            let x = truncated_laplace_draw(spec.u_quantile, &mut rng);
            let y = model.simulate_event(x, &mut rng)?;
            Ok((x, y))
        });
    let mut x = Vec::with_capacity(spec.n_events);
    let mut remote = Vec::with_capacity(spec.n_events * model.dim());
    for r in rows {
        let (xi, y) = r?;
        x.push(xi);
        remote.extend(y);
    }
    Ok(LaplaceDataset::new(
        x,
        remote,
        spec.distances_km.clone(),
        spec.quantities.clone(),
        u,
    )?)
}

fn sample_bin_value<R: Rng>(t: &BinTruth, rng: &mut R) -> f64 {
    let p: f64 = rng.random();
    if p < t.tau {
        t.body_min + (t.threshold_u - t.body_min) * (p / t.tau)
    } else {
        t.threshold_u
            + gp_quantile((p - t.tau) / (1.0 - t.tau), t.sigma, t.xi).expect("p in [0, 1)")
    }
}

/// Generates a registered dataset with random directions and calendar-driven
/// seasons; values are drawn independently per location from the bin truth
/// selected by each (event, quantity) covariate pair.
pub fn generate_physical(spec: &SynthSpec, transect: &Transect) -> Result<RegisteredDataset, SynthError> {
    spec.validate()?;
    let phys = spec.physical.as_ref().ok_or(SynthError::MissingBinSpec)?;
    let scheme = BinScheme::default();
    if phys.bins.len() != scheme.n_bins() {
        return Err(SynthError::MissingBinSpec);
    }
    let start: DateTime<Utc> = phys
        .start_iso
        .parse::<DateTime<Utc>>()
        .map_err(|_| SynthError::BadSpec("start_iso is not RFC 3339"))?;
    let step = Duration::seconds((phys.step_hours * 3600.0) as i64);
    let m = spec.quantities.len();
    let n_loc = transect.len();

    let events: Vec<RegisteredEvent> = exec::map_indexed(spec.n_events, |i| {
        let mut rng = ChaCha12Rng::seed_from_u64(task_seed(spec.seed, i as u64));
        let time = start + step * i as i32;
        let season = crate::geo::season_deg(time);
        let mut values = vec![0.0; m * n_loc];
        let mut directions = vec![0.0; m * n_loc];
        for k in 0..m {
            let direction = 360.0 - 360.0 * rng.random::<f64>(); // in (0, 360]
            let bin = scheme.assign(direction, season).expect("angles in domain");
            let truth = &phys.bins[bin - 1];
            for j in 0..n_loc {
                values[k * n_loc + j] = sample_bin_value(truth, &mut rng);
                directions[k * n_loc + j] = direction;
            }
        }
        RegisteredEvent { time, season_deg: season, values, directions }
    });
    Ok(RegisteredDataset {
        quantities: spec.quantities.clone(),
        transect: transect.clone(),
        events,
    })
}

/// Explodes a registered dataset into per-quantity passes whose points sit
/// within `jitter_km` of the transect locations, so running registration on
/// the output reproduces the dataset. Jitter must stay below half the
/// transect spacing to keep nearest-location matching unambiguous.
pub fn dataset_to_tracks(
    ds: &RegisteredDataset,
    jitter_km: f64,
    seed: u64,
) -> Result<Vec<Vec<Pass>>, SynthError> {
    if jitter_km < 0.0 {
        return Err(SynthError::BadSpec("jitter_km must be non-negative"));
    }
    let spacing = ds.transect.distances_km()[1];
    if jitter_km >= 0.5 * spacing {
        return Err(SynthError::BadSpec("jitter_km must be below half the transect spacing"));
    }
    let n_loc = ds.transect.len();
    let mut tracks = vec![Vec::with_capacity(ds.events.len()); ds.quantities.len()];
    for (i, event) in ds.events.iter().enumerate() {
        let mut rng = ChaCha12Rng::seed_from_u64(task_seed(seed, i as u64));
        for (k, passes) in tracks.iter_mut().enumerate() {
            let mut observations = Vec::with_capacity(n_loc);
            for (j, point) in ds.transect.points().iter().enumerate() {
                // displace within a jitter_km box around the location
                let dlat = jitter_km / 111.0 * (2.0 * rng.random::<f64>() - 1.0);
                let coslat = point.lat_deg.to_radians().cos().max(0.1);
                let dlon = jitter_km / (111.0 * coslat) * (2.0 * rng.random::<f64>() - 1.0);
                let loc = GeoPoint::new(
                    (point.lat_deg + dlat).clamp(-90.0, 90.0),
                    point.lon_deg + dlon,
                )?;
                observations.push(TrackObservation::new(
                    event.time,
                    loc,
                    event.values[k * n_loc + j],
                    event.directions[k * n_loc + j],
                )?);
            }
            passes.push(Pass { id: format!("evt{i:05}_q{}", k + 1), observations });
        }
    }
    Ok(tracks)
}
