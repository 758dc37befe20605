//! File formats and artifact plumbing: track and registered-event CSVs,
//! JSON documents for transects, margins, parameters, and chains,
//! diagnostics tables, atomic writes, and run manifests with content hashes.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diagnostics::{ConditionalProfile, ConditionalSims, KLTestResult, QuantileValidation, ResidualSet};
use crate::geo::{GeoError, Pass, RegisteredDataset, RegisteredEvent, Transect, TrackObservation};
use crate::marginal::MarginalEnsemble;
use crate::mcmc::{ChainSummary, MCMCConfig, PosteriorChain};
use crate::model::{LaplaceDataset, ModelError, ParamLayout};
use crate::stats::{std_laplace_quantile, StatsError};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error("{path} row {row}: {msg}")]
    Row { path: String, row: u64, msg: String },
    #[error("{path}: {msg}")]
    Schema { path: String, msg: String },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

impl IoError {
    fn file(path: &Path, source: std::io::Error) -> Self {
        IoError::File { path: path.display().to_string(), source }
    }

    fn row(path: &Path, row: u64, msg: impl Into<String>) -> Self {
        IoError::Row { path: path.display().to_string(), row, msg: msg.into() }
    }

    fn schema(path: &Path, msg: impl Into<String>) -> Self {
        IoError::Schema { path: path.display().to_string(), msg: msg.into() }
    }
}

/// Writes bytes to a temporary file in the target directory and renames it
/// into place, so readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::file(path, e))?;
    tmp.write_all(bytes).map_err(|e| IoError::file(path, e))?;
    tmp.flush().map_err(|e| IoError::file(path, e))?;
    tmp.persist(path).map_err(|e| IoError::file(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| IoError::Json { path: path.display().to_string(), source: e })?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::file(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| IoError::Json { path: path.display().to_string(), source: e })
}

fn fmt_time(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

const TRACK_HEADER: [&str; 6] = ["pass_id", "time_iso8601", "lat", "lon", "value", "direction"];

fn parse_f64(field: &str, name: &str, path: &Path, row: u64) -> Result<f64, IoError> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| IoError::row(path, row, format!("non-numeric value {field:?} in column {name}")))
}

fn parse_time(field: &str, path: &Path, row: u64) -> Result<DateTime<Utc>, IoError> {
    field
        .trim()
        .parse::<DateTime<Utc>>()
        .map_err(|_| IoError::row(path, row, format!("unparseable timestamp {field:?}")))
}

/// Reads one quantity's track CSV; rows sharing a pass_id are grouped into
/// passes in order of first appearance. "row" in errors is the 1-based file
/// line, counting the header.
pub fn read_tracks(path: &Path) -> Result<Vec<Pass>, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| IoError::schema(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| IoError::schema(path, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != TRACK_HEADER {
        return Err(IoError::schema(
            path,
            format!("expected header {}, found {}", TRACK_HEADER.join(","), headers.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut passes: Vec<Pass> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line());
            IoError::row(path, row, e.to_string())
        })?;
        let row = record.position().map_or(0, |p| p.line());
        if record.len() != TRACK_HEADER.len() {
            return Err(IoError::row(path, row, format!("expected 6 fields, found {}", record.len())));
        }
        let id = record[0].to_string();
        let time = parse_time(&record[1], path, row)?;
        let lat = parse_f64(&record[2], "lat", path, row)?;
        let lon = parse_f64(&record[3], "lon", path, row)?;
        let value = parse_f64(&record[4], "value", path, row)?;
        let direction = parse_f64(&record[5], "direction", path, row)?;
        let location = crate::geo::GeoPoint::new(lat, lon)
            .map_err(|e| IoError::row(path, row, e.to_string()))?;
        let obs = TrackObservation::new(time, location, value, direction)
            .map_err(|e| IoError::row(path, row, e.to_string()))?;
        match index.get(&id) {
            Some(&i) => passes[i].observations.push(obs),
            None => {
                index.insert(id.clone(), passes.len());
                passes.push(Pass { id, observations: vec![obs] });
            }
        }
    }
    Ok(passes)
}

pub fn write_tracks(path: &Path, passes: &[Pass]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRACK_HEADER).map_err(|e| IoError::schema(path, e.to_string()))?;
    for pass in passes {
        for o in &pass.observations {
            w.write_record([
                pass.id.as_str(),
                &fmt_time(o.time),
                &o.location.lat_deg.to_string(),
                &o.location.lon_deg.to_string(),
                &o.value.to_string(),
                &o.direction_deg.to_string(),
            ])
            .map_err(|e| IoError::schema(path, e.to_string()))?;
        }
    }
    let bytes = w.into_inner().expect("in-memory writer");
    atomic_write(path, &bytes)
}

/// Sidecar document naming the quantities and fixing the transect geometry
/// that a registered CSV refers to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransectDoc {
    pub quantities: Vec<String>,
    pub transect: Transect,
}

fn registered_header(m: usize, n_loc: usize) -> Vec<String> {
    let mut h = vec!["time_iso8601".to_string(), "season_deg".to_string()];
    for k in 1..=m {
        for j in 0..n_loc {
            h.push(format!("q{k}_loc{j}_value"));
            h.push(format!("q{k}_loc{j}_dir"));
        }
    }
    h
}

pub fn write_registered(path: &Path, ds: &RegisteredDataset) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = registered_header(ds.quantities.len(), ds.transect.len());
    w.write_record(&header).map_err(|e| IoError::schema(path, e.to_string()))?;
    for e in &ds.events {
        let mut rec = Vec::with_capacity(header.len());
        rec.push(fmt_time(e.time));
        rec.push(e.season_deg.to_string());
        for (v, d) in e.values.iter().zip(&e.directions) {
            rec.push(v.to_string());
            rec.push(d.to_string());
        }
        w.write_record(&rec).map_err(|e| IoError::schema(path, e.to_string()))?;
    }
    let bytes = w.into_inner().expect("in-memory writer");
    atomic_write(path, &bytes)
}

pub fn read_registered(path: &Path, doc: &TransectDoc) -> Result<RegisteredDataset, IoError> {
    let m = doc.quantities.len();
    let n_loc = doc.transect.len();
    let expected = registered_header(m, n_loc);
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| IoError::schema(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| IoError::schema(path, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(IoError::schema(
            path,
            format!("header does not match the {m}-quantity, {n_loc}-location layout"),
        ));
    }
    let mut events = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line());
            IoError::row(path, row, e.to_string())
        })?;
        let row = record.position().map_or(0, |p| p.line());
        if record.len() != expected.len() {
            return Err(IoError::row(
                path,
                row,
                format!("expected {} fields, found {}", expected.len(), record.len()),
            ));
        }
        let time = parse_time(&record[0], path, row)?;
        let season_deg = parse_f64(&record[1], "season_deg", path, row)?;
        let mut values = Vec::with_capacity(m * n_loc);
        let mut directions = Vec::with_capacity(m * n_loc);
        for c in 0..m * n_loc {
            values.push(parse_f64(&record[2 + 2 * c], &expected[2 + 2 * c], path, row)?);
            directions.push(parse_f64(&record[3 + 2 * c], &expected[3 + 2 * c], path, row)?);
        }
        events.push(RegisteredEvent { time, season_deg, values, directions });
    }
    Ok(RegisteredDataset {
        quantities: doc.quantities.clone(),
        transect: doc.transect.clone(),
        events,
    })
}

/// Builds the conditioned Laplace-scale dataset from a transformed
/// registered dataset: conditioning column is quantity 1 at location 0,
/// events kept when it exceeds the standard Laplace `u_quantile` level.
pub fn laplace_dataset_from_registered(
    ds: &RegisteredDataset,
    u_quantile: f64,
) -> Result<LaplaceDataset, IoError> {
    let u = std_laplace_quantile(u_quantile)?;
    let n_loc = ds.transect.len();
    let m = ds.quantities.len();
    let p = n_loc - 1;
    let mut x = Vec::new();
    let mut remote = Vec::new();
    for e in &ds.events {
        let xi = e.values[0];
        if !(xi > u) {
            continue;
        }
        x.push(xi);
        for k in 0..m {
            for j in 1..n_loc {
                remote.push(e.values[k * n_loc + j]);
            }
        }
    }
    let distances = ds.transect.distances_km()[1..].to_vec();
    debug_assert_eq!(distances.len(), p);
    Ok(LaplaceDataset::new(x, remote, distances, ds.quantities.clone(), u)?)
}

/// Sidecar for a conditioned Laplace-scale CSV, carrying the layout and
/// threshold that the bare numeric columns do not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceMeta {
    pub quantities: Vec<String>,
    pub distances_km: Vec<f64>,
    pub u: f64,
}

/// Path of the meta sidecar written alongside a conditioned CSV.
pub fn meta_path(csv: &Path) -> PathBuf {
    let mut name = csv.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    name.push_str(".meta.json");
    csv.with_file_name(name)
}

/// Path of the transect sidecar written alongside a registered CSV.
pub fn transect_path(csv: &Path) -> PathBuf {
    let mut name = csv.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    name.push_str(".transect.json");
    csv.with_file_name(name)
}

fn laplace_header(m: usize, p: usize) -> Vec<String> {
    let mut h = vec!["x".to_string()];
    for k in 1..=m {
        for j in 1..=p {
            h.push(format!("q{k}_loc{j}"));
        }
    }
    h
}

/// Writes the conditioned dataset as a CSV (x then remote columns in index
/// order) plus a `.meta.json` sidecar.
pub fn write_laplace_dataset(path: &Path, ds: &LaplaceDataset) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&laplace_header(ds.m(), ds.p()))
        .map_err(|e| IoError::schema(path, e.to_string()))?;
    for i in 0..ds.n() {
        let mut rec = Vec::with_capacity(1 + ds.m() * ds.p());
        rec.push(ds.x()[i].to_string());
        for v in ds.remote_row(i) {
            rec.push(v.to_string());
        }
        w.write_record(&rec).map_err(|e| IoError::schema(path, e.to_string()))?;
    }
    let bytes = w.into_inner().expect("in-memory writer");
    atomic_write(path, &bytes)?;
    let meta = LaplaceMeta {
        quantities: ds.quantities().to_vec(),
        distances_km: ds.distances_km().to_vec(),
        u: ds.u(),
    };
    write_json(&meta_path(path), &meta)
}

/// Reads a conditioned CSV together with its `.meta.json` sidecar.
pub fn read_laplace_dataset(path: &Path) -> Result<LaplaceDataset, IoError> {
    let meta: LaplaceMeta = read_json(&meta_path(path))?;
    let m = meta.quantities.len();
    let p = meta.distances_km.len();
    let expected = laplace_header(m, p);
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| IoError::schema(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| IoError::schema(path, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(IoError::schema(
            path,
            format!("header does not match the {m}-quantity, {p}-remote layout"),
        ));
    }
    let mut x = Vec::new();
    let mut remote = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let row = e.position().map_or(0, |p| p.line());
            IoError::row(path, row, e.to_string())
        })?;
        let row = record.position().map_or(0, |p| p.line());
        if record.len() != expected.len() {
            return Err(IoError::row(
                path,
                row,
                format!("expected {} fields, found {}", expected.len(), record.len()),
            ));
        }
        x.push(parse_f64(&record[0], "x", path, row)?);
        for c in 1..expected.len() {
            remote.push(parse_f64(&record[c], &expected[c], path, row)?);
        }
    }
    Ok(LaplaceDataset::new(x, remote, meta.distances_km, meta.quantities, meta.u)?)
}

/// Fitted marginal models for every (quantity, location) column, in the
/// registered column order k * (p + 1) + j.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarginsDoc {
    pub quantities: Vec<String>,
    pub n_locations: usize,
    pub tau: f64,
    /// Cross-validated penalty per column.
    pub lambdas: Vec<f64>,
    pub seed: u64,
    pub columns: Vec<MarginalEnsemble>,
}

/// Posterior chain artifact: configuration echo, layout, thinned samples,
/// and summaries.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainDoc {
    pub config: MCMCConfig,
    pub layout: ParamLayout,
    pub quantities: Vec<String>,
    pub distances_km: Vec<f64>,
    pub u: f64,
    pub thin: usize,
    pub accept_rate_warmup: f64,
    pub accept_rate_adaptive: f64,
    /// Burn-in index into the thinned sample list.
    pub burn_in: usize,
    pub samples: Vec<Vec<f64>>,
    pub log_posts: Vec<f64>,
    pub summary: ChainSummary,
    pub median: Vec<f64>,
}

impl ChainDoc {
    pub fn from_chain(
        chain: &PosteriorChain,
        config: &MCMCConfig,
        layout: &ParamLayout,
        quantities: &[String],
        distances_km: &[f64],
        u: f64,
        thin: usize,
    ) -> Self {
        let thin = thin.max(1);
        let samples: Vec<Vec<f64>> = chain.samples.iter().step_by(thin).cloned().collect();
        let log_posts: Vec<f64> = chain.log_posts.iter().step_by(thin).copied().collect();
        ChainDoc {
            config: config.clone(),
            layout: layout.clone(),
            quantities: quantities.to_vec(),
            distances_km: distances_km.to_vec(),
            u,
            thin,
            accept_rate_warmup: chain.accept_rate_warmup,
            accept_rate_adaptive: chain.accept_rate_adaptive,
            burn_in: chain.burn_in.div_ceil(thin),
            samples,
            log_posts,
            summary: chain.summary(),
            median: chain.median_params(),
        }
    }

    pub fn to_chain(&self) -> PosteriorChain {
        PosteriorChain {
            samples: self.samples.clone(),
            log_posts: self.log_posts.clone(),
            accept_rate_warmup: self.accept_rate_warmup,
            accept_rate_adaptive: self.accept_rate_adaptive,
            burn_in: self.burn_in,
        }
    }
}

fn csv_bytes(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory writer");
    for row in rows {
        w.write_record(&row).expect("in-memory writer");
    }
    w.into_inner().expect("in-memory writer")
}

pub fn write_profiles_csv(path: &Path, prof: &ConditionalProfile) -> Result<(), IoError> {
    let bytes = csv_bytes(
        &["distance", "quantity", "mean", "lo", "hi", "sd", "sd_lo", "sd_hi"],
        prof.rows.iter().map(|r| {
            vec![
                r.distance_km.to_string(),
                r.quantity.to_string(),
                r.mean.to_string(),
                r.mean_lo.to_string(),
                r.mean_hi.to_string(),
                r.sd.to_string(),
                r.sd_lo.to_string(),
                r.sd_hi.to_string(),
            ]
        }),
    );
    atomic_write(path, &bytes)
}

pub fn write_quantiles_csv(path: &Path, qv: &QuantileValidation) -> Result<(), IoError> {
    let bytes = csv_bytes(
        &["j", "k", "prob", "observed", "simulated"],
        qv.rows.iter().map(|r| {
            vec![
                r.location.to_string(),
                r.quantity.to_string(),
                r.prob.to_string(),
                r.observed.to_string(),
                r.simulated.to_string(),
            ]
        }),
    );
    atomic_write(path, &bytes)
}

pub fn write_kl_csv(path: &Path, kl: &KLTestResult) -> Result<(), IoError> {
    let bytes = csv_bytes(
        &["j", "k", "kl", "null_p95", "tail_prob"],
        kl.pairs.iter().map(|p| {
            vec![
                p.location.to_string(),
                p.quantity.to_string(),
                p.kl.to_string(),
                p.null_p95.to_string(),
                p.tail_prob.to_string(),
            ]
        }),
    );
    atomic_write(path, &bytes)
}

/// One file per remote column with observed and simulated residuals side by
/// side; returns the written paths for the manifest.
pub fn write_residual_pairs(dir: &Path, rs: &ResidualSet) -> Result<Vec<PathBuf>, IoError> {
    std::fs::create_dir_all(dir).map_err(|e| IoError::file(dir, e))?;
    let mut written = Vec::with_capacity(rs.pairs.len());
    for (a, (j, k)) in rs.pairs.iter().enumerate() {
        let path = dir.join(format!("loc{j}_q{k}.csv"));
        let bytes = csv_bytes(
            &["observed", "simulated"],
            rs.observed[a]
                .iter()
                .zip(&rs.simulated[a])
                .map(|(o, s)| vec![o.to_string(), s.to_string()]),
        );
        atomic_write(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

/// Simulated remote vectors, one row per kept simulation, column per (j,k).
pub fn write_sims_csv(path: &Path, sims: &ConditionalSims, p: usize, m: usize) -> Result<(), IoError> {
    let mut header = vec!["x".to_string()];
    for k in 1..=m {
        for j in 1..=p {
            header.push(format!("q{k}_loc{j}"));
        }
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let bytes = csv_bytes(
        &header_refs,
        sims.rows.iter().map(|row| {
            let mut rec = Vec::with_capacity(row.len() + 1);
            rec.push(sims.x.to_string());
            rec.extend(row.iter().map(|v| v.to_string()));
            rec
        }),
    );
    atomic_write(path, &bytes)
}

pub fn sha256_file(path: &Path) -> Result<String, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::file(path, e))?;
    let mut h = Sha256::new();
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

/// Machine-readable record of one command execution: what went in, what came
/// out, and the seed that drove it. Contains no timestamps so identical runs
/// produce identical manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    pub inputs: Vec<ManifestEntry>,
    pub outputs: Vec<ManifestEntry>,
}

impl RunManifest {
    pub fn gather(
        subcommand: &str,
        seed: Option<u64>,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
    ) -> Result<Self, IoError> {
        let entry = |p: &PathBuf| -> Result<ManifestEntry, IoError> {
            Ok(ManifestEntry { path: p.display().to_string(), sha256: sha256_file(p)? })
        };
        Ok(RunManifest {
            tool: "msce".to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            seed,
            inputs: inputs.iter().map(entry).collect::<Result<_, _>>()?,
            outputs: outputs.iter().map(entry).collect::<Result<_, _>>()?,
        })
    }
}

/// Aggregate manifest for a full pipeline run, one entry per stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub stages: Vec<RunManifest>,
}

/// Path of the manifest written alongside an output file.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    name.push_str(".manifest.json");
    output.with_file_name(name)
}
