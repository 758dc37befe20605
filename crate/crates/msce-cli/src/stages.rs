//! The work behind each subcommand, shared with the pipeline so both paths
//! produce identical artifacts: read inputs, run the library, write outputs
//! atomically, and record a manifest alongside the primary output.

use std::path::{Path, PathBuf};

use msce::diagnostics::{self, DiagnosticsError, ParamsSource, DEFAULT_VALIDATION_PROBS};
use msce::geo::{register_events, Pass, RegisteredDataset, Transect};
use msce::io::{self, ChainDoc, MarginsDoc, PipelineManifest, RunManifest, TransectDoc};
use msce::marginal::{
    bootstrap_margins, laplace_to_physical, pit_to_laplace, return_level_sim, select_penalty_cv,
    BinScheme, BinnedSample,
};
use msce::mcmc::{run_chains, MCMCConfig};
use msce::model::{posterior_fn, LaplaceDataset, MSCEParams, ParamLayout};
use msce::seed::{stage_seed, task_seed};
use msce::synth::{dataset_to_tracks, generate_conditioned, generate_physical, SynthError, SynthSpec};

use crate::config::{self, FileConfig};
use crate::error::{compute_err, config_err, input_err, CliError};

fn synth_err(e: SynthError) -> CliError {
    match e {
        SynthError::BadSpec(_) | SynthError::MissingBinSpec => CliError::Config(e.to_string()),
        other => CliError::Compute(other.to_string()),
    }
}

fn diag_err(e: DiagnosticsError) -> CliError {
    match e {
        DiagnosticsError::BadConfig(_) => CliError::Config(e.to_string()),
        other => CliError::Compute(other.to_string()),
    }
}

/// Writes the run manifest next to the primary output and returns it for
/// pipeline aggregation.
fn emit_manifest(
    subcommand: &str,
    seed: Option<u64>,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
    primary: &Path,
) -> Result<RunManifest, CliError> {
    let man = RunManifest::gather(subcommand, seed, inputs, outputs).map_err(input_err)?;
    io::write_json(&io::manifest_path(primary), &man).map_err(input_err)?;
    Ok(man)
}

pub fn register_core(
    quantities: &[String],
    track_paths: &[PathBuf],
    transect: &Transect,
    max_dist_km: f64,
    pass_window_hours: f64,
    out: &Path,
) -> Result<RunManifest, CliError> {
    let mut tracks: Vec<Vec<Pass>> = Vec::with_capacity(track_paths.len());
    for p in track_paths {
        tracks.push(io::read_tracks(p).map_err(input_err)?);
    }
    let (ds, stats) =
        register_events(quantities, &tracks, transect, max_dist_km, pass_window_hours)
            .map_err(input_err)?;
    log::info!(
        "registered {} events; {} passes rejected by distance, {} incomplete, {} empty",
        stats.accepted,
        stats.rejected_passes,
        stats.dropped_incomplete,
        stats.empty_passes
    );
    io::write_registered(out, &ds).map_err(input_err)?;
    let tpath = io::transect_path(out);
    let doc = TransectDoc { quantities: quantities.to_vec(), transect: transect.clone() };
    io::write_json(&tpath, &doc).map_err(input_err)?;
    emit_manifest("register", None, track_paths, &[out.to_path_buf(), tpath], out)
}

fn column_samples(
    ds: &RegisteredDataset,
    scheme: &BinScheme,
    k: usize,
    j: usize,
) -> Result<Vec<BinnedSample>, CliError> {
    ds.column(k, j)
        .into_iter()
        .map(|(value, dir, season)| {
            let bin = scheme.assign(dir, season).map_err(|e| {
                CliError::Input(format!("quantity {}, location {j}: {e}", k + 1))
            })?;
            Ok(BinnedSample { value, bin })
        })
        .collect()
}

pub struct MarginKnobs {
    pub tau: f64,
    pub lambda_grid: Vec<f64>,
    pub folds: usize,
    pub n_boot: usize,
    pub tau_range: (f64, f64),
    pub min_exceedances: usize,
    /// Master seed; per-column CV and bootstrap seeds derive from it.
    pub seed: u64,
}

pub fn margins_core(
    registered: &Path,
    transect_doc_path: &Path,
    knobs: &MarginKnobs,
    out: &Path,
) -> Result<RunManifest, CliError> {
    let doc: TransectDoc = io::read_json(transect_doc_path).map_err(input_err)?;
    let ds = io::read_registered(registered, &doc).map_err(input_err)?;
    let scheme = BinScheme::default();
    let n_loc = ds.n_locations();
    let m = ds.quantities.len();
    let cv_stage = stage_seed(knobs.seed, "fit-margins-cv");
    let boot_stage = stage_seed(knobs.seed, "fit-margins-boot");
    let mut lambdas = Vec::with_capacity(m * n_loc);
    let mut columns = Vec::with_capacity(m * n_loc);
    for k in 0..m {
        for j in 0..n_loc {
            let c = (k * n_loc + j) as u64;
            let samples = column_samples(&ds, &scheme, k, j)?;
            let lambda = if knobs.lambda_grid.len() == 1 {
                knobs.lambda_grid[0]
            } else {
                select_penalty_cv(
                    &samples,
                    knobs.tau,
                    &knobs.lambda_grid,
                    knobs.folds,
                    task_seed(cv_stage, c),
                )
                .map_err(compute_err)?
                .lambda
            };
            let ens = bootstrap_margins(
                &samples,
                knobs.n_boot,
                knobs.tau_range,
                lambda,
                knobs.min_exceedances,
                task_seed(boot_stage, c),
            )
            .map_err(compute_err)?;
            log::info!(
                "column q{} loc{j}: lambda {lambda}, {} of {} bootstrap members kept",
                k + 1,
                ens.members.len(),
                ens.members.len() + ens.n_failed
            );
            lambdas.push(lambda);
            columns.push(ens);
        }
    }
    let mdoc = MarginsDoc {
        quantities: ds.quantities.clone(),
        n_locations: n_loc,
        tau: knobs.tau,
        lambdas,
        seed: knobs.seed,
        columns,
    };
    io::write_json(out, &mdoc).map_err(input_err)?;
    emit_manifest(
        "fit-margins",
        Some(knobs.seed),
        &[registered.to_path_buf(), transect_doc_path.to_path_buf()],
        &[out.to_path_buf()],
        out,
    )
}

/// Maps every value through its column's fitted marginal, to standard
/// Laplace scale or back; directions, times, and seasons pass through.
pub fn transform_core(
    registered: &Path,
    transect_doc_path: &Path,
    margins_path: &Path,
    to_laplace: bool,
    out: &Path,
) -> Result<RunManifest, CliError> {
    let doc: TransectDoc = io::read_json(transect_doc_path).map_err(input_err)?;
    let mut ds = io::read_registered(registered, &doc).map_err(input_err)?;
    let margins: MarginsDoc = io::read_json(margins_path).map_err(input_err)?;
    let n_loc = ds.n_locations();
    if margins.n_locations != n_loc || margins.quantities != ds.quantities {
        return Err(CliError::Input(format!(
            "{}: margins were fitted for a different quantity/location layout",
            margins_path.display()
        )));
    }
    let scheme = BinScheme::default();
    for e in &mut ds.events {
        for idx in 0..margins.quantities.len() * n_loc {
            let bin = scheme.assign(e.directions[idx], e.season_deg).map_err(input_err)?;
            let model = &margins.columns[idx].median_model;
            e.values[idx] = if to_laplace {
                pit_to_laplace(e.values[idx], bin, model).map_err(compute_err)?
            } else {
                laplace_to_physical(e.values[idx], bin, model).map_err(compute_err)?
            };
        }
    }
    io::write_registered(out, &ds).map_err(input_err)?;
    let tpath = io::transect_path(out);
    io::write_json(&tpath, &doc).map_err(input_err)?;
    emit_manifest(
        if to_laplace { "transform" } else { "invert" },
        None,
        &[registered.to_path_buf(), transect_doc_path.to_path_buf(), margins_path.to_path_buf()],
        &[out.to_path_buf(), tpath],
        out,
    )
}

pub fn return_levels_core(
    margins_path: &Path,
    quantity: &str,
    location: usize,
    rate_file: &Path,
    years: f64,
    n_sims: usize,
    seed: u64,
    out: &Path,
) -> Result<RunManifest, CliError> {
    let margins: MarginsDoc = io::read_json(margins_path).map_err(input_err)?;
    let k = margins
        .quantities
        .iter()
        .position(|q| q == quantity)
        .ok_or_else(|| CliError::Config(format!("unknown quantity {quantity:?}")))?;
    if location >= margins.n_locations {
        return Err(CliError::Config(format!(
            "location {location} out of range (the margins cover {} locations)",
            margins.n_locations
        )));
    }
    let rates: Vec<f64> = io::read_json(rate_file).map_err(input_err)?;
    let model = &margins.columns[k * margins.n_locations + location].median_model;
    let summary =
        return_level_sim(model, &rates, years, n_sims, stage_seed(seed, "return-levels"))
            .map_err(compute_err)?;
    io::write_json(out, &summary).map_err(input_err)?;
    emit_manifest(
        "return-levels",
        Some(seed),
        &[margins_path.to_path_buf(), rate_file.to_path_buf()],
        &[out.to_path_buf()],
        out,
    )
}

/// Loads the conditioned dataset from either a bare conditioned CSV (with
/// its meta sidecar) or a Laplace-scale registered CSV thresholded at
/// `u_quantile`. Returns the dataset and the paths read, for the manifest.
pub fn load_conditioned(
    data_csv: Option<&PathBuf>,
    registered: Option<&PathBuf>,
    transect_doc: Option<&PathBuf>,
    u_quantile: f64,
) -> Result<(LaplaceDataset, Vec<PathBuf>), CliError> {
    match (data_csv, registered) {
        (Some(d), None) => {
            let ds = io::read_laplace_dataset(d).map_err(input_err)?;
            Ok((ds, vec![d.clone(), io::meta_path(d)]))
        }
        (None, Some(r)) => {
            let tpath = transect_doc.cloned().unwrap_or_else(|| io::transect_path(r));
            let doc: TransectDoc = io::read_json(&tpath).map_err(input_err)?;
            let ds = io::read_registered(r, &doc).map_err(input_err)?;
            let lap = io::laplace_dataset_from_registered(&ds, u_quantile).map_err(input_err)?;
            Ok((lap, vec![r.clone(), tpath]))
        }
        _ => Err(CliError::Config(
            "exactly one of --data and --registered is required".to_string(),
        )),
    }
}

pub struct FitKnobs {
    pub n_nod: usize,
    pub rho_unit_km: f64,
    pub kappa_unit: f64,
    /// Chain configuration; its seed is already the derived stage seed.
    pub mcmc: MCMCConfig,
    pub thin: usize,
    pub chains: usize,
    /// Master seed, recorded in the manifest.
    pub seed: u64,
}

fn numbered(out: &Path, i: usize) -> PathBuf {
    match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => out.with_extension(format!("{i}.{ext}")),
        None => out.with_extension(i.to_string()),
    }
}

pub fn fit_msce_core(
    data: &LaplaceDataset,
    inputs: &[PathBuf],
    knobs: &FitKnobs,
    out: &Path,
) -> Result<RunManifest, CliError> {
    let layout = ParamLayout::spanning(
        data.m(),
        knobs.n_nod,
        data.distances_km(),
        knobs.rho_unit_km,
        knobs.kappa_unit,
    )
    .map_err(config_err)?;
    let lp = posterior_fn(&layout, data).map_err(compute_err)?;
    let chains =
        run_chains(&lp, &layout.bounds(), &knobs.mcmc, knobs.chains).map_err(compute_err)?;
    let mut outputs = Vec::with_capacity(chains.len());
    for (i, chain) in chains.iter().enumerate() {
        let path = if i == 0 { out.to_path_buf() } else { numbered(out, i) };
        let doc = ChainDoc::from_chain(
            chain,
            &knobs.mcmc,
            &layout,
            data.quantities(),
            data.distances_km(),
            data.u(),
            knobs.thin,
        );
        log::info!(
            "chain {i}: warmup acceptance {:.3}, adaptive acceptance {:.3}",
            chain.accept_rate_warmup,
            chain.accept_rate_adaptive
        );
        io::write_json(&path, &doc).map_err(input_err)?;
        outputs.push(path);
    }
    emit_manifest("fit-msce", Some(knobs.seed), inputs, &outputs, out)
}

pub fn simulate_core(
    src: ParamsSource,
    p: usize,
    m: usize,
    distances_km: &[f64],
    x_quantile: f64,
    n_sims: usize,
    seed: u64,
    inputs: &[PathBuf],
    out: &Path,
) -> Result<RunManifest, CliError> {
    let sims = diagnostics::simulate_conditional(
        src,
        distances_km,
        x_quantile,
        n_sims,
        stage_seed(seed, "simulate"),
    )
    .map_err(diag_err)?;
    if sims.n_skipped > 0 {
        log::warn!(
            "{} posterior draws implied non-positive-definite correlations and were skipped",
            sims.n_skipped
        );
    }
    io::write_sims_csv(out, &sims, p, m).map_err(input_err)?;
    emit_manifest("simulate", Some(seed), inputs, &[out.to_path_buf()], out)
}

pub struct DiagKnobs {
    pub x_quantile: f64,
    pub n_sims: usize,
    pub n_boot: usize,
    pub n_bins: usize,
    pub probs: Vec<f64>,
    pub grid: Vec<f64>,
    /// Master seed; artifact seeds derive from it.
    pub seed: u64,
}

pub fn diagnose_core(
    data: &LaplaceDataset,
    doc: &ChainDoc,
    inputs: &[PathBuf],
    knobs: &DiagKnobs,
    out_dir: &Path,
) -> Result<RunManifest, CliError> {
    if doc.quantities != data.quantities() || doc.distances_km != data.distances_km() {
        return Err(CliError::Input(
            "chain was fitted for a different quantity/distance layout".to_string(),
        ));
    }
    let chain = doc.to_chain();
    let src = ParamsSource::Chain { layout: &doc.layout, chain: &chain };
    let median: MSCEParams = doc.layout.unpack(&doc.median).map_err(compute_err)?;
    let stage = stage_seed(knobs.seed, "diagnose");

    let prof = diagnostics::conditional_profiles(src, knobs.x_quantile, &knobs.grid)
        .map_err(diag_err)?;
    let qv = diagnostics::quantile_validation(
        data,
        src,
        knobs.x_quantile,
        &knobs.probs,
        knobs.n_sims,
        task_seed(stage, 0),
    )
    .map_err(diag_err)?;
    if qv.few_observations {
        log::warn!("only {} observed events exceed the diagnostic level", qv.n_observed);
    }
    let kl = diagnostics::kl_bootstrap_test(
        data,
        &median,
        knobs.x_quantile,
        knobs.n_boot,
        knobs.n_bins,
        task_seed(stage, 1),
    )
    .map_err(diag_err)?;
    let res = diagnostics::extract_residuals(data, &median, knobs.x_quantile, task_seed(stage, 2))
        .map_err(diag_err)?;

    let p_prof = out_dir.join("profiles.csv");
    let p_q = out_dir.join("quantiles.csv");
    let p_kl = out_dir.join("kl.csv");
    io::write_profiles_csv(&p_prof, &prof).map_err(input_err)?;
    io::write_quantiles_csv(&p_q, &qv).map_err(input_err)?;
    io::write_kl_csv(&p_kl, &kl).map_err(input_err)?;
    let mut outputs = vec![p_prof, p_q, p_kl];
    outputs
        .extend(io::write_residual_pairs(&out_dir.join("residual_pairs"), &res).map_err(input_err)?);
    let man = RunManifest::gather("diagnose", Some(knobs.seed), inputs, &outputs)
        .map_err(input_err)?;
    io::write_json(&out_dir.join("run.manifest.json"), &man).map_err(input_err)?;
    Ok(man)
}

pub fn synth_conditioned_core(
    spec: &SynthSpec,
    inputs: &[PathBuf],
    out: &Path,
) -> Result<RunManifest, CliError> {
    let ds = generate_conditioned(spec).map_err(synth_err)?;
    io::write_laplace_dataset(out, &ds).map_err(input_err)?;
    emit_manifest(
        "synth-conditioned",
        Some(spec.seed),
        inputs,
        &[out.to_path_buf(), io::meta_path(out)],
        out,
    )
}

pub fn synth_physical_core(
    spec: &SynthSpec,
    transect: &Transect,
    inputs: &[PathBuf],
    out: &Path,
    tracks_dir: Option<&Path>,
    jitter_km: f64,
) -> Result<RunManifest, CliError> {
    let ds = generate_physical(spec, transect).map_err(synth_err)?;
    io::write_registered(out, &ds).map_err(input_err)?;
    let tpath = io::transect_path(out);
    let doc = TransectDoc { quantities: ds.quantities.clone(), transect: transect.clone() };
    io::write_json(&tpath, &doc).map_err(input_err)?;
    let mut outputs = vec![out.to_path_buf(), tpath];
    if let Some(dir) = tracks_dir {
        let tracks = dataset_to_tracks(&ds, jitter_km, stage_seed(spec.seed, "synth-tracks"))
            .map_err(synth_err)?;
        for (k, passes) in tracks.iter().enumerate() {
            let p = dir.join(format!("q{}.csv", k + 1));
            io::write_tracks(&p, passes).map_err(input_err)?;
            outputs.push(p);
        }
    }
    emit_manifest("synth-physical", Some(spec.seed), inputs, &outputs, out)
}

/// A transect along a meridian whose along-track distances reproduce the
/// requested remote distances, for synthetic data without real geometry.
pub fn transect_from_distances(distances_km: &[f64]) -> Result<Transect, CliError> {
    const KM_PER_DEG: f64 = 6371.0 * std::f64::consts::PI / 180.0;
    let mut points = vec![msce::geo::GeoPoint::new(60.0, 0.0).map_err(config_err)?];
    for d in distances_km {
        points.push(msce::geo::GeoPoint::new(60.0 - d / KM_PER_DEG, 0.0).map_err(config_err)?);
    }
    Transect::new(points).map_err(config_err)
}

/// Evenly spaced profile grid over the remote distance span.
pub fn default_grid(distances_km: &[f64], n: usize) -> Vec<f64> {
    let (a, b) = (distances_km[0], distances_km[distances_km.len() - 1]);
    if n <= 1 || distances_km.len() == 1 {
        return vec![a];
    }
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

/// The full seven-stage run: synth, register, fit-margins, transform,
/// fit-msce, simulate, diagnose, all seeded from one master seed.
pub fn pipeline_core(
    file: &FileConfig,
    config_path: &Path,
    out_dir: &Path,
    seed_flag: Option<u64>,
) -> Result<(), CliError> {
    let synth = file
        .synth
        .as_ref()
        .ok_or_else(|| CliError::Config("pipeline needs a synth block in the config".to_string()))?;
    let master = seed_flag.or(file.seed).unwrap_or(config::D_SEED);
    let transect = match &file.transect {
        Some(spec) => spec.build()?,
        None => transect_from_distances(&synth.distances_km)?,
    };
    if transect.len() != synth.distances_km.len() + 1 {
        return Err(CliError::Config(
            "transect location count must be one more than the synth remote distances".to_string(),
        ));
    }
    let quantities = synth.quantities.clone();
    let mut spec = synth.clone();
    spec.seed = stage_seed(master, "synth");

    let u_quantile = file.u_quantile.unwrap_or(config::D_U_QUANTILE);
    let x_quantile = file.x_quantile.unwrap_or(config::D_X_QUANTILE);
    let jitter = file.jitter_km.unwrap_or(config::D_JITTER_KM);
    let mut stages: Vec<RunManifest> = Vec::with_capacity(7);

    // 1. synth: physical tracks on disk, as a real campaign would supply
    let tracks_dir = out_dir.join("tracks");
    let ds = generate_physical(&spec, &transect).map_err(synth_err)?;
    let tracks = dataset_to_tracks(&ds, jitter, stage_seed(master, "synth-tracks"))
        .map_err(synth_err)?;
    let mut track_paths = Vec::with_capacity(tracks.len());
    for (k, passes) in tracks.iter().enumerate() {
        let p = tracks_dir.join(format!("q{}.csv", k + 1));
        io::write_tracks(&p, passes).map_err(input_err)?;
        track_paths.push(p);
    }
    let man = RunManifest::gather(
        "synth",
        Some(master),
        &[config_path.to_path_buf()],
        &track_paths,
    )
    .map_err(input_err)?;
    io::write_json(&io::manifest_path(&track_paths[0]), &man).map_err(input_err)?;
    stages.push(man);

    // 2. register
    let registered = out_dir.join("registered.csv");
    stages.push(register_core(
        &quantities,
        &track_paths,
        &transect,
        file.max_dist_km.unwrap_or(config::D_MAX_DIST_KM),
        file.pass_window_hours.unwrap_or(config::D_PASS_WINDOW_HOURS),
        &registered,
    )?);

    // 3. fit-margins
    let margins = out_dir.join("margins.json");
    let mknobs = MarginKnobs {
        tau: file.tau.unwrap_or(config::D_TAU),
        lambda_grid: file.lambda_grid.clone().unwrap_or_else(config::default_lambda_grid),
        folds: file.folds.unwrap_or(config::D_FOLDS),
        n_boot: file.n_boot.unwrap_or(config::D_N_BOOT),
        tau_range: {
            let r = file.tau_range.unwrap_or(config::D_TAU_RANGE);
            (r[0], r[1])
        },
        min_exceedances: file.min_exceedances.unwrap_or(config::D_MIN_EXCEEDANCES),
        seed: master,
    };
    stages.push(margins_core(&registered, &io::transect_path(&registered), &mknobs, &margins)?);

    // 4. transform
    let laplace = out_dir.join("laplace.csv");
    stages.push(transform_core(
        &registered,
        &io::transect_path(&registered),
        &margins,
        true,
        &laplace,
    )?);

    // 5. fit-msce
    let (data, data_inputs) = load_conditioned(None, Some(&laplace), None, u_quantile)?;
    let chain_path = out_dir.join("chain.json");
    let fknobs = FitKnobs {
        n_nod: file.n_nod.unwrap_or(msce::model::DEFAULT_N_NOD),
        rho_unit_km: file.rho_unit_km.unwrap_or(msce::model::DEFAULT_RHO_UNIT_KM),
        kappa_unit: file.kappa_unit.unwrap_or(msce::model::DEFAULT_KAPPA_UNIT),
        mcmc: MCMCConfig {
            n1: file.n1.unwrap_or(MCMCConfig::default().n1),
            n2: file.n2.unwrap_or(MCMCConfig::default().n2),
            n_random_search: file.n_random_search.unwrap_or(MCMCConfig::default().n_random_search),
            epsilon: file.epsilon.unwrap_or(MCMCConfig::default().epsilon),
            burn_in_frac: file.burn_in_frac.unwrap_or(MCMCConfig::default().burn_in_frac),
            seed: stage_seed(master, "fit-msce"),
        },
        thin: file.thin.unwrap_or(config::D_THIN),
        chains: file.chains.unwrap_or(config::D_CHAINS),
        seed: master,
    };
    stages.push(fit_msce_core(&data, &data_inputs, &fknobs, &chain_path)?);

    // 6. simulate
    let doc: ChainDoc = io::read_json(&chain_path).map_err(input_err)?;
    let chain = doc.to_chain();
    let sims = out_dir.join("sims.csv");
    stages.push(simulate_core(
        ParamsSource::Chain { layout: &doc.layout, chain: &chain },
        data.p(),
        data.m(),
        data.distances_km(),
        x_quantile,
        file.n_sims.unwrap_or(config::D_N_SIMS),
        master,
        &[chain_path.clone()],
        &sims,
    )?);

    // 7. diagnose
    let mut diag_inputs = data_inputs;
    diag_inputs.push(chain_path.clone());
    let dknobs = DiagKnobs {
        x_quantile,
        n_sims: file.n_sims.unwrap_or(config::D_N_SIMS),
        n_boot: file.kl_boot.unwrap_or(diagnostics::DEFAULT_KL_BOOT),
        n_bins: file.kl_bins.unwrap_or(diagnostics::DEFAULT_KL_BINS),
        probs: file.probs.clone().unwrap_or_else(|| DEFAULT_VALIDATION_PROBS.to_vec()),
        grid: default_grid(
            data.distances_km(),
            file.grid_points.unwrap_or(config::D_GRID_POINTS),
        ),
        seed: master,
    };
    stages.push(diagnose_core(&data, &doc, &diag_inputs, &dknobs, &out_dir.join("diag"))?);

    let pm = PipelineManifest {
        tool: "msce".to_string(),
        version: stages[0].version.clone(),
        seed: master,
        stages,
    };
    io::write_json(&out_dir.join("pipeline.manifest.json"), &pm).map_err(input_err)
}
