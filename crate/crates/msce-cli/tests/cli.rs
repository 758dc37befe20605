//! End-to-end tests of the msce binary: pipeline reproducibility, exit codes,
//! machine-parsable error lines, and help output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn msce() -> Command {
    Command::new(env!("CARGO_BIN_EXE_msce"))
}

fn stderr_line(out: &Output) -> String {
    let s = String::from_utf8_lossy(&out.stderr);
    let t = s.trim();
    assert!(
        !t.contains('\n'),
        "stderr should be a single line, got:\n{s}"
    );
    t.to_string()
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                files.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn pipeline_config(out_dir: &Path) -> Value {
    let bins: Vec<Value> = (1..=16)
        .map(|b| {
            json!({
                "tau": 0.7,
                "threshold_u": 4.0 + 0.1 * b as f64,
                "body_min": 0.0,
                "sigma": 1.0 + 0.05 * b as f64,
                "xi": 0.05,
            })
        })
        .collect();
    let prof = |vals: [f64; 2]| json!({"node_distances_km": [100.0, 200.0], "node_values": vals});
    json!({
        "synth": {
            "quantities": ["hs", "ws"],
            "n_events": 1600,
            "u_quantile": 0.75,
            "seed": 7,
            "distances_km": [100.0, 200.0],
            "true_params": {
                "profiles": [
                    {
                        "alpha": prof([0.6, 0.35]),
                        "beta": prof([0.25, 0.12]),
                        "mu": prof([0.3, 0.15]),
                        "sigma": prof([0.8, 1.05]),
                        "delta": prof([1.8, 1.5]),
                    },
                    {
                        "alpha": prof([0.5, 0.3]),
                        "beta": prof([0.2, 0.1]),
                        "mu": prof([0.25, 0.1]),
                        "sigma": prof([0.9, 1.1]),
                        "delta": prof([1.7, 1.4]),
                    },
                ],
                "lambda": [0.8],
                "rho": [0.7, 0.65, 0.6],
                "kappa": [0.3, 0.28, 0.26],
                "rho_unit_km": 100.0,
                "kappa_unit": 5.0,
            },
            "physical": {"bins": bins},
        },
        "u_quantile": 0.75,
        "tau": 0.7,
        "lambda_grid": [1.0, 100.0],
        "folds": 3,
        "n_boot": 4,
        "min_exceedances": 8,
        "n_nod": 2,
        "n1": 60,
        "n2": 600,
        "n_random_search": 300,
        "thin": 10,
        "n_sims": 200,
        "kl_boot": 200,
        "kl_bins": 25,
        "grid_points": 10,
        "x_quantile": 0.75,
        "seed": 11,
        "jitter_km": 1.0,
        "out_dir": out_dir,
    })
}

#[test]
fn pipeline_runs_all_stages_and_reruns_byte_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("out");
    let cfg_path = tmp.path().join("config.json");
    fs::write(&cfg_path, pipeline_config(&out_dir).to_string()).unwrap();

    let run = || {
        msce()
            .arg("--config")
            .arg(&cfg_path)
            .arg("pipeline")
            .output()
            .unwrap()
    };
    let out = run();
    assert!(
        out.status.success(),
        "pipeline failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let pm: Value =
        serde_json::from_slice(&fs::read(out_dir.join("pipeline.manifest.json")).unwrap()).unwrap();
    let stages: Vec<&str> = pm["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["subcommand"].as_str().unwrap())
        .collect();
    assert_eq!(
        stages,
        ["synth", "register", "fit-margins", "transform", "fit-msce", "simulate", "diagnose"]
    );
    assert_eq!(pm["seed"], json!(11));

    for f in [
        "tracks/q1.csv",
        "tracks/q2.csv",
        "registered.csv",
        "registered.csv.transect.json",
        "margins.json",
        "laplace.csv",
        "chain.json",
        "sims.csv",
        "diag/profiles.csv",
        "diag/quantiles.csv",
        "diag/kl.csv",
        "diag/run.manifest.json",
        "registered.csv.manifest.json",
    ] {
        assert!(out_dir.join(f).is_file(), "missing pipeline artifact {f}");
    }
    // every stage manifest records input and output digests
    for s in pm["stages"].as_array().unwrap() {
        assert!(!s["outputs"].as_array().unwrap().is_empty());
        for o in s["outputs"].as_array().unwrap() {
            assert_eq!(o["sha256"].as_str().unwrap().len(), 64);
        }
    }

    let first = snapshot(&out_dir);
    let out2 = run();
    assert!(out2.status.success());
    let second = snapshot(&out_dir);
    assert_eq!(
        first.keys().collect::<Vec<_>>(),
        second.keys().collect::<Vec<_>>()
    );
    for (path, bytes) in &first {
        assert_eq!(
            Some(bytes),
            second.get(path),
            "{} changed between identical runs",
            path.display()
        );
    }
}

#[test]
fn register_reports_malformed_row_with_file_line() {
    let tmp = tempfile::tempdir().unwrap();
    let track = tmp.path().join("hs.csv");
    let mut body = String::from("pass_id,time_iso8601,lat,lon,value,direction\n");
    for i in 0..20 {
        let value = if i == 15 { "oops".to_string() } else { format!("{}.5", i % 7) };
        body.push_str(&format!(
            "p{},2015-01-0{}T0{}:00:00Z,60.0,0.0,{},45.0\n",
            i / 3,
            1 + i / 9,
            i % 9,
            value
        ));
    }
    fs::write(&track, body).unwrap();

    let out = msce()
        .arg("register")
        .args(["--quantities", "hs"])
        .arg("--tracks")
        .arg(&track)
        .args(["--transect-start", "60,0"])
        .args(["--transect-end", "58,0"])
        .args(["--n-locations", "3"])
        .arg("--out")
        .arg(tmp.path().join("reg.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let line = stderr_line(&out);
    assert!(line.starts_with("error[E_INPUT]:"), "got {line}");
    // record 16 sits on file line 17, counting the header
    assert!(line.contains("row 17"), "got {line}");
    assert!(line.contains("oops"), "got {line}");
}

#[test]
fn unknown_flag_is_a_config_error() {
    let out = msce().arg("--nope").output().unwrap();
    assert_eq!(out.status.code(), Some(3));
    let line = stderr_line(&out);
    assert!(line.starts_with("error[E_CONFIG]:"), "got {line}");
}

#[test]
fn missing_settings_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    // no config file and no transect flags
    let out = msce()
        .arg("register")
        .args(["--quantities", "hs"])
        .args(["--tracks", "nothing.csv"])
        .arg("--out")
        .arg(tmp.path().join("reg.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).starts_with("error[E_CONFIG]:"));

    // simulate needs exactly one parameter source
    let out = msce()
        .arg("simulate")
        .arg("--out")
        .arg(tmp.path().join("sims.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).contains("--chain"));
}

#[test]
fn bad_threads_env_is_a_config_error() {
    let out = msce()
        .env("MSCE_THREADS", "many")
        .arg("fit-msce")
        .args(["--out", "x.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let line = stderr_line(&out);
    assert!(line.starts_with("error[E_CONFIG]:"), "got {line}");
    assert!(line.contains("MSCE_THREADS"), "got {line}");
}

#[test]
fn help_lists_flag_defaults() {
    let out = msce().args(["fit-msce", "--help"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    for needle in [
        "[default: 250]",
        "[default: 19750]",
        "[default: 2000]",
        "[default: 0.05]",
        "[default: 0.25]",
        "[default: 0.75]",
        "[default: 5]",
        "[default: 100]",
        "[default: 10]",
        "[default: 1]",
    ] {
        assert!(text.contains(needle), "fit-msce help missing {needle}:\n{text}");
    }

    let out = msce().args(["fit-margins", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    for needle in ["[default: 0.7]", "[default: 5]", "[default: 100]", "[default: 0.6,0.8]", "[default: 20]"] {
        assert!(text.contains(needle), "fit-margins help missing {needle}:\n{text}");
    }

    let out = msce().args(["register", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("[default: 50]"));
    assert!(text.contains("[default: 2]"));

    let out = msce().args(["diagnose", "--help"]).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    for needle in ["[default: 500]", "[default: 25]", "[default: 0.025,0.25,0.5,0.75,0.975]"] {
        assert!(text.contains(needle), "diagnose help missing {needle}:\n{text}");
    }
}

#[test]
fn conditioned_synth_fit_and_diagnose_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = json!({
        "quantities": ["hs"],
        "n_events": 200,
        "u_quantile": 0.8,
        "seed": 1,
        "distances_km": [100.0, 200.0],
        "true_params": {
            "profiles": [{
                "alpha": {"node_distances_km": [100.0, 200.0], "node_values": [0.6, 0.3]},
                "beta":  {"node_distances_km": [100.0, 200.0], "node_values": [0.2, 0.1]},
                "mu":    {"node_distances_km": [100.0, 200.0], "node_values": [0.2, 0.1]},
                "sigma": {"node_distances_km": [100.0, 200.0], "node_values": [0.8, 1.0]},
                "delta": {"node_distances_km": [100.0, 200.0], "node_values": [1.8, 1.5]}
            }],
            "lambda": [],
            "rho": [0.7],
            "kappa": [0.3],
            "rho_unit_km": 100.0,
            "kappa_unit": 5.0
        }
    });
    let spec_path = tmp.path().join("spec.json");
    fs::write(&spec_path, spec.to_string()).unwrap();
    let data = tmp.path().join("data.csv");
    let chain = tmp.path().join("chain.json");

    let out = msce()
        .arg("synth")
        .arg("conditioned")
        .arg("--spec")
        .arg(&spec_path)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("data.csv.meta.json").is_file());

    let out = msce()
        .arg("fit-msce")
        .arg("--data")
        .arg(&data)
        .args(["--n1", "30", "--n2", "300", "--n-random-search", "120"])
        .args(["--n-nod", "2", "--thin", "5", "--seed", "4"])
        .arg("--out")
        .arg(&chain)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let diag = tmp.path().join("diag");
    let out = msce()
        .arg("diagnose")
        .arg("--chain")
        .arg(&chain)
        .arg("--data")
        .arg(&data)
        .args(["--x-quantile", "0.85", "--n-sims", "80", "--n-boot", "200", "--seed", "9"])
        .arg("--out-dir")
        .arg(&diag)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["profiles.csv", "quantiles.csv", "kl.csv", "run.manifest.json"] {
        assert!(diag.join(f).is_file(), "missing diagnostic {f}");
    }
    assert!(diag.join("residual_pairs").join("loc1_q1.csv").is_file());

    // a diagnostic level below the dataset threshold is a configuration fault
    let out = msce()
        .arg("diagnose")
        .arg("--chain")
        .arg(&chain)
        .arg("--data")
        .arg(&data)
        .args(["--x-quantile", "0.5", "--n-boot", "200"])
        .arg("--out-dir")
        .arg(tmp.path().join("diag2"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr_line(&out).starts_with("error[E_CONFIG]:"));
}
