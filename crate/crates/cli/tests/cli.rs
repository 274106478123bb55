use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn rbdsde(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rbdsde"))
        .args(args)
        .current_dir(dir)
        .env_remove("RBDSDE_OUT")
        .output()
        .expect("binary runs")
}

fn scenario(dir: &Path, name: &str, json: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path.to_string_lossy().into_owned()
}

const HEAT: &str = r#"{"builtin": "heat", "n_paths": 1000, "grid": {"t_end": 1.0, "n_steps": 20}}"#;

#[test]
fn solve_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), "heat.json", HEAT);
    for (out, workers) in [("a", "1"), ("b", "1"), ("c", "3")] {
        let o = rbdsde(
            &[
                "solve",
                "--scenario",
                &sc,
                "--seed",
                "7",
                "--workers",
                workers,
                "--out",
                out,
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a/solution.csv")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b/solution.csv")).unwrap());
    assert_eq!(a, fs::read(dir.path().join("c/solution.csv")).unwrap());
}

#[test]
fn alpha_out_of_range_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(
        dir.path(),
        "bad.json",
        r#"{"builtin": "picard_z", "constants": {"c": 0.005, "K": 1.0, "beta": -1.0, "alpha": 1.5, "mu": 0.0}}"#,
    );
    let o = rbdsde(&["picard", "--scenario", &sc, "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("alpha"));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(
        dir.path(),
        "typo.json",
        r#"{"builtin": "heat", "n_path": 100}"#,
    );
    let o = rbdsde(&["solve", "--scenario", &sc, "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("n_path"));

    let sc = scenario(
        dir.path(),
        "param.json",
        r#"{"builtin": "heat", "params": {"sigmaa": 1.0}}"#,
    );
    let o = rbdsde(&["solve", "--scenario", &sc, "--out", "o"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("sigmaa"));
}

#[test]
fn missing_scenario_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = rbdsde(&["solve", "--scenario", "nowhere.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere.json"));
}

#[test]
fn penalize_sweep_has_one_monotone_row_per_n() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(
        dir.path(),
        "put.json",
        r#"{"builtin": "american_put", "n_paths": 4000, "grid": {"t_end": 1.0, "n_steps": 50}}"#,
    );
    let o = rbdsde(
        &[
            "penalize-sweep",
            "--scenario",
            &sc,
            "--n",
            "4,16,64,256",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(dir.path().join("o/penalize_sweep.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(
        rows.iter().map(|r| r[0]).collect::<Vec<_>>(),
        vec![4.0, 16.0, 64.0, 256.0]
    );
    for w in rows.windows(2) {
        let se = (w[0][2].powi(2) + w[1][2].powi(2)).sqrt();
        assert!(w[1][1] >= w[0][1] - 3.0 * se, "{:?}", w);
    }
}

#[test]
fn manifest_lists_every_file_with_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), "heat.json", HEAT);
    let o = rbdsde(
        &[
            "simulate-x",
            "--scenario",
            &sc,
            "--paths",
            "3",
            "--out",
            "o",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("o");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    let mut on_disk: Vec<String> = fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    let mut listed: Vec<String> = files
        .iter()
        .map(|f| f["name"].as_str().unwrap().to_string())
        .collect();
    listed.sort();
    assert_eq!(listed, on_disk);
    for f in files {
        let bytes = fs::read(out.join(f["name"].as_str().unwrap())).unwrap();
        assert_eq!(
            f["sha256"].as_str().unwrap(),
            hex::encode(Sha256::digest(&bytes))
        );
    }
    assert_eq!(manifest["seed"], 0);
    assert_eq!(manifest["subcommand"], "simulate-x");
}

#[test]
fn env_var_sets_the_output_directory() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenario(dir.path(), "heat.json", HEAT);
    let o = Command::new(env!("CARGO_BIN_EXE_rbdsde"))
        .args(["solve", "--scenario", &sc])
        .current_dir(dir.path())
        .env("RBDSDE_OUT", "from_env")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("from_env/solution.csv").exists());
}

#[test]
fn numerical_failure_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    // a flow table far too narrow for the solution values
    let sc = scenario(
        dir.path(),
        "exp.json",
        r#"{"builtin": "exp_noise_flow", "n_paths": 200, "grid": {"t_end": 1.0, "n_steps": 10},
            "field": {"n_t": 3, "n_x": 3}, "flow": {"y_lo": 5.0, "y_hi": 6.0, "n_y": 11, "n_x": 3}}"#,
    );
    let o = rbdsde(&["field", "--scenario", &sc, "--out", "o"], dir.path());
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn bundled_scenarios_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        let config: rbdsde::scenario::ScenarioConfig =
            serde_json::from_str(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        rbdsde::scenario::Scenario::from_config(config)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 6);
}
