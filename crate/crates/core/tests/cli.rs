use std::process::Command;

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_quantsgd"))
}

fn run_json(cmd: &mut Command) -> Value {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn write_config(dir: &std::path::Path, quantizers: Value) -> std::path::PathBuf {
    let cfg = json!({
        "problem": {"dim": 6, "spectrum": {"kind": "power_law", "a": 2.0},
                    "w_star": {"kind": "constant", "value": 1.0}, "noise_var": 1.0},
        "quantizers": quantizers,
        "run": {"steps": 200, "batch": 1, "stepsize": "auto", "seed": 5},
        "sweep": {"axes": [{"path": "run.batch", "values": [1, 4]}], "n_seeds": 3}
    });
    let p = dir.join("cfg.json");
    std::fs::write(&p, cfg.to_string()).unwrap();
    p
}

#[test]
fn compare_fp_int() {
    let v = run_json(bin().args(["compare-fp-int", "--bits", "8", "--mantissa", "3", "--dim", "1024"]));
    assert_eq!(v["preference"], "boundary");
    let v = run_json(bin().args(["compare-fp-int", "--bits", "8", "--mantissa", "4", "--dim", "1024"]));
    assert_eq!(v["preference"], "fp");
}

#[test]
fn simulate_sweep_bound_decompose() {
    let dir = tempfile::tempdir().unwrap();
    let q = json!({"data": {"kind": "additive", "epsilon": 0.01}, "label": {"kind": "additive", "epsilon": 0.01}});
    let cfg = write_config(dir.path(), q);
    let out = dir.path().join("out");

    let v = run_json(bin().arg("simulate").arg("--config").arg(&cfg).arg("--out").arg(&out).args(["--threads", "2"]));
    assert_eq!(v["summary"].as_array().unwrap().len(), 1);
    assert!(out.join("runs.csv").exists());

    let sweep_out = dir.path().join("sweep");
    let v = run_json(bin().arg("sweep").arg("--config").arg(&cfg).arg("--out").arg(&sweep_out));
    assert_eq!(v["cells_run"], 2);
    let v = run_json(bin().arg("sweep").arg("--config").arg(&cfg).arg("--out").arg(&sweep_out));
    assert_eq!(v["cells_skipped"], 2);

    let v = run_json(bin().arg("bound").arg("--config").arg(&cfg));
    assert_eq!(v["regime"], "additive");
    assert!(v["report"]["total"].as_f64().unwrap() > 0.0);

    let v = run_json(bin().arg("check-conditions").arg("--config").arg(&cfg));
    assert!(v["conditions"].as_array().unwrap().len() >= 4);

    let v = run_json(bin().arg("decompose").arg("--config").arg(&cfg).args(["--seeds", "4"]));
    let total = v["total"].as_f64().unwrap();
    let direct = v["direct_mean"].as_f64().unwrap();
    assert!((total - direct).abs() <= 1e-10 * direct);
    assert!(v["r1"].as_f64().unwrap() <= 0.0);
}

#[test]
fn bound_measures_noise_for_rounding_sites() {
    let dir = tempfile::tempdir().unwrap();
    let q = json!({"data": {"kind": "int_round", "bits": 4}, "activation": {"kind": "fp_round", "mantissa_bits": 3}});
    let cfg = write_config(dir.path(), q);
    let v = run_json(bin().arg("bound").arg("--config").arg(&cfg).arg("--out").arg(dir.path()));
    assert_eq!(v["regime"], "general");
    assert!(v["report"]["quantized_err"].as_f64().unwrap() > 0.0);
    let id = v["experiment_id"].as_str().unwrap();
    assert!(dir.path().join("bounds").join(format!("{id}.json")).exists());
}

#[test]
fn errors_exit_nonzero() {
    let out = bin().arg("simulate").output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--config"));
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"problem": {}}"#).unwrap();
    let out = bin().arg("bound").arg("--config").arg(&p).output().unwrap();
    assert!(!out.status.success());
}
