use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_lpvds");

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

/// RK4 trajectories of `ẋ = Ax` with exact velocities.
fn linear_csv(a: [[f64; 2]; 2], starts: &[[f64; 2]]) -> String {
    let f = |x: [f64; 2]| [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]];
    let mut s = String::from("x1,x2,dx1,dx2,traj_id\n");
    let h = 0.05;
    for (j, x0) in starts.iter().enumerate() {
        let mut x = *x0;
        for _ in 0..120 {
            let v = f(x);
            s += &format!("{},{},{},{},{j}\n", x[0], x[1], v[0], v[1]);
            let add = |x: [f64; 2], k: [f64; 2], c: f64| [x[0] + c * k[0], x[1] + c * k[1]];
            let k1 = v;
            let k2 = f(add(x, k1, h / 2.0));
            let k3 = f(add(x, k2, h / 2.0));
            let k4 = f(add(x, k3, h));
            x = [0, 1].map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
        }
    }
    s
}

fn setup(dir: &Path, extra: &str) {
    std::fs::write(
        dir.join("demos.csv"),
        linear_csv([[-1.0, 0.2], [0.1, -1.5]], &[[2.0, 1.0], [-1.0, 2.0], [1.5, -2.0]]),
    )
    .unwrap();
    std::fs::write(
        dir.join("config.json"),
        format!(
            r#"{{"data": {{"path": "demos.csv", "dt": 0.05}}, "topology": "fully-connected-scalar",
                "equilibrium": [0, 0], "gmm": {{"k": 1}}, "output_dir": "out"{extra}}}"#
        ),
    )
    .unwrap();
}

#[test]
fn learn_verify_simulate_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, "");
    let o = run(&["learn", "--config", "config.json"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("out/summary.json")).unwrap()).unwrap();
    assert!(summary["certificate_eig"].as_f64().unwrap() <= 1e-8);
    assert!(summary["timings"]["total_seconds"].as_f64().is_some());
    // defaults are written out in full
    assert_eq!(summary["config"]["hyperparams"]["delta_hi"].as_f64(), Some(10.0));
    let model = std::fs::read_to_string(d.join("out/model.json")).unwrap();
    assert!(!model.contains("seconds"));

    let o = run(&["verify", "out/model.json", "--samples", "500"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS composed/composition"));

    let o = run(&["simulate", "out/model.json", "--out", "sim"], d);
    assert_eq!(code(&o), 0);
    let roll: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("sim/rollouts.json")).unwrap()).unwrap();
    let rs = roll["rollouts"].as_array().unwrap();
    assert_eq!(rs.len(), 3);
    assert!(rs.iter().all(|r| r["terminated"] == "converged"));

    let o = run(&["simulate", "out/model.json", "--from", "0,0", "--out", "origin"], d);
    assert_eq!(code(&o), 0);
    let roll: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("origin/rollouts.json")).unwrap()).unwrap();
    assert_eq!(roll["rollouts"][0]["terminated"], "converged");
    assert_eq!(roll["rollouts"][0]["final_time"].as_f64(), Some(0.0));

    let o = run(&["simulate", "out/model.json", "--dt", "0", "--out", "bad"], d);
    assert_eq!(code(&o), 1);

    let o = run(&["export-plot", "out/model.json", "demos.csv", "--out", "plot"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let plot = std::fs::read_to_string(d.join("plot/plot.csv")).unwrap();
    assert!(plot.starts_with("source,traj,time,x1,x2,V\n"));
    assert!(plot.contains("\ndemo,3,") && plot.contains("\nrollout,3,"));
}

#[test]
fn corrupted_model_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, "");
    assert_eq!(code(&run(&["learn", "--config", "config.json"], d)), 0);
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("out/model.json")).unwrap()).unwrap();
    v["model"]["subsystems"][0]["P"] = serde_json::json!([[-1.0]]);
    std::fs::write(d.join("bad.json"), serde_json::to_string(&v).unwrap()).unwrap();
    let o = run(&["verify", "bad.json"], d);
    assert_eq!(code(&o), 3);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("FAIL subsystem1/storage_lower"), "{out}");
}

#[test]
fn io_and_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(&["verify", "missing.json"], d)), 1);
    assert_eq!(code(&run(&["learn", "--config", "missing.json"], d)), 1);
    setup(d, r#", "hyperparams": {"delta_lo": 5, "delta_hi": 1}"#);
    let o = run(&["learn", "--config", "config.json"], d);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("delta"));
    setup(d, r#", "unknown": 1"#);
    assert_eq!(code(&run(&["learn", "--config", "config.json"], d)), 1);
}

#[test]
fn incompatible_supply_scales_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    // x₂ drives x₁ hard, so the first subsystem needs a large input weight
    // that the second subsystem cannot absorb at equal μ with its small
    // supply bound
    std::fs::write(
        d.join("demos.csv"),
        linear_csv([[-1.0, 2.0], [0.0, -1.0]], &[[2.0, 1.0], [-1.0, 2.0], [1.5, -2.0]]),
    )
    .unwrap();
    std::fs::write(
        d.join("config.json"),
        r#"{"data": {"path": "demos.csv", "dt": 0.05}, "topology": "fully-connected-scalar",
            "equilibrium": [0, 0], "gmm": {"k": 1}, "output_dir": "out",
            "overrides": {"1": {"supply_scale": 5.0}, "2": {"supply_scale": 0.2, "d_max": 0.5}},
            "compose": {"mu_cap_ratio": 1.0}}"#,
    )
    .unwrap();
    let o = run(&["learn", "--config", "config.json"], d);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("witness"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("out/model.json")).unwrap()).unwrap();
    assert_eq!(v["model"]["certified"], false);
    assert_eq!(v["composition_witness"].as_array().unwrap().len(), 2);
    assert_eq!(code(&run(&["verify", "out/model.json"], d)), 3);
}
