use std::path::Path;
use std::process::{Command, Output};

use pathkernel_cli::{
    load_config, profile, run_descent, run_gradient, run_sweep, DescentStatus,
};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pathkernel"));
    c.env_remove("PATHKERNEL_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL_LORENZ: &str = r#"
[model]
name = "lorenz96"
params = { gamma0 = 8.0, gamma1 = 2.0, m = 8 }

[estimator]
mode = "stationary"
dt = 0.002
horizon = 20.0
window = 0.5
seed = 10
alpha = 5.0

[sweep]
gamma0 = [6.0, 8.0, 10.0]
gamma1 = [2.0, 4.0, 6.0]
"#;

#[test]
fn ou_check_profile_passes_its_self_test() {
    let out = run(&["gradient", "--profile", "ou-check"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let values = json["values"].as_array().unwrap();
    assert_eq!(values.len(), 2);
    assert!((values[1].as_f64().unwrap() - 0.5).abs() < 0.025);
    assert!(json["std_errors"].as_array().unwrap().len() == 2);
    assert!(json["diagnostics"]["drift_term"].is_array());
    assert_eq!(json["config"]["n_steps"], 500_000);
}

#[test]
fn violated_expectation_exits_nonzero() {
    let out = run(&[
        "gradient",
        "--profile",
        "ou-check",
        "--set",
        "check.expect.sigma.value=0.9",
        "--set",
        "estimator.horizon=500",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("FAILED"));
}

#[test]
fn malformed_config_exits_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "[model]\nname = \"ou\"\n[estimator]\ndt = \"fast\"\n");
    let out = run(&["gradient", "--config", &bad]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4") || err.contains("dt"), "{err}");

    let unknown = write(dir.path(), "u.toml", "[model]\nname = \"nope\"\n[estimator]\nhorizon = 1.0\n");
    assert_eq!(run(&["gradient", "--config", &unknown]).status.code(), Some(2));
    assert_eq!(run(&["gradient"]).status.code(), Some(2));
    assert_eq!(
        run(&["gradient", "--profile", "ou-check", "--set", "estimator.horizon=1"]).status.code(),
        Some(2),
        "orbit shorter than the trimmed windows"
    );
}

#[test]
fn forward_blow_up_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "a.toml",
        "[model]\nname = \"affine1d\"\nparams = { a = 10.0 }\n[estimator]\nmode = \"finite-time\"\nn_steps = 60\nensemble_size = 4\n",
    );
    let out = run(&["gradient", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("blew up"));
}

#[test]
fn covector_blow_up_exits_4_with_suggestion() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "l.toml",
        "[model]\nname = \"lorenz96\"\nparams = { m = 20 }\n[estimator]\nmode = \"finite-time\"\ndt = 0.002\nhorizon = 50.0\nensemble_size = 2\nalpha = 0.0\n",
    );
    let out = run(&["gradient", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
}

#[test]
fn sweep_has_one_row_per_grid_point() {
    let cfg = load_config(SMALL_LORENZ, &[]).unwrap();
    let mut buf = Vec::new();
    let failures = run_sweep(&cfg, &mut buf).unwrap();
    assert!(failures.is_empty());
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "gamma0,gamma1,phi_avg,phi_avg_se,dphi_dgamma0,dphi_dgamma0_se,dphi_dgamma1,dphi_dgamma1_se,T,W,alpha,seed,error"
    );
    assert_eq!(lines.len(), 10);
    assert!(lines[1].starts_with("6,2,"));
    assert!(lines[9].starts_with("10,6,"));
    assert!(lines[1].ends_with(",20,0.5,5,10,"));
    assert!(lines[9].ends_with(",18,"));
}

#[test]
fn single_point_sweep_matches_gradient() {
    let cfg = load_config(
        SMALL_LORENZ,
        &["sweep.gamma0=[8.0]".into(), "sweep.gamma1=[2.0]".into()],
    )
    .unwrap();
    let report = run_gradient(&cfg).unwrap();
    let mut buf = Vec::new();
    run_sweep(&cfg, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2].parse::<f64>().unwrap(), report.estimate.phi_avg);
    assert_eq!(row[4].parse::<f64>().unwrap(), report.estimate.values[0]);
    assert_eq!(row[6].parse::<f64>().unwrap(), report.estimate.values[1]);
    assert_eq!(row[7].parse::<f64>().unwrap(), report.estimate.std_errors[1]);
}

#[test]
fn failed_sweep_points_are_isolated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "s.toml",
        "[model]\nname = \"affine1d\"\nparams = { a = 0.5 }\n[estimator]\nmode = \"finite-time\"\nn_steps = 5\nensemble_size = 16\n[sweep]\nsigma = [1.0, 0.0, 2.0]\n",
    );
    let out_path = dir.path().join("out.csv");
    let out = run(&["sweep", "--config", &cfg, "--out", out_path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let text = std::fs::read_to_string(&out_path).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].ends_with(','));
    assert!(rows[1].contains("diffusion coefficient 0"));
    assert!(rows[2].ends_with(','));
}

#[test]
fn outputs_are_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "l.toml", SMALL_LORENZ);
    let a = run(&["sweep", "--config", &cfg, "--set", "sweep.gamma1=[2.0]"]);
    let b = bin()
        .args(["sweep", "--config", &cfg, "--set", "sweep.gamma1=[2.0]"])
        .env("PATHKERNEL_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
    let g1 = run(&["gradient", "--config", &cfg, "--threads", "1"]);
    let g2 = run(&["gradient", "--config", &cfg, "--threads", "2"]);
    assert_eq!(g1.stdout, g2.stdout);
    assert!(!g1.stdout.is_empty());
}

#[test]
fn descent_on_ou_stops_at_the_sigma_floor() {
    let text = r#"
[model]
name = "ou"
params = { theta = 1.0, sigma = 1.0 }

[estimator]
dt = 0.01
horizon = 300.0
window = 3.0
seed = 2
alpha = 2.0

[descent]
iterations = 20
step = 0.5
direction = "minimize"
active = ["sigma"]
lower = { sigma = 0.3 }
"#;
    let cfg = load_config(text, &[]).unwrap();
    let mut buf = Vec::new();
    let status = run_descent(&cfg, &mut buf).unwrap();
    assert_eq!(status, DescentStatus::LeftBox);
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("iter,theta,sigma,phi_avg,dphi_dtheta,dphi_dsigma,step\n"));
    let sigmas: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
        .collect();
    assert!(sigmas.windows(2).all(|w| w[1] < w[0]), "{sigmas:?}");
    assert_eq!(*sigmas.last().unwrap(), 0.3);
    let thetas: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert!(thetas.iter().all(|t| *t == "1"));
}

#[test]
fn descent_with_loose_tolerance_stops_at_once() {
    let cfg = load_config(
        SMALL_LORENZ,
        &["descent.iterations=5".into(), "descent.step=0.1".into(), "descent.tol=1e9".into()],
    )
    .unwrap();
    let mut buf = Vec::new();
    assert_eq!(run_descent(&cfg, &mut buf).unwrap(), DescentStatus::Converged);
    assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 2);
}

#[test]
fn lorenz_ascent_increases_forcing() {
    let cfg = load_config(
        profile("lorenz96-paper").unwrap(),
        &[
            "model.params.gamma0=6.0".into(),
            "estimator.horizon=100.0".into(),
            "estimator.window=1.0".into(),
            "estimator.storage_mode=full-in-memory".into(),
            "descent.iterations=2".into(),
            "descent.active=[\"gamma0\"]".into(),
        ],
    )
    .unwrap();
    let mut buf = Vec::new();
    run_descent(&cfg, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let g0: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(g0.len() >= 2);
    assert!(g0.windows(2).all(|w| w[1] > w[0]), "{g0:?}");
}

#[test]
fn simulate_writes_the_orbit() {
    let out = run(&[
        "simulate",
        "--profile",
        "lorenz96-paper",
        "--set",
        "estimator.horizon=2.0",
        "--set",
        "estimator.window=0.1",
        "--noise",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + 40 + 40);
    assert_eq!(header[0], "step");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 1001);
    let last: Vec<&str> = rows[1000].split(',').collect();
    assert!(last[2..42].iter().all(|v| v.parse::<f64>().unwrap().abs() < 100.0));
}

#[test]
fn check_validates_zoo_derivatives() {
    let out = run(&["check", "--profile", "lorenz96-paper"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("derivative checks within"));
}
