use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flashsim"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("flashsim-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg("run").arg(config).arg("-o").arg(out).args(extra).env_remove("FLASHSIM_THREADS").output().unwrap()
}

const GRW: &str = r#"{
  "model": "grw",
  "grid": { "d": 1, "points": 32, "spacing": 0.5 },
  "sigma": 1.0, "tau": 10.0, "particles": 2,
  "initial_state": { "kind": "gaussian", "params": { "centers": [[-3.0], [3.0]], "width": 1.2 } },
  "horizon": 30.0, "trajectories": 40, "seed": 5
}"#;

#[test]
fn grw_run_writes_artifacts_deterministically() {
    let dir = scratch("grw");
    let cfg = write_config(&dir, GRW);
    let (a, b) = (dir.join("a"), dir.join("b"));
    assert!(run(&cfg, &a, &["--seed", "42"]).status.success());
    assert!(run(&cfg, &b, &["--seed", "42", "--threads", "3"]).status.success());
    let csv = std::fs::read_to_string(a.join("flashes.csv")).unwrap();
    assert_eq!(csv, std::fs::read_to_string(b.join("flashes.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("summary.json")).unwrap(), std::fs::read(b.join("summary.json")).unwrap());
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("trajectory,type,k,t,x"));
    let first: Vec<&str> = lines.next().expect("some flashes").split(',').collect();
    assert_eq!(first.len(), 5);
    // 17 significant digits: one before the point, sixteen after
    let mantissa = first[3].split('e').next().unwrap();
    assert_eq!(mantissa.trim_start_matches('-').replace('.', "").len(), 17);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["types"].as_array().unwrap().len(), 2);
    assert!(std::fs::read_to_string(a.join("flashes.svg")).unwrap().contains("<circle"));

    // a different seed gives a different ensemble
    let c = dir.join("c");
    assert!(run(&cfg, &c, &["--seed", "43"]).status.success());
    assert_ne!(csv, std::fs::read_to_string(c.join("flashes.csv")).unwrap());
}

#[test]
fn empty_history_gives_axes_only_figure() {
    let dir = scratch("empty");
    let cfg = write_config(&dir, &GRW.replace("\"horizon\": 30.0", "\"horizon\": 0.0"));
    let out = dir.join("o");
    assert!(run(&cfg, &out, &[]).status.success());
    assert_eq!(std::fs::read_to_string(out.join("flashes.csv")).unwrap(), "trajectory,type,k,t,x\n");
    let svg = std::fs::read_to_string(out.join("flashes.svg")).unwrap();
    assert!(svg.contains("<line") && !svg.contains("<circle"));
}

#[test]
fn two_dimensional_grid_names_coordinates() {
    let dir = scratch("2d");
    let body = GRW
        .replace("\"d\": 1, \"points\": 32", "\"d\": 2, \"points\": 8")
        .replace("[[-3.0], [3.0]]", "[[-1.0, 0.0], [1.0, 0.5]]")
        .replace("\"trajectories\": 40", "\"trajectories\": 3");
    let cfg = write_config(&dir, &body);
    let out = dir.join("o");
    let o = run(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("flashes.csv")).unwrap();
    assert!(csv.starts_with("trajectory,type,k,t,x1,x2\n"));
}

#[test]
fn malformed_fields_are_named() {
    let dir = scratch("bad");
    let cases = [
        (GRW.replace("\"sigma\": 1.0", "\"sigma\": -1.0"), "`sigma`"),
        (GRW.replace("\"points\": 32", "\"points\": \"many\""), "`grid.points`"),
        (GRW.replace("\"width\": 1.2", "\"width\": \"wide\""), "`initial_state.params.width`"),
        (GRW.replace("\"model\": \"grw\"", "\"model\": \"quantum\""), "`model`"),
        (GRW.replace("\"seed\": 5", "\"seed\": 5, \"colour\": 1"), "`colour`"),
        (GRW.replace("\"trajectories\": 40", "\"trajectories\": -4"), "`trajectories`"),
        (GRW.replace("\"kind\": \"gaussian\"", "\"kind\": \"plane\""), "`initial_state.kind`"),
        (GRW.replace("[[-3.0], [3.0]]", "[[-3.0]]"), "`initial_state.params.centers`"),
        (GRW.replace("\"seed\": 5", "\"seed\": 5, \"experiment\": \"time-dilation\""), "`experiment`"),
        (GRW.replace("\"tau\": 10.0,", ""), "`<document>`"),
        ("{ \"model\": ".to_string(), "`model`"),
    ];
    for (body, field) in cases {
        let cfg = write_config(&dir, &body);
        let o = run(&cfg, &dir.join("o"), &[]);
        let err = String::from_utf8_lossy(&o.stderr);
        assert_eq!(o.status.code(), Some(1), "{field}: {err}");
        assert!(err.contains(field), "expected {field} in: {err}");
    }
}

#[test]
fn numerical_failure_leaves_a_diagnostic() {
    let dir = scratch("numfail");
    // a surface window wider than the periodic box of 32 modes
    let body = r#"{
      "model": "relativistic", "sigma": 1.0, "tau": 4.0, "mass": 2.0,
      "momentum_cutoff": 8.0, "modes": 32,
      "initial_state": { "kind": "gaussian", "params": { "centers": [0.0], "width": 1.5 } },
      "window": { "half_width": 40.0, "dx": 0.1 },
      "horizon": 10.0, "trajectories": 2
    }"#;
    let cfg = write_config(&dir, body);
    let out = dir.join("o");
    let o = run(&cfg, &out, &[]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let diag: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("diagnostic.json")).unwrap()).unwrap();
    assert!(diag["error"].as_str().unwrap().contains("window"));
}

#[test]
fn verify_prints_a_table_and_sets_the_status() {
    let o = bin().args(["verify", "--suite", "fock-equiv"]).output().unwrap();
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{text}");
    assert_eq!(text.matches("PASS").count(), 2, "{text}");
    // shrinking the tolerances below rounding makes the suite fail
    let o = bin().args(["verify", "--suite", "fock-equiv", "--tolerance-scale", "1e-12"]).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
    let o = bin().args(["verify", "--suite", "nonsense"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn list_experiments_names_every_experiment() {
    let o = bin().arg("list-experiments").output().unwrap();
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for name in ["sample", "waiting-times", "covariance", "time-dilation", "nonrel-limit", "povm", "non-autonomy"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "{name} missing");
    }
}

#[test]
fn other_models_run() {
    let dir = scratch("models");
    let fock = r#"{
      "model": "fock", "grid": { "d": 1, "points": 6, "spacing": 0.5 },
      "sigma": 1.0, "tau": 10.0, "statistics": "boson", "n_max": 3,
      "initial_state": { "kind": "occupation", "params": { "occupations": [1, 0, 0, 1, 0, 0] } },
      "horizon": 20.0, "trajectories": 5
    }"#;
    let multitime = r#"{
      "model": "multitime", "grid": { "d": 1, "points": 24, "spacing": 0.5 },
      "sigma": 1.0, "tau": 10.0, "particles": 2,
      "initial_state": { "kind": "entangled_pair", "params": { "left": [-2.5], "right": [2.5], "width": 1.0, "phase": 0.9 } },
      "horizon": 15.0, "trajectories": 10, "experiment": "covariance"
    }"#;
    for (name, body) in [("fock", fock), ("multitime", multitime)] {
        let cfg = write_config(&dir, body);
        let out = dir.join(name);
        let o = run(&cfg, &out, &[]);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
        let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["model"], name);
        if name == "multitime" {
            assert_eq!(summary["covariance"]["pass"], true, "{summary}");
        }
    }
}
