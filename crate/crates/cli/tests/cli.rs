use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use cmflow::tailbound::NoisePrior;
use serde_json::Value;

fn cmflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cmflow"))
        .args(args)
        .env("CMFLOW_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 10] = [
    "--max-steps",
    "30",
    "--eval-every",
    "15",
    "--eval-batch",
    "20000",
    "--mesh",
    "30",
    "--batch",
    "500",
];

#[test]
fn benchmark_report_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let mut args = vec!["benchmark", "--copula", "clayton", "--theta", "2", "--seed", "7", "--quiet"];
        args.extend(SMALL);
        args.extend(["--out", s(out)]);
        let o = cmflow(&args);
        assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ra = fs::read(a.join("report.json")).unwrap();
    assert_eq!(ra, fs::read(b.join("report.json")).unwrap());
    for f in ["history.csv", "density_grid.csv", "jsd_map.csv", "model.json", "jsd_map.svg"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let r = json(&a.join("report.json"));
    for key in ["jsd", "t", "m", "nll"] {
        assert!(!r["metrics"][key].is_null(), "{key}");
    }
    assert_eq!(r["steps"], 30);
    assert!(r["artifacts"].as_array().unwrap().iter().any(|v| v == "report.json"));
    assert!(json(&a.join("timing.json"))["wall_seconds"].as_f64().unwrap() > 0.0);
    let history = fs::read_to_string(a.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn constrained_benchmark_notes_the_floor() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["benchmark", "--copula", "gumbel", "--theta", "5", "--constrained", "--quiet"];
    args.extend(SMALL);
    args.extend(["--out", s(dir.path())]);
    let o = cmflow(&args);
    assert_eq!(code(&o), 1);
    let r = json(&dir.path().join("report.json"));
    assert_eq!(r["pass_through_exact"], true);
    let floor = r["uniformity_floor"].as_f64().unwrap();
    let t2 = r["metrics"]["t"][1].as_f64().unwrap();
    assert!(t2 < 3.0 * floor, "{t2} vs {floor}");
    assert!(r["notes"][0].as_str().unwrap().contains("floor"));
}

#[test]
fn invalid_benchmark_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    for args in [
        vec!["benchmark", "--copula", "clayton", "--out", out],
        vec!["benchmark", "--copula", "clayton", "--theta", "-1", "--out", out],
        vec!["benchmark", "--copula", "clayton", "--theta", "2", "--mesh", "1", "--out", out],
        vec!["benchmark", "--copula", "clayton", "--theta", "2", "--batch", "0", "--out", out],
        vec!["benchmark", "--copula", "student", "--theta", "2", "--out", out],
        vec!["benchmark", "--copula", "frank", "--theta", "5", "--jsd-threshold", "0", "--out", out],
    ] {
        assert_eq!(code(&cmflow(&args)), 2, "{args:?}");
    }
}

#[test]
fn tail_verify_passes_on_gaussian_nets() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmflow(&[
        "tail-verify", "--prior", "gaussian", "--d0", "3", "--n", "20000", "--moment-n", "20000", "--nets", "3", "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let r = json(&dir.path().join("tail_report.json"));
    assert_eq!(r["violations"], 0);
    let dims: Vec<u64> = r["lemma"].as_array().unwrap().iter().map(|c| c["d0"].as_u64().unwrap()).collect();
    assert_eq!(dims, vec![3, 1]);
    assert_eq!(r["networks"].as_array().unwrap().len(), 3);
    assert!(dir.path().join("survival_net0_out1.csv").exists());
    assert!(dir.path().join("survival_lemma_d1.svg").exists());
}

#[test]
fn cauchy_moments_are_premise_violations_not_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = cmflow(&[
        "tail-verify", "--prior", "cauchy", "--p", "2", "--n", "20000", "--moment-n", "5000", "--nets", "2", "--out",
        s(dir.path()),
    ]);
    assert_eq!(code(&o), 0);
    let r = json(&dir.path().join("tail_report.json"));
    assert_eq!(r["premise_violations"], 2);
    assert_eq!(r["networks"][0]["moments"][0]["premise_violated"], true);
}

fn write_gaussian_data(path: &Path, n: usize) {
    let z = NoisePrior::standard_gaussian(1).sample_component(n, 42);
    fs::write(path, z.iter().map(|v| format!("{v}\n")).collect::<String>()).unwrap();
}

const GAUSSIAN_BELIEF: &str = r#"{"alpha": -2.0, "beta": 2.0,
  "left": {"family": "gaussian", "params": {"mean": 0.0, "sd": 1.0}},
  "right": {"family": "gaussian", "params": {"mean": 0.0, "sd": 1.0}}}"#;

#[test]
fn marginal_training_reaches_the_gaussian_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let (data, belief) = (dir.path().join("data.csv"), dir.path().join("belief.json"));
    write_gaussian_data(&data, 20_000);
    fs::write(&belief, GAUSSIAN_BELIEF).unwrap();
    let out = dir.path().join("fit");
    let o = cmflow(&["train-marginal", "--data", s(&data), "--belief", s(&belief), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&out.join("train_report.json"));
    let nll = r["final_nll"].as_f64().unwrap();
    let entropy = 0.5 * (1.0 + (2.0 * std::f64::consts::PI).ln());
    assert!((nll - entropy).abs() <= 0.02, "{nll} vs {entropy}");
    let loss = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 31);

    // the fitted model samples deterministically
    let model = out.join("model.json");
    let (s1, s2) = (dir.path().join("s1"), dir.path().join("s2"));
    for d in [&s1, &s2] {
        assert_eq!(code(&cmflow(&["sample", "--model", s(&model), "--n", "500", "--seed", "3", "--out", s(d)])), 0);
    }
    let text = fs::read_to_string(s1.join("samples.csv")).unwrap();
    assert_eq!(text, fs::read_to_string(s2.join("samples.csv")).unwrap());
    assert_eq!(text.lines().count(), 501);
    assert_eq!(text.lines().next(), Some("x"));
}

#[test]
fn marginal_usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (data, belief) = (dir.path().join("data.csv"), dir.path().join("belief.json"));
    write_gaussian_data(&data, 1000);
    fs::write(&belief, GAUSSIAN_BELIEF).unwrap();
    let out = s(dir.path());
    let missing = dir.path().join("missing.csv");
    assert_eq!(code(&cmflow(&["train-marginal", "--data", s(&missing), "--belief", s(&belief), "--out", out])), 2);

    // the left tail takes all the mass: no body is left
    let degenerate = dir.path().join("degenerate.json");
    fs::write(
        &degenerate,
        r#"{"alpha": 40.0, "beta": 41.0, "left": {"family": "gaussian", "params": {"mean": 0.0, "sd": 1.0}}}"#,
    )
    .unwrap();
    assert_eq!(code(&cmflow(&["train-marginal", "--data", s(&data), "--belief", s(&degenerate), "--out", out])), 2);

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "1.0\nabc\n").unwrap();
    assert_eq!(code(&cmflow(&["train-marginal", "--data", s(&bad), "--belief", s(&belief), "--out", out])), 2);
}

#[test]
fn copula_samples_lie_in_the_unit_square() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["benchmark", "--copula", "frank", "--theta", "5", "--quiet"];
    args.extend(SMALL);
    let run = dir.path().join("run");
    args.extend(["--out", s(&run)]);
    cmflow(&args);
    let model = run.join("model.json");

    let empty = dir.path().join("empty");
    assert_eq!(code(&cmflow(&["sample", "--model", s(&model), "--n", "0", "--out", s(&empty)])), 0);
    assert_eq!(fs::read_to_string(empty.join("samples.csv")).unwrap(), "u1,u2\n");

    let full = dir.path().join("full");
    assert_eq!(code(&cmflow(&["sample", "--model", s(&model), "--n", "2000", "--out", s(&full)])), 0);
    let text = fs::read_to_string(full.join("samples.csv")).unwrap();
    for line in text.lines().skip(1) {
        for v in line.split(',') {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let missing = dir.path().join("nope.json");
    assert_eq!(code(&cmflow(&["sample", "--model", s(&missing), "--n", "5", "--out", s(&full)])), 2);
}

#[test]
fn render_grid_and_curve() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("g.csv");
    fs::write(&grid, "x,y,value\n0.25,0.25,1\n0.25,0.75,2\n0.75,0.25,3\n0.75,0.75,4\n").unwrap();
    let svg = dir.path().join("g.svg");
    assert_eq!(code(&cmflow(&["render", s(&grid), "--out", s(&svg)])), 0);
    let text = fs::read_to_string(&svg).unwrap();
    assert_eq!(text.matches("crispEdges").count(), 4);

    let curve = dir.path().join("c.csv");
    fs::write(&curve, "x,survival\n0,1\n1,0.1\n2,0.01\n").unwrap();
    let svg = dir.path().join("c.svg");
    assert_eq!(code(&cmflow(&["render", s(&curve), "--out", s(&svg)])), 0);
    assert!(fs::read_to_string(&svg).unwrap().contains(">1e-2<"));

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "x,y,value\n1,2\n").unwrap();
    assert_eq!(code(&cmflow(&["render", s(&bad), "--out", s(&svg)])), 2);
}
