use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use seldyn::dynamics::{forward_solve, ControlParams};
use seldyn::{io, Activation, Field, Grid, Interval, KernelSlice, TimeGrid};

fn seldyn(cmd: &str, config: &Path, extra_env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_seldyn"));
    c.arg(cmd).arg("--config").arg(config);
    for (k, v) in extra_env {
        c.env(k, v);
    }
    c.output().unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn report(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

fn grid(n: usize) -> Grid {
    Grid::uniform(n, Interval::unit()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn zero_controls_keep_the_initial_field() {
    let dir = tempfile::tempdir().unwrap();
    let g = grid(6);
    io::write_field(&dir.path().join("f0.csv"), &Field::from_fn(&g, |y| y * y), &g).unwrap();
    let cfg = json!({
        "grid": {"n": 6}, "time": {"T": 1.0, "steps": 10}, "activation": "tanh",
        "initial_field": "f0.csv", "output": "out"
    });
    let o = seldyn("forward", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("out");
    let states = io::read_states(&out.join("trajectory.csv"), &g, &TimeGrid::new(1.0, 10).unwrap()).unwrap();
    assert_eq!(states.len(), 11);
    assert!(states.iter().all(|s| s == &Field::from_fn(&g, |y| y * y)));
    let rep = report(&out);
    assert_eq!(rep["outputs"]["growth_fit"]["rate"], json!(0.0));
    assert!(rep["artifacts"].as_array().unwrap().contains(&json!("lyapunov.csv")));
}

fn rank_one_config(dir: &Path, steps: usize, out: &str) -> PathBuf {
    let g = grid(21);
    let phi = Field::constant(21, 1.0);
    let psi = Field::from_fn(&g, |y| -(1.0 + 0.3 * y));
    let psi = psi.scaled(1.0 / g.norm(&psi).unwrap());
    io::write_field(&dir.join("phi.csv"), &phi, &g).unwrap();
    io::write_field(&dir.join("psi.csv"), &psi, &g).unwrap();
    io::write_field(&dir.join("f0.csv"), &Field::from_fn(&g, |y| 0.5 + 0.5 * y), &g).unwrap();
    let cfg = json!({
        "grid": {"n": 21}, "time": {"T": 1.0, "steps": steps}, "activation": "relu",
        "initial_field": "f0.csv",
        "controls": {"b": {"rank_one": {"phi": "phi.csv", "psi": "psi.csv", "a0": 0.0}}},
        "output": out
    });
    write_config(dir, &format!("{out}.json"), &cfg)
}

#[test]
fn rank_one_forward_reports_closed_form_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut errs = Vec::new();
    for steps in [50, 100] {
        let name = format!("r{steps}");
        let o = seldyn("forward", &rank_one_config(dir.path(), steps, &name), &[]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let cf = &report(&dir.path().join(&name))["outputs"]["closed_form"];
        assert!(cf["lambda_init"].as_f64().unwrap() < 0.0);
        errs.push(cf["l2_error"].as_f64().unwrap());
    }
    let ratio = errs[0] / errs[1];
    assert!((1.8..=2.2).contains(&ratio), "{errs:?}");
}

#[test]
fn rank_one_analysis_is_unstable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = rank_one_config(dir.path(), 10, "a");
    // relu is not smooth: switch to tanh for the rank-one table
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    v["activation"] = json!("tanh");
    let cfg = write_config(dir.path(), "a.json", &v);
    let o = seldyn("analyze", &cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep = report(&dir.path().join("a"));
    assert_eq!(rep["outputs"]["rank_one"]["case"], json!("case2_unstable"));
}

#[test]
fn missing_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "grid": {"n": 4}, "time": {"T": 1.0, "steps": 4}, "activation": "tanh",
        "initial_field": "nowhere.csv"
    });
    let o = seldyn("forward", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere.csv"), "{}", stderr(&o));

    let o = seldyn("forward", &dir.path().join("absent.json"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.json"));
}

#[test]
fn divergence_saves_partial_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "grid": {"n": 4}, "time": {"T": 40.0, "steps": 40}, "activation": "relu",
        "initial_field": 1.0, "controls": {"b": -4.0}, "output": "out"
    });
    let o = seldyn("forward", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let rep = report(&dir.path().join("out"));
    assert_eq!(rep["outputs"]["diverged"], json!(true));
    let done = rep["outputs"]["completed_steps"].as_u64().unwrap() as usize;
    assert!(done < 40);
    let text = std::fs::read_to_string(dir.path().join("out/trajectory.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 4 * (done + 1));
}

/// Writes a reachable tracking target produced by known controls.
fn reachable(dir: &Path) -> Value {
    let g = grid(8);
    let tg = TimeGrid::new(1.0, 16).unwrap();
    let truth = ControlParams::constant(
        Field::from_fn(&g, |y| 0.6 * (2.0 * y).sin()),
        KernelSlice::from_fn(&g, |y, z| 0.5 * (y - z).cos()),
        16,
    )
    .unwrap();
    let f0 = Field::from_fn(&g, |y| 0.5 - y);
    let target = forward_solve(&truth, &f0, Activation::Tanh, &g, &tg).unwrap();
    io::write_field(&dir.join("f0.csv"), &f0, &g).unwrap();
    io::write_field(&dir.join("target.csv"), target.terminal(), &g).unwrap();
    io::write_field(&dir.join("a_true.csv"), &truth.a[0], &g).unwrap();
    io::write_kernel(&dir.join("b_true.csv"), &truth.b[0], &g).unwrap();
    json!({
        "grid": {"n": 8}, "time": {"T": 1.0, "steps": 16}, "activation": "tanh",
        "initial_field": "f0.csv",
        "loss": {"kind": "tracking", "target": "target.csv"},
        "train": {"algo": "ppa", "tau": 1.0, "max_iters": 100, "tol": 1e-8},
        "output": "out"
    })
}

#[test]
fn ppa_training_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = reachable(dir.path());
    let o = seldyn("train", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep = report(&dir.path().join("out"));
    let hist: Vec<f64> = rep["outputs"]["loss_history"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(hist.windows(2).all(|w| w[1] <= w[0] + 1e-10));
    assert!(rep["outputs"]["final_loss"].as_f64().unwrap() <= 1e-4);
    for f in ["controls_a.csv", "controls_b.csv", "loss_history.csv"] {
        assert!(dir.path().join("out").join(f).exists());
    }
}

#[test]
fn training_from_a_stationary_start_takes_no_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = reachable(dir.path());
    cfg["controls"] = json!({"a": {"field": "a_true.csv"}, "b": {"kernel": "b_true.csv"}});
    let o = seldyn("train", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep = report(&dir.path().join("out"));
    assert_eq!(rep["outputs"]["iterations"], json!(0));
    assert_eq!(rep["outputs"]["converged"], json!(true));
}

#[test]
fn undamped_pmp_controls_are_bang_bang() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "grid": {"n": 6}, "time": {"T": 1.0, "steps": 8}, "activation": "tanh",
        "initial_field": 0.3, "loss": {"kind": "tracking", "target": 5.0},
        "train": {"algo": "pmp", "damping": 0.0, "max_iters": 3,
                  "box": {"a_lo": -1.0, "a_hi": 2.0, "b_lo": -0.5, "b_hi": 0.25}},
        "output": "out"
    });
    let o = seldyn("train", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert!(matches!(o.status.code(), Some(0) | Some(3)), "{}", stderr(&o));
    let (g, tg) = (grid(6), TimeGrid::new(1.0, 8).unwrap());
    let a = io::read_bias_series(&dir.path().join("out/controls_a.csv"), &g, &tg).unwrap();
    let b = io::read_kernel_series(&dir.path().join("out/controls_b.csv"), &g, &tg).unwrap();
    assert!(a.iter().flat_map(|f| f.iter()).all(|&v| v == -1.0 || v == 2.0));
    assert!(b.iter().flat_map(|k| k.matrix().iter().copied().collect::<Vec<_>>()).all(|v| v == -0.5 || v == 0.25));
}

#[test]
fn non_converged_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = reachable(dir.path());
    cfg["train"]["max_iters"] = json!(2);
    let o = seldyn("train", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(report(&dir.path().join("out"))["outputs"]["converged"], json!(false));
}

#[test]
fn analysis_verdicts() {
    let dir = tempfile::tempdir().unwrap();
    let g = grid(10);
    io::write_kernel(
        &dir.path().join("k.csv"),
        &KernelSlice::from_fn(&g, |y, z| (-(y - z).abs() / 0.3).exp()),
        &g,
    )
    .unwrap();
    let cfg = json!({
        "grid": {"n": 10}, "time": {"T": 1.0, "steps": 4}, "activation": "tanh",
        "initial_field": 0.0, "controls": {"b": {"kernel": "k.csv"}}, "output": "spd"
    });
    let o = seldyn("analyze", &write_config(dir.path(), "spd.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep = report(&dir.path().join("spd"));
    assert_eq!(rep["outputs"]["spectral"]["verdict"], json!("linearly_asympt_stable"));
    assert!(dir.path().join("spd/spectrum.csv").exists());

    let zero = json!({
        "grid": {"n": 10}, "time": {"T": 1.0, "steps": 4}, "activation": "tanh",
        "initial_field": 0.0, "output": "zero"
    });
    let o = seldyn("analyze", &write_config(dir.path(), "zero.json", &zero), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep = report(&dir.path().join("zero"));
    assert_eq!(rep["outputs"]["steady_state"]["nullspace_dim"], json!(10));
    assert_eq!(rep["outputs"]["steady_state"]["unique"], json!(false));
    assert!(rep["warnings"].as_array().unwrap().iter().any(|w| w.as_str().unwrap().contains("not unique")));
}

#[test]
fn analysis_rejects_time_dependent_controls() {
    let dir = tempfile::tempdir().unwrap();
    let (g, tg) = (grid(5), TimeGrid::new(1.0, 3).unwrap());
    let a: Vec<Field> = (0..3).map(|l| Field::constant(5, l as f64)).collect();
    io::write_bias_series(&dir.path().join("a.csv"), &a, &g, &tg).unwrap();
    let cfg = json!({
        "grid": {"n": 5}, "time": {"T": 1.0, "steps": 3}, "activation": "tanh",
        "initial_field": 0.0, "controls": {"a": "a.csv", "b": 1.0}
    });
    let o = seldyn("analyze", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("time-constant"));
}

fn gradcheck_config(dir: &Path, activation: &str, lambda: f64) -> Value {
    let g = grid(8);
    let tg = TimeGrid::new(1.0, 16).unwrap();
    let a: Vec<Field> = (0..16).map(|l| Field::from_fn(&g, |y| (3.0 * y + l as f64 * 0.2).sin())).collect();
    let b: Vec<KernelSlice> = (0..16)
        .map(|l| KernelSlice::from_fn(&g, |y, z| 0.8 * (2.0 * y - z + 0.1 * l as f64).cos()))
        .collect();
    io::write_bias_series(&dir.join("a.csv"), &a, &g, &tg).unwrap();
    io::write_kernel_series(&dir.join("b.csv"), &b, &g, &tg).unwrap();
    io::write_field(&dir.join("f0.csv"), &Field::from_fn(&g, |y| y - 0.3), &g).unwrap();
    json!({
        "grid": {"n": 8}, "time": {"T": 1.0, "steps": 16}, "activation": activation,
        "initial_field": "f0.csv", "controls": {"a": "a.csv", "b": "b.csv"},
        "loss": {"kind": "tracking", "target": 0.7, "lambda": lambda},
        "output": "out"
    })
}

#[test]
fn gradcheck_passes_for_smooth_activation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gradcheck_config(dir.path(), "tanh", 0.0);
    let o = seldyn("gradcheck", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep = report(&dir.path().join("out"));
    assert!(rep["outputs"]["comparison"]["max_rel"].as_f64().unwrap() <= 1e-6);
    let table = std::fs::read_to_string(dir.path().join("out/gradcheck.csv")).unwrap();
    assert!(table.starts_with("block,entries,skipped,max_rel,mean_rel,max_abs\na,"));
}

#[test]
fn gradcheck_verifies_regularizer_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = gradcheck_config(dir.path(), "tanh", 0.05);
    let o = seldyn("gradcheck", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(report(&dir.path().join("out"))["outputs"]["regularizer_exact"], json!(true));
}

#[test]
fn gradcheck_excludes_kink_entries() {
    let dir = tempfile::tempdir().unwrap();
    let g = grid(9);
    // b = 0 and a(y) = y − ½: the residual at the middle node is 0 at every step
    io::write_field(&dir.path().join("a.csv"), &Field::from_fn(&g, |y| y - 0.5), &g).unwrap();
    let cfg = json!({
        "grid": {"n": 9}, "time": {"T": 1.0, "steps": 8}, "activation": "relu",
        "initial_field": 0.2, "controls": {"a": {"field": "a.csv"}},
        "loss": {"kind": "tracking", "target": -0.4}, "output": "out"
    });
    let o = seldyn("gradcheck", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert!(stderr(&o).contains("kink"), "{}", stderr(&o));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let rep = report(&dir.path().join("out"));
    let blocks = rep["outputs"]["comparison"]["blocks"].as_array().unwrap().clone();
    let skipped = |name: &str| blocks.iter().find(|b| b["block"] == json!(name)).unwrap()["skipped"].as_u64().unwrap();
    assert_eq!(skipped("a"), 8);
    assert_eq!(skipped("b"), 8 * 9);
}

#[test]
fn gradcheck_skips_zero_misfit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "grid": {"n": 4}, "time": {"T": 1.0, "steps": 4}, "activation": "tanh",
        "initial_field": 0.5, "loss": {"kind": "tracking", "target": 0.5}, "output": "out"
    });
    let o = seldyn("gradcheck", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(report(&dir.path().join("out"))["outputs"]["skipped"], json!(true));
}

#[test]
fn outputs_are_byte_identical_and_echo_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = reachable(dir.path());
    cfg["train"]["max_iters"] = json!(5);
    cfg["output"] = json!("first");
    let o = seldyn("train", &write_config(dir.path(), "c.json", &cfg), &[]);
    assert!(o.status.code().is_some());
    let mut echo = report(&dir.path().join("first"))["config"].clone();
    // the echoed config is self-contained: run it from another directory
    let elsewhere = tempfile::tempdir().unwrap();
    echo["output"] = json!(elsewhere.path().join("second"));
    let o = seldyn("train", &write_config(elsewhere.path(), "echo.json", &echo), &[("SELDYN_THREADS", "3")]);
    assert!(o.status.code().is_some());
    for f in ["controls_a.csv", "controls_b.csv", "loss_history.csv", "grad_norm_history.csv"] {
        let a = std::fs::read(dir.path().join("first").join(f)).unwrap();
        let b = std::fs::read(elsewhere.path().join("second").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}

#[test]
fn out_flag_overrides_config_and_thread_count_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = json!({
        "grid": {"n": 4}, "time": {"T": 1.0, "steps": 2}, "activation": "tanh", "initial_field": 0.0
    });
    let path = write_config(dir.path(), "c.json", &cfg);
    let target = dir.path().join("custom");
    let o = Command::new(env!("CARGO_BIN_EXE_seldyn"))
        .args(["forward", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&target)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(target.join("report.json").exists());

    let o = seldyn("forward", &path, &[("SELDYN_THREADS", "zero")]);
    assert_eq!(o.status.code(), Some(2));
}
