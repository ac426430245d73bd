//! The four subcommands. Each computes first and writes its artifacts
//! afterwards; the report is written by the caller.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use seldyn::control::{train, Problem};
use seldyn::dynamics::{forward_solve_partial, rank_one_relu_solution, residual, Integrator};
use seldyn::io::{self, format_real};
use seldyn::objective::{
    compare_gradients, finite_diff_gradient_with, loss_and_gradient, misfit, Entry, GradientComparison, LossSpec,
};
use seldyn::stability::{
    classify_rank_one, conditioning_bound, find_steady_state, growth_fit, lyapunov_trace, monotonicity_violation,
    spectral_report, GROWTH_FIT_MIN_STEPS,
};

use crate::config::{ExperimentConfig, Setup};
use crate::error::{CliError, EXIT_NOT_CONVERGED};

/// Everything a run reports, including the config it was started from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub exit_code: i32,
    pub config: ExperimentConfig,
    pub outputs: Value,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    /// Files written by the run, relative to the output directory.
    pub artifacts: Vec<String>,
    pub warnings: Vec<String>,
}

/// Output directory bookkeeping for one run.
pub struct Run {
    dir: PathBuf,
    artifacts: Vec<String>,
    warnings: Vec<String>,
    timings: BTreeMap<String, f64>,
}

impl Run {
    pub fn new(dir: &Path) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::config(format!("{}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            artifacts: Vec::new(),
            warnings: Vec::new(),
            timings: BTreeMap::new(),
        })
    }

    fn artifact(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        warn!("{msg}");
        self.warnings.push(msg);
    }

    fn timed<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.insert(label.to_string(), start.elapsed().as_secs_f64());
        out
    }

    /// Writes `report.json` and returns the report.
    pub fn finish(
        mut self,
        command: &str,
        exit_code: i32,
        config: &ExperimentConfig,
        outputs: Value,
    ) -> Result<RunReport, CliError> {
        let path = self.artifact("report.json");
        let report = RunReport {
            command: command.to_string(),
            exit_code,
            config: config.clone(),
            outputs,
            timings: self.timings,
            artifacts: self.artifacts,
            warnings: self.warnings,
        };
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::config(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Ok(report)
    }
}

/// Result of a command: report outputs plus the exit code to use.
pub struct Outcome {
    pub outputs: Value,
    pub exit_code: i32,
}

impl Outcome {
    fn ok(outputs: Value) -> Self {
        Self { outputs, exit_code: 0 }
    }
}

fn json_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report values serialize")
}

fn require_loss(setup: &Setup) -> Result<&LossSpec, CliError> {
    setup
        .loss
        .as_ref()
        .ok_or_else(|| CliError::config("this command needs a loss section"))
}

pub fn forward(_cfg: &ExperimentConfig, setup: &Setup, run: &mut Run) -> Result<Outcome, CliError> {
    let (g, tg, act) = (&setup.grid, &setup.time, setup.act);
    let (traj, diverged) = run.timed("forward_solve", || {
        forward_solve_partial(&setup.params, &setup.f_init, act, g, tg, Integrator::Euler)
    })?;
    let path = run.artifact("trajectory.csv");
    io::write_states(&path, &traj.states, g, tg)?;

    if let Some(e) = diverged {
        run.warn(format!("{e}; partial trajectory saved"));
        return Ok(Outcome {
            outputs: json!({ "diverged": true, "message": e.to_string(), "completed_steps": traj.steps() }),
            exit_code: EXIT_NOT_CONVERGED,
        });
    }

    let mut outputs = json!({
        "diverged": false,
        "terminal_norm": g.norm(traj.terminal())?,
        "terminal_max_abs": traj.terminal().max_abs(),
    });

    if traj.steps() >= GROWTH_FIT_MIN_STEPS {
        outputs["growth_fit"] = json_value(&growth_fit(&traj, g)?);
    } else {
        run.warn(format!("growth fit skipped: needs at least {GROWTH_FIT_MIN_STEPS} steps"));
    }

    if setup.params.autonomous().is_some() {
        let symmetric = setup.params.b[0].asymmetry() == 0.0;
        let trace = run.timed("lyapunov", || {
            let with_energy = symmetric && lyapunov_trace(&traj, &setup.params, act, g, true).is_ok();
            lyapunov_trace(&traj, &setup.params, act, g, with_energy)
        })?;
        let mut header = vec!["t", "sigma_integral", "dissipation"];
        let mut cols: Vec<&[f64]> = vec![&trace.times, &trace.sigma_integral, &trace.dissipation];
        if let Some(e) = &trace.energy {
            header.push("energy");
            cols.push(e);
        }
        let path = run.artifact("lyapunov.csv");
        io::write_columns(&path, &header, &cols)?;
        let mut lyap = json!({
            "sigma_integral_violation": monotonicity_violation(&trace.sigma_integral, &trace.sigma_slack),
        });
        if let (Some(e), Some(s)) = (&trace.energy, &trace.energy_slack) {
            lyap["energy_violation"] = json!(monotonicity_violation(e, s));
        }
        outputs["lyapunov"] = lyap;
    } else {
        run.warn("Lyapunov trace skipped: controls are time-dependent");
    }

    if let Some(spec) = &setup.rank_one {
        if act == seldyn::Activation::Relu {
            let exact = rank_one_relu_solution(spec, tg.t_final(), g)?;
            let err = g.norm(&traj.terminal().axpy(-1.0, &exact)?)?;
            outputs["closed_form"] = json!({
                "lambda_init": spec.lambda_init(g)?,
                "alpha": spec.alpha(g)?,
                "beta": spec.beta(g)?,
                "dt": tg.dt(),
                "l2_error": err,
                "relative_error": err / g.norm(&exact)?.max(f64::MIN_POSITIVE),
            });
            let path = run.artifact("closed_form.csv");
            io::write_field(&path, &exact, g)?;
        } else {
            run.warn(format!("closed-form comparison needs relu, not {act}"));
        }
    }
    Ok(Outcome::ok(outputs))
}

pub fn train_cmd(cfg: &ExperimentConfig, setup: &Setup, run: &mut Run) -> Result<Outcome, CliError> {
    let loss = require_loss(setup)?.clone();
    let tc = cfg
        .train
        .clone()
        .ok_or_else(|| CliError::config("train needs a train section"))?;
    let problem = Problem {
        grid: setup.grid.clone(),
        time: setup.time,
        act: setup.act,
        f_init: setup.f_init.clone(),
        loss,
        init: setup.params.clone(),
    };
    let res = run.timed("train", || train(&problem, &tc))?;
    info!(
        "{:?}: {} iterations, final loss {:e}, converged {}",
        tc.algo,
        res.iterations,
        res.final_loss(),
        res.converged
    );
    let (g, tg) = (&setup.grid, &setup.time);
    io::write_bias_series(&run.artifact("controls_a.csv"), &res.params.a, g, tg)?;
    io::write_kernel_series(&run.artifact("controls_b.csv"), &res.params.b, g, tg)?;
    if let Some(c) = &res.classifier {
        io::write_kernel(&run.artifact("classifier_w.csv"), &c.w, g)?;
        io::write_field(&run.artifact("classifier_mu.csv"), &c.mu, g)?;
    }
    io::write_history(&run.artifact("loss_history.csv"), &res.loss_history)?;
    io::write_history(&run.artifact("grad_norm_history.csv"), &res.grad_norm_history)?;
    if !res.hamiltonian_history.is_empty() {
        io::write_history(&run.artifact("hamiltonian_history.csv"), &res.hamiltonian_history)?;
    }
    if !res.degenerate_steps.is_empty() {
        run.warn(format!(
            "co-state vanished at {} time steps; the Hamiltonian is flat there and the tie rule picks the controls",
            res.degenerate_steps.len()
        ));
    }
    let outputs = json!({
        "algo": res.algo,
        "converged": res.converged,
        "iterations": res.iterations,
        "initial_loss": res.loss_history[0],
        "final_loss": res.final_loss(),
        "loss_history": res.loss_history,
        "grad_norm_history": res.grad_norm_history,
        "hamiltonian_history": res.hamiltonian_history,
        "min_hamiltonian_gain": res.hamiltonian_gain.iter().copied().reduce(f64::min),
        "degenerate_steps": res.degenerate_steps,
    });
    let exit_code = if res.converged {
        0
    } else {
        run.warn(format!("no convergence within {} iterations", tc.max_iters));
        EXIT_NOT_CONVERGED
    };
    Ok(Outcome { outputs, exit_code })
}

pub fn analyze(cfg: &ExperimentConfig, setup: &Setup, run: &mut Run) -> Result<Outcome, CliError> {
    let (g, act) = (&setup.grid, setup.act);
    let (a, b) = setup.params.autonomous().ok_or_else(|| {
        CliError::precondition(
            "analysis needs time-constant controls: the steady-state and spectral tests linearize u̇ = −B σ(u) \
             around a fixed kernel, which time-dependent controls do not have",
        )
    })?;
    let modes = cfg.analysis.as_ref().and_then(|a| a.modes).unwrap_or(g.len());
    let (spectral, steady) = run.timed("analysis", || -> Result<_, CliError> {
        Ok((spectral_report(b, act, g, modes)?, find_steady_state(a, b, g)?))
    })?;
    for w in &spectral.warnings {
        run.warn(w.clone());
    }
    if !steady.unique {
        run.warn(format!(
            "steady state is not unique: nullspace dimension {}",
            steady.nullspace_dim
        ));
    }
    if !steady.in_range {
        run.warn(format!(
            "a is not in the range of B (residual {:e}); no steady state exists",
            steady.residual
        ));
    }
    let n = g.len();
    let index: Vec<f64> = (0..n).map(|k| k as f64).collect();
    let re: Vec<f64> = spectral.eigenvalues.iter().map(|e| e.0).collect();
    let im: Vec<f64> = spectral.eigenvalues.iter().map(|e| e.1).collect();
    io::write_columns(
        &run.artifact("spectrum.csv"),
        &["k", "sym_eigenvalue", "eigenvalue_re", "eigenvalue_im", "singular_value"],
        &[&index, &spectral.sym_eigenvalues, &re, &im, &spectral.singular_values],
    )?;
    io::write_field(&run.artifact("steady_state.csv"), &seldyn::Field::from(steady.candidate.clone()), g)?;

    let mut outputs = json!({
        "spectral": json_value(&spectral),
        "steady_state": json_value(&steady),
        "conditioning_bound": conditioning_bound(&setup.params, act, g)?[0],
    });
    if let Some(spec) = &setup.rank_one {
        // b(y,z) = ψ(y)φ(z): the range direction is ψ
        outputs["rank_one"] = json_value(&classify_rank_one(&spec.psi, &spec.phi, act, g)?);
    }
    Ok(Outcome::ok(outputs))
}

fn write_comparison(path: &Path, cmp: &GradientComparison) -> Result<(), CliError> {
    let err = |e: std::io::Error| CliError::config(format!("{}: {e}", path.display()));
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    writeln!(w, "block,entries,skipped,max_rel,mean_rel,max_abs").map_err(err)?;
    for b in &cmp.blocks {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            b.block,
            b.entries,
            b.skipped,
            format_real(b.max_rel),
            format_real(b.mean_rel),
            format_real(b.max_abs)
        )
        .map_err(err)?;
    }
    w.flush().map_err(err)
}

pub fn gradcheck(cfg: &ExperimentConfig, setup: &Setup, run: &mut Run) -> Result<Outcome, CliError> {
    let loss = require_loss(setup)?;
    let gc = cfg.gradcheck.clone().unwrap_or_default();
    let (g, tg, act, p) = (&setup.grid, &setup.time, setup.act, &setup.params);
    let exact = run.timed("adjoint_gradient", || loss_and_gradient(p, loss, &setup.f_init, act, g, tg))?;

    let mis = misfit(exact.trajectory.terminal(), loss, g)?;
    if mis == 0.0 && loss.lambda == 0.0 {
        let msg = "zero misfit: both gradients vanish, comparison skipped";
        run.warn(msg);
        return Ok(Outcome::ok(json!({ "skipped": true, "reason": msg, "loss": exact.loss })));
    }

    let mut outputs = json!({ "h": gc.h, "stencil": gc.stencil, "threshold": gc.threshold, "loss": exact.loss });

    if loss.lambda > 0.0 {
        let plain_spec = loss.clone().with_lambda(0.0)?;
        let plain = loss_and_gradient(p, &plain_spec, &setup.f_init, act, g, tg)?;
        let mut exact_reg = true;
        exact.gradient.for_each_entry(|e, v| {
            let param = match e {
                Entry::A { l, i } => p.a[l][i],
                Entry::B { l, i, j } => p.b[l].get(i, j),
                Entry::W { i, j } => loss.classifier().map_or(0.0, |c| c.w.get(i, j)),
                Entry::Mu { i } => loss.classifier().map_or(0.0, |c| c.mu[i]),
            };
            exact_reg &= v == plain.gradient.entry(e) + loss.lambda * param;
        });
        outputs["regularizer_exact"] = json!(exact_reg);
        if !exact_reg {
            run.warn("regularized gradient differs from plain gradient + λ·parameters");
        }
    }

    // Entries whose residual node sits within reach of a kink are unreliable
    // for differencing.
    let mut kink = vec![vec![false; g.len()]; tg.steps()];
    if !act.is_smooth() {
        for (l, row) in kink.iter_mut().enumerate() {
            let u = residual(p, &exact.trajectory, l, g)?;
            let band = 2.0 * gc.h * (1.0 + exact.trajectory.states[l].max_abs());
            for (i, k) in row.iter_mut().enumerate() {
                *k = u[i].abs() <= band;
            }
        }
        run.warn(format!("{act} is not smooth: entries at kink nodes are excluded from the comparison"));
    }
    let fd = run.timed("finite_differences", || {
        finite_diff_gradient_with(p, loss, &setup.f_init, act, g, tg, gc.h, gc.stencil)
    })?;
    let cmp = compare_gradients(&exact.gradient, &fd, |e| match e {
        Entry::A { l, i } | Entry::B { l, i, .. } => kink[l][i],
        _ => false,
    });
    write_comparison(&run.artifact("gradcheck.csv"), &cmp)?;
    let pass = cmp.max_rel <= gc.threshold;
    outputs["comparison"] = json_value(&cmp);
    outputs["pass"] = json!(pass);
    let exit_code = if pass {
        0
    } else {
        run.warn(format!(
            "max relative error {:e} exceeds {:e}",
            cmp.max_rel, gc.threshold
        ));
        EXIT_NOT_CONVERGED
    };
    Ok(Outcome { outputs, exit_code })
}
