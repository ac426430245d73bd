//! Hamiltonian, pointwise box maximization, and the two training loops:
//! block proximal point descent and damped successive approximation of the
//! maximum principle.

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use crate::activation::Activation;
use crate::adjoint::{adjoint_solve, CostateTrajectory};
use crate::dynamics::{forward_solve, pre_activation, ControlParams, Trajectory};
use crate::error::{ensure_len, invalid, Error, Result};
use crate::grid::{Field, Grid, KernelSlice, TimeGrid};
use crate::objective::{
    gradient, loss, loss_and_gradient, terminal_costate, ClassifierParams, Entry, LossSpec, Metric, ParamGradient,
};

/// Co-state norms below this mark a time step as degenerate.
pub const DEGENERATE_COSTATE: f64 = 1e-12;

/// Admissible set `[a_lo, a_hi] × [b_lo, b_hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub a_lo: f64,
    pub a_hi: f64,
    pub b_lo: f64,
    pub b_hi: f64,
}

impl ControlBox {
    pub fn new(a_lo: f64, a_hi: f64, b_lo: f64, b_hi: f64) -> Result<Self> {
        let bx = Self { a_lo, a_hi, b_lo, b_hi };
        bx.validate()?;
        Ok(bx)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok(self.a_lo, self.a_hi) || !ok(self.b_lo, self.b_hi) {
            return Err(invalid(format!("empty or non-finite control box {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, params: &ControlParams) -> bool {
        let in_a = |v: f64| (self.a_lo..=self.a_hi).contains(&v);
        let in_b = |v: f64| (self.b_lo..=self.b_hi).contains(&v);
        params.a.iter().all(|a| a.iter().all(|&v| in_a(v)))
            && params.b.iter().all(|b| b.matrix().iter().all(|&v| in_b(v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    Ppa,
    Pmp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algo: Algorithm,
    /// Proximal step `τ`.
    pub tau: f64,
    /// Descent steps per proximal subproblem.
    pub inner_iters: usize,
    pub max_iters: usize,
    pub tol: f64,
    /// Weight on the previous iterate in the maximum-principle update.
    pub damping: f64,
    #[serde(rename = "box")]
    pub control_box: Option<ControlBox>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algo: Algorithm::Ppa,
            tau: 1.0,
            inner_iters: 10,
            max_iters: 100,
            tol: 1e-8,
            damping: 0.5,
            control_box: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(invalid(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.inner_iters == 0 {
            return Err(invalid("inner_iters must be ≥ 1"));
        }
        if !(self.tol >= 0.0) {
            return Err(invalid(format!("tol must be ≥ 0, got {}", self.tol)));
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return Err(invalid(format!("damping must lie in [0,1], got {}", self.damping)));
        }
        if let Some(b) = &self.control_box {
            b.validate()?;
        }
        Ok(())
    }
}

/// Everything a training run needs besides the algorithm settings.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: Grid,
    pub time: TimeGrid,
    pub act: Activation,
    pub f_init: Field,
    pub loss: LossSpec,
    pub init: ControlParams,
}

impl Problem {
    fn check(&self) -> Result<()> {
        self.init.check(&self.grid, &self.time)?;
        ensure_len("initial state", self.f_init.len(), self.grid.len())?;
        // shape checks on the loss
        crate::objective::misfit(&self.f_init, &self.loss, &self.grid).map(|_| ())
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub algo: Algorithm,
    pub params: ControlParams,
    /// Final classifier when the loss has one.
    pub classifier: Option<ClassifierParams>,
    /// Loss at every iterate, starting with the initial controls.
    pub loss_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    /// Time-averaged Hamiltonian per iterate (maximum-principle runs only).
    pub hamiltonian_history: Vec<f64>,
    /// Per maximum-principle update, the smallest per-slice gain
    /// `H(f^l, r^{l+1}, â^l, b̂^l) − H(f^l, r^{l+1}, a^l, b^l)`.
    pub hamiltonian_gain: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Time steps whose co-state had norm below [`DEGENERATE_COSTATE`] in the
    /// last iteration.
    pub degenerate_steps: Vec<usize>,
}

impl TrainResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_history.last().expect("loss history is never empty")
    }
}

/// `H = ∫ σ(a − B_b f) r dy`.
pub fn hamiltonian(f: &Field, r: &Field, a: &Field, b: &KernelSlice, act: Activation, grid: &Grid) -> Result<f64> {
    ensure_len("co-state", r.len(), grid.len())?;
    let u = pre_activation(a, b, f, grid)?;
    Ok((0..grid.len()).map(|i| grid.weights()[i] * act.eval(u[i]) * r[i]).sum())
}

/// `H_l = H(f^l, r^{l+1}, a^l, b^l)` for every step, using the payoff
/// co-state.
pub fn hamiltonian_profile(
    params: &ControlParams,
    traj: &Trajectory,
    costate: &CostateTrajectory,
    act: Activation,
    grid: &Grid,
) -> Result<Vec<f64>> {
    ensure_len("co-state", costate.states.len(), traj.states.len())?;
    (0..traj.steps())
        .map(|l| {
            let (a, b) = params.slice(l);
            hamiltonian(&traj.states[l], &costate.states[l + 1], a, b, act, grid)
        })
        .collect()
}

/// Pointwise maximizer of `H(f, r, ·, ·)` over the box.
///
/// Where `r(y) ≥ 0` the bias takes `a_hi` and the kernel row takes `b_lo`
/// against `f(z) ≥ 0`, `b_hi` against `f(z) < 0`; rows with `r(y) < 0` are
/// mirrored. `σ` is non-decreasing for every supported kind, so this
/// maximizes `σ(a − B_b f)·r` node by node.
pub fn maximize_hamiltonian_box(
    f: &Field,
    r: &Field,
    bx: &ControlBox,
    _act: Activation,
    grid: &Grid,
) -> Result<(Field, KernelSlice)> {
    ensure_len("state", f.len(), grid.len())?;
    ensure_len("co-state", r.len(), grid.len())?;
    Ok(bang_bang(f, r, bx))
}

fn bang_bang(f: &Field, r: &Field, bx: &ControlBox) -> (Field, KernelSlice) {
    let n = f.len();
    let a: Vec<f64> = r.iter().map(|&ri| if ri >= 0.0 { bx.a_hi } else { bx.a_lo }).collect();
    let mut b = KernelSlice::zeros(n);
    let m = b.matrix_mut();
    for j in 0..n {
        let f_nonneg = f[j] >= 0.0;
        for i in 0..n {
            let up = r[i] >= 0.0;
            m[(i, j)] = if up == f_nonneg { bx.b_lo } else { bx.b_hi };
        }
    }
    (Field::from(a), b)
}

pub fn train(problem: &Problem, cfg: &TrainConfig) -> Result<TrainResult> {
    match cfg.algo {
        Algorithm::Ppa => train_ppa(problem, cfg),
        Algorithm::Pmp => train_pmp(problem, cfg),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Block {
    A,
    B,
    Classifier,
}

impl Block {
    fn owns(self, e: Entry) -> bool {
        matches!(
            (self, e),
            (Block::A, Entry::A { .. }) | (Block::B, Entry::B { .. }) | (Block::Classifier, Entry::W { .. } | Entry::Mu { .. })
        )
    }
}

#[derive(Debug, Clone)]
struct Point {
    params: ControlParams,
    loss: LossSpec,
}

impl Point {
    fn value(&self, e: Entry) -> f64 {
        match e {
            Entry::A { l, i } => self.params.a[l][i],
            Entry::B { l, i, j } => self.params.b[l].get(i, j),
            Entry::W { i, j } => self.loss.classifier().map_or(0.0, |c| c.w.get(i, j)),
            Entry::Mu { i } => self.loss.classifier().map_or(0.0, |c| c.mu[i]),
        }
    }

    fn add(&mut self, e: Entry, delta: f64) {
        match e {
            Entry::A { l, i } => self.params.a[l][i] += delta,
            Entry::B { l, i, j } => self.params.b[l].matrix_mut()[(i, j)] += delta,
            Entry::W { i, j } => {
                if let Some(c) = self.loss.classifier_mut() {
                    c.w.matrix_mut()[(i, j)] += delta
                }
            }
            Entry::Mu { i } => {
                if let Some(c) = self.loss.classifier_mut() {
                    c.mu[i] += delta
                }
            }
        }
    }

    fn refresh(&mut self) -> Result<()> {
        let p = std::mem::replace(&mut self.params, ControlParams::zeros(0, 0));
        self.params = ControlParams::new(p.a, p.b)?;
        Ok(())
    }

    fn evaluate(&self, pb: &Problem) -> Result<f64> {
        let traj = forward_solve(&self.params, &pb.f_init, pb.act, &pb.grid, &pb.time)?;
        loss(&traj, &self.params, &self.loss, &pb.grid)
    }

    fn loss_and_gradient(&self, pb: &Problem) -> Result<(f64, ParamGradient)> {
        let out = loss_and_gradient(&self.params, &self.loss, &pb.f_init, pb.act, &pb.grid, &pb.time)?;
        Ok((out.loss, out.gradient))
    }
}

/// Result of one approximate proximal subproblem.
struct ProxStep {
    point: Point,
    loss: f64,
}

/// Approximately minimizes `J(x) + ‖x − x_k‖²/2τ` over one block with
/// Armijo-backtracked gradient steps warm-started at `x_k`. Every accepted
/// step lowers the proximal objective, which equals `J(x_k)` at the start.
fn prox_block(pb: &Problem, start: &Point, start_loss: f64, block: Block, cfg: &TrainConfig, metric: &Metric) -> Result<ProxStep> {
    let tau = cfg.tau;
    let mut x = start.clone();
    let mut jx = start_loss;
    let mut eta = tau;
    let dist_sq = |p: &Point, entries: &[Entry]| -> f64 {
        entries
            .iter()
            .map(|&e| metric.weight(e) * (p.value(e) - start.value(e)).powi(2))
            .sum()
    };
    for _ in 0..cfg.inner_iters {
        let (j, g) = x.loss_and_gradient(pb)?;
        jx = j;
        let entries: Vec<Entry> = g.entries().into_iter().filter(|&e| block.owns(e)).collect();
        let dir: Vec<f64> = entries
            .iter()
            .map(|&e| g.entry(e) + (x.value(e) - start.value(e)) / tau)
            .collect();
        let dir_sq: f64 = entries.iter().zip(&dir).map(|(&e, d)| metric.weight(e) * d * d).sum();
        if dir_sq.sqrt() <= f64::EPSILON * (1.0 + jx.abs()) {
            break;
        }
        let p_x = jx + dist_sq(&x, &entries) / (2.0 * tau);
        let mut accepted = None;
        for _ in 0..50 {
            let mut trial = x.clone();
            for (&e, d) in entries.iter().zip(&dir) {
                trial.add(e, -eta * d);
            }
            trial.refresh()?;
            match trial.evaluate(pb) {
                Ok(jt) => {
                    let p_t = jt + dist_sq(&trial, &entries) / (2.0 * tau);
                    if p_t <= p_x - 1e-4 * eta * dir_sq {
                        accepted = Some((trial, jt));
                        break;
                    }
                }
                Err(Error::Divergence { .. }) => {}
                Err(e) => return Err(e),
            }
            eta *= 0.5;
        }
        match accepted {
            Some((trial, jt)) => {
                x = trial;
                jx = jt;
                eta = (2.0 * eta).min(tau);
            }
            None => break,
        }
    }
    Ok(ProxStep { point: x, loss: jx })
}

/// Block proximal point training: `a`, then `b`, then the classifier head.
pub fn train_ppa(problem: &Problem, cfg: &TrainConfig) -> Result<TrainResult> {
    if cfg.algo != Algorithm::Ppa {
        return Err(invalid("train_ppa called with a non-proximal configuration"));
    }
    cfg.validate()?;
    problem.check()?;
    let metric = Metric::new(&problem.grid, &problem.time);
    let mut blocks = vec![Block::A, Block::B];
    if problem.loss.classifier().is_some() {
        blocks.push(Block::Classifier);
    }
    let mut x = Point {
        params: problem.init.clone(),
        loss: problem.loss.clone(),
    };
    let (mut j, g) = x.loss_and_gradient(problem)?;
    let mut loss_history = vec![j];
    let mut grad_norm_history = vec![g.norm(&metric)];
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let gn = *grad_norm_history.last().unwrap();
        if gn <= cfg.tol {
            converged = true;
            break;
        }
        if iterations >= cfg.max_iters {
            break;
        }
        for &block in &blocks {
            let step = prox_block(problem, &x, j, block, cfg, &metric)?;
            x = step.point;
            j = step.loss;
        }
        iterations += 1;
        let (jn, g) = x.loss_and_gradient(problem)?;
        j = jn;
        loss_history.push(j);
        grad_norm_history.push(g.norm(&metric));
        debug!("ppa iter {iterations}: loss {j:.6e}, grad {:.3e}", grad_norm_history.last().unwrap());
    }
    info!("ppa finished after {iterations} iterations, loss {j:.6e}, converged {converged}");
    Ok(TrainResult {
        algo: Algorithm::Ppa,
        classifier: x.loss.classifier().cloned(),
        params: x.params,
        loss_history,
        grad_norm_history,
        hamiltonian_history: Vec::new(),
        hamiltonian_gain: Vec::new(),
        converged,
        iterations,
        degenerate_steps: Vec::new(),
    })
}

/// Payoff co-state `r_PMP = −∂J/∂f`, so `r(T) = f̃ − f(T)` for tracking.
pub fn pmp_costate(
    params: &ControlParams,
    traj: &Trajectory,
    spec: &LossSpec,
    act: Activation,
    grid: &Grid,
) -> Result<CostateTrajectory> {
    let r_t = terminal_costate(traj.terminal(), spec, grid)?.scaled(-1.0);
    adjoint_solve(params, traj, act, &r_t, grid)
}

/// Damped successive approximation: forward solve, backward solve, then
/// per-slice Hamiltonian maximization blended with the previous controls.
pub fn train_pmp(problem: &Problem, cfg: &TrainConfig) -> Result<TrainResult> {
    if cfg.algo != Algorithm::Pmp {
        return Err(invalid("train_pmp called with a non-PMP configuration"));
    }
    cfg.validate()?;
    problem.check()?;
    let bx = cfg
        .control_box
        .ok_or_else(|| invalid("maximum-principle training needs a control box"))?;
    let (grid, act) = (&problem.grid, problem.act);
    let metric = Metric::new(grid, &problem.time);
    let mut params = problem.init.clone();
    let mut loss_history = Vec::new();
    let mut grad_norm_history = Vec::new();
    let mut hamiltonian_history = Vec::new();
    let mut hamiltonian_gain = Vec::new();
    let mut degenerate_steps: Vec<usize>;
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let traj = forward_solve(&params, &problem.f_init, act, grid, &problem.time)?;
        let costate = pmp_costate(&params, &traj, &problem.loss, act, grid)?;
        let j = loss(&traj, &params, &problem.loss, grid)?;
        let g = gradient(&traj, &costate.negated(), &params, &problem.loss, act, grid)?;
        let profile = hamiltonian_profile(&params, &traj, &costate, act, grid)?;
        loss_history.push(j);
        grad_norm_history.push(g.norm(&metric));
        hamiltonian_history.push(profile.iter().sum::<f64>() / profile.len() as f64);
        degenerate_steps = (0..traj.steps())
            .filter(|&l| grid.norm(&costate.states[l + 1]).map_or(true, |v| v < DEGENERATE_COSTATE))
            .collect();
        if converged || iterations >= cfg.max_iters {
            break;
        }
        let mut a = Vec::with_capacity(params.steps());
        let mut b = Vec::with_capacity(params.steps());
        let mut gain = f64::INFINITY;
        for l in 0..params.steps() {
            let (f, r) = (&traj.states[l], &costate.states[l + 1]);
            let (a_hat, b_hat) = bang_bang(f, r, &bx);
            let (a_old, b_old) = params.slice(l);
            gain = gain.min(hamiltonian(f, r, &a_hat, &b_hat, act, grid)? - profile[l]);
            a.push(a_hat.scaled(1.0 - cfg.damping).axpy(cfg.damping, a_old)?);
            b.push(KernelSlice::new(
                b_hat.matrix() * (1.0 - cfg.damping) + b_old.matrix() * cfg.damping,
            )?);
        }
        hamiltonian_gain.push(gain);
        let next = ControlParams::new(a, b)?;
        let change = next.sup_distance(&params);
        params = next;
        iterations += 1;
        debug!("pmp iter {iterations}: loss {j:.6e}, control change {change:.3e}");
        if change <= cfg.tol {
            converged = true;
        }
    }
    if !degenerate_steps.is_empty() {
        warn!("co-state vanishes at {} time steps", degenerate_steps.len());
    }
    info!(
        "pmp finished after {iterations} iterations, loss {:.6e}, converged {converged}",
        loss_history.last().unwrap()
    );
    Ok(TrainResult {
        algo: Algorithm::Pmp,
        params,
        classifier: problem.loss.classifier().cloned(),
        loss_history,
        grad_norm_history,
        hamiltonian_history,
        hamiltonian_gain,
        converged,
        iterations,
        degenerate_steps,
    })
}
