//! Classifier head, losses, Tikhonov regularization and parameter gradients.
//!
//! Gradients are returned as function-space representers: `grad_a^l(y_i)` is
//! the `L²(Y × [0,T])` gradient, so the plain partial derivative of the
//! discrete loss with respect to the entry `a^l_i` equals
//! `dt · w_i · grad_a^l(y_i)`. [`Metric`] holds these weights, and
//! [`finite_diff_gradient`] divides by them so both routes are directly
//! comparable.

use rayon::prelude::*;

use crate::activation::Activation;
use crate::adjoint::{adjoint_solve, classifier_output, terminal_classification, terminal_tracking, CostateTrajectory};
use crate::dynamics::{check_trajectory, forward_solve, residual, ControlParams, Trajectory};
use crate::error::{ensure_len, invalid, Result};
use crate::grid::{inner_product, Field, Grid, KernelSlice, TimeGrid};

/// `W`, `μ` and the link `h` of the classifier `C^pre = h(∫W f(T) + μ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w: KernelSlice,
    pub mu: Field,
    pub link: Activation,
}

impl ClassifierParams {
    pub fn logistic(w: KernelSlice, mu: Field) -> Self {
        Self {
            w,
            mu,
            link: Activation::Logistic,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    /// `½‖f(T) − f̃‖²`.
    Tracking { target: Field },
    /// `½‖C^pre − C‖²`.
    Classification {
        label: Field,
        classifier: ClassifierParams,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Tikhonov weight `λ ≥ 0`.
    pub lambda: f64,
}

impl LossSpec {
    pub fn tracking(target: Field) -> Self {
        Self {
            kind: LossKind::Tracking { target },
            lambda: 0.0,
        }
    }

    pub fn classification(label: Field, classifier: ClassifierParams) -> Self {
        Self {
            kind: LossKind::Classification { label, classifier },
            lambda: 0.0,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(invalid(format!("regularization weight must be ≥ 0, got {lambda}")));
        }
        self.lambda = lambda;
        Ok(self)
    }

    pub fn classifier(&self) -> Option<&ClassifierParams> {
        match &self.kind {
            LossKind::Classification { classifier, .. } => Some(classifier),
            LossKind::Tracking { .. } => None,
        }
    }

    pub fn classifier_mut(&mut self) -> Option<&mut ClassifierParams> {
        match &mut self.kind {
            LossKind::Classification { classifier, .. } => Some(classifier),
            LossKind::Tracking { .. } => None,
        }
    }

    fn check(&self, grid: &Grid) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(invalid("regularization weight must be ≥ 0"));
        }
        match &self.kind {
            LossKind::Tracking { target } => ensure_len("target", target.len(), grid.len()),
            LossKind::Classification { label, classifier } => {
                ensure_len("label", label.len(), grid.len())?;
                ensure_len("classifier kernel", classifier.w.dim(), grid.len())?;
                ensure_len("classifier bias", classifier.mu.len(), grid.len())
            }
        }
    }
}

/// Gradient of the loss with respect to every trainable parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub grad_a: Vec<Field>,
    pub grad_b: Vec<KernelSlice>,
    pub grad_w: Option<KernelSlice>,
    pub grad_mu: Option<Field>,
}

impl ParamGradient {
    pub fn zeros_like(params: &ControlParams, spec: &LossSpec) -> Self {
        let n = params.nodes();
        let cls = spec.classifier().is_some();
        Self {
            grad_a: vec![Field::zeros(n); params.steps()],
            grad_b: vec![KernelSlice::zeros(n); params.steps()],
            grad_w: cls.then(|| KernelSlice::zeros(n)),
            grad_mu: cls.then(|| Field::zeros(n)),
        }
    }

    /// Norm in `L²(Y×[0,T]) × L²(Y×Y×[0,T]) × L²(Y×Y) × L²(Y)`.
    pub fn norm(&self, metric: &Metric) -> f64 {
        let mut s = 0.0;
        self.for_each_entry(|e, v| s += metric.weight(e) * v * v);
        s.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        self.for_each_entry(|_, v| m = m.max(v.abs()));
        m
    }

    pub fn entry(&self, e: Entry) -> f64 {
        match e {
            Entry::A { l, i } => self.grad_a[l][i],
            Entry::B { l, i, j } => self.grad_b[l].get(i, j),
            Entry::W { i, j } => self.grad_w.as_ref().map_or(0.0, |w| w.get(i, j)),
            Entry::Mu { i } => self.grad_mu.as_ref().map_or(0.0, |m| m[i]),
        }
    }

    fn set(&mut self, e: Entry, v: f64) {
        match e {
            Entry::A { l, i } => self.grad_a[l][i] = v,
            Entry::B { l, i, j } => self.grad_b[l].matrix_mut()[(i, j)] = v,
            Entry::W { i, j } => {
                if let Some(w) = self.grad_w.as_mut() {
                    w.matrix_mut()[(i, j)] = v
                }
            }
            Entry::Mu { i } => {
                if let Some(m) = self.grad_mu.as_mut() {
                    m[i] = v
                }
            }
        }
    }

    pub fn entries(&self) -> Vec<Entry> {
        let mut out = Vec::new();
        self.for_each_entry(|e, _| out.push(e));
        out
    }

    pub fn for_each_entry(&self, mut f: impl FnMut(Entry, f64)) {
        let n = self.grad_a.first().map_or(0, |a| a.len());
        for (l, a) in self.grad_a.iter().enumerate() {
            for i in 0..n {
                f(Entry::A { l, i }, a[i]);
            }
        }
        for (l, b) in self.grad_b.iter().enumerate() {
            for i in 0..n {
                for j in 0..n {
                    f(Entry::B { l, i, j }, b.get(i, j));
                }
            }
        }
        if let Some(w) = &self.grad_w {
            for i in 0..n {
                for j in 0..n {
                    f(Entry::W { i, j }, w.get(i, j));
                }
            }
        }
        if let Some(mu) = &self.grad_mu {
            for i in 0..n {
                f(Entry::Mu { i }, mu[i]);
            }
        }
    }
}

/// A single trainable scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Entry {
    A { l: usize, i: usize },
    B { l: usize, i: usize, j: usize },
    W { i: usize, j: usize },
    Mu { i: usize },
}

impl Entry {
    pub fn block(&self) -> &'static str {
        match self {
            Entry::A { .. } => "a",
            Entry::B { .. } => "b",
            Entry::W { .. } => "W",
            Entry::Mu { .. } => "mu",
        }
    }
}

/// Quadrature weights that turn representers into plain partial derivatives.
#[derive(Debug, Clone)]
pub struct Metric {
    weights: Vec<f64>,
    dt: f64,
}

impl Metric {
    pub fn new(grid: &Grid, time: &TimeGrid) -> Self {
        Self {
            weights: grid.weights().to_vec(),
            dt: time.dt(),
        }
    }

    pub fn weight(&self, e: Entry) -> f64 {
        let w = &self.weights;
        match e {
            Entry::A { i, .. } => self.dt * w[i],
            Entry::B { i, j, .. } => self.dt * w[i] * w[j],
            Entry::W { i, j } => w[i] * w[j],
            Entry::Mu { i } => w[i],
        }
    }
}

/// `C^pre(y) = h(∫ W(y,z) f(z,T) dz + μ(y))`.
pub fn classify(f_terminal: &Field, cls: &ClassifierParams, grid: &Grid) -> Result<Field> {
    Ok(classifier_output(f_terminal, &cls.w, &cls.mu, cls.link, grid)?.prediction)
}

/// Data misfit `½‖·‖²` at the final state, without regularization.
pub fn misfit(f_terminal: &Field, spec: &LossSpec, grid: &Grid) -> Result<f64> {
    spec.check(grid)?;
    let d = match &spec.kind {
        LossKind::Tracking { target } => f_terminal.axpy(-1.0, target)?,
        LossKind::Classification { label, classifier } => {
            classify(f_terminal, classifier, grid)?.axpy(-1.0, label)?
        }
    };
    Ok(0.5 * inner_product(&d, &d, grid)?)
}

/// Tikhonov regularizer `R(m)` with time integrals taken as `Σ_l dt`.
pub fn regularizer(params: &ControlParams, spec: &LossSpec, dt: f64, grid: &Grid) -> Result<f64> {
    let mut r = 0.0;
    for (a, b) in params.a.iter().zip(&params.b) {
        r += dt * inner_product(a, a, grid)?;
        r += dt * b.l2_norm(grid)?.powi(2);
    }
    if let Some(cls) = spec.classifier() {
        r += inner_product(&cls.mu, &cls.mu, grid)?;
        r += cls.w.l2_norm(grid)?.powi(2);
    }
    Ok(0.5 * r)
}

/// `J_mod = misfit + λ·R`.
pub fn loss(traj: &Trajectory, params: &ControlParams, spec: &LossSpec, grid: &Grid) -> Result<f64> {
    check_trajectory(params, traj, grid)?;
    let mut j = misfit(traj.terminal(), spec, grid)?;
    if spec.lambda > 0.0 {
        j += spec.lambda * regularizer(params, spec, traj.time.dt(), grid)?;
    }
    Ok(j)
}

/// Terminal co-state for the minimization convention `r_T = ∂J/∂f(T)`.
pub fn terminal_costate(f_terminal: &Field, spec: &LossSpec, grid: &Grid) -> Result<Field> {
    spec.check(grid)?;
    match &spec.kind {
        LossKind::Tracking { target } => terminal_tracking(f_terminal, target),
        LossKind::Classification { label, classifier } => {
            terminal_classification(f_terminal, &classifier.w, &classifier.mu, classifier.link, label, grid)
        }
    }
}

/// Assembles the gradient from a trajectory and its co-state.
///
/// Step `l` pairs `σ′(u^l)` with `r^{l+1}`:
/// `grad_a^l = σ′(u^l) r^{l+1} + λ a^l`,
/// `grad_b^l(y,z) = −f^l(z) σ′(u^l(y)) r^{l+1}(y) + λ b^l(y,z)`.
pub fn gradient(
    traj: &Trajectory,
    costate: &CostateTrajectory,
    params: &ControlParams,
    spec: &LossSpec,
    act: Activation,
    grid: &Grid,
) -> Result<ParamGradient> {
    check_trajectory(params, traj, grid)?;
    spec.check(grid)?;
    ensure_len("co-state", costate.states.len(), traj.states.len())?;
    let n = grid.len();
    let lambda = spec.lambda;
    let mut grad_a = Vec::with_capacity(traj.steps());
    let mut grad_b = Vec::with_capacity(traj.steps());
    for l in 0..traj.steps() {
        let u = residual(params, traj, l, grid)?;
        let r = &costate.states[l + 1];
        ensure_len("co-state", r.len(), n)?;
        let f = &traj.states[l];
        let s: Vec<f64> = (0..n).map(|i| act.deriv(u[i]) * r[i]).collect();
        let (a, b) = params.slice(l);
        grad_a.push(Field::from((0..n).map(|i| s[i] + lambda * a[i]).collect::<Vec<_>>()));
        let mut gb = KernelSlice::zeros(n);
        let m = gb.matrix_mut();
        for j in 0..n {
            for i in 0..n {
                m[(i, j)] = -f[j] * s[i] + lambda * b.get(i, j);
            }
        }
        grad_b.push(gb);
    }
    let (grad_w, grad_mu) = match &spec.kind {
        LossKind::Tracking { .. } => (None, None),
        LossKind::Classification { label, classifier } => {
            let f_t = traj.terminal();
            let out = classifier_output(f_t, &classifier.w, &classifier.mu, classifier.link, grid)?;
            let e: Vec<f64> = (0..n)
                .map(|i| (out.prediction[i] - label[i]) * classifier.link.deriv(out.logits[i]))
                .collect();
            let mut gw = KernelSlice::zeros(n);
            let m = gw.matrix_mut();
            for j in 0..n {
                for i in 0..n {
                    m[(i, j)] = e[i] * f_t[j] + lambda * classifier.w.get(i, j);
                }
            }
            let gmu = (0..n).map(|i| e[i] + lambda * classifier.mu[i]).collect::<Vec<_>>();
            (Some(gw), Some(Field::from(gmu)))
        }
    };
    Ok(ParamGradient {
        grad_a,
        grad_b,
        grad_w,
        grad_mu,
    })
}

/// Forward solve followed by loss evaluation.
pub fn evaluate(
    params: &ControlParams,
    spec: &LossSpec,
    f_init: &Field,
    act: Activation,
    grid: &Grid,
    time: &TimeGrid,
) -> Result<(Trajectory, f64)> {
    let traj = forward_solve(params, f_init, act, grid, time)?;
    let j = loss(&traj, params, spec, grid)?;
    Ok((traj, j))
}

/// Loss and adjoint gradient in one forward/backward sweep.
pub struct LossAndGradient {
    pub trajectory: Trajectory,
    pub costate: CostateTrajectory,
    pub loss: f64,
    pub gradient: ParamGradient,
}

pub fn loss_and_gradient(
    params: &ControlParams,
    spec: &LossSpec,
    f_init: &Field,
    act: Activation,
    grid: &Grid,
    time: &TimeGrid,
) -> Result<LossAndGradient> {
    let (trajectory, loss) = evaluate(params, spec, f_init, act, grid, time)?;
    let r_t = terminal_costate(trajectory.terminal(), spec, grid)?;
    let costate = adjoint_solve(params, &trajectory, act, &r_t, grid)?;
    let gradient = gradient(&trajectory, &costate, params, spec, act, grid)?;
    Ok(LossAndGradient {
        trajectory,
        costate,
        loss,
        gradient,
    })
}

fn perturb(params: &mut ControlParams, spec: &mut LossSpec, e: Entry, delta: f64) {
    match e {
        Entry::A { l, i } => params.a[l][i] += delta,
        Entry::B { l, i, j } => params.b[l].matrix_mut()[(i, j)] += delta,
        Entry::W { i, j } => {
            if let Some(c) = spec.classifier_mut() {
                c.w.matrix_mut()[(i, j)] += delta
            }
        }
        Entry::Mu { i } => {
            if let Some(c) = spec.classifier_mut() {
                c.mu[i] += delta
            }
        }
    }
}

/// Finite-difference stencil for [`finite_diff_gradient_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stencil {
    /// `(J(x+h) − J(x−h)) / 2h`, error `O(h²)`.
    #[default]
    Central2,
    /// `(−J(x+2h) + 8J(x+h) − 8J(x−h) + J(x−2h)) / 12h`, error `O(h⁴)`.
    Central4,
}

/// Central differences of `loss ∘ forward_solve` over every parameter entry,
/// divided by the [`Metric`] weight of the entry. `h` may have either sign.
pub fn finite_diff_gradient(
    params: &ControlParams,
    spec: &LossSpec,
    f_init: &Field,
    act: Activation,
    grid: &Grid,
    time: &TimeGrid,
    h: f64,
) -> Result<ParamGradient> {
    finite_diff_gradient_with(params, spec, f_init, act, grid, time, h, Stencil::Central2)
}

/// [`finite_diff_gradient`] with a choice of stencil.
///
/// Metric weights are small (`dt·w_i·w_j` for kernel entries), so rounding
/// in the loss is amplified by `1/weight`; the wider stencil allows a larger
/// `h` at the same truncation error.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_gradient_with(
    params: &ControlParams,
    spec: &LossSpec,
    f_init: &Field,
    act: Activation,
    grid: &Grid,
    time: &TimeGrid,
    h: f64,
    stencil: Stencil,
) -> Result<ParamGradient> {
    if h == 0.0 || !h.is_finite() {
        return Err(invalid(format!("finite-difference step must be nonzero, got {h}")));
    }
    params.check(grid, time)?;
    spec.check(grid)?;
    let metric = Metric::new(grid, time);
    let mut out = ParamGradient::zeros_like(params, spec);
    let entries = out.entries();
    let values = entries
        .par_iter()
        .map(|&e| {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                let mut s = spec.clone();
                perturb(&mut p, &mut s, e, delta);
                Ok(evaluate(&p, &s, f_init, act, grid, time)?.1)
            };
            let d = match stencil {
                Stencil::Central2 => (eval(h)? - eval(-h)?) / (2.0 * h),
                Stencil::Central4 => {
                    (8.0 * (eval(h)? - eval(-h)?) - (eval(2.0 * h)? - eval(-2.0 * h)?)) / (12.0 * h)
                }
            };
            Ok(d / metric.weight(e))
        })
        .collect::<Result<Vec<f64>>>()?;
    for (e, v) in entries.into_iter().zip(values) {
        out.set(e, v);
    }
    Ok(out)
}

/// Error statistics for one parameter block.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BlockError {
    pub block: String,
    pub entries: usize,
    pub skipped: usize,
    pub max_rel: f64,
    pub mean_rel: f64,
    pub max_abs: f64,
}

/// Entry-wise relative errors between two gradients.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct GradientComparison {
    pub blocks: Vec<BlockError>,
    pub max_rel: f64,
}

/// Entries smaller than this fraction of the largest gradient entry are
/// compared against that floor instead of their own magnitude.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// Relative error `|g − f| / max(|g|, |f|, floor)` per entry, where `floor` is
/// [`RELATIVE_FLOOR`] times the largest magnitude in either gradient. Entries
/// for which `skip` returns true are excluded (kink nodes of non-smooth σ).
pub fn compare_gradients(
    analytic: &ParamGradient,
    reference: &ParamGradient,
    skip: impl Fn(Entry) -> bool,
) -> GradientComparison {
    let floor = RELATIVE_FLOOR * analytic.max_abs().max(reference.max_abs()).max(f64::MIN_POSITIVE);
    let mut blocks: Vec<BlockError> = Vec::new();
    analytic.for_each_entry(|e, g| {
        let name = e.block();
        let idx = match blocks.iter().position(|b| b.block == name) {
            Some(i) => i,
            None => {
                blocks.push(BlockError {
                    block: name.to_string(),
                    entries: 0,
                    skipped: 0,
                    max_rel: 0.0,
                    mean_rel: 0.0,
                    max_abs: 0.0,
                });
                blocks.len() - 1
            }
        };
        let b = &mut blocks[idx];
        if skip(e) {
            b.skipped += 1;
            return;
        }
        let f = reference.entry(e);
        let abs = (g - f).abs();
        let rel = abs / g.abs().max(f.abs()).max(floor);
        b.entries += 1;
        b.max_rel = b.max_rel.max(rel);
        b.mean_rel += rel;
        b.max_abs = b.max_abs.max(abs);
    });
    for b in &mut blocks {
        if b.entries > 0 {
            b.mean_rel /= b.entries as f64;
        }
    }
    let max_rel = blocks.iter().map(|b| b.max_rel).fold(0.0, f64::max);
    GradientComparison { blocks, max_rel }
}
