//! Forward propagation `∂ₜf = σ(a − B_b f)`, its linearization, and the
//! closed-form rank-one ReLU solutions.
//!
//! Controls are piecewise constant in depth: slice `l` acts on `[t_l, t_{l+1})`,
//! which is one residual layer. Training paths always integrate with explicit
//! Euler, `f^{l+1} = f^l + dt·σ(a^l − B_{b^l} f^l)`, so that the backward
//! recursion in [`crate::adjoint`] is its exact transpose.

use log::debug;

use crate::activation::Activation;
use crate::error::{ensure_len, invalid, Error, Result};
use crate::grid::{apply_kernel, inner_product, Field, Grid, KernelSlice, TimeGrid};

/// States with `‖f‖_∞` above this are treated as divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Bias `a(y,t)` and selection weight `b(y,z,t)`, one slice per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlParams {
    pub a: Vec<Field>,
    pub b: Vec<KernelSlice>,
    /// Set when every slice is the same (autonomous controls).
    pub time_constant: bool,
}

impl ControlParams {
    pub fn new(a: Vec<Field>, b: Vec<KernelSlice>) -> Result<Self> {
        ensure_len("kernel slices", b.len(), a.len())?;
        if a.is_empty() {
            return Err(invalid("controls need at least one time slice"));
        }
        let n = a[0].len();
        for (l, (al, bl)) in a.iter().zip(&b).enumerate() {
            ensure_len(&format!("bias slice {l}"), al.len(), n)?;
            ensure_len(&format!("kernel slice {l}"), bl.dim(), n)?;
            if !al.is_finite() {
                return Err(invalid(format!("bias slice {l} has non-finite entries")));
            }
        }
        let time_constant = a.iter().all(|al| al == &a[0]) && b.iter().all(|bl| bl == &b[0]);
        Ok(Self {
            a,
            b,
            time_constant,
        })
    }

    /// Autonomous controls repeated over `steps` slices.
    pub fn constant(a: Field, b: KernelSlice, steps: usize) -> Result<Self> {
        ensure_len("kernel", b.dim(), a.len())?;
        if steps == 0 {
            return Err(invalid("controls need at least one time slice"));
        }
        Ok(Self {
            a: vec![a; steps],
            b: vec![b; steps],
            time_constant: true,
        })
    }

    pub fn zeros(n: usize, steps: usize) -> Self {
        Self {
            a: vec![Field::zeros(n); steps],
            b: vec![KernelSlice::zeros(n); steps],
            time_constant: true,
        }
    }

    pub fn steps(&self) -> usize {
        self.a.len()
    }

    pub fn nodes(&self) -> usize {
        self.a.first().map_or(0, |a| a.len())
    }

    /// Control slice acting at grid time `l`; `l = steps` reuses the last slice.
    pub fn slice(&self, l: usize) -> (&Field, &KernelSlice) {
        let l = l.min(self.steps() - 1);
        (&self.a[l], &self.b[l])
    }

    /// The single slice of autonomous controls.
    pub fn autonomous(&self) -> Option<(&Field, &KernelSlice)> {
        self.time_constant.then(|| self.slice(0))
    }

    pub fn check(&self, grid: &Grid, time: &TimeGrid) -> Result<()> {
        ensure_len("control time slices", self.steps(), time.steps())?;
        ensure_len("control nodes", self.nodes(), grid.len())
    }

    /// `self + eps * dir`, slice by slice.
    pub fn perturbed(&self, eps: f64, dir: &ControlParams) -> Result<Self> {
        ensure_len("direction slices", dir.steps(), self.steps())?;
        let a = self
            .a
            .iter()
            .zip(&dir.a)
            .map(|(x, d)| x.axpy(eps, d))
            .collect::<Result<Vec<_>>>()?;
        let b = self
            .b
            .iter()
            .zip(&dir.b)
            .map(|(x, d)| KernelSlice::new(x.matrix() + d.matrix() * eps))
            .collect::<Result<Vec<_>>>()?;
        ControlParams::new(a, b)
    }

    /// Largest entry-wise difference to `other`.
    pub fn sup_distance(&self, other: &ControlParams) -> f64 {
        let da = self
            .a
            .iter()
            .zip(&other.a)
            .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max);
        let db = self
            .b
            .iter()
            .zip(&other.b)
            .map(|(x, y)| (x.matrix() - y.matrix()).amax())
            .fold(0.0, f64::max);
        da.max(db)
    }
}

/// The state `f(·, t_l)` at every grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Field>,
    pub time: TimeGrid,
}

impl Trajectory {
    pub fn initial(&self) -> &Field {
        &self.states[0]
    }

    pub fn terminal(&self) -> &Field {
        self.states.last().expect("trajectory is never empty")
    }

    /// Number of stored states minus one.
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    /// True when the integration reached the final time.
    pub fn is_complete(&self) -> bool {
        self.steps() == self.time.steps()
    }
}

/// Time integrator for forward-only studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Integrator {
    #[default]
    Euler,
    /// Classical fourth-order Runge–Kutta with the control frozen over the step.
    Rk4,
}

/// `u = a − B_b f`.
pub fn pre_activation(a: &Field, b: &KernelSlice, f: &Field, grid: &Grid) -> Result<Field> {
    let bf = apply_kernel(b, f, grid)?;
    a.axpy(-1.0, &bf)
}

fn rhs(a: &Field, b: &KernelSlice, f: &Field, act: Activation, grid: &Grid) -> Result<Field> {
    Ok(pre_activation(a, b, f, grid)?.map(|u| act.eval(u)))
}

fn check_finite(f: &Field, step: usize) -> Result<()> {
    let max_norm = f.iter().fold(0.0f64, |m, v| {
        if v.is_finite() {
            m.max(v.abs())
        } else {
            f64::INFINITY
        }
    });
    if !(max_norm <= DIVERGENCE_LIMIT) {
        return Err(Error::Divergence { step, max_norm });
    }
    Ok(())
}

/// Integrates the forward problem and returns the states computed so far
/// alongside the divergence error, if any.
pub fn forward_solve_partial(
    params: &ControlParams,
    f_init: &Field,
    act: Activation,
    grid: &Grid,
    time: &TimeGrid,
    integrator: Integrator,
) -> Result<(Trajectory, Option<Error>)> {
    params.check(grid, time)?;
    ensure_len("initial field", f_init.len(), grid.len())?;
    check_finite(f_init, 0)?;
    let dt = time.dt();
    let mut states = Vec::with_capacity(time.steps() + 1);
    states.push(f_init.clone());
    for l in 0..time.steps() {
        let (a, b) = params.slice(l);
        let f = &states[l];
        let next = match integrator {
            Integrator::Euler => f.axpy(dt, &rhs(a, b, f, act, grid)?)?,
            Integrator::Rk4 => {
                let k1 = rhs(a, b, f, act, grid)?;
                let k2 = rhs(a, b, &f.axpy(0.5 * dt, &k1)?, act, grid)?;
                let k3 = rhs(a, b, &f.axpy(0.5 * dt, &k2)?, act, grid)?;
                let k4 = rhs(a, b, &f.axpy(dt, &k3)?, act, grid)?;
                let mut next = f.clone();
                for i in 0..next.len() {
                    next[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
                next
            }
        };
        if let Err(e) = check_finite(&next, l + 1) {
            debug!("forward solve stopped: {e}");
            return Ok((Trajectory { states, time: *time }, Some(e)));
        }
        states.push(next);
    }
    Ok((Trajectory { states, time: *time }, None))
}

/// Explicit-Euler forward solve of `∂ₜf = σ(a − B_b f)`, `f(0) = f_init`.
pub fn forward_solve(
    params: &ControlParams,
    f_init: &Field,
    act: Activation,
    grid: &Grid,
    time: &TimeGrid,
) -> Result<Trajectory> {
    forward_solve_with(params, f_init, act, grid, time, Integrator::Euler)
}

pub fn forward_solve_with(
    params: &ControlParams,
    f_init: &Field,
    act: Activation,
    grid: &Grid,
    time: &TimeGrid,
    integrator: Integrator,
) -> Result<Trajectory> {
    match forward_solve_partial(params, f_init, act, grid, time, integrator)? {
        (traj, None) => Ok(traj),
        (_, Some(e)) => Err(e),
    }
}

pub(crate) fn check_trajectory(params: &ControlParams, traj: &Trajectory, grid: &Grid) -> Result<()> {
    params.check(grid, &traj.time)?;
    if !traj.is_complete() {
        return Err(invalid(format!(
            "trajectory has {} steps, expected {}",
            traj.steps(),
            traj.time.steps()
        )));
    }
    ensure_len("trajectory state", traj.initial().len(), grid.len())
}

/// Residual `u^l = a^l − B_{b^l} f^l` at grid time `l` (`0 ≤ l ≤ steps`).
pub fn residual(params: &ControlParams, traj: &Trajectory, l: usize, grid: &Grid) -> Result<Field> {
    if l > traj.steps() {
        return Err(invalid(format!(
            "step index {l} out of range 0..={}",
            traj.steps()
        )));
    }
    params.check(grid, &traj.time)?;
    let (a, b) = params.slice(l);
    pre_activation(a, b, &traj.states[l], grid)
}

/// Residuals at every step `0..steps` (the points where Euler evaluates `σ`).
pub fn residuals(params: &ControlParams, traj: &Trajectory, grid: &Grid) -> Result<Vec<Field>> {
    check_trajectory(params, traj, grid)?;
    (0..traj.steps())
        .map(|l| residual(params, traj, l, grid))
        .collect()
}

/// Linearized (Gateaux) solve in control direction `dir = (α, β)`:
/// `g^{l+1} = g^l + dt·σ′(u^l)(α^l − B_{b^l} g^l − B_{β^l} f^l)`, `g^0 = 0`,
/// with `u^l` taken from the stored trajectory.
pub fn tangent_solve(
    params: &ControlParams,
    traj: &Trajectory,
    act: Activation,
    dir: &ControlParams,
    grid: &Grid,
) -> Result<Trajectory> {
    check_trajectory(params, traj, grid)?;
    dir.check(grid, &traj.time)?;
    let dt = traj.time.dt();
    let n = grid.len();
    let mut states = Vec::with_capacity(traj.states.len());
    states.push(Field::zeros(n));
    for l in 0..traj.steps() {
        let (_, b) = params.slice(l);
        let (alpha, beta) = dir.slice(l);
        let u = residual(params, traj, l, grid)?;
        let g = &states[l];
        let bg = apply_kernel(b, g, grid)?;
        let betaf = apply_kernel(beta, &traj.states[l], grid)?;
        let next: Vec<f64> = (0..n)
            .map(|i| g[i] + dt * act.deriv(u[i]) * (alpha[i] - bg[i] - betaf[i]))
            .collect();
        states.push(Field::from(next));
    }
    Ok(Trajectory {
        states,
        time: traj.time,
    })
}

/// Rank-one ReLU setup: `b(y,z) = ψ(y)φ(z)`, `a = a0·ψ`, initial data `f_init`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneSpec {
    pub phi: Field,
    pub psi: Field,
    pub a0: f64,
    pub f_init: Field,
}

impl RankOneSpec {
    /// Requires `∫φ² = ∫ψ² = 1` under the grid quadrature.
    pub fn new(phi: Field, psi: Field, a0: f64, f_init: Field, grid: &Grid) -> Result<Self> {
        ensure_len("phi", phi.len(), grid.len())?;
        ensure_len("psi", psi.len(), grid.len())?;
        ensure_len("initial field", f_init.len(), grid.len())?;
        for (name, v) in [("phi", &phi), ("psi", &psi)] {
            let norm2 = inner_product(v, v, grid)?;
            if (norm2 - 1.0).abs() > 1e-9 {
                return Err(invalid(format!("∫{name}² = {norm2}, expected 1")));
            }
        }
        Ok(Self {
            phi,
            psi,
            a0,
            f_init,
        })
    }

    /// Normalizes `phi` and `psi` before validating.
    pub fn normalized(phi: Field, psi: Field, a0: f64, f_init: Field, grid: &Grid) -> Result<Self> {
        let unit = |v: Field| -> Result<Field> {
            let n = grid.norm(&v)?;
            if n == 0.0 {
                return Err(invalid("rank-one factor must not vanish"));
            }
            Ok(v.scaled(1.0 / n))
        };
        Self::new(unit(phi)?, unit(psi)?, a0, f_init, grid)
    }

    pub fn kernel(&self) -> KernelSlice {
        KernelSlice::rank_one(&self.psi, &self.phi).expect("factor lengths checked at construction")
    }

    pub fn bias(&self) -> Field {
        self.psi.scaled(self.a0)
    }

    pub fn control_params(&self, steps: usize) -> Result<ControlParams> {
        ControlParams::constant(self.bias(), self.kernel(), steps)
    }

    /// `λ_I = a0 − ∫ f_I φ`.
    pub fn lambda_init(&self, grid: &Grid) -> Result<f64> {
        Ok(self.a0 - inner_product(&self.f_init, &self.phi, grid)?)
    }

    /// `α = ∫ ψ⁺ φ`.
    pub fn alpha(&self, grid: &Grid) -> Result<f64> {
        inner_product(&self.psi.map(|v| v.max(0.0)), &self.phi, grid)
    }

    /// `β = ∫ ψ⁻ φ` with `ψ⁻ = max(−ψ, 0)`.
    pub fn beta(&self, grid: &Grid) -> Result<f64> {
        inner_product(&self.psi.map(|v| (-v).max(0.0)), &self.phi, grid)
    }
}

/// Exact solution of the rank-one ReLU problem at time `t`.
///
/// With `λ_I ≥ 0` the field relaxes along `ψ⁺` at rate `α`; with `λ_I < 0` it
/// moves along `ψ⁻` at rate `β` (growing exponentially when `β > 0`). A zero
/// rate gives linear growth `f_I + t·σ(λ_I ψ)`.
pub fn rank_one_relu_solution(spec: &RankOneSpec, t: f64, grid: &Grid) -> Result<Field> {
    let lambda = spec.lambda_init(grid)?;
    let (rate, profile) = if lambda >= 0.0 {
        // e^{-αt}: decaying factor (1 − e^{−αt})/α
        let alpha = spec.alpha(grid)?;
        (-alpha, spec.psi.map(|v| v.max(0.0)))
    } else {
        let beta = spec.beta(grid)?;
        (beta, spec.psi.map(|v| (-v).max(0.0)))
    };
    // ∫₀ᵗ e^{rate·s} ds
    let growth = if rate.abs() < 1e-14 {
        t
    } else {
        (rate * t).exp_m1() / rate
    };
    spec.f_init.axpy(lambda.abs() * growth, &profile)
}
