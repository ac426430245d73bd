//! Backward co-state solver.
//!
//! The co-state obeys `ṙ = B_{bᵀ}(σ′(u) r)` with a terminal value at `T`.
//! Rather than discretizing that equation independently, the recursion here
//! is the transpose (under the weighted pairing) of the Euler step
//! `f ↦ f + dt·σ(a − B_b f)`, whose Jacobian is `I − dt·σ′(u)·B_b`:
//!
//! ```text
//! r^l = r^{l+1} − dt · B_{(b^l)ᵀ}( σ′(u^l) · r^{l+1} ),   r^{steps} = r_T.
//! ```
//!
//! This is consistent with the continuous equation as `dt → 0` and makes
//! adjoint gradients agree with the discrete loss to rounding error.

use crate::activation::Activation;
use crate::dynamics::{check_trajectory, residual, ControlParams, Trajectory};
use crate::error::{ensure_len, invalid, Result};
use crate::grid::{apply_kernel, apply_kernel_transpose, Field, Grid, KernelSlice};

/// `r(·, t_l)` for `l = 0..=steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostateTrajectory {
    pub states: Vec<Field>,
}

impl CostateTrajectory {
    pub fn terminal(&self) -> &Field {
        self.states.last().expect("costate is never empty")
    }

    /// Negated co-state, e.g. to switch between the loss-minimizing and the
    /// payoff-maximizing sign conventions.
    pub fn negated(&self) -> Self {
        Self {
            states: self.states.iter().map(|r| r.scaled(-1.0)).collect(),
        }
    }
}

/// Integrates the co-state backward from `r_T` along `traj`.
pub fn adjoint_solve(
    params: &ControlParams,
    traj: &Trajectory,
    act: Activation,
    r_terminal: &Field,
    grid: &Grid,
) -> Result<CostateTrajectory> {
    check_trajectory(params, traj, grid)?;
    ensure_len("terminal co-state", r_terminal.len(), grid.len())?;
    if !r_terminal.is_finite() {
        return Err(invalid("terminal co-state is not finite"));
    }
    let steps = traj.steps();
    let dt = traj.time.dt();
    let mut states = vec![Field::default(); steps + 1];
    states[steps] = r_terminal.clone();
    for l in (0..steps).rev() {
        let u = residual(params, traj, l, grid)?;
        let next = &states[l + 1];
        let weighted: Field = u
            .iter()
            .zip(next.iter())
            .map(|(&ui, &ri)| act.deriv(ui) * ri)
            .collect::<Vec<_>>()
            .into();
        let (_, b) = params.slice(l);
        let back = apply_kernel_transpose(b, &weighted, grid)?;
        states[l] = next.axpy(-dt, &back)?;
    }
    Ok(CostateTrajectory { states })
}

/// Tracking terminal condition `r_T = f(T) − f̃`.
pub fn terminal_tracking(f_terminal: &Field, target: &Field) -> Result<Field> {
    f_terminal.axpy(-1.0, target)
}

/// Output of the classifier head at the final time.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierOutput {
    /// `O_T(y) = ∫ W(y,z) f(z,T) dz + μ(y)`.
    pub logits: Field,
    /// `C^pre = h(O_T)`.
    pub prediction: Field,
}

pub fn classifier_output(
    f_terminal: &Field,
    w: &KernelSlice,
    mu: &Field,
    link: Activation,
    grid: &Grid,
) -> Result<ClassifierOutput> {
    ensure_len("classifier bias", mu.len(), grid.len())?;
    let logits = apply_kernel(w, f_terminal, grid)?.axpy(1.0, mu)?;
    let prediction = logits.map(|o| link.eval(o));
    Ok(ClassifierOutput { logits, prediction })
}

/// Classification terminal condition
/// `r(z,T) = ∫ (C^pre(y) − C(y)) h′(O_T(y)) W(y,z) dy`.
///
/// The integration runs over the first kernel argument: this is the weighted
/// adjoint of `f ↦ ∫ W(·,z) f(z) dz`.
pub fn terminal_classification(
    f_terminal: &Field,
    w: &KernelSlice,
    mu: &Field,
    link: Activation,
    label: &Field,
    grid: &Grid,
) -> Result<Field> {
    ensure_len("label", label.len(), grid.len())?;
    let out = classifier_output(f_terminal, w, mu, link, grid)?;
    let misfit: Field = (0..grid.len())
        .map(|i| (out.prediction[i] - label[i]) * link.deriv(out.logits[i]))
        .collect::<Vec<_>>()
        .into();
    apply_kernel_transpose(w, &misfit, grid)
}

/// Per-step bound `1 + dt·sup|σ′|·‖b^l‖_{L²(Y×Y)}` on the operator norm of one
/// backward step.
pub fn backward_step_bounds(params: &ControlParams, act: Activation, dt: f64, grid: &Grid) -> Result<Vec<f64>> {
    params
        .b
        .iter()
        .map(|b| Ok(1.0 + dt * act.lipschitz() * b.l2_norm(grid)?))
        .collect()
}
