//! Stability diagnostics for autonomous controls: steady states, spectra and
//! the generalized Gram matrix, rank-one case analysis, Lyapunov functionals,
//! growth fits and conditioning bounds.
//!
//! Kernels act in the weighted space `L²_w`. With `W = diag(w)` the operator
//! `f ↦ K W f` is similar to the symmetric-friendly `B̂ = W^{1/2} K W^{1/2}`,
//! and an SVD `B̂ = U Σ Vᵀ` gives `L²_w`-orthonormal systems
//! `φ = W^{-1/2} U`, `ψ = W^{-1/2} V` with `B f = Σ_l μ_l (ψ_l, f) φ_l`.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::activation::Activation;
use crate::dynamics::{forward_solve, pre_activation, ControlParams, Trajectory};
use crate::error::{ensure_len, invalid, Error, Result};
use crate::grid::{apply_kernel, inner_product, Field, Grid, KernelSlice, TimeGrid};

/// Relative threshold below which spectral values and integrals count as zero.
pub const ZERO_TOL: f64 = 1e-10;

/// Asymmetry allowed for kernels treated as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-9;

fn sqrt_weights(grid: &Grid) -> DVector<f64> {
    DVector::from_iterator(grid.len(), grid.weights().iter().map(|w| w.sqrt()))
}

/// `B̂ = W^{1/2} K W^{1/2}`.
fn weighted_matrix(b: &KernelSlice, grid: &Grid) -> Result<DMatrix<f64>> {
    ensure_len("kernel", b.dim(), grid.len())?;
    let s = sqrt_weights(grid);
    let n = grid.len();
    Ok(DMatrix::from_fn(n, n, |i, j| s[i] * b.get(i, j) * s[j]))
}

fn to_weighted(f: &Field, grid: &Grid) -> DVector<f64> {
    DVector::from_iterator(f.len(), f.iter().zip(grid.weights()).map(|(v, w)| v * w.sqrt()))
}

fn from_weighted(v: &DVector<f64>, grid: &Grid) -> Field {
    Field::from(v.iter().zip(grid.weights()).map(|(x, w)| x / w.sqrt()).collect::<Vec<_>>())
}

fn check_symmetric(b: &KernelSlice) -> Result<()> {
    let scale = b.max_abs().max(1.0);
    if b.asymmetry() > SYMMETRY_TOL * scale {
        return Err(invalid(format!("kernel is not symmetric (asymmetry {:e})", b.asymmetry())));
    }
    Ok(())
}

/// Eigenpairs of a symmetric kernel operator, eigenvalues ascending and
/// eigenfunctions orthonormal in `L²_w`.
pub fn symmetric_eigenpairs(b: &KernelSlice, grid: &Grid) -> Result<(Vec<f64>, Vec<Field>)> {
    check_symmetric(b)?;
    let bh = weighted_matrix(b, grid)?;
    let eig = ((&bh + bh.transpose()) * 0.5).symmetric_eigen();
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let funcs = order
        .iter()
        .map(|&i| from_weighted(&eig.eigenvectors.column(i).into_owned(), grid))
        .collect();
    Ok((values, funcs))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SteadyStateReport {
    /// Least-squares solution of `B f = a` of minimal norm.
    pub candidate: Vec<f64>,
    /// `‖a − B f_e‖_{L²}`.
    pub residual: f64,
    pub in_range: bool,
    pub rank: usize,
    pub nullspace_dim: usize,
    /// Steady states are non-unique when the kernel has a nullspace.
    pub unique: bool,
}

/// Steady states `f_e` with `a = B f_e` via the weighted pseudo-inverse.
pub fn find_steady_state(a: &Field, b: &KernelSlice, grid: &Grid) -> Result<SteadyStateReport> {
    ensure_len("bias", a.len(), grid.len())?;
    let bh = weighted_matrix(b, grid)?;
    let ah = to_weighted(a, grid);
    let svd = bh.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cut = ZERO_TOL * smax;
    let rank = svd.singular_values.iter().filter(|&&s| s > cut && s > 0.0).count();
    let g = if rank == 0 {
        DVector::zeros(grid.len())
    } else {
        svd.solve(&ah, cut).map_err(|e| invalid(e.to_string()))?
    };
    let residual = (&ah - &bh * &g).norm();
    let a_norm = ah.norm();
    Ok(SteadyStateReport {
        candidate: from_weighted(&g, grid).into_vec(),
        residual,
        in_range: residual <= 1e-8 * a_norm.max(f64::MIN_POSITIVE),
        rank,
        nullspace_dim: grid.len() - rank,
        unique: rank == grid.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    LinearlyAsymptStable,
    LinearlyUnstable,
    Marginal,
    Inconclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralReport {
    /// Eigenvalues of `B_s = (B + B*)/2`, ascending.
    pub sym_eigenvalues: Vec<f64>,
    /// Eigenvalues of `B` as `(re, im)`, sorted by real part.
    pub eigenvalues: Vec<(f64, f64)>,
    /// Singular values `μ_l`, non-increasing.
    pub singular_values: Vec<f64>,
    pub rank: usize,
    /// Size `N` actually used for the Gram matrix.
    pub n_used: usize,
    /// `T_N[l][k] = (φ_k, ψ_l)`.
    pub gram_matrix: Vec<Vec<f64>>,
    pub tn_invertible: bool,
    pub dn_tn_posdef: bool,
    pub verdict: Verdict,
    pub warnings: Vec<String>,
}

/// Linearized stability of `u̇ = −B σ(u)` around `u = 0`.
///
/// Any eigenvalue of `B` with real part below `−tol` makes the linearization
/// unstable; all real parts above `tol` make it asymptotically stable. If
/// neither holds, stability on the range of `B` follows when `T_N` is
/// invertible and `D_N T_N` positive definite with `N` equal to the
/// numerical rank. Linearization needs `σ` smooth with `σ(0) = 0` and
/// `σ′(0) > 0`; other kinds get an inconclusive verdict.
pub fn spectral_report(b: &KernelSlice, act: Activation, grid: &Grid, n_requested: usize) -> Result<SpectralReport> {
    let bh = weighted_matrix(b, grid)?;
    let n = grid.len();
    let mut warnings = Vec::new();

    let sym = (&bh + bh.transpose()) * 0.5;
    let mut sym_eigenvalues: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    sym_eigenvalues.sort_by(f64::total_cmp);

    let mut eigenvalues: Vec<(f64, f64)> = bh.complex_eigenvalues().iter().map(|c| (c.re, c.im)).collect();
    eigenvalues.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));

    let svd = bh.svd(true, true);
    let (u, v_t) = (svd.u.as_ref().unwrap(), svd.v_t.as_ref().unwrap());
    let singular_values: Vec<f64> = svd.singular_values.iter().copied().collect();
    let smax = singular_values.first().copied().unwrap_or(0.0);
    let rank = singular_values.iter().filter(|&&s| s > ZERO_TOL * smax && s > 0.0).count();

    let mut n_used = n_requested.min(n);
    if n_used > rank {
        let msg = format!("requested N = {n_requested} exceeds numerical rank {rank}; clamped");
        warn!("{msg}");
        warnings.push(msg);
        n_used = rank;
    }
    // (φ_k, ψ_l)_w = U_kᵀ V_l, and V_lᵀ is row l of v_t
    let gram = DMatrix::from_fn(n_used, n_used, |l, k| v_t.row(l).transpose().dot(&u.column(k)));
    let tn_invertible = n_used > 0 && {
        let sv = gram.clone().singular_values();
        sv.min() > ZERO_TOL * sv.max().max(1.0)
    };
    let dn_tn_posdef = n_used > 0 && {
        let d = DMatrix::from_fn(n_used, n_used, |l, k| singular_values[l] * gram[(l, k)]);
        let s = (&d + d.transpose()) * 0.5;
        s.symmetric_eigenvalues().min() > ZERO_TOL * smax
    };

    let scale = smax.max(f64::MIN_POSITIVE);
    let linearizable = act.is_smooth() && act.eval(0.0) == 0.0 && act.deriv(0.0) > 0.0;
    let verdict = if !linearizable {
        let msg = format!("activation {act} cannot be linearized at 0");
        warnings.push(msg);
        Verdict::Inconclusive
    } else if eigenvalues.iter().any(|e| e.0 < -ZERO_TOL * scale) {
        Verdict::LinearlyUnstable
    } else if (n > 0 && eigenvalues.iter().all(|e| e.0 > ZERO_TOL * scale))
        // zero modes: fall back to the Gram-matrix test on the range
        || (n_used == rank && tn_invertible && dn_tn_posdef)
    {
        Verdict::LinearlyAsymptStable
    } else {
        Verdict::Marginal
    };

    Ok(SpectralReport {
        sym_eigenvalues,
        eigenvalues,
        singular_values,
        rank,
        n_used,
        gram_matrix: (0..n_used).map(|l| gram.row(l).iter().copied().collect()).collect(),
        tn_invertible,
        dn_tn_posdef,
        verdict,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RankOneCase {
    Case1Stable,
    Case2Unstable,
    Case3iOnesidedPlus,
    Case3iiOnesidedMinus,
    Case3iiiHigherOrder,
    Nonsmooth,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankOneVerdict {
    pub case: RankOneCase,
    /// `(∫φψ, ∫φ²ψ, ∫φ³ψ)`.
    pub integrals: [f64; 3],
}

/// Case analysis of `u̇ = −B σ(u)` for the rank-one kernel
/// `b(y,z) = φ(y) ψ(z)` along `u = β φ`.
pub fn classify_rank_one(phi: &Field, psi: &Field, act: Activation, grid: &Grid) -> Result<RankOneVerdict> {
    match act.taylor_at_zero() {
        Some(d) if act.is_smooth() => classify_rank_one_with_derivatives(phi, psi, d, grid),
        _ => Ok(RankOneVerdict {
            case: RankOneCase::Nonsmooth,
            integrals: rank_one_integrals(phi, psi, grid)?.0,
        }),
    }
}

fn rank_one_integrals(phi: &Field, psi: &Field, grid: &Grid) -> Result<([f64; 3], [f64; 3])> {
    ensure_len("phi", phi.len(), grid.len())?;
    ensure_len("psi", psi.len(), grid.len())?;
    let mut vals = [0.0; 3];
    let mut mags = [0.0; 3];
    for i in 0..grid.len() {
        let w = grid.weights()[i];
        let mut p = phi[i];
        for k in 0..3 {
            vals[k] += w * p * psi[i];
            mags[k] += w * (p * psi[i]).abs();
            p *= phi[i];
        }
    }
    Ok((vals, mags))
}

/// Same table as [`classify_rank_one`] for an activation described only by
/// `(σ′(0), σ″(0), σ‴(0))`.
pub fn classify_rank_one_with_derivatives(
    phi: &Field,
    psi: &Field,
    derivs: [f64; 3],
    grid: &Grid,
) -> Result<RankOneVerdict> {
    let (integrals, mags) = rank_one_integrals(phi, psi, grid)?;
    if derivs.iter().any(|d| !d.is_finite()) {
        return Err(invalid("activation derivatives must be finite"));
    }
    let sign = |k: usize, d: f64| -> f64 {
        let c = d * integrals[k];
        if d == 0.0 || integrals[k].abs() <= ZERO_TOL * mags[k] {
            0.0
        } else {
            c.signum()
        }
    };
    let case = match sign(0, derivs[0]) {
        s if s > 0.0 => RankOneCase::Case1Stable,
        s if s < 0.0 => RankOneCase::Case2Unstable,
        _ => match sign(1, derivs[1]) {
            s if s > 0.0 => RankOneCase::Case3iOnesidedPlus,
            s if s < 0.0 => RankOneCase::Case3iiOnesidedMinus,
            _ => RankOneCase::Case3iiiHigherOrder,
        },
    };
    Ok(RankOneVerdict { case, integrals })
}

/// Lyapunov functionals along a trajectory with autonomous controls.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LyapunovTrace {
    pub times: Vec<f64>,
    /// `∫ Σ(u)` with `Σ′ = σ`, `Σ(0) = 0`.
    pub sigma_integral: Vec<f64>,
    /// `½‖B^{1/2} f‖² − (a, f)`, present only for symmetric `B ⪰ 0`.
    pub energy: Option<Vec<f64>>,
    /// `∫ σ(u) u`.
    pub dissipation: Vec<f64>,
    /// Per-step increase allowed for `sigma_integral` by the explicit scheme.
    pub sigma_slack: Vec<f64>,
    /// Per-step increase allowed for `energy`.
    pub energy_slack: Option<Vec<f64>>,
}

/// Largest per-step increase of `series` beyond its slack. Non-positive
/// values mean the series is non-increasing within slack.
pub fn monotonicity_violation(series: &[f64], slack: &[f64]) -> f64 {
    series
        .windows(2)
        .zip(slack)
        .map(|(w, s)| w[1] - w[0] - s)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Evaluates the Lyapunov functionals at every stored time.
///
/// One explicit step changes `u` by `δ = −dt·B σ(u)`, so the discrete
/// increments carry second-order terms on top of the continuous dissipation.
/// The slack at step `l` is `C·dt²` where `C` is the larger of the observed
/// second difference of the series over `dt²` and the second-order Taylor
/// remainder (`½ sup σ′ ‖Bσ(u)‖²` for the first series, `½ (Bσ(u), σ(u))`
/// for the energy).
pub fn lyapunov_trace(
    traj: &Trajectory,
    params: &ControlParams,
    act: Activation,
    grid: &Grid,
    with_energy: bool,
) -> Result<LyapunovTrace> {
    let (a, b) = params
        .autonomous()
        .ok_or_else(|| Error::Precondition("Lyapunov functionals need time-constant controls".into()))?;
    if with_energy {
        check_symmetric(b)?;
        let min_eig = symmetric_eigenpairs(b, grid)?.0.first().copied().unwrap_or(0.0);
        let smax = weighted_matrix(b, grid)?.norm().max(f64::MIN_POSITIVE);
        if min_eig < -ZERO_TOL * smax {
            return Err(invalid(format!("kernel is not positive semidefinite (eigenvalue {min_eig:e})")));
        }
    }
    let dt = traj.time.dt();
    let mut sigma_integral = Vec::with_capacity(traj.states.len());
    let mut dissipation = Vec::with_capacity(traj.states.len());
    let mut energy = Vec::new();
    let mut sigma_rem = Vec::new();
    let mut energy_rem = Vec::new();
    for f in &traj.states {
        let u = pre_activation(a, b, f, grid)?;
        let s = u.map(|x| act.eval(x));
        sigma_integral.push(grid.integrate(&u.map(|x| act.antideriv(x)))?);
        dissipation.push(inner_product(&s, &u, grid)?);
        let bs = apply_kernel(b, &s, grid)?;
        sigma_rem.push(0.5 * act.lipschitz() * inner_product(&bs, &bs, grid)?);
        if with_energy {
            let bf = apply_kernel(b, f, grid)?;
            energy.push(0.5 * inner_product(&bf, f, grid)? - inner_product(a, f, grid)?);
            energy_rem.push(0.5 * inner_product(&bs, &s, grid)?.max(0.0));
        }
    }
    let slack = |series: &[f64], rem: &[f64]| -> Vec<f64> {
        let second = series
            .windows(3)
            .map(|w| (w[2] - 2.0 * w[1] + w[0]).abs())
            .fold(0.0, f64::max);
        rem.iter().take(series.len().saturating_sub(1)).map(|r| second.max(r * dt * dt)).collect()
    };
    let sigma_slack = slack(&sigma_integral, &sigma_rem);
    let energy_slack = with_energy.then(|| slack(&energy, &energy_rem));
    Ok(LyapunovTrace {
        times: traj.time.times().collect(),
        sigma_integral,
        energy: with_energy.then_some(energy),
        dissipation,
        sigma_slack,
        energy_slack,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthModel {
    Linear,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthFit {
    pub model: GrowthModel,
    /// Slope `c₂` of `c₁ + c₂ t`, or `ρ` of `c e^{ρt}`.
    pub rate: f64,
    /// Root-mean-square misfit of the chosen model on `‖f(t)‖`.
    pub fit_residual: f64,
    pub linear_residual: f64,
    pub exponential_residual: Option<f64>,
}

fn line_fit(t: &[f64], y: &[f64]) -> (f64, f64) {
    let n = t.len() as f64;
    let tm = t.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let stt: f64 = t.iter().map(|x| (x - tm).powi(2)).sum();
    let sty: f64 = t.iter().zip(y).map(|(x, v)| (x - tm) * (v - ym)).sum();
    let slope = if stt > 0.0 { sty / stt } else { 0.0 };
    (ym - slope * tm, slope)
}

fn rms(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), e| (s + e * e, n + 1));
    (s / n.max(1) as f64).sqrt()
}

/// Minimum number of steps accepted by [`growth_fit`].
pub const GROWTH_FIT_MIN_STEPS: usize = 8;

/// Fits `‖f(t)‖_{L²}` with `c₁ + c₂ t` and with `c e^{ρt}` (log-linear least
/// squares). The exponential model is chosen only for `ρ > 0` when its
/// residual is below half the linear one.
pub fn growth_fit(traj: &Trajectory, grid: &Grid) -> Result<GrowthFit> {
    if traj.steps() < GROWTH_FIT_MIN_STEPS {
        return Err(invalid(format!(
            "growth fit needs at least {GROWTH_FIT_MIN_STEPS} steps, got {}",
            traj.steps()
        )));
    }
    let t: Vec<f64> = traj.time.times().collect();
    let y = traj.states.iter().map(|f| grid.norm(f)).collect::<Result<Vec<_>>>()?;
    let (lo, hi) = y.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi - lo <= 1e-12 * hi.abs().max(f64::MIN_POSITIVE) {
        return Ok(GrowthFit {
            model: GrowthModel::Linear,
            rate: 0.0,
            fit_residual: 0.0,
            linear_residual: 0.0,
            exponential_residual: None,
        });
    }
    let (c1, c2) = line_fit(&t, &y);
    let linear_residual = rms(t.iter().zip(&y).map(|(x, v)| v - c1 - c2 * x));
    let exp = if lo > 0.0 {
        let logs: Vec<f64> = y.iter().map(|v| v.ln()).collect();
        let (lc, rho) = line_fit(&t, &logs);
        let c = lc.exp();
        Some((rho, rms(t.iter().zip(&y).map(|(x, v)| v - c * (rho * x).exp()))))
    } else {
        None
    };
    let fit = match exp {
        Some((rho, res)) if rho > 0.0 && res < 0.5 * linear_residual => GrowthFit {
            model: GrowthModel::Exponential,
            rate: rho,
            fit_residual: res,
            linear_residual,
            exponential_residual: Some(res),
        },
        _ => GrowthFit {
            model: GrowthModel::Linear,
            rate: c2,
            fit_residual: linear_residual,
            linear_residual,
            exponential_residual: exp.map(|e| e.1),
        },
    };
    Ok(fit)
}

/// `sup|σ′| · ‖b^l‖_{L²(Y×Y)}` for every time slice: a bound on the operator
/// norm of `σ′(u)·B` on `L²`.
pub fn conditioning_bound(params: &ControlParams, act: Activation, grid: &Grid) -> Result<Vec<f64>> {
    params.b.iter().map(|b| Ok(act.lipschitz() * b.l2_norm(grid)?)).collect()
}

/// Verifies `σ(u_e) ∈ N(B)` and `u_e ∈ R(B)` for a symmetric kernel and
/// returns `‖u_e σ(u_e)‖_{L¹}`, which vanishes for genuine equilibria.
pub fn equilibrium_orthogonality_check(u_e: &Field, b: &KernelSlice, act: Activation, grid: &Grid) -> Result<f64> {
    ensure_len("equilibrium", u_e.len(), grid.len())?;
    if let Err(e) = check_symmetric(b) {
        return Err(Error::Precondition(e.to_string()));
    }
    if !act.sign_preserving() {
        return Err(Error::Precondition(format!("s·σ(s) ≥ 0 fails for {act}")));
    }
    let s = u_e.map(|x| act.eval(x));
    let scale = weighted_matrix(b, grid)?.norm();
    let bs = apply_kernel(b, &s, grid)?;
    let s_norm = grid.norm(&s)?;
    if grid.norm(&bs)? > 1e-8 * (scale * s_norm).max(f64::MIN_POSITIVE) {
        return Err(Error::Precondition("σ(u_e) is not in the nullspace of B".into()));
    }
    if !find_steady_state(u_e, b, grid)?.in_range {
        return Err(Error::Precondition("u_e is not in the range of B".into()));
    }
    grid.l1_norm(&u_e.zip_map(&s, |x, y| x * y)?)
}

/// Exponential rate of `‖f(t) − f_e‖` after perturbing the steady state `f_e`
/// by `amplitude · direction`, from a log-linear fit over the run.
pub fn perturbation_decay_rate(
    params: &ControlParams,
    f_e: &Field,
    direction: &Field,
    amplitude: f64,
    act: Activation,
    grid: &Grid,
    time: &TimeGrid,
) -> Result<f64> {
    let start = f_e.axpy(amplitude, direction)?;
    let traj = forward_solve(params, &start, act, grid, time)?;
    let t: Vec<f64> = traj.time.times().collect();
    let logs = traj
        .states
        .iter()
        .map(|f| Ok(grid.norm(&f.axpy(-1.0, f_e)?)?.max(f64::MIN_POSITIVE).ln()))
        .collect::<Result<Vec<_>>>()?;
    Ok(line_fit(&t, &logs).1)
}
