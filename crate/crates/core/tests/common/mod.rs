#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seldyn::control::{ControlBox, Problem};
use seldyn::dynamics::{forward_solve, ControlParams, RankOneSpec};
use seldyn::objective::LossSpec;
use seldyn::{Activation, Field, Grid, Interval, KernelSlice, TimeGrid};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit(n: usize) -> Grid {
    Grid::uniform(n, Interval::unit()).unwrap()
}

pub fn random_field(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Field {
    Field::from((0..n).map(|_| rng.gen_range(-scale..scale)).collect::<Vec<_>>())
}

pub fn random_kernel(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> KernelSlice {
    KernelSlice::new(DMatrix::from_fn(n, n, |_, _| rng.gen_range(-scale..scale))).unwrap()
}

/// `K + S` with `K = G Gᵀ` symmetric positive semidefinite and `S`
/// antisymmetric, so the weighted symmetric part is `⪰ 0`.
pub fn psd_plus_skew(rng: &mut ChaCha8Rng, n: usize, psd: f64, skew: f64) -> KernelSlice {
    let g = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let s = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    let k = &g * g.transpose() * (psd / n as f64) + (&s - s.transpose()) * (0.5 * skew);
    KernelSlice::new(k).unwrap()
}

pub struct Instance {
    pub grid: Grid,
    pub time: TimeGrid,
    pub params: ControlParams,
    pub f_init: Field,
    pub target: Field,
}

/// Time-dependent random controls with entries in `[-1, 1]`.
pub fn random_instance(seed: u64, n: usize, steps: usize) -> Instance {
    let mut r = rng(seed);
    let grid = unit(n);
    let time = TimeGrid::new(1.0, steps).unwrap();
    let a = (0..steps).map(|_| random_field(&mut r, n, 1.0)).collect();
    let b = (0..steps).map(|_| random_kernel(&mut r, n, 1.0)).collect();
    let params = ControlParams::new(a, b).unwrap();
    let f_init = random_field(&mut r, n, 1.0);
    let target = random_field(&mut r, n, 1.0);
    Instance {
        grid,
        time,
        params,
        f_init,
        target,
    }
}

/// Tracking problem whose target is produced by known autonomous controls;
/// training starts from zero controls.
pub fn reachable_problem(n: usize, steps: usize) -> (Problem, ControlParams) {
    let grid = unit(n);
    let time = TimeGrid::new(1.0, steps).unwrap();
    let truth = ControlParams::constant(
        Field::from_fn(&grid, |y| 0.6 * (2.0 * y).sin()),
        KernelSlice::from_fn(&grid, |y, z| 0.5 * (y - z).cos()),
        steps,
    )
    .unwrap();
    let f_init = Field::from_fn(&grid, |y| 0.5 - y);
    let target = forward_solve(&truth, &f_init, Activation::Tanh, &grid, &time)
        .unwrap()
        .terminal()
        .clone();
    let problem = Problem {
        grid,
        time,
        act: Activation::Tanh,
        f_init,
        loss: LossSpec::tracking(target),
        init: ControlParams::zeros(n, steps),
    };
    (problem, truth)
}

/// Far-away constant target: the co-state keeps one sign, so the
/// maximum-principle iteration settles on time-constant bang-bang controls.
pub fn pmp_constancy_problem(steps: usize) -> (Problem, ControlBox) {
    let n = 8;
    let grid = unit(n);
    let time = TimeGrid::new(1.0, steps).unwrap();
    let f_init = Field::from_fn(&grid, |y| 0.2 + 0.5 * y);
    let problem = Problem {
        grid,
        time,
        act: Activation::Tanh,
        f_init,
        loss: LossSpec::tracking(Field::constant(n, 10.0)),
        init: ControlParams::zeros(n, steps),
    };
    (problem, ControlBox::new(-1.0, 1.0, -0.5, 0.5).unwrap())
}

/// Rank-one ReLU instance with `λ_I < 0` and `β > 0`: kernel
/// `b(y,z) = ψ(y)φ(z)` with `ψ < 0`, `φ > 0`.
pub fn negative_relu_spec(grid: &Grid) -> RankOneSpec {
    let phi = Field::constant(grid.len(), 1.0);
    let psi = Field::from_fn(grid, |y| -(1.0 + 0.3 * y));
    let spec = RankOneSpec::normalized(phi, psi, 0.0, Field::zeros(grid.len()), grid).unwrap();
    RankOneSpec {
        f_init: Field::from_fn(grid, |y| 0.5 + 0.5 * y),
        ..spec
    }
}

/// Symmetric positive definite kernel `c·exp(−|y−z|/ℓ)`.
pub fn exp_kernel(grid: &Grid, c: f64, ell: f64) -> KernelSlice {
    KernelSlice::from_fn(grid, |y, z| c * (-(y - z).abs() / ell).exp())
}

/// Removes the `φ`-component of `c` in the grid inner product.
pub fn orthogonalize(c: &Field, phi: &Field, grid: &Grid) -> Field {
    let p = seldyn::inner_product(c, phi, grid).unwrap() / seldyn::inner_product(phi, phi, grid).unwrap();
    c.axpy(-p, phi).unwrap()
}
