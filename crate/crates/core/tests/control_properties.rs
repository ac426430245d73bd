mod common;

use common::*;
use proptest::prelude::*;
use seldyn::control::{
    hamiltonian, hamiltonian_profile, maximize_hamiltonian_box, pmp_costate, train, Algorithm, ControlBox,
    TrainConfig,
};
use seldyn::dynamics::{forward_solve, ControlParams};
use seldyn::{Activation, Field, KernelSlice};

fn pmp_config(bx: ControlBox, max_iters: usize) -> TrainConfig {
    TrainConfig {
        algo: Algorithm::Pmp,
        max_iters,
        tol: 1e-12,
        damping: 0.5,
        control_box: Some(bx),
        ..TrainConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn maximizer_commutes_with_node_permutations(seed in 0u64..10_000) {
        let n = 7;
        let g = unit(n);
        let mut r = rng(seed);
        let f = random_field(&mut r, n, 1.0);
        let co = random_field(&mut r, n, 1.0);
        let bx = ControlBox::new(-0.7, 1.3, -0.4, 0.9).unwrap();
        // reversal keeps the uniform trapezoid weights in place
        let perm: Vec<usize> = (0..n).rev().collect();
        let permute = |x: &Field| Field::from(perm.iter().map(|&p| x[p]).collect::<Vec<_>>());
        let (a, b) = maximize_hamiltonian_box(&f, &co, &bx, Activation::Tanh, &g).unwrap();
        let (ap, bp) = maximize_hamiltonian_box(&permute(&f), &permute(&co), &bx, Activation::Tanh, &g).unwrap();
        prop_assert_eq!(ap, permute(&a));
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(bp.get(i, j), b.get(perm[i], perm[j]));
            }
        }
    }

    #[test]
    fn pmp_iterates_stay_in_the_box(seed in 0u64..1000, damping in 0.0f64..1.0) {
        let (mut problem, bx) = pmp_constancy_problem(6);
        problem.loss = seldyn::objective::LossSpec::tracking(random_field(&mut rng(seed), 8, 2.0));
        let cfg = TrainConfig { damping, ..pmp_config(bx, 5) };
        let res = train(&problem, &cfg).unwrap();
        prop_assert!(bx.contains(&res.params));
        prop_assert!(res.hamiltonian_gain.iter().all(|&g| g >= 0.0));
    }
}

#[test]
fn maximizer_beats_random_feasible_controls() {
    let n = 6;
    let g = unit(n);
    let bx = ControlBox::new(-1.0, 0.5, -0.3, 0.8).unwrap();
    for seed in 0..20 {
        let mut r = rng(seed);
        let f = random_field(&mut r, n, 2.0);
        let co = random_field(&mut r, n, 1.0);
        for act in [Activation::Tanh, Activation::Relu, Activation::Logistic] {
            let (a, b) = maximize_hamiltonian_box(&f, &co, &bx, act, &g).unwrap();
            let best = hamiltonian(&f, &co, &a, &b, act, &g).unwrap();
            for _ in 0..200 {
                use rand::Rng;
                let sa = Field::from((0..n).map(|_| r.gen_range(bx.a_lo..=bx.a_hi)).collect::<Vec<_>>());
                let sb = KernelSlice::new(nalgebra::DMatrix::from_fn(n, n, |_, _| r.gen_range(bx.b_lo..=bx.b_hi)))
                    .unwrap();
                assert!(hamiltonian(&f, &co, &sa, &sb, act, &g).unwrap() <= best + 1e-14 * best.abs());
            }
        }
    }
}

#[test]
fn ppa_reaches_the_reachable_target() {
    let (problem, _) = reachable_problem(8, 16);
    let res = train(&problem, &TrainConfig::default()).unwrap();
    assert!(res.converged);
    assert!(res.final_loss() <= 1e-4, "loss {}", res.final_loss());
    for w in res.loss_history.windows(2) {
        assert!(w[1] <= w[0] + 1e-10);
    }
}

#[test]
fn ppa_runs_are_deterministic() {
    let (problem, _) = reachable_problem(6, 8);
    let cfg = TrainConfig {
        max_iters: 10,
        ..TrainConfig::default()
    };
    let (r1, r2) = (train(&problem, &cfg).unwrap(), train(&problem, &cfg).unwrap());
    assert_eq!(r1.loss_history, r2.loss_history);
    assert_eq!(r1.params, r2.params);
}

#[test]
fn converged_pmp_run_has_nearly_constant_hamiltonian() {
    for steps in [16, 32] {
        let (problem, bx) = pmp_constancy_problem(steps);
        let res = train(&problem, &pmp_config(bx, 200)).unwrap();
        assert!(res.converged, "steps {steps}: {} iterations", res.iterations);
        assert!(res.degenerate_steps.is_empty());
        let (g, act) = (&problem.grid, problem.act);
        let traj = forward_solve(&res.params, &problem.f_init, act, g, &problem.time).unwrap();
        let costate = pmp_costate(&res.params, &traj, &problem.loss, act, g).unwrap();
        let h = hamiltonian_profile(&res.params, &traj, &costate, act, g).unwrap();
        let (lo, hi) = h.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, u), &x| (l.min(x), u.max(x)));
        let mean = h.iter().map(|x| x.abs()).sum::<f64>() / h.len() as f64;
        let dt = problem.time.dt();
        assert!((hi - lo) / mean <= 5.0 * dt, "steps {steps}: variation {}", (hi - lo) / mean);
    }
}

#[test]
fn pmp_without_box_is_rejected() {
    let (problem, _) = pmp_constancy_problem(4);
    let cfg = TrainConfig {
        algo: Algorithm::Pmp,
        ..TrainConfig::default()
    };
    assert!(train(&problem, &cfg).is_err());
    let zeros = ControlParams::zeros(8, 4);
    assert!(ControlBox::new(-1.0, 1.0, -1.0, 1.0).unwrap().contains(&zeros));
}
