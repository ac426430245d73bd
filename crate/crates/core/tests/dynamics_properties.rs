mod common;

use common::*;
use proptest::prelude::*;
use seldyn::dynamics::{forward_solve, rank_one_relu_solution, tangent_solve, ControlParams, RankOneSpec};
use seldyn::{Activation, Field, KernelSlice, TimeGrid};

fn terminal_error(spec: &RankOneSpec, steps: usize, t: f64) -> f64 {
    let g = unit(spec.phi.len());
    let tg = TimeGrid::new(t, steps).unwrap();
    let params = spec.control_params(steps).unwrap();
    let traj = forward_solve(&params, &spec.f_init, Activation::Relu, &g, &tg).unwrap();
    let exact = rank_one_relu_solution(spec, t, &g).unwrap();
    g.norm(&traj.terminal().axpy(-1.0, &exact).unwrap()).unwrap()
}

#[test]
fn euler_converges_to_rank_one_closed_form_at_first_order() {
    let g = unit(41);
    let relaxing = RankOneSpec::normalized(
        Field::constant(41, 1.0),
        Field::from_fn(&g, |y| y - 0.25),
        1.0,
        Field::zeros(41),
        &g,
    )
    .unwrap();
    assert!(relaxing.lambda_init(&g).unwrap() > 0.0);
    let growing = negative_relu_spec(&g);
    assert!(growing.lambda_init(&g).unwrap() < 0.0 && growing.beta(&g).unwrap() > 0.0);
    for spec in [relaxing, growing] {
        let errs: Vec<f64> = [50, 100, 200].iter().map(|&s| terminal_error(&spec, s, 1.0)).collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.8..=2.2).contains(&ratio), "errors {errs:?}");
        }
    }
}

#[test]
fn zero_controls_keep_initial_field() {
    let g = unit(9);
    let tg = TimeGrid::new(2.0, 7).unwrap();
    let fi = Field::from_fn(&g, |y| y.sin());
    let traj = forward_solve(&ControlParams::zeros(9, 7), &fi, Activation::Tanh, &g, &tg).unwrap();
    assert!(traj.states.iter().all(|s| s == &fi));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn continuous_dependence_on_initial_data(seed in 0u64..1000, act_ix in 0usize..4) {
        let act = [Activation::Tanh, Activation::Arctan, Activation::Relu, Activation::Elu { alpha: 1.0 }][act_ix];
        let inst = random_instance(seed, 10, 20);
        let mut r = rng(seed + 7);
        let f2 = inst.f_init.axpy(1.0, &random_field(&mut r, 10, 0.3)).unwrap();
        let (g, tg) = (&inst.grid, &inst.time);
        let t1 = forward_solve(&inst.params, &inst.f_init, act, g, tg).unwrap();
        let t2 = forward_solve(&inst.params, &f2, act, g, tg).unwrap();
        let lip = act.lipschitz() * inst.params.b.iter().map(|b| b.l2_norm(g).unwrap()).fold(0.0, f64::max);
        let d0 = g.norm(&inst.f_init.axpy(-1.0, &f2).unwrap()).unwrap();
        for (l, t) in tg.times().enumerate() {
            let d = g.norm(&t1.states[l].axpy(-1.0, &t2.states[l]).unwrap()).unwrap();
            prop_assert!(d <= (lip * t).exp() * d0 * 1.05 + 1e-14);
        }
    }

    #[test]
    fn bounded_activations_grow_at_most_linearly(seed in 0u64..1000, arctan in any::<bool>()) {
        let act = if arctan { Activation::Arctan } else { Activation::Tanh };
        let inst = random_instance(seed, 8, 16);
        let (g, tg) = (&inst.grid, &inst.time);
        let traj = forward_solve(&inst.params, &inst.f_init, act, g, tg).unwrap();
        let f0 = g.norm(&inst.f_init).unwrap();
        let slope = act.sup_abs().unwrap() * g.measure().sqrt();
        for (l, t) in tg.times().enumerate() {
            prop_assert!(g.norm(&traj.states[l]).unwrap() <= f0 + t * slope + 1e-12);
        }
    }

    #[test]
    fn relu_l1_norm_grows_at_most_exponentially(seed in 0u64..1000) {
        let inst = random_instance(seed, 8, 40);
        let (g, tg) = (&inst.grid, &inst.time);
        let (a, b) = (&inst.params.a[0], &inst.params.b[0]);
        let params = ControlParams::constant(a.clone(), b.clone(), 40).unwrap();
        let traj = forward_solve(&params, &inst.f_init, Activation::Relu, g, tg).unwrap();
        let l1_init = g.l1_norm(&inst.f_init).unwrap();
        let l1_a = g.l1_norm(a).unwrap();
        let sup_b = b.max_abs();
        for (l, t) in tg.times().enumerate() {
            let bound = (l1_init + t * l1_a) * (sup_b * t).exp();
            prop_assert!(g.l1_norm(&traj.states[l]).unwrap() <= bound * 1.05);
        }
    }

    #[test]
    fn tangent_is_the_derivative_of_the_discrete_map(seed in 0u64..1000) {
        let inst = random_instance(seed, 6, 8);
        let (g, tg) = (&inst.grid, &inst.time);
        let act = Activation::Tanh;
        let mut r = rng(seed ^ 0xabc);
        let dir = ControlParams::new(
            (0..8).map(|_| random_field(&mut r, 6, 1.0)).collect(),
            (0..8).map(|_| random_kernel(&mut r, 6, 1.0)).collect(),
        ).unwrap();
        let traj = forward_solve(&inst.params, &inst.f_init, act, g, tg).unwrap();
        let tan = tangent_solve(&inst.params, &traj, act, &dir, g).unwrap();
        let err = |eps: f64| {
            let p = inst.params.perturbed(eps, &dir).unwrap();
            let fe = forward_solve(&p, &inst.f_init, act, g, tg).unwrap();
            let quotient = fe.terminal().axpy(-1.0, traj.terminal()).unwrap().scaled(1.0 / eps);
            g.norm(&quotient.axpy(-1.0, tan.terminal()).unwrap()).unwrap()
        };
        let (e1, e2) = (err(1e-3), err(5e-4));
        // first-order remainder: halving ε halves the error
        prop_assert!(e2 < e1 && (1.6..2.4).contains(&(e1 / e2)), "{e1} {e2}");
    }
}

#[test]
fn tangent_is_linear_in_direction() {
    let inst = random_instance(3, 5, 6);
    let (g, tg) = (&inst.grid, &inst.time);
    let traj = forward_solve(&inst.params, &inst.f_init, Activation::Tanh, g, tg).unwrap();
    let d1 = ControlParams::constant(Field::constant(5, 1.0), KernelSlice::zeros(5), 6).unwrap();
    let d2 = ControlParams::constant(Field::zeros(5), KernelSlice::constant(5, 0.5), 6).unwrap();
    let both = d1.perturbed(1.0, &d2).unwrap();
    let t1 = tangent_solve(&inst.params, &traj, Activation::Tanh, &d1, g).unwrap();
    let t2 = tangent_solve(&inst.params, &traj, Activation::Tanh, &d2, g).unwrap();
    let t12 = tangent_solve(&inst.params, &traj, Activation::Tanh, &both, g).unwrap();
    let sum = t1.terminal().axpy(1.0, t2.terminal()).unwrap();
    assert!(sum.axpy(-1.0, t12.terminal()).unwrap().max_abs() < 1e-12);
}
