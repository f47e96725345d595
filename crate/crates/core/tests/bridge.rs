mod common;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use nsi_core::bridge::MinimaxSystem;

#[test]
fn closed_form_bridge_matches_iterative_solver() {
    for seed in 0..20 {
        let inst = common::random_instance(seed);
        let system = MinimaxSystem::from_features(&inst.b, &inst.c, &inst.y1);
        let beta = system.solve_bridge(&inst.hyper).unwrap();
        let oracle = common::bridge_by_iteration(&inst);
        assert!(
            common::max_abs_diff(&beta, &oracle) < 1e-6,
            "seed {seed}: {beta} vs {oracle}"
        );
    }
}

#[test]
fn closed_form_xi_matches_iterative_solver() {
    for seed in 100..120 {
        let inst = common::random_instance(seed);
        let system = MinimaxSystem::from_features(&inst.b, &inst.c, &inst.y1);
        let a = common::riesz_moment(&inst);
        let (delta, _) = system
            .solve_xi(&a, inst.hyper.gamma_q, inst.hyper.gamma_xi)
            .unwrap();
        let oracle = common::xi_by_iteration(&inst);
        assert!(
            common::max_abs_diff(&delta, &oracle) < 1e-6,
            "seed {seed}: {delta} vs {oracle}"
        );
    }
}

#[test]
fn bridge_gradient_vanishes_at_solution() {
    for seed in 200..210 {
        let inst = common::random_instance(seed);
        let system = MinimaxSystem::from_features(&inst.b, &inst.c, &inst.y1);
        let beta = system.solve_bridge(&inst.hyper).unwrap();
        let g = system.bridge_gradient(&beta, &inst.hyper).unwrap();
        assert!(g.amax() < 1e-10, "seed {seed}: gradient {g}");
    }
}

#[test]
fn unpenalized_projection_is_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let n = rng.random_range(20..80);
        let p = rng.random_range(1..=4);
        let k = rng.random_range(1..=4);
        let b = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let c = DMatrix::from_fn(n, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y1 = vec![0.0; n];
        let delta = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let system = MinimaxSystem::from_features(&b, &c, &y1);
        let theta = system.project_q(&delta, 0.0).unwrap();
        let target = &b * &delta;
        let oracle = c.clone().pseudo_inverse(1e-12).unwrap() * target;
        assert!((&theta - &oracle).amax() < 1e-9, "{theta} vs {oracle}");
    }
}

#[test]
fn ridge_projection_shrinks_toward_zero() {
    let inst = common::random_instance(9);
    let system = MinimaxSystem::from_features(&inst.b, &inst.c, &inst.y1);
    let delta = DVector::from_element(inst.b.ncols(), 1.0);
    let loose = system.project_q(&delta, 1e-6).unwrap();
    let tight = system.project_q(&delta, 10.0).unwrap();
    assert!(tight.norm() < loose.norm());
}
