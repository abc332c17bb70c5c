//! Properties of the solved particle-steering example.

mod common;

use std::sync::Arc;

use popdmp::filter::Belief;
use popdmp::mdp::FilteredMdp;
use popdmp::model::DiscretePolicy;
use popdmp::sim::{cross_check, SimConfig};
use popdmp::solver::{evaluate_policy_on_grid, extract_policy, iterate_stencils, sigma_sweep, SimplexGrid, SolverConfig, Stencils};

#[test]
fn value_function_bounds_and_fixed_point() {
    let s = common::example();
    assert!(s.report.converged);
    assert_eq!(s.report.residuals.len(), s.report.iterations);
    assert!(s.report.final_residual < 2.0 * 1e-4);
    let bound = s.model.cost_max() / s.model.discount();
    assert!(s.values.values.iter().all(|v| (0.0..=bound).contains(v)));
    assert!(s.values.interpolate(&Belief::dirac(3, 1)) < 2e-3);
    for ratio in s.report.residuals.windows(2).map(|w| w[1] / w[0]) {
        assert!(ratio <= 0.5 + 1e-3, "{ratio}");
    }
}

#[test]
fn reflection_symmetry() {
    let s = common::example();
    for i in 0..s.grid.len() {
        let p = s.grid.point(i);
        let mirrored = s.values.interpolate_probs(&[p[2], p[1], p[0]]);
        assert!((mirrored - s.values.values[i]).abs() < 5e-3);
    }
}

#[test]
fn iterates_increase_from_zero() {
    let s = common::example();
    let grid = SimplexGrid::build(3, 12).unwrap();
    let mdp = s.mdp();
    let stencils = Stencils::build(&s.model, &grid, s.family.len(), |_p, c| mdp.table(c));
    let mut v = vec![0.0; grid.len()];
    for _ in 0..12 {
        let (next, _) = stencils.sweep(&v);
        assert!(next.iter().zip(&v).all(|(a, b)| *a >= b - 1e-9));
        v = next;
    }
}

#[test]
fn extracted_policy_matches_the_bang_structure() {
    let s = common::example();
    let policy = extract_policy(&s.values, &s.family);
    let plus = common::half_unit_switch(&s.family, 1.0);
    let minus = common::half_unit_switch(&s.family, -1.0);
    for (rho, allowed) in [
        ([0.6, 0.3, 0.1], &plus),
        ([0.45, 0.5, 0.05], &plus),
        ([0.1, 0.2, 0.7], &minus),
        ([0.0, 0.55, 0.45], &minus),
    ] {
        let b = Belief::new(rho.to_vec()).unwrap();
        assert!(allowed.contains(&policy.candidate_index(&b)), "{rho:?}");
        let (_, exact) = policy.reoptimize(&s.mdp(), &b);
        assert!(allowed.contains(&exact), "{rho:?} re-minimized to {exact}");
    }
    assert_eq!(policy.control(&Belief::dirac(3, 1)).to_string(), "0:0");
}

#[test]
fn ties_between_the_outer_states_pick_plus_one() {
    let s = common::example();
    let plus = common::half_unit_switch(&s.family, 1.0);
    let i = s.grid.locate(&[0.5, 0.0, 0.5])[0].0;
    assert!(plus.contains(&s.values.argmins[i]));
}

#[test]
fn greedy_policy_evaluates_to_the_value_function() {
    let s = common::example();
    let mdp = s.mdp();
    let policy = extract_policy(&s.values, &s.family);
    let (vf, _) = evaluate_policy_on_grid(&mdp, s.grid.clone(), &policy, &SolverConfig { tol: 1e-8, max_iter: 500 }).unwrap();
    assert!(vf.sup_distance(&s.values) < 1e-3, "{}", vf.sup_distance(&s.values));
}

#[test]
fn grid_refinement_is_stable() {
    let s = common::example();
    let coarse = common::solve_example(20);
    for i in 0..coarse.grid.len() {
        let fine = s.values.interpolate_probs(coarse.grid.point(i));
        assert!((fine - coarse.values.values[i]).abs() < 0.05);
    }
}

#[test]
fn regularized_solutions_approach_the_plain_one() {
    let s = common::solve_example(20);
    let (plain, rows) =
        sigma_sweep(&s.model, s.grid.clone(), &s.family, s.quad, &[0.2, 0.1, 0.05], &SolverConfig::default()).unwrap();
    assert!(plain.sup_distance(&s.values) < 1e-12);
    for w in rows.windows(2) {
        assert!(w[1].gap <= w[0].gap + 1e-9, "{rows:?}");
    }
    assert!(rows.last().unwrap().gap < 0.05);
}

#[test]
fn solved_policy_cross_check() {
    let s = common::example();
    let mdp = s.mdp();
    let policy = extract_policy(&s.values, &s.family);
    let check = cross_check(
        &mdp,
        s.grid.clone(),
        &policy,
        &[vec![-2.0], vec![0.0], vec![2.0]],
        20_000,
        99,
        &SimConfig::for_model(&s.model),
        &SolverConfig { tol: 1e-8, max_iter: 500 },
        0.02,
    )
    .unwrap();
    for row in &check.rows {
        assert!(row.z().abs() < 3.0, "{row:?}");
    }
}

#[test]
fn stencil_iteration_matches_value_iteration() {
    let s = common::solve_example(6);
    let mdp = FilteredMdp::new(&s.model, &s.family, s.quad, None).unwrap();
    let stencils = Stencils::build(&s.model, &s.grid, s.family.len(), |_p, c| mdp.table(c));
    let (vg, _) = iterate_stencils(&stencils, Arc::clone(&s.grid), &SolverConfig::default()).unwrap();
    assert_eq!(vg.values, s.values.values);
    for i in 0..s.grid.len() {
        let (t, _) = mdp.t_operator(&s.values, &s.grid.belief(i));
        let (swept, _) = stencils.sweep(&s.values.values);
        assert!((t - swept[i]).abs() < 1e-9);
    }
}
