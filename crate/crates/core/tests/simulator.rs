//! Statistical checks of the simulator against the filtered-MDP quantities.

use std::sync::Arc;

use popdmp::filter::{q_tilde_sx, Belief};
use popdmp::mdp::{ControlFamily, FilteredMdp, StageQuadrature};
use popdmp::model::{particle_steering, ConstantPolicy, RelaxedControl};
use popdmp::sim::{cross_check, evaluate_policy_mc, sample_jump, simulate_trajectory, RngStream, SimConfig, Start};
use popdmp::solver::{evaluate_policy_on_grid, SimplexGrid, SolverConfig};

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn inter_jump_times_have_unit_mean() {
    let m = particle_steering();
    let r: RelaxedControl = "0:-1;0.8:0".parse().unwrap();
    let mut rng = RngStream::new(1, 0).rng();
    let s: Vec<f64> = (0..100_000).map(|_| sample_jump(&m, m.state(2), &r, &mut rng).unwrap().s).collect();
    let (mean, se) = mean_se(&s);
    assert!((mean - 1.0).abs() < 3.0 * se, "{mean} ± {se}");
}

#[test]
fn discount_mass_matches_the_density_integral() {
    let m = particle_steering();
    let r: RelaxedControl = "0:1;0.5:0".parse().unwrap();
    for y in 0..3 {
        let (t_max, n) = (12.0, 6000);
        let h = t_max / n as f64;
        let quad: f64 = (0..=n)
            .map(|i| {
                let s = i as f64 * h;
                let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
                w * m.observations().points().iter().map(|x| q_tilde_sx(&m, s, x, y, &r).unwrap()).sum::<f64>()
            })
            .sum::<f64>()
            * h
            / 3.0;
        let mut rng = RngStream::new(2, y as u64).rng();
        let d: Vec<f64> = (0..50_000).map(|_| (-sample_jump(&m, m.state(y), &r, &mut rng).unwrap().s).exp()).collect();
        let (mean, se) = mean_se(&d);
        assert!((mean - quad).abs() < 3.0 * se, "y={y}: {mean} ± {se} vs {quad}");
    }
}

#[test]
fn trajectories_are_reproducible_per_stream() {
    let m = particle_steering();
    let cfg = SimConfig::for_model(&m);
    let p = ConstantPolicy("0:1;0.5:0".parse().unwrap());
    let a = simulate_trajectory(&m, &[-1.0], &p, &mut RngStream::new(5, 8).rng(), &cfg).unwrap();
    let b = simulate_trajectory(&m, &[-1.0], &p, &mut RngStream::new(5, 8).rng(), &cfg).unwrap();
    let c = simulate_trajectory(&m, &[-1.0], &p, &mut RngStream::new(5, 9).rng(), &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.jump_times, c.jump_times);
}

#[test]
fn estimates_do_not_depend_on_worker_count() {
    let m = particle_steering();
    let cfg = SimConfig::for_model(&m);
    let p = ConstantPolicy("0:-1;0.5:0".parse().unwrap());
    let start = Start::Observation(vec![1.0]);
    let all = evaluate_policy_mc(&m, &start, &p, 300, 77, &cfg).unwrap();
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let one = single.install(|| evaluate_policy_mc(&m, &start, &p, 300, 77, &cfg).unwrap());
    assert_eq!(all, one);
}

#[test]
fn left_corner_pushed_left_matches_the_mdp_oracle() {
    let m = particle_steering();
    let cfg = SimConfig::for_model(&m);
    let left = ConstantPolicy(RelaxedControl::constant_action(vec![-1.0]));
    let est = evaluate_policy_mc(
        &m,
        &Start::State { y0: 0, belief: Belief::dirac(3, 0) },
        &left,
        100_000,
        3,
        &cfg,
    )
    .unwrap();
    let fam = ControlFamily::new(vec![left.0.clone()], &m).unwrap();
    let mdp = FilteredMdp::new(&m, &fam, StageQuadrature::default_for(&m), None).unwrap();
    let grid = Arc::new(SimplexGrid::build(3, 4).unwrap());
    let (vf, _) = evaluate_policy_on_grid(&mdp, grid, &left, &SolverConfig { tol: 1e-10, max_iter: 500 }).unwrap();
    let oracle = vf.interpolate(&Belief::dirac(3, 0));
    let slack = cfg.truncation_bound(&m) + 1e-6;
    assert!((est.mean - oracle).abs() <= 3.0 * est.stderr + slack, "{est:?} vs {oracle}");
}

#[test]
fn stay_policy_cross_check() {
    let m = particle_steering();
    let fam = ControlFamily::particle_steering_default(&m).unwrap();
    let mdp = FilteredMdp::new(&m, &fam, StageQuadrature::default_for(&m), None).unwrap();
    let stay = ConstantPolicy(RelaxedControl::constant_action(vec![0.0]));
    let x0s = [vec![-2.0], vec![0.0], vec![2.0]];
    let check = cross_check(
        &mdp,
        Arc::new(SimplexGrid::build(3, 20).unwrap()),
        &stay,
        &x0s,
        20_000,
        9,
        &SimConfig::for_model(&m),
        &SolverConfig { tol: 1e-8, max_iter: 500 },
        0.0,
    )
    .unwrap();
    for row in &check.rows {
        assert!(row.z().abs() < 3.0, "{row:?}");
    }
    assert_eq!(check.rows[1].mc.mean, 0.0);
    assert_eq!(check.rows[1].mdp_value, 0.0);
}

#[test]
fn zero_cost_model_cross_checks_to_zero() {
    use popdmp::model::{ActionBox, InitialRule, NoiseModel, PopdmpModel};
    let m = PopdmpModel::builder(vec![vec![0.0], vec![1.0]], ActionBox::interval(-1.0, 1.0).unwrap())
        .vector_field(|_y, a, out| out[0] = a[0])
        .constant_hazard(2.0)
        .jump_kernel(|_y, _a, out| out.copy_from_slice(&[0.5, 0.5]))
        .noise(NoiseModel::uniform(vec![vec![0.0], vec![0.5]]).unwrap())
        .cost_rate(|_y, _a| 0.0, 0.0)
        .build_with(InitialRule::NoisePosterior)
        .unwrap();
    let policy = ConstantPolicy(RelaxedControl::constant_action(vec![0.5]));
    let fam = ControlFamily::new(vec![policy.0.clone()], &m).unwrap();
    let mdp = FilteredMdp::new(&m, &fam, StageQuadrature::default_for(&m), None).unwrap();
    let mut cfg = SimConfig::for_model(&m);
    cfg.horizon = 5.0;
    let check = cross_check(
        &mdp,
        Arc::new(SimplexGrid::build(2, 4).unwrap()),
        &policy,
        &[vec![0.0], vec![1.5]],
        100,
        1,
        &cfg,
        &SolverConfig::default(),
        0.0,
    )
    .unwrap();
    for row in check.rows {
        assert_eq!((row.mc.mean, row.mdp_value, row.z()), (0.0, 0.0, 0.0));
    }
}
