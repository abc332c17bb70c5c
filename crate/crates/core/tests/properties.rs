//! Randomized invariants of the filter, the one-stage cost, the Bellman
//! operator and the simplex grid.

use std::sync::{Arc, OnceLock};

use proptest::prelude::*;

use popdmp::filter::{update, Belief};
use popdmp::mdp::{stage_cost_belief, ControlFamily, FilteredMdp, StageQuadrature};
use popdmp::model::{particle_steering, PopdmpModel, RelaxedControl};
use popdmp::solver::{SimplexGrid, Stencils, ValueGrid};

struct Fixture {
    model: PopdmpModel,
    family: ControlFamily,
    quad: StageQuadrature,
    grid: SimplexGrid,
    stencils: Stencils,
}

fn fixture() -> &'static Fixture {
    static CELL: OnceLock<Fixture> = OnceLock::new();
    CELL.get_or_init(|| {
        let model = particle_steering();
        let family = ControlFamily::particle_steering_default(&model).unwrap();
        let quad = StageQuadrature::default_for(&model);
        let grid = SimplexGrid::build(3, 10).unwrap();
        let stencils = {
            let mdp = FilteredMdp::new(&model, &family, quad, None).unwrap();
            Stencils::build(&model, &grid, family.len(), |_p, c| mdp.table(c))
        };
        Fixture { model, family, quad, grid, stencils }
    })
}

fn belief(d: usize) -> impl Strategy<Value = Belief> {
    prop::collection::vec(0.0f64..1.0, d)
        .prop_filter("nonzero mass", |w| w.iter().sum::<f64>() > 1e-6)
        .prop_map(|w| Belief::from_weights(w).unwrap())
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filter_output_is_a_distribution(
        rho in belief(3),
        c in 0usize..43,
        s in 0.01f64..4.0,
        xi in 0usize..7,
    ) {
        let f = fixture();
        let x = f.model.observations().points()[xi].clone();
        if let Ok(b) = update(&f.model, &rho, f.family.get(c), s, &x) {
            prop_assert!((b.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(b.probs().iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn stage_cost_is_linear_and_bounded(a in belief(3), b in belief(3), t in 0.0f64..1.0, c in 0usize..43) {
        let f = fixture();
        let r: &RelaxedControl = f.family.get(c);
        let mix = Belief::new(a.probs().iter().zip(b.probs()).map(|(x, y)| t * x + (1.0 - t) * y).collect()).unwrap();
        let g = |rho: &Belief| stage_cost_belief(&f.model, rho, r, &f.quad).unwrap();
        prop_assert!((g(&mix) - (t * g(&a) + (1.0 - t) * g(&b))).abs() < 1e-12);
        let bound = f.model.cost_max() / (f.model.discount() + f.model.hazard_bounds().0);
        prop_assert!((0.0..=bound + 1e-9).contains(&g(&mix)));
    }

    #[test]
    fn bellman_operator_is_monotone_and_contracting(
        v in prop::collection::vec(0.0f64..10.0, 66),
        bump in prop::collection::vec(0.0f64..3.0, 66),
    ) {
        let f = fixture();
        prop_assert_eq!(f.grid.len(), 66);
        let w: Vec<f64> = v.iter().zip(&bump).map(|(a, b)| a + b).collect();
        let (tv, _) = f.stencils.sweep(&v);
        let (tw, _) = f.stencils.sweep(&w);
        for (a, b) in tv.iter().zip(&tw) {
            prop_assert!(*a <= b + 1e-9);
        }
        // the kernel mass is λ/(β+λ) = 0.5 up to quadrature error
        prop_assert!(sup(&tv, &tw) <= 0.5 * sup(&v, &w) * (1.0 + 1e-4) + 1e-12);
    }

    #[test]
    fn interpolation_reproduces_affine_functions(
        alpha in prop::collection::vec(-10.0f64..10.0, 4),
        rho in belief(4),
        k in 1usize..15,
    ) {
        let grid = Arc::new(SimplexGrid::build(4, k).unwrap());
        let f = |p: &[f64]| p.iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>();
        let vg = ValueGrid {
            values: (0..grid.len()).map(|i| f(grid.point(i))).collect(),
            argmins: vec![0; grid.len()],
            grid: grid.clone(),
        };
        prop_assert!((vg.interpolate(&rho) - f(rho.probs())).abs() < 1e-12);
        let located = grid.locate(rho.probs());
        prop_assert!(located.len() <= 4);
        prop_assert!((located.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_points_interpolate_to_themselves(k in 1usize..30, pick in any::<prop::sample::Index>()) {
        let grid = SimplexGrid::build(3, k).unwrap();
        let i = pick.index(grid.len());
        prop_assert_eq!(grid.locate(grid.point(i)), vec![(i, 1.0)]);
    }

    #[test]
    fn control_text_round_trips(
        starts in prop::collection::btree_set(1u32..400, 0..4),
        actions in prop::collection::vec(-1.0f64..1.0, 5),
    ) {
        let mut text = format!("0:{}", actions[0]);
        for (i, s) in starts.iter().enumerate() {
            text.push_str(&format!(";{}:{}", *s as f64 / 100.0, actions[i + 1]));
        }
        let c: RelaxedControl = text.parse().unwrap();
        let again: RelaxedControl = c.to_string().parse().unwrap();
        prop_assert_eq!(c, again);
    }
}
