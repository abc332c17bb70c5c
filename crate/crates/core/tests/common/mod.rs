#![allow(dead_code)]

use std::sync::{Arc, OnceLock};

use popdmp::mdp::{ControlFamily, FilteredMdp, StageQuadrature};
use popdmp::model::{particle_steering, PopdmpModel};
use popdmp::solver::{value_iteration, SimplexGrid, SolveReport, SolverConfig, ValueGrid};

pub struct Solution {
    pub model: PopdmpModel,
    pub family: ControlFamily,
    pub quad: StageQuadrature,
    pub grid: Arc<SimplexGrid>,
    pub values: ValueGrid,
    pub report: SolveReport,
}

impl Solution {
    pub fn mdp(&self) -> FilteredMdp<'_> {
        FilteredMdp::new(&self.model, &self.family, self.quad, None).expect("plain tables")
    }
}

pub fn solve_example(k: usize) -> Solution {
    let model = particle_steering();
    let family = ControlFamily::particle_steering_default(&model).expect("default family");
    let quad = StageQuadrature::default_for(&model);
    let grid = Arc::new(SimplexGrid::build(3, k).expect("grid"));
    let mdp = FilteredMdp::new(&model, &family, quad, None).expect("plain tables");
    let (values, report) = value_iteration(&mdp, grid.clone(), &SolverConfig::default()).expect("solve");
    drop(mdp);
    Solution { model, family, quad, grid, values, report }
}

/// The particle-steering example solved on the default `K = 40` grid, shared
/// by every test in one binary.
pub fn example() -> &'static Solution {
    static CELL: OnceLock<Solution> = OnceLock::new();
    CELL.get_or_init(|| solve_example(40))
}

/// Family indices of `±1` on `[0, τ)` then `0` for `τ ∈ [0.4, 0.6]`.
pub fn half_unit_switch(family: &ControlFamily, sign: f64) -> Vec<usize> {
    (0..family.len())
        .filter(|&i| {
            let c = family.get(i);
            c.breakpoints().len() == 1
                && (0.4 - 1e-9..=0.6 + 1e-9).contains(&c.breakpoints()[0])
                && c.pieces()[0].atoms()[0].action == vec![sign]
                && c.pieces()[1].atoms()[0].action == vec![0.0]
        })
        .collect()
}
