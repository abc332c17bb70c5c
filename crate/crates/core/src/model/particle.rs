//! Built-in particle-steering example: a particle on the real line is pushed
//! with speed `a ∈ [-1, 1]` towards the zero-cost zone `[-1.5, 1.5]` while it
//! jumps at unit rate onto `{-2, 0, 2}` and is observed with uniform noise on
//! `{-1, 0, 1}`.

use super::{
    ActionBox, InitialRule, NoiseModel, PiecewiseLinear, PiecewiseLinearRows, PopdmpModel,
};

pub const PARTICLE_STEERING: &str = "particle-steering";

/// The example with `Q₀(·|x)` the noise posterior under a uniform prior.
pub fn particle_steering() -> PopdmpModel {
    particle_steering_with(InitialRule::NoisePosterior)
}

pub fn particle_steering_with(initial: InitialRule) -> PopdmpModel {
    let cost = PiecewiseLinear::new(vec![-2.0, -1.5, 1.5, 2.0], vec![10.0, 0.0, 0.0, 10.0])
        .expect("static cost table");
    let kernel = PiecewiseLinearRows::new(
        vec![-2.0, -1.5, 1.5, 2.0],
        vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ],
    )
    .expect("static kernel table");
    let noise = NoiseModel::uniform(vec![vec![-1.0], vec![0.0], vec![1.0]]).expect("static noise");

    PopdmpModel::builder(
        vec![vec![-2.0], vec![0.0], vec![2.0]],
        ActionBox::interval(-1.0, 1.0).expect("static box"),
    )
    .closed_form_flow(|y, r, t, out| {
        out.copy_from_slice(y);
        r.add_integrated_mean(t, out);
    })
    .constant_hazard(1.0)
    .jump_kernel(move |y, _a, out| kernel.eval_into(y[0], out))
    .noise(noise)
    .cost_rate(move |y, _a| cost.eval(y[0]), 10.0)
    .discount(1.0)
    .build_with(initial)
    .expect("particle-steering model is valid")
}
