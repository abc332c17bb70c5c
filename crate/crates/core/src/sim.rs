//! Monte Carlo simulation of the controlled continuous-time process and
//! policy evaluation.
//!
//! Jump times are drawn by thinning against the hazard upper bound `λ̄`.
//! Every trajectory owns its RNG stream, derived from a master seed and the
//! trajectory index, so results do not depend on how work is scheduled.

use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{simpson_nodes, update, update_regularized, Belief, RegularizationKernel};
use crate::mdp::FilteredMdp;
use crate::model::{ControlledPath, DiscretePolicy, Hazard, PopdmpModel, RelaxedControl};
use crate::numfmt::sig9;
use crate::solver::{evaluate_policy_on_grid, SimplexGrid, SolverConfig, ValueGrid};

/// Identifies one reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub index: u64,
}

impl RngStream {
    pub fn new(seed: u64, index: u64) -> Self {
        Self { seed, index }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.index);
        rng
    }
}

/// Outcome of one inter-jump period.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpSample {
    /// Inter-jump time.
    pub s: f64,
    /// Action drawn from the mixture in force at the jump.
    pub action: Vec<f64>,
    /// Index of the new post-jump state.
    pub next_state: usize,
    /// `next_state + ε`.
    pub observation: Vec<f64>,
}

fn categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative sum
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// Draws the next jump from post-jump point `y` under control `r`.
pub fn sample_jump<R: Rng + ?Sized>(
    model: &PopdmpModel,
    y: &[f64],
    r: &RelaxedControl,
    rng: &mut R,
) -> Result<JumpSample> {
    let (_, upper) = model.hazard_bounds();
    let exp = Exp::new(upper).map_err(|e| Error::InvalidModel(format!("hazard bound: {e}")))?;
    let mut path = ControlledPath::new(model, y, r);
    let mut t = 0.0;
    let s = loop {
        t += exp.sample(rng);
        if let Hazard::Constant(_) = model.hazard() {
            break t;
        }
        path.advance_to(t)?;
        let rate = model.mixture_hazard(path.state(), r.mixture_at(t));
        if rng.random::<f64>() * upper < rate {
            break t;
        }
    };
    path.advance_to(s)?;
    let action = r.mixture_at(s).sample(rng).to_vec();
    let mut row = vec![0.0; model.num_states()];
    model.jump_kernel(path.state(), &action, &mut row);
    let next_state = categorical(&row, rng);
    let noise = model.noise();
    let eps = &noise.offsets()[categorical(noise.weights(), rng)];
    let observation = model.state(next_state).iter().zip(eps).map(|(a, b)| a + b).collect();
    Ok(JumpSample { s, action, next_state, observation })
}

/// `∫₀^len e^{−β(t0 + t)} c(Φ^r(y, t), r_t) dt` by composite Simpson.
fn segment_cost(model: &PopdmpModel, y: &[f64], r: &RelaxedControl, t0: f64, len: f64, step: f64) -> Result<f64> {
    if len <= 0.0 {
        return Ok(0.0);
    }
    let beta = model.discount();
    let mut path = ControlledPath::new(model, y, r);
    let mut acc = 0.0;
    for node in simpson_nodes(r, 0.0, len, step) {
        path.advance_to(node.t)?;
        let c = model.mixture_cost(path.state(), &r.pieces()[node.piece]);
        if c != 0.0 {
            acc += node.weight * (-beta * (t0 + node.t)).exp() * c;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Simulated time after which cost accrual stops.
    pub horizon: f64,
    /// Simpson step for the cost integral along each segment.
    pub cost_step: f64,
    /// Kernel for the online filter; `None` runs the plain Bayes update.
    pub filter_kernel: Option<RegularizationKernel>,
}

impl SimConfig {
    pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-6;
    pub const DEFAULT_COST_STEP: f64 = 1e-2;

    /// Horizon `H` with `e^{−βH} c_max/β` equal to `tol`.
    pub fn horizon_for(model: &PopdmpModel, tol: f64) -> f64 {
        let beta = model.discount();
        let scale = model.cost_max() / beta;
        if scale <= tol {
            return 0.0;
        }
        (scale / tol).ln() / beta
    }

    /// Largest cost that truncation at the horizon can drop.
    pub fn truncation_bound(&self, model: &PopdmpModel) -> f64 {
        let beta = model.discount();
        (-beta * self.horizon).exp() * model.cost_max() / beta
    }

    pub fn for_model(model: &PopdmpModel) -> Self {
        Self {
            horizon: Self::horizon_for(model, Self::DEFAULT_TRUNCATION_TOL),
            cost_step: Self::DEFAULT_COST_STEP,
            filter_kernel: None,
        }
    }
}

/// One simulated path of the marked point process `(Tₙ, Ŷₙ, Xₙ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `T₀ = 0 < T₁ < …`.
    pub jump_times: Vec<f64>,
    /// Indices of `Ŷ₀, Ŷ₁, …`.
    pub states: Vec<usize>,
    /// `X₀, X₁, …`.
    pub observations: Vec<Vec<f64>>,
    /// Control applied after each jump time.
    pub controls: Vec<RelaxedControl>,
    /// Discounted cost accrued after each jump time.
    pub segment_costs: Vec<f64>,
    pub cost: f64,
    /// Set when the horizon cut the last segment short.
    pub truncated: bool,
}

impl Trajectory {
    /// CSV with columns `n,T_n,Y_n,X_n,segment_cost`; vector components are
    /// space-separated.
    pub fn write_csv(&self, model: &PopdmpModel, mut out: impl Write) -> std::io::Result<()> {
        let join = |v: &[f64]| v.iter().map(|x| sig9(*x)).collect::<Vec<_>>().join(" ");
        writeln!(out, "n,T_n,Y_n,X_n,segment_cost")?;
        for n in 0..self.jump_times.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                n,
                sig9(self.jump_times[n]),
                join(model.state(self.states[n])),
                join(&self.observations[n]),
                self.segment_costs.get(n).map_or(String::new(), |c| sig9(*c))
            )?;
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn run<R: Rng + ?Sized>(
    model: &PopdmpModel,
    y0: usize,
    x0: Vec<f64>,
    mut belief: Belief,
    policy: &dyn DiscretePolicy,
    rng: &mut R,
    cfg: &SimConfig,
    mut record: Option<&mut Trajectory>,
) -> Result<(f64, bool)> {
    if let Some(tr) = record.as_deref_mut() {
        tr.jump_times.push(0.0);
        tr.states.push(y0);
        tr.observations.push(x0);
    }
    let mut t = 0.0;
    let mut y = y0;
    let mut total = 0.0;
    while t < cfg.horizon {
        let control = policy.control(&belief);
        let jump = sample_jump(model, model.state(y), &control, rng)?;
        let len = jump.s.min(cfg.horizon - t);
        let cost = segment_cost(model, model.state(y), &control, t, len, cfg.cost_step)?;
        total += cost;
        let truncated = t + jump.s >= cfg.horizon;
        if !truncated {
            belief = match &cfg.filter_kernel {
                None => update(model, &belief, &control, jump.s, &jump.observation)?,
                Some(k) => update_regularized(model, &belief, &control, jump.s, &jump.observation, k)?,
            };
        }
        if let Some(tr) = record.as_deref_mut() {
            tr.controls.push(control);
            tr.segment_costs.push(cost);
            if !truncated {
                tr.jump_times.push(t + jump.s);
                tr.states.push(jump.next_state);
                tr.observations.push(jump.observation);
            }
        }
        if truncated {
            return Ok((total, true));
        }
        t += jump.s;
        y = jump.next_state;
    }
    Ok((total, true))
}

/// Simulates from an initial observation: `Ŷ₀ ~ Q₀(·|x₀)` and the filter
/// starts at `Q₀(·|x₀)`.
pub fn simulate_trajectory<R: Rng + ?Sized>(
    model: &PopdmpModel,
    x0: &[f64],
    policy: &dyn DiscretePolicy,
    rng: &mut R,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    let q0 = model.initial_distribution(x0);
    let y0 = categorical(&q0, rng);
    simulate_with(model, y0, x0.to_vec(), Belief::new(q0)?, policy, rng, cfg)
}

/// Simulates with a forced hidden start `y0` and filter start `belief`.
pub fn simulate_from_state<R: Rng + ?Sized>(
    model: &PopdmpModel,
    y0: usize,
    belief: Belief,
    policy: &dyn DiscretePolicy,
    rng: &mut R,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    let x0 = model.state(y0).to_vec();
    simulate_with(model, y0, x0, belief, policy, rng, cfg)
}

fn simulate_with<R: Rng + ?Sized>(
    model: &PopdmpModel,
    y0: usize,
    x0: Vec<f64>,
    belief: Belief,
    policy: &dyn DiscretePolicy,
    rng: &mut R,
    cfg: &SimConfig,
) -> Result<Trajectory> {
    let mut tr = Trajectory {
        jump_times: Vec::new(),
        states: Vec::new(),
        observations: Vec::new(),
        controls: Vec::new(),
        segment_costs: Vec::new(),
        cost: 0.0,
        truncated: false,
    };
    let (cost, truncated) = run(model, y0, x0, belief, policy, rng, cfg, Some(&mut tr))?;
    tr.cost = cost;
    tr.truncated = truncated;
    Ok(tr)
}

/// Sample mean and standard error of a Monte Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl McEstimate {
    /// Summary of `samples`, summed in index order.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self { mean, stderr: (var / n as f64).sqrt(), n }
    }
}

/// Where each simulated trajectory starts.
#[derive(Debug, Clone, PartialEq)]
pub enum Start {
    /// Initial observation `x₀`; the hidden start is drawn from `Q₀(·|x₀)`.
    Observation(Vec<f64>),
    /// Forced hidden start with the given initial belief.
    State { y0: usize, belief: Belief },
}

/// Mean discounted cost of `policy` over `n_traj` trajectories; trajectory
/// `i` uses stream `(seed, i)`.
pub fn evaluate_policy_mc(
    model: &PopdmpModel,
    start: &Start,
    policy: &dyn DiscretePolicy,
    n_traj: usize,
    seed: u64,
    cfg: &SimConfig,
) -> Result<McEstimate> {
    if n_traj == 0 {
        return Err(Error::InvalidParameter("n_traj must be ≥ 1".into()));
    }
    let costs = (0..n_traj as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(seed, i).rng();
            let (cost, _) = match start {
                Start::Observation(x0) => {
                    let q0 = model.initial_distribution(x0);
                    let y0 = categorical(&q0, &mut rng);
                    run(model, y0, x0.clone(), Belief::new(q0)?, policy, &mut rng, cfg, None)?
                }
                Start::State { y0, belief } => {
                    run(model, *y0, model.state(*y0).to_vec(), belief.clone(), policy, &mut rng, cfg, None)?
                }
            };
            Ok(cost)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(McEstimate::from_samples(&costs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossCheckRow {
    pub x0: Vec<f64>,
    pub mc: McEstimate,
    /// Filtered-MDP value of the policy at `Q₀(·|x₀)`.
    pub mdp_value: f64,
    /// Absolute discrepancy attributed to truncation and grid error.
    pub slack: f64,
}

impl CrossCheckRow {
    /// `(mc − mdp)/stderr` after forgiving `slack`; zero when the gap is
    /// within the slack.
    pub fn z(&self) -> f64 {
        self.z_with_slack(self.slack)
    }

    /// `(mc − mdp)/stderr` with no allowance.
    pub fn raw_z(&self) -> f64 {
        self.z_with_slack(0.0)
    }

    pub fn z_with_slack(&self, slack: f64) -> f64 {
        let diff = self.mc.mean - self.mdp_value;
        let excess = (diff.abs() - slack).max(0.0).copysign(diff);
        if excess == 0.0 {
            0.0
        } else if self.mc.stderr == 0.0 {
            f64::INFINITY.copysign(excess)
        } else {
            excess / self.mc.stderr
        }
    }
}

#[derive(Debug, Clone)]
pub struct CrossCheck {
    pub rows: Vec<CrossCheckRow>,
    /// `T_f` fixed point on the grid.
    pub policy_values: ValueGrid,
}

/// Compares the simulated cost of `policy` with its filtered-MDP value for
/// each initial observation. Discrepancies up to `grid_slack` plus the
/// simulator's truncation bound are not counted against the z-score.
#[allow(clippy::too_many_arguments)]
pub fn cross_check(
    mdp: &FilteredMdp,
    grid: Arc<SimplexGrid>,
    policy: &dyn DiscretePolicy,
    x0s: &[Vec<f64>],
    n_traj: usize,
    seed: u64,
    sim_cfg: &SimConfig,
    solver_cfg: &SolverConfig,
    grid_slack: f64,
) -> Result<CrossCheck> {
    let model = mdp.model();
    let slack = grid_slack + sim_cfg.truncation_bound(model);
    let (policy_values, _) = evaluate_policy_on_grid(mdp, grid, policy, solver_cfg)?;
    let mut rows = Vec::with_capacity(x0s.len());
    for x0 in x0s {
        let mc = evaluate_policy_mc(model, &Start::Observation(x0.clone()), policy, n_traj, seed, sim_cfg)?;
        let q0 = Belief::new(model.initial_distribution(x0))?;
        rows.push(CrossCheckRow { x0: x0.clone(), mc, mdp_value: policy_values.interpolate(&q0), slack });
    }
    Ok(CrossCheck { rows, policy_values })
}
