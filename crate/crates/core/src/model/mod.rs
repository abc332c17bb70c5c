//! Problem data and deterministic dynamics of a controlled POPDMP.
//!
//! A [`PopdmpModel`] bundles the finite post-jump set `E⁰`, the controlled
//! drift, hazard rate, jump kernel, observation noise, cost rate, discount
//! rate and the initial kernel `Q₀(·|x)`. Models are immutable once built and
//! can be shared freely between threads.

mod control;
mod dynamics;
mod particle;
mod policy;
mod tables;

use std::fmt;
use std::sync::Arc;

pub use control::{ActionBox, ActionMixture, Atom, RelaxedControl};
pub use dynamics::{big_lambda, flow, gamma, mixture_velocity, ControlledPath};
pub use particle::{particle_steering, particle_steering_with, PARTICLE_STEERING};
pub use policy::{
    correspondence_roundtrip, ConstantPolicy, DiscretePolicy, ExpandedPolicy, PiecewisePolicy,
    Policy, RoundTrip, SampledPolicy,
};
pub use tables::{PiecewiseLinear, PiecewiseLinearRows};

use crate::error::{Error, Result};

/// Vector field `b(y, a)` written into the output slice.
pub type VectorField = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;
/// Closed-form controlled flow `Φ^r(y, t)` written into the output slice.
pub type ClosedFlow = dyn Fn(&[f64], &RelaxedControl, f64, &mut [f64]) + Send + Sync;
/// Scalar function of `(y, a)`: hazard or cost rate.
pub type StateActionFn = dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync;
/// `Q^A(·|y, a)` written as a probability vector over `E⁰`.
pub type JumpKernelFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;
/// `Q₀(·|x)` written as a probability vector over `E⁰`.
pub type InitialKernelFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

const POINT_TOL: f64 = 1e-9;
const MASS_TOL: f64 = 1e-12;

#[derive(Clone)]
pub enum Drift {
    ClosedForm(Arc<ClosedFlow>),
    VectorField(Arc<VectorField>),
}

#[derive(Clone)]
pub enum Hazard {
    Constant(f64),
    Function { rate: Arc<StateActionFn>, lower: f64, upper: f64 },
}

impl Hazard {
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            Hazard::Constant(l) => (*l, *l),
            Hazard::Function { lower, upper, .. } => (*lower, *upper),
        }
    }

    #[inline]
    pub fn rate(&self, y: &[f64], a: &[f64]) -> f64 {
        match self {
            Hazard::Constant(l) => *l,
            Hazard::Function { rate, .. } => rate(y, a),
        }
    }
}

/// Discrete observation noise: offsets `ε` with density `f(ε)` w.r.t.
/// counting measure.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    offsets: Vec<Vec<f64>>,
    density: Vec<f64>,
}

impl NoiseModel {
    pub fn new(offsets: Vec<Vec<f64>>, density: Vec<f64>) -> Result<Self> {
        if offsets.is_empty() || offsets.len() != density.len() {
            return Err(Error::InvalidModel("noise needs one density value per offset".into()));
        }
        let dim = offsets[0].len();
        if offsets.iter().any(|o| o.len() != dim || o.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidModel("noise offsets must be finite and equal-length".into()));
        }
        if density.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(Error::InvalidModel("noise density must be finite and nonnegative".into()));
        }
        let total: f64 = density.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidModel(format!("noise density sums to {total}, expected 1")));
        }
        for i in 0..offsets.len() {
            for j in 0..i {
                if points_equal(&offsets[i], &offsets[j]) {
                    return Err(Error::InvalidModel("noise offsets must be distinct".into()));
                }
            }
        }
        Ok(Self { offsets, density })
    }

    /// Equal weights on the given offsets.
    pub fn uniform(offsets: Vec<Vec<f64>>) -> Result<Self> {
        let n = offsets.len().max(1);
        Self::new(offsets, vec![1.0 / n as f64; n])
    }

    pub fn offsets(&self) -> &[Vec<f64>] {
        &self.offsets
    }

    pub fn weights(&self) -> &[f64] {
        &self.density
    }

    /// `f(ε)`; zero unless `ε` matches an offset within `1e-9`.
    pub fn density(&self, eps: &[f64]) -> f64 {
        self.offsets
            .iter()
            .position(|o| points_equal(o, eps))
            .map_or(0.0, |i| self.density[i])
    }
}

pub(crate) fn points_equal(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= POINT_TOL)
}

/// One `(y', x)` combination with `f(x − y') > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationPair {
    pub observation: usize,
    pub next_state: usize,
    pub density: f64,
}

/// Every observation point `y' + ε` reachable from some post-jump state.
#[derive(Debug, Clone)]
pub struct ObservationSet {
    points: Vec<Vec<f64>>,
    pairs: Vec<ObservationPair>,
    by_observation: Vec<Vec<usize>>,
}

impl ObservationSet {
    fn new(states: &[Vec<f64>], noise: &NoiseModel) -> Self {
        let mut points: Vec<Vec<f64>> = Vec::new();
        for y in states {
            for eps in noise.offsets() {
                let x: Vec<f64> = y.iter().zip(eps).map(|(a, b)| a + b).collect();
                if !points.iter().any(|p| points_equal(p, &x)) {
                    points.push(x);
                }
            }
        }
        let mut pairs = Vec::new();
        let mut by_observation = vec![Vec::new(); points.len()];
        for (xi, x) in points.iter().enumerate() {
            for (yi, y) in states.iter().enumerate() {
                let eps: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                let density = noise.density(&eps);
                if density > 0.0 {
                    by_observation[xi].push(pairs.len());
                    pairs.push(ObservationPair { observation: xi, next_state: yi, density });
                }
            }
        }
        Self { points, pairs, by_observation }
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn pairs(&self) -> &[ObservationPair] {
        &self.pairs
    }

    /// Indices into [`pairs`](Self::pairs) for observation `x`.
    pub fn pairs_for(&self, observation: usize) -> &[usize] {
        &self.by_observation[observation]
    }

    pub fn index_of(&self, x: &[f64]) -> Option<usize> {
        self.points.iter().position(|p| points_equal(p, x))
    }
}

/// Step sizes used by the flow integrator and hazard quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Numerics {
    pub h_ode: f64,
    pub h_quad: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Self { h_ode: 1e-3, h_quad: 1e-3 }
    }
}

/// How `Q₀(·|x)` is formed from the observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialRule {
    /// Uniform over `E⁰`, ignoring `x`.
    Uniform,
    /// Posterior `∝ f(x − y)` under a uniform prior; uniform when every
    /// likelihood vanishes.
    NoisePosterior,
}

impl InitialRule {
    pub fn kernel(self, states: &[Vec<f64>], noise: &NoiseModel) -> Arc<InitialKernelFn> {
        match self {
            InitialRule::Uniform => Arc::new(|_x: &[f64], out: &mut [f64]| {
                let n = out.len() as f64;
                out.iter_mut().for_each(|p| *p = 1.0 / n);
            }),
            InitialRule::NoisePosterior => {
                let states = states.to_vec();
                let noise = noise.clone();
                Arc::new(move |x: &[f64], out: &mut [f64]| {
                    let mut total = 0.0;
                    for (p, y) in out.iter_mut().zip(&states) {
                        let eps: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
                        *p = noise.density(&eps);
                        total += *p;
                    }
                    if total > 0.0 {
                        out.iter_mut().for_each(|p| *p /= total);
                    } else {
                        let n = out.len() as f64;
                        out.iter_mut().for_each(|p| *p = 1.0 / n);
                    }
                })
            }
        }
    }
}

/// Complete data of a controlled POPDMP with finite post-jump set.
#[derive(Clone)]
pub struct PopdmpModel {
    post_jump_states: Vec<Vec<f64>>,
    action_box: ActionBox,
    drift: Drift,
    hazard: Hazard,
    jump_kernel: Arc<JumpKernelFn>,
    noise: NoiseModel,
    cost_rate: Arc<StateActionFn>,
    cost_max: f64,
    discount: f64,
    initial_kernel: Arc<InitialKernelFn>,
    hazard_controlled: bool,
    numerics: Numerics,
    observations: ObservationSet,
}

impl fmt::Debug for PopdmpModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PopdmpModel")
            .field("post_jump_states", &self.post_jump_states)
            .field("action_box", &self.action_box)
            .field("hazard_bounds", &self.hazard.bounds())
            .field("noise", &self.noise)
            .field("cost_max", &self.cost_max)
            .field("discount", &self.discount)
            .field("hazard_controlled", &self.hazard_controlled)
            .field("numerics", &self.numerics)
            .finish_non_exhaustive()
    }
}

impl PopdmpModel {
    pub fn builder(post_jump_states: Vec<Vec<f64>>, action_box: ActionBox) -> ModelBuilder {
        ModelBuilder {
            post_jump_states,
            action_box,
            drift: None,
            hazard: None,
            jump_kernel: None,
            noise: None,
            cost: None,
            discount: 1.0,
            initial: None,
            hazard_controlled: false,
            numerics: Numerics::default(),
        }
    }

    /// `d = |E⁰|`.
    pub fn num_states(&self) -> usize {
        self.post_jump_states.len()
    }

    pub fn state_dim(&self) -> usize {
        self.post_jump_states[0].len()
    }

    pub fn post_jump_states(&self) -> &[Vec<f64>] {
        &self.post_jump_states
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.post_jump_states[i]
    }

    pub fn action_box(&self) -> &ActionBox {
        &self.action_box
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    pub fn hazard(&self) -> &Hazard {
        &self.hazard
    }

    pub fn hazard_bounds(&self) -> (f64, f64) {
        self.hazard.bounds()
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.observations
    }

    pub fn cost_max(&self) -> f64 {
        self.cost_max
    }

    /// Discount rate `β`.
    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn hazard_controlled(&self) -> bool {
        self.hazard_controlled
    }

    pub fn numerics(&self) -> Numerics {
        self.numerics
    }

    pub fn with_numerics(mut self, numerics: Numerics) -> Self {
        self.numerics = numerics;
        self
    }

    #[inline]
    pub fn cost_rate(&self, y: &[f64], a: &[f64]) -> f64 {
        (self.cost_rate)(y, a)
    }

    #[inline]
    pub fn hazard_rate(&self, y: &[f64], a: &[f64]) -> f64 {
        self.hazard.rate(y, a)
    }

    /// `Σ w·λ^A(y, a)` over the mixture atoms.
    #[inline]
    pub fn mixture_hazard(&self, y: &[f64], m: &ActionMixture) -> f64 {
        match &self.hazard {
            Hazard::Constant(l) => *l,
            Hazard::Function { rate, .. } => m.expect(|a| rate(y, a)),
        }
    }

    pub fn mixture_cost(&self, y: &[f64], m: &ActionMixture) -> f64 {
        m.expect(|a| (self.cost_rate)(y, a))
    }

    /// Writes `Q^A(·|y, a)` into `out` (length `d`).
    #[inline]
    pub fn jump_kernel(&self, y: &[f64], a: &[f64], out: &mut [f64]) {
        (self.jump_kernel)(y, a, out)
    }

    /// Writes `Q₀(·|x)` into `out` (length `d`).
    pub fn initial_kernel(&self, x: &[f64], out: &mut [f64]) {
        (self.initial_kernel)(x, out)
    }

    pub fn initial_distribution(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_states()];
        self.initial_kernel(x, &mut out);
        out
    }

    /// Checks hazard bounds, cost bounds and kernel normalization at every
    /// `(y, a)` combination of the given probes.
    pub fn validate_on(&self, states: &[Vec<f64>], actions: &[Vec<f64>]) -> Result<()> {
        let (lo, hi) = self.hazard.bounds();
        let mut row = vec![0.0; self.num_states()];
        for y in states {
            for a in actions {
                let l = self.hazard_rate(y, a);
                if !l.is_finite() || l < lo - MASS_TOL || l > hi + MASS_TOL {
                    return Err(Error::InvalidModel(format!(
                        "hazard {l} at y={y:?}, a={a:?} outside [{lo}, {hi}]"
                    )));
                }
                let c = self.cost_rate(y, a);
                if !c.is_finite() || c < 0.0 || c > self.cost_max + MASS_TOL {
                    return Err(Error::InvalidModel(format!(
                        "cost {c} at y={y:?}, a={a:?} outside [0, {}]",
                        self.cost_max
                    )));
                }
                self.jump_kernel(y, a, &mut row);
                check_distribution(&row, "jump kernel", y)?;
            }
            self.initial_kernel(y, &mut row);
            check_distribution(&row, "initial kernel", y)?;
        }
        Ok(())
    }

    /// Default probes: the post-jump states, midpoints between them and every
    /// observation point, against the corners and center of the action box.
    pub fn validate(&self) -> Result<()> {
        let mut states = self.post_jump_states.clone();
        for i in 0..self.num_states() {
            for j in 0..i {
                states.push(
                    self.state(i)
                        .iter()
                        .zip(self.state(j))
                        .map(|(a, b)| 0.5 * (a + b))
                        .collect(),
                );
            }
        }
        states.extend(self.observations.points().iter().cloned());
        self.validate_on(&states, &self.action_box.probe_actions())
    }
}

fn check_distribution(row: &[f64], what: &str, at: &[f64]) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(Error::InvalidModel(format!("{what} has a negative entry at {at:?}")));
    }
    let total: f64 = row.iter().sum();
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::InvalidModel(format!("{what} sums to {total} at {at:?}")));
    }
    Ok(())
}

pub struct ModelBuilder {
    post_jump_states: Vec<Vec<f64>>,
    action_box: ActionBox,
    drift: Option<Drift>,
    hazard: Option<Hazard>,
    jump_kernel: Option<Arc<JumpKernelFn>>,
    noise: Option<NoiseModel>,
    cost: Option<(Arc<StateActionFn>, f64)>,
    discount: f64,
    initial: Option<Arc<InitialKernelFn>>,
    hazard_controlled: bool,
    numerics: Numerics,
}

impl ModelBuilder {
    pub fn closed_form_flow(
        mut self,
        flow: impl Fn(&[f64], &RelaxedControl, f64, &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift = Some(Drift::ClosedForm(Arc::new(flow)));
        self
    }

    pub fn vector_field(
        mut self,
        field: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift = Some(Drift::VectorField(Arc::new(field)));
        self
    }

    pub fn constant_hazard(mut self, rate: f64) -> Self {
        self.hazard = Some(Hazard::Constant(rate));
        self
    }

    pub fn hazard(
        mut self,
        rate: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        lower: f64,
        upper: f64,
    ) -> Self {
        self.hazard = Some(Hazard::Function { rate: Arc::new(rate), lower, upper });
        self
    }

    pub fn jump_kernel(
        mut self,
        kernel: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.jump_kernel = Some(Arc::new(kernel));
        self
    }

    pub fn noise(mut self, noise: NoiseModel) -> Self {
        self.noise = Some(noise);
        self
    }

    pub fn cost_rate(
        mut self,
        cost: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        cost_max: f64,
    ) -> Self {
        self.cost = Some((Arc::new(cost), cost_max));
        self
    }

    pub fn discount(mut self, beta: f64) -> Self {
        self.discount = beta;
        self
    }

    pub fn initial_kernel(
        mut self,
        kernel: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.initial = Some(Arc::new(kernel));
        self
    }

    /// Must be set when `λ^A` or `Q^A` depends on the action.
    pub fn hazard_controlled(mut self, controlled: bool) -> Self {
        self.hazard_controlled = controlled;
        self
    }

    pub fn numerics(mut self, numerics: Numerics) -> Self {
        self.numerics = numerics;
        self
    }

    /// Builds with `Q₀` given by `rule` unless an explicit initial kernel was set.
    pub fn build_with(mut self, rule: InitialRule) -> Result<PopdmpModel> {
        if self.initial.is_none() {
            if let Some(noise) = &self.noise {
                self.initial = Some(rule.kernel(&self.post_jump_states, noise));
            }
        }
        self.build()
    }

    pub fn build(self) -> Result<PopdmpModel> {
        let missing = |what: &str| Error::InvalidModel(format!("missing {what}"));
        let states = self.post_jump_states;
        if states.is_empty() {
            return Err(Error::InvalidModel("E⁰ must contain at least one point".into()));
        }
        let dim = states[0].len();
        if dim == 0 || states.iter().any(|s| s.len() != dim || s.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidModel("post-jump states must be finite, equal-length".into()));
        }
        for i in 0..states.len() {
            for j in 0..i {
                if points_equal(&states[i], &states[j]) {
                    return Err(Error::InvalidModel("post-jump states must be distinct".into()));
                }
            }
        }
        let noise = self.noise.ok_or_else(|| missing("noise model"))?;
        if noise.offsets()[0].len() != dim {
            return Err(Error::InvalidModel("noise offsets must match the state dimension".into()));
        }
        let hazard = self.hazard.ok_or_else(|| missing("hazard"))?;
        let (lo, hi) = hazard.bounds();
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "hazard bounds must satisfy 0 < lower <= upper < ∞, got [{lo}, {hi}]"
            )));
        }
        let (cost_rate, cost_max) = self.cost.ok_or_else(|| missing("cost rate"))?;
        if !(cost_max >= 0.0 && cost_max.is_finite()) {
            return Err(Error::InvalidModel(format!("cost bound {cost_max} must be finite, >= 0")));
        }
        if !(self.discount > 0.0 && self.discount.is_finite()) {
            return Err(Error::InvalidModel(format!("discount {} must be > 0", self.discount)));
        }
        let n = self.numerics;
        if !(n.h_ode > 0.0 && n.h_quad > 0.0 && n.h_ode.is_finite() && n.h_quad.is_finite()) {
            return Err(Error::InvalidModel("step sizes must be positive".into()));
        }
        let observations = ObservationSet::new(&states, &noise);
        let model = PopdmpModel {
            drift: self.drift.ok_or_else(|| missing("drift"))?,
            jump_kernel: self.jump_kernel.ok_or_else(|| missing("jump kernel"))?,
            initial_kernel: self.initial.ok_or_else(|| missing("initial kernel"))?,
            post_jump_states: states,
            action_box: self.action_box,
            hazard,
            noise,
            cost_rate,
            cost_max,
            discount: self.discount,
            hazard_controlled: self.hazard_controlled,
            numerics: n,
            observations,
        };
        model.validate()?;
        Ok(model)
    }
}
