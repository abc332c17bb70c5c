//! Filtered MDP over beliefs: one-stage costs `g`, `ĝ`, the transition kernel
//! `Q̂` and the Bellman operators `L`, `T_f`, `T`.
//!
//! Every per-control quantity that does not depend on the belief (node
//! weights, `q̃` on the quadrature nodes, smoothed `Ψ̂` numerators, `g(y, r)`)
//! is tabulated once in a [`TransitionTable`]; beliefs only enter through
//! linear combinations of its rows.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{simpson_nodes, Belief, DensityEvaluator, QuadNode, RegularizationKernel};
use crate::model::{ActionMixture, PopdmpModel, RelaxedControl};

/// Relative tolerance under which two operator values count as tied; ties go
/// to the lowest candidate index.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// A value function on the belief simplex.
pub trait ValueFunction: Sync {
    fn value(&self, belief: &Belief) -> f64;
}

impl<F: Fn(&Belief) -> f64 + Sync> ValueFunction for F {
    fn value(&self, belief: &Belief) -> f64 {
        self(belief)
    }
}

/// Finite search set standing in for all relaxed controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlFamily {
    candidates: Vec<RelaxedControl>,
}

impl ControlFamily {
    pub fn new(candidates: Vec<RelaxedControl>, model: &PopdmpModel) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::EmptyFamily);
        }
        for c in &candidates {
            c.check_within(model.action_box())?;
        }
        Ok(Self { candidates })
    }

    /// Constant controls for every action in `actions` (in the given order),
    /// followed by `a` on `[0, τ)` then `rest`, for each `a ≠ rest` in order
    /// and `τ` ascending.
    pub fn bang(
        actions: &[Vec<f64>],
        switch_times: &[f64],
        rest: Vec<f64>,
        model: &PopdmpModel,
    ) -> Result<Self> {
        let mut taus = switch_times.to_vec();
        if taus.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidParameter("switch times must be positive".into()));
        }
        taus.sort_by(f64::total_cmp);
        taus.dedup();
        let mut candidates: Vec<RelaxedControl> = actions
            .iter()
            .map(|a| RelaxedControl::constant_action(a.clone()))
            .collect();
        for a in actions.iter().filter(|a| **a != rest) {
            for &tau in &taus {
                candidates.push(RelaxedControl::switching(
                    ActionMixture::point(a.clone()),
                    tau,
                    ActionMixture::point(rest.clone()),
                )?);
            }
        }
        Self::new(candidates, model)
    }

    /// Stay, then `+1` and `−1` as constants, then `±1` on `[0, τ)` followed by
    /// `0` for `τ ∈ {0.1, 0.2, …, 2.0}`.
    pub fn particle_steering_default(model: &PopdmpModel) -> Result<Self> {
        let taus: Vec<f64> = (1..=20).map(|i| i as f64 / 10.0).collect();
        Self::bang(&[vec![0.0], vec![1.0], vec![-1.0]], &taus, vec![0.0], model)
    }

    pub fn candidates(&self) -> &[RelaxedControl] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn get(&self, i: usize) -> &RelaxedControl {
        &self.candidates[i]
    }
}

/// Truncation horizon and step for the time integrals in `g` and `Q̂`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageQuadrature {
    pub t_max: f64,
    pub h_quad: f64,
}

impl StageQuadrature {
    pub const DEFAULT_TAIL_TOL: f64 = 1e-8;
    pub const DEFAULT_STEP: f64 = 1e-2;

    /// Smallest multiple of `0.5` such that both the cost tail
    /// `c_max e^{−(β+λ̲)t}/(β+λ̲)` and the mass tail `λ̄ e^{−(β+λ̲)t}/(β+λ̲)`
    /// fall below `tail_tol`.
    pub fn for_model(model: &PopdmpModel, tail_tol: f64, h_quad: f64) -> Result<Self> {
        if !(tail_tol > 0.0 && h_quad > 0.0) {
            return Err(Error::InvalidParameter("tail tolerance and step must be > 0".into()));
        }
        let (lo, hi) = model.hazard_bounds();
        let rate = model.discount() + lo;
        let scale = model.cost_max().max(hi) / rate;
        let t = if scale <= tail_tol { 0.5 } else { (scale / tail_tol).ln() / rate };
        Ok(Self { t_max: (2.0 * t).ceil().max(1.0) / 2.0, h_quad })
    }

    pub fn default_for(model: &PopdmpModel) -> Self {
        Self::for_model(model, Self::DEFAULT_TAIL_TOL, Self::DEFAULT_STEP)
            .expect("default tolerances are positive")
    }
}

/// Belief-independent tabulation of `q̃`, `Ψ̂` numerators and `g` for one
/// control.
pub struct TransitionTable {
    nodes: Vec<QuadNode>,
    stage_cost: Vec<f64>,
    plain: Vec<f64>,
    smoothed: Option<Vec<f64>>,
    stride: usize,
    states: usize,
}

impl TransitionTable {
    pub fn build(
        model: &PopdmpModel,
        control: &RelaxedControl,
        quad: &StageQuadrature,
        kernel: Option<&RegularizationKernel>,
    ) -> Result<Self> {
        if kernel.is_none() && model.hazard_controlled() {
            return Err(Error::RegularizationRequired);
        }
        control.check_within(model.action_box())?;
        let d = model.num_states();
        let stride = model.observations().pairs().len() * d;
        let nodes = simpson_nodes(control, 0.0, quad.t_max, quad.h_quad);
        let mut plain = vec![0.0; nodes.len() * stride];
        let mut stage_cost = vec![0.0; d];
        let mut cost = vec![0.0; d];
        let mut eval = DensityEvaluator::new(model, control);
        for (k, node) in nodes.iter().enumerate() {
            eval.eval(node.t, node.piece, &mut plain[k * stride..(k + 1) * stride], Some(&mut cost))?;
            for (g, c) in stage_cost.iter_mut().zip(&cost) {
                *g += node.weight * c;
            }
        }
        let smoothed = kernel.map(|h| smooth(&nodes, &plain, stride, h));
        Ok(Self { nodes, stage_cost, plain, smoothed, stride, states: d })
    }

    /// `g(y, r)` for every `y ∈ E⁰`.
    pub fn stage_costs(&self) -> &[f64] {
        &self.stage_cost
    }

    /// `ĝ(ρ, r)`.
    pub fn stage_cost_belief(&self, rho: &Belief) -> f64 {
        self.stage_cost.iter().zip(rho.probs()).map(|(g, p)| g * p).sum()
    }

    /// Calls `sink(weight, next_belief)` for the discretized `Q̂(·|ρ, r)`.
    /// Consecutive nodes producing the same next belief for the same
    /// observation are merged into one call.
    pub fn for_each_transition(
        &self,
        model: &PopdmpModel,
        rho: &Belief,
        mut sink: impl FnMut(f64, &[f64]),
    ) {
        let obs = model.observations();
        let pairs = obs.pairs();
        let d = self.states;
        let probs = rho.probs();
        let numer_rows = self.smoothed.as_deref().unwrap_or(&self.plain);
        let mut next = vec![0.0; d];
        let mut prev = vec![0.0; d];
        let dot = |row: &[f64]| row.iter().zip(probs).map(|(q, r)| q * r).sum::<f64>();

        for xi in 0..obs.len() {
            let pair_ids = obs.pairs_for(xi);
            let mut pending = 0.0;
            for (k, node) in self.nodes.iter().enumerate() {
                let base = k * self.stride;
                let mut mass = 0.0;
                for &p in pair_ids {
                    mass += dot(&self.plain[base + p * d..base + (p + 1) * d]);
                }
                if mass <= 0.0 {
                    continue;
                }
                next.iter_mut().for_each(|v| *v = 0.0);
                let mut total = 0.0;
                for &p in pair_ids {
                    let w = dot(&numer_rows[base + p * d..base + (p + 1) * d]);
                    next[pairs[p].next_state] = w;
                    total += w;
                }
                if total.is_nan() || total <= 1e-300 {
                    // smoothing window fully truncated: fall back to the plain update
                    total = 0.0;
                    for &p in pair_ids {
                        let w = dot(&self.plain[base + p * d..base + (p + 1) * d]);
                        next[pairs[p].next_state] = w;
                        total += w;
                    }
                }
                next.iter_mut().for_each(|v| *v /= total);
                let weight = node.weight * mass;
                if pending > 0.0 && next == prev {
                    pending += weight;
                } else {
                    if pending > 0.0 {
                        sink(pending, &prev);
                    }
                    prev.copy_from_slice(&next);
                    pending = weight;
                }
            }
            if pending > 0.0 {
                sink(pending, &prev);
            }
        }
    }

    /// `∫ v dQ̂(·|ρ, r)`.
    pub fn expected_next_value(&self, model: &PopdmpModel, v: &dyn ValueFunction, rho: &Belief) -> f64 {
        let mut acc = 0.0;
        self.for_each_transition(model, rho, |w, next| {
            acc += w * v.value(&Belief::from_normalized_unchecked(next.to_vec()));
        });
        acc
    }
}

/// `Σ_j W_j h_σ(s_k − u_j) q̃(u_j, …)` for every outer node `s_k`.
fn smooth(nodes: &[QuadNode], plain: &[f64], stride: usize, kernel: &RegularizationKernel) -> Vec<f64> {
    let mut out = vec![0.0; plain.len()];
    let window = kernel.window();
    let mut lo = 0;
    for (k, node) in nodes.iter().enumerate() {
        while nodes[lo].t < node.t - window {
            lo += 1;
        }
        let acc = &mut out[k * stride..(k + 1) * stride];
        for (j, other) in nodes.iter().enumerate().skip(lo) {
            if other.t > node.t + window {
                break;
            }
            let w = other.weight * kernel.density(node.t - other.t);
            for (a, q) in acc.iter_mut().zip(&plain[j * stride..(j + 1) * stride]) {
                *a += w * q;
            }
        }
    }
    out
}

/// Lowest index among the values within [`TIE_TOLERANCE`] of the minimum.
pub fn argmin_with_ties(values: &[f64]) -> (f64, usize) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let tol = TIE_TOLERANCE * min.abs().max(1.0);
    let idx = values.iter().position(|v| *v <= min + tol).unwrap_or(0);
    (values[idx], idx)
}

/// The filtered MDP restricted to a control family, with every candidate
/// tabulated up front.
pub struct FilteredMdp<'a> {
    model: &'a PopdmpModel,
    family: &'a ControlFamily,
    quad: StageQuadrature,
    kernel: Option<RegularizationKernel>,
    tables: Vec<TransitionTable>,
}

impl<'a> FilteredMdp<'a> {
    pub fn new(
        model: &'a PopdmpModel,
        family: &'a ControlFamily,
        quad: StageQuadrature,
        kernel: Option<RegularizationKernel>,
    ) -> Result<Self> {
        let tables = family
            .candidates()
            .par_iter()
            .map(|c| TransitionTable::build(model, c, &quad, kernel.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { model, family, quad, kernel, tables })
    }

    pub fn model(&self) -> &'a PopdmpModel {
        self.model
    }

    pub fn family(&self) -> &'a ControlFamily {
        self.family
    }

    pub fn quadrature(&self) -> &StageQuadrature {
        &self.quad
    }

    pub fn kernel(&self) -> Option<&RegularizationKernel> {
        self.kernel.as_ref()
    }

    pub fn table(&self, candidate: usize) -> &TransitionTable {
        &self.tables[candidate]
    }

    /// Tabulates an arbitrary control with this MDP's quadrature and kernel.
    pub fn table_for(&self, control: &RelaxedControl) -> Result<TransitionTable> {
        TransitionTable::build(self.model, control, &self.quad, self.kernel.as_ref())
    }

    pub fn stage_cost(&self, rho: &Belief, candidate: usize) -> f64 {
        self.tables[candidate].stage_cost_belief(rho)
    }

    pub fn expected_next_value(&self, v: &dyn ValueFunction, rho: &Belief, candidate: usize) -> f64 {
        self.tables[candidate].expected_next_value(self.model, v, rho)
    }

    /// `(Lv)(ρ, r)` for candidate `r`.
    pub fn l_operator(&self, v: &dyn ValueFunction, rho: &Belief, candidate: usize) -> f64 {
        self.stage_cost(rho, candidate) + self.expected_next_value(v, rho, candidate)
    }

    /// `(Tv)(ρ)` and the minimizing candidate.
    pub fn t_operator(&self, v: &dyn ValueFunction, rho: &Belief) -> (f64, usize) {
        let values: Vec<f64> = (0..self.tables.len()).map(|c| self.l_operator(v, rho, c)).collect();
        argmin_with_ties(&values)
    }
}

/// `g(y, r)` for `y` an index into `E⁰`.
pub fn stage_cost_g(model: &PopdmpModel, y: usize, r: &RelaxedControl, quad: &StageQuadrature) -> Result<f64> {
    let table = plain_or_dummy_kernel(model, r, quad)?;
    Ok(table.stage_costs()[y])
}

/// `ĝ(ρ, r) = Σ_y g(y, r) ρ(y)`.
pub fn stage_cost_belief(
    model: &PopdmpModel,
    rho: &Belief,
    r: &RelaxedControl,
    quad: &StageQuadrature,
) -> Result<f64> {
    Ok(plain_or_dummy_kernel(model, r, quad)?.stage_cost_belief(rho))
}

// `g` does not involve the filter; any kernel satisfies the table builder.
fn plain_or_dummy_kernel(model: &PopdmpModel, r: &RelaxedControl, quad: &StageQuadrature) -> Result<TransitionTable> {
    let dummy = RegularizationKernel::gaussian(1.0)?;
    let kernel = model.hazard_controlled().then_some(&dummy);
    TransitionTable::build(model, r, quad, kernel)
}

/// `∫ v dQ̂(·|ρ, r)`; uses `Ψ` without a kernel (only allowed when the hazard
/// and jump kernel ignore the action) and `Ψ̂` otherwise.
pub fn expected_next_value(
    model: &PopdmpModel,
    v: &dyn ValueFunction,
    rho: &Belief,
    r: &RelaxedControl,
    kernel: Option<&RegularizationKernel>,
    quad: &StageQuadrature,
) -> Result<f64> {
    Ok(TransitionTable::build(model, r, quad, kernel)?.expected_next_value(model, v, rho))
}

/// `(Lv)(ρ, r) = ĝ(ρ, r) + ∫ v dQ̂(·|ρ, r)`.
pub fn l_operator(
    model: &PopdmpModel,
    v: &dyn ValueFunction,
    rho: &Belief,
    r: &RelaxedControl,
    kernel: Option<&RegularizationKernel>,
    quad: &StageQuadrature,
) -> Result<f64> {
    let table = TransitionTable::build(model, r, quad, kernel)?;
    Ok(table.stage_cost_belief(rho) + table.expected_next_value(model, v, rho))
}

/// `(Tv)(ρ) = min_{r ∈ family} (Lv)(ρ, r)` with the minimizing index.
pub fn t_operator(
    model: &PopdmpModel,
    v: &dyn ValueFunction,
    rho: &Belief,
    family: &ControlFamily,
    kernel: Option<&RegularizationKernel>,
    quad: &StageQuadrature,
) -> Result<(f64, usize)> {
    let values = family
        .candidates()
        .iter()
        .map(|r| l_operator(model, v, rho, r, kernel, quad))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmin_with_ties(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::particle_steering;

    fn quad(m: &PopdmpModel) -> StageQuadrature {
        StageQuadrature::default_for(m)
    }

    fn stay() -> RelaxedControl {
        RelaxedControl::constant_action(vec![0.0])
    }

    #[test]
    fn horizon_meets_the_tail_bound() {
        let m = particle_steering();
        let q = quad(&m);
        assert_eq!(q.t_max, 10.5);
        assert!(10.0 * (-2.0 * q.t_max).exp() / 2.0 < 1e-8);
    }

    #[test]
    fn default_family_layout() {
        let m = particle_steering();
        let f = ControlFamily::particle_steering_default(&m).unwrap();
        assert_eq!(f.len(), 3 + 2 * 20);
        assert_eq!(f.get(0), &stay());
        assert_eq!(f.get(3), &"0:1;0.1:0".parse::<RelaxedControl>().unwrap());
        assert_eq!(f.get(23), &"0:-1;0.1:0".parse::<RelaxedControl>().unwrap());
        assert!(ControlFamily::new(vec![], &m).is_err());
        assert!(ControlFamily::new(vec![RelaxedControl::constant_action(vec![2.0])], &m).is_err());
    }

    #[test]
    fn stage_cost_examples() {
        let m = particle_steering();
        let q = quad(&m);
        let left = RelaxedControl::constant_action(vec![-1.0]);
        let g = stage_cost_g(&m, 0, &left, &q).unwrap();
        assert!((g - 5.0).abs() < 1e-6, "{g}");
        assert_eq!(stage_cost_g(&m, 1, &stay(), &q).unwrap(), 0.0);

        let uniform = stage_cost_belief(&m, &Belief::uniform(3), &stay(), &q).unwrap();
        assert!((uniform - 10.0 / 3.0).abs() < 1e-6, "{uniform}");
        let dirac = stage_cost_belief(&m, &Belief::dirac(3, 0), &left, &q).unwrap();
        assert_eq!(dirac, g);
    }

    #[test]
    fn zero_cost_model_has_zero_stage_cost() {
        use crate::model::{ActionBox, InitialRule, NoiseModel};
        let m = PopdmpModel::builder(vec![vec![0.0], vec![1.0]], ActionBox::interval(-1.0, 1.0).unwrap())
            .vector_field(|_y, a, out| out[0] = a[0])
            .constant_hazard(1.0)
            .jump_kernel(|_y, _a, out| out.copy_from_slice(&[0.5, 0.5]))
            .noise(NoiseModel::uniform(vec![vec![0.0]]).unwrap())
            .cost_rate(|_y, _a| 0.0, 0.0)
            .build_with(InitialRule::Uniform)
            .unwrap();
        let q = quad(&m);
        assert_eq!(stage_cost_g(&m, 0, &RelaxedControl::constant_action(vec![1.0]), &q).unwrap(), 0.0);
    }

    #[test]
    fn expected_next_value_examples() {
        let m = particle_steering();
        let q = quad(&m);
        let r: RelaxedControl = "0:1;0.5:0".parse().unwrap();
        let one = |_b: &Belief| 1.0;
        let zero = |_b: &Belief| 0.0;
        for rho in [Belief::uniform(3), Belief::new(vec![0.7, 0.1, 0.2]).unwrap()] {
            let mass = expected_next_value(&m, &one, &rho, &r, None, &q).unwrap();
            assert!((mass - 0.5).abs() < 1e-5, "{mass}");
            assert_eq!(expected_next_value(&m, &zero, &rho, &r, None, &q).unwrap(), 0.0);
        }
        let v = |b: &Belief| 3.0 * b.probs()[1] + 1.0;
        let dirac = Belief::dirac(3, 1);
        let e = expected_next_value(&m, &v, &dirac, &stay(), None, &q).unwrap();
        assert!((e - 0.5 * v(&dirac)).abs() < 1e-8, "{e}");
    }

    #[test]
    fn regularized_mass_is_unchanged() {
        let m = particle_steering();
        let q = quad(&m);
        let k = RegularizationKernel::gaussian(0.1).unwrap();
        let r: RelaxedControl = "0:-1;0.7:0".parse().unwrap();
        let mass = expected_next_value(&m, &|_b: &Belief| 1.0, &Belief::uniform(3), &r, Some(&k), &q).unwrap();
        assert!((mass - 0.5).abs() < 1e-5, "{mass}");
    }

    #[test]
    fn l_and_t_operator_examples() {
        let m = particle_steering();
        let q = quad(&m);
        let zero = |_b: &Belief| 0.0;
        let rho = Belief::new(vec![0.2, 0.5, 0.3]).unwrap();
        let r = RelaxedControl::constant_action(vec![1.0]);
        let l = l_operator(&m, &zero, &rho, &r, None, &q).unwrap();
        assert_eq!(l, stage_cost_belief(&m, &rho, &r, &q).unwrap());
        assert_eq!(l_operator(&m, &zero, &Belief::dirac(3, 1), &stay(), None, &q).unwrap(), 0.0);

        let single = ControlFamily::new(vec![r.clone()], &m).unwrap();
        let (t, idx) = t_operator(&m, &zero, &rho, &single, None, &q).unwrap();
        assert_eq!((t, idx), (l, 0));
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        assert_eq!(argmin_with_ties(&[1.0, 0.5, 0.5 + 1e-12, 0.7]), (0.5, 1));
        assert_eq!(argmin_with_ties(&[0.5 + 1e-12, 0.5]), (0.5 + 1e-12, 0));
        assert_eq!(argmin_with_ties(&[0.3, 0.2]).1, 1);
    }

    #[test]
    fn controlled_hazard_without_kernel_is_rejected() {
        use crate::model::{ActionBox, InitialRule, NoiseModel};
        let m = PopdmpModel::builder(vec![vec![0.0]], ActionBox::interval(0.0, 1.0).unwrap())
            .vector_field(|_y, a, out| out[0] = a[0])
            .hazard(|_y, a| 1.0 + a[0], 1.0, 2.0)
            .hazard_controlled(true)
            .jump_kernel(|_y, _a, out| out[0] = 1.0)
            .noise(NoiseModel::uniform(vec![vec![0.0]]).unwrap())
            .cost_rate(|_y, _a| 1.0, 1.0)
            .build_with(InitialRule::Uniform)
            .unwrap();
        let q = quad(&m);
        let r = RelaxedControl::constant_action(vec![0.5]);
        let err = expected_next_value(&m, &|_b: &Belief| 1.0, &Belief::dirac(1, 0), &r, None, &q);
        assert!(matches!(err, Err(Error::RegularizationRequired)));
        let g = stage_cost_g(&m, 0, &r, &q).unwrap();
        assert!((g - 1.0 / 2.5).abs() < 1e-6, "{g}");
    }
}
