//! Bayesian filter over the finite post-jump set.
//!
//! `q̃(s, y', x | y, r)` is the discounted joint density of the inter-jump
//! time `s`, the next hidden state `y'` and the observation `x`, given the
//! current post-jump state `y` and control `r`:
//!
//! ```text
//! q̃ = exp(−Γ^r(y,s)) · f(x − y') · Σ_a w_a λ^A(Φ^r(y,s), a) Q^A(y' | Φ^r(y,s), a)
//! ```
//!
//! The updating operator `Ψ` is Bayes' rule on these weights; `Ψ̂` smooths the
//! jump-time argument with a kernel `h_σ` first.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::{ControlledPath, PopdmpModel, RelaxedControl};

const SUM_TOL: f64 = 1e-10;
const RENORMALIZE_TOL: f64 = 1e-8;
const MIN_EVIDENCE: f64 = 1e-300;

/// Probability vector over `E⁰`.
#[derive(Debug, Clone, PartialEq)]
pub struct Belief {
    probs: Vec<f64>,
}

impl Belief {
    /// Entries must be nonnegative; a sum within `1e-8` of one is renormalized.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidBelief("empty probability vector".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidBelief(format!("entries must be finite and >= 0: {probs:?}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > RENORMALIZE_TOL {
            return Err(Error::InvalidBelief(format!("entries sum to {total}")));
        }
        Ok(Self::normalized(probs, total))
    }

    fn normalized(mut probs: Vec<f64>, total: f64) -> Self {
        if (total - 1.0).abs() > 0.0 {
            probs.iter_mut().for_each(|p| *p /= total);
        }
        Self { probs }
    }

    /// Normalizes arbitrary nonnegative weights; `None` when their mass vanishes.
    pub fn from_weights(weights: Vec<f64>) -> Option<Self> {
        let total: f64 = weights.iter().sum();
        (total.is_finite() && total >= MIN_EVIDENCE && weights.iter().all(|w| *w >= 0.0))
            .then(|| Self::normalized(weights, total))
    }

    /// Caller guarantees a probability vector.
    pub(crate) fn from_normalized_unchecked(probs: Vec<f64>) -> Self {
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        Self { probs }
    }

    pub fn dirac(d: usize, i: usize) -> Self {
        let mut probs = vec![0.0; d];
        probs[i] = 1.0;
        Self { probs }
    }

    pub fn uniform(d: usize) -> Self {
        Self { probs: vec![1.0 / d as f64; d] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn dim(&self) -> usize {
        self.probs.len()
    }

    pub fn sup_distance(&self, other: &Belief) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_normalized(&self) -> bool {
        (self.probs.iter().sum::<f64>() - 1.0).abs() <= SUM_TOL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Gaussian,
    Epanechnikov,
}

/// Smoothing kernel `h_σ` for the jump-time argument of the filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegularizationKernel {
    kind: KernelKind,
    sigma: f64,
}

impl RegularizationKernel {
    pub fn new(kind: KernelKind, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidKernel(format!("bandwidth must be > 0, got {sigma}")));
        }
        Ok(Self { kind, sigma })
    }

    pub fn gaussian(sigma: f64) -> Result<Self> {
        Self::new(KernelKind::Gaussian, sigma)
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Half-width of the integration window around the jump time.
    pub fn window(&self) -> f64 {
        5.0 * self.sigma
    }

    #[inline]
    pub fn density(&self, t: f64) -> f64 {
        let z = t / self.sigma;
        match self.kind {
            KernelKind::Gaussian => (-0.5 * z * z).exp() / (self.sigma * (2.0 * PI).sqrt()),
            KernelKind::Epanechnikov => {
                if z.abs() < 1.0 {
                    0.75 * (1.0 - z * z) / self.sigma
                } else {
                    0.0
                }
            }
        }
    }
}

/// Quadrature node: time, weight and the control piece whose mixture applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct QuadNode {
    pub t: f64,
    pub weight: f64,
    pub piece: usize,
}

/// Composite Simpson nodes on `[lo, hi]`, split at control breakpoints; the
/// closing node of each sub-interval carries the mixture of that sub-interval.
pub(crate) fn simpson_nodes(control: &RelaxedControl, lo: f64, hi: f64, step: f64) -> Vec<QuadNode> {
    let mut cuts = vec![lo];
    cuts.extend(control.breakpoints().iter().copied().filter(|&b| b > lo && b < hi));
    cuts.push(hi);
    let mut nodes = Vec::new();
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        let piece = control.piece_index_at(a);
        // the slack keeps breakpoints on multiples of `2·step` aligned with the
        // unsplit composite rule
        let n = 2 * ((b - a) / (2.0 * step) - 1e-9).ceil().max(1.0) as usize;
        let h = (b - a) / n as f64;
        for i in 0..=n {
            let t = if i == n { b } else { a + i as f64 * h };
            let c = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            nodes.push(QuadNode { t, weight: c * h / 3.0, piece });
        }
    }
    nodes
}

/// Evaluates `q̃(t, y', x | y, r)` for every observation pair and source
/// state along increasing node times.
pub(crate) struct DensityEvaluator<'a> {
    model: &'a PopdmpModel,
    control: &'a RelaxedControl,
    paths: Vec<ControlledPath<'a>>,
    kernel_row: Vec<f64>,
    jump_mass: Vec<f64>,
}

impl<'a> DensityEvaluator<'a> {
    pub fn new(model: &'a PopdmpModel, control: &'a RelaxedControl) -> Self {
        let d = model.num_states();
        Self {
            model,
            control,
            paths: model
                .post_jump_states()
                .iter()
                .map(|y| ControlledPath::new(model, y, control))
                .collect(),
            kernel_row: vec![0.0; d],
            jump_mass: vec![0.0; d],
        }
    }

    /// Writes `q̃` into `density[pair * d + y]`; when `cost` is given also
    /// writes `exp(−Γ) Σ w c(Φ, a)` per source state.
    pub fn eval(
        &mut self,
        t: f64,
        piece: usize,
        density: &mut [f64],
        mut cost: Option<&mut [f64]>,
    ) -> Result<()> {
        let model = self.model;
        let d = model.num_states();
        let mixture = &self.control.pieces()[piece];
        let pairs = model.observations().pairs();
        for (y, path) in self.paths.iter_mut().enumerate() {
            path.advance_to(t)?;
            let discount = (-path.gamma()).exp();
            let state = path.state();
            self.jump_mass.iter_mut().for_each(|v| *v = 0.0);
            for atom in mixture.atoms() {
                let rate = model.hazard_rate(state, &atom.action);
                model.jump_kernel(state, &atom.action, &mut self.kernel_row);
                for (m, q) in self.jump_mass.iter_mut().zip(&self.kernel_row) {
                    *m += atom.weight * rate * q;
                }
            }
            for (p, pair) in pairs.iter().enumerate() {
                density[p * d + y] = discount * pair.density * self.jump_mass[pair.next_state];
            }
            if let Some(cost) = cost.as_deref_mut() {
                cost[y] = discount * model.mixture_cost(state, mixture);
            }
        }
        if density.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("joint density"));
        }
        Ok(())
    }
}

fn density_at(model: &PopdmpModel, r: &RelaxedControl, s: f64) -> Result<Vec<f64>> {
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::InvalidParameter(format!("jump time must be >= 0, got {s}")));
    }
    let mut out = vec![0.0; model.observations().pairs().len() * model.num_states()];
    DensityEvaluator::new(model, r).eval(s, r.piece_index_at(s), &mut out, None)?;
    Ok(out)
}

/// `q̃(s, y', x | y, r)` with `y'` and `y` given as indices into `E⁰`.
pub fn q_tilde(
    model: &PopdmpModel,
    s: f64,
    y_next: usize,
    x: &[f64],
    y: usize,
    r: &RelaxedControl,
) -> Result<f64> {
    let obs = model.observations();
    let Some(xi) = obs.index_of(x) else {
        return Ok(0.0);
    };
    let Some(&p) = obs.pairs_for(xi).iter().find(|&&p| obs.pairs()[p].next_state == y_next) else {
        return Ok(0.0);
    };
    let density = density_at(model, r, s)?;
    Ok(density[p * model.num_states() + y])
}

/// `q̃^{SX}(s, x | y, r) = Σ_{y'} q̃(s, y', x | y, r)`.
pub fn q_tilde_sx(model: &PopdmpModel, s: f64, x: &[f64], y: usize, r: &RelaxedControl) -> Result<f64> {
    let obs = model.observations();
    let Some(xi) = obs.index_of(x) else {
        return Ok(0.0);
    };
    let density = density_at(model, r, s)?;
    let d = model.num_states();
    Ok(obs.pairs_for(xi).iter().map(|&p| density[p * d + y]).sum())
}

fn check_belief(model: &PopdmpModel, rho: &Belief) -> Result<()> {
    if rho.dim() != model.num_states() {
        return Err(Error::InvalidBelief(format!(
            "belief has {} entries, model has {} post-jump states",
            rho.dim(),
            model.num_states()
        )));
    }
    Ok(())
}

fn posterior(
    model: &PopdmpModel,
    rho: &Belief,
    x: &[f64],
    xi: usize,
    weights: &[f64],
) -> Result<Belief> {
    let obs = model.observations();
    let d = model.num_states();
    let mut numer = vec![0.0; d];
    for &p in obs.pairs_for(xi) {
        let row = &weights[p * d..(p + 1) * d];
        numer[obs.pairs()[p].next_state] += row.iter().zip(rho.probs()).map(|(q, r)| q * r).sum::<f64>();
    }
    Belief::from_weights(numer).ok_or_else(|| Error::ImpossibleObservation { x: x.to_vec() })
}

/// `Ψ(ρ, r, s, x)`: Bayes update after a jump at `s` with observation `x`.
pub fn update(model: &PopdmpModel, rho: &Belief, r: &RelaxedControl, s: f64, x: &[f64]) -> Result<Belief> {
    check_belief(model, rho)?;
    let xi = model
        .observations()
        .index_of(x)
        .ok_or_else(|| Error::ImpossibleObservation { x: x.to_vec() })?;
    let density = density_at(model, r, s)?;
    posterior(model, rho, x, xi, &density)
}

/// `Ψ̂(ρ, r, s, x)`: the update with `q̃(u, …)` averaged against `h_σ(s − u)`
/// over `u ∈ [max(0, s − 5σ), s + 5σ]` by Simpson quadrature.
pub fn update_regularized(
    model: &PopdmpModel,
    rho: &Belief,
    r: &RelaxedControl,
    s: f64,
    x: &[f64],
    kernel: &RegularizationKernel,
) -> Result<Belief> {
    check_belief(model, rho)?;
    if !(s >= 0.0 && s.is_finite()) {
        return Err(Error::InvalidParameter(format!("jump time must be >= 0, got {s}")));
    }
    let xi = model
        .observations()
        .index_of(x)
        .ok_or_else(|| Error::ImpossibleObservation { x: x.to_vec() })?;
    let lo = (s - kernel.window()).max(0.0);
    let hi = s + kernel.window();
    let step = (kernel.sigma() / 20.0).min(model.numerics().h_quad.max(1e-3));
    let nodes = simpson_nodes(r, lo, hi, step);

    let len = model.observations().pairs().len() * model.num_states();
    let mut smoothed = vec![0.0; len];
    let mut buf = vec![0.0; len];
    let mut eval = DensityEvaluator::new(model, r);
    for node in &nodes {
        eval.eval(node.t, node.piece, &mut buf, None)?;
        let w = node.weight * kernel.density(s - node.t);
        for (acc, q) in smoothed.iter_mut().zip(&buf) {
            *acc += w * q;
        }
    }
    posterior(model, rho, x, xi, &smoothed)
}

/// One observed jump: the control used since the previous jump, the elapsed
/// time and the observation.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterEvent {
    pub control: RelaxedControl,
    pub s: f64,
    pub x: Vec<f64>,
}

/// `μ₀ = Q₀(·|x₀)`, `μₙ = Ψ(μₙ₋₁, rₙ₋₁, sₙ, xₙ)` (or `Ψ̂` when a kernel is given).
pub fn filter_trajectory(
    model: &PopdmpModel,
    x0: &[f64],
    events: &[FilterEvent],
    kernel: Option<&RegularizationKernel>,
) -> Result<Vec<Belief>> {
    let mut beliefs = vec![Belief::new(model.initial_distribution(x0))?];
    for (index, event) in events.iter().enumerate() {
        let wrap = |e: Error| Error::FilterEvent { index, source: Box::new(e) };
        if event.s.is_nan() || event.s <= 0.0 {
            return Err(wrap(Error::InvalidParameter(format!(
                "inter-jump time must be > 0, got {}",
                event.s
            ))));
        }
        let prev = beliefs.last().expect("non-empty");
        let next = match kernel {
            Some(k) => update_regularized(model, prev, &event.control, event.s, &event.x, k),
            None => update(model, prev, &event.control, event.s, &event.x),
        }
        .map_err(wrap)?;
        beliefs.push(next);
    }
    Ok(beliefs)
}
