//! Policies over beliefs: discrete-time rules returning a whole relaxed
//! control after each jump, and piecewise rules returning the action mixture
//! at a given time since the last jump. The two are interconvertible.

use std::sync::Arc;

use super::{ActionMixture, RelaxedControl};
use crate::error::{Error, Result};
use crate::filter::Belief;

/// Stationary decision rule `f: 𝒫(E⁰) → ℛ`.
pub trait DiscretePolicy: Send + Sync {
    fn control(&self, belief: &Belief) -> RelaxedControl;
}

/// Rule `(history summary, elapsed time) → 𝒫(A)`; the filter belief serves
/// as the history summary.
pub trait PiecewisePolicy: Send + Sync {
    fn mixture(&self, summary: &Belief, elapsed: f64) -> ActionMixture;
}

#[derive(Clone)]
pub enum Policy {
    Discrete(Arc<dyn DiscretePolicy>),
    Piecewise(Arc<dyn PiecewisePolicy>),
}

impl Policy {
    /// Discrete form; piecewise rules are sampled at `probes`.
    pub fn to_discrete(&self, probes: Vec<f64>) -> Arc<dyn DiscretePolicy> {
        match self {
            Policy::Discrete(d) => d.clone(),
            Policy::Piecewise(p) => Arc::new(SampledPolicy::new(p.clone(), probes)),
        }
    }
}

/// Same control regardless of the belief.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPolicy(pub RelaxedControl);

impl DiscretePolicy for ConstantPolicy {
    fn control(&self, _belief: &Belief) -> RelaxedControl {
        self.0.clone()
    }
}

impl<P: DiscretePolicy + ?Sized> DiscretePolicy for Arc<P> {
    fn control(&self, belief: &Belief) -> RelaxedControl {
        (**self).control(belief)
    }
}

impl<P: PiecewisePolicy + ?Sized> PiecewisePolicy for Arc<P> {
    fn mixture(&self, summary: &Belief, elapsed: f64) -> ActionMixture {
        (**self).mixture(summary, elapsed)
    }
}

/// Piecewise rule turned into a discrete one by sampling on a probe grid and
/// merging runs of identical mixtures into control pieces.
pub struct SampledPolicy<P> {
    inner: P,
    probes: Vec<f64>,
}

impl<P: PiecewisePolicy> SampledPolicy<P> {
    pub fn new(inner: P, mut probes: Vec<f64>) -> Self {
        probes.retain(|t| t.is_finite() && *t >= 0.0);
        probes.sort_by(f64::total_cmp);
        probes.dedup();
        if probes.first() != Some(&0.0) {
            probes.insert(0, 0.0);
        }
        Self { inner, probes }
    }

    pub fn probes(&self) -> &[f64] {
        &self.probes
    }
}

impl<P: PiecewisePolicy> DiscretePolicy for SampledPolicy<P> {
    fn control(&self, belief: &Belief) -> RelaxedControl {
        let mut starts = Vec::new();
        let mut pieces: Vec<ActionMixture> = Vec::new();
        for &t in &self.probes {
            let m = self.inner.mixture(belief, t);
            if pieces.last() != Some(&m) {
                starts.push(t);
                pieces.push(m);
            }
        }
        RelaxedControl::new(starts, pieces).expect("probe times are strictly increasing from 0")
    }
}

/// Discrete rule executed in continuous time: `π^P(h, t) = π^D(h)(t)`.
pub struct ExpandedPolicy<D> {
    inner: D,
}

impl<D: DiscretePolicy> ExpandedPolicy<D> {
    pub fn new(inner: D) -> Self {
        Self { inner }
    }
}

impl<D: DiscretePolicy> PiecewisePolicy for ExpandedPolicy<D> {
    fn mixture(&self, summary: &Belief, elapsed: f64) -> ActionMixture {
        self.inner.control(summary).mixture_at(elapsed).clone()
    }
}

#[derive(Debug, Clone)]
pub struct RoundTrip {
    /// The discrete-time control built from the piecewise rule.
    pub control: RelaxedControl,
    /// Probe times where re-expansion disagreed with the original rule.
    pub mismatches: Vec<f64>,
}

/// Builds `π^D` from `π^P` on the probe grid, re-expands it and compares the
/// two at every probe time in `[0, horizon]`.
pub fn correspondence_roundtrip<P: PiecewisePolicy>(
    policy: &P,
    summary: &Belief,
    horizon: f64,
    probes: &[f64],
) -> Result<RoundTrip> {
    if probes.iter().any(|t| !(*t >= 0.0 && *t <= horizon)) {
        return Err(Error::InvalidParameter(format!(
            "probe times must lie in [0, {horizon}]"
        )));
    }
    let sampled = SampledPolicy::new(policy, probes.to_vec());
    let control = sampled.control(summary);
    let mismatches = sampled
        .probes()
        .iter()
        .copied()
        .filter(|&t| control.mixture_at(t) != &policy.mixture(summary, t))
        .collect();
    Ok(RoundTrip { control, mismatches })
}

impl<P: PiecewisePolicy + ?Sized> PiecewisePolicy for &P {
    fn mixture(&self, summary: &Belief, elapsed: f64) -> ActionMixture {
        (**self).mixture(summary, elapsed)
    }
}
