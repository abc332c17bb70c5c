//! Action mixtures and piecewise-constant relaxed controls.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

const WEIGHT_TOL: f64 = 1e-9;
const BOX_TOL: f64 = 1e-12;

/// Compact box `A = [lower, upper]` in `ℝ^m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ActionBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::InvalidModel(
                "action box bounds must be non-empty and of equal length".into(),
            ));
        }
        for (lo, hi) in lower.iter().zip(&upper) {
            if !lo.is_finite() || !hi.is_finite() || lo > hi {
                return Err(Error::InvalidModel(format!(
                    "action box requires finite lower <= upper, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn interval(lower: f64, upper: f64) -> Result<Self> {
        Self::new(vec![lower], vec![upper])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, action: &[f64]) -> bool {
        action.len() == self.dim()
            && action
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(a, (lo, hi))| *a >= lo - BOX_TOL && *a <= hi + BOX_TOL)
    }

    /// Corners (for `m <= 4`) and the center; used to probe model invariants.
    pub fn probe_actions(&self) -> Vec<Vec<f64>> {
        let m = self.dim();
        let mut out = Vec::new();
        if m <= 4 {
            for mask in 0..(1usize << m) {
                out.push(
                    (0..m)
                        .map(|i| if mask >> i & 1 == 1 { self.upper[i] } else { self.lower[i] })
                        .collect(),
                );
            }
        }
        out.push(
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(lo, hi)| 0.5 * (lo + hi))
                .collect(),
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub action: Vec<f64>,
    pub weight: f64,
}

/// Finitely supported probability measure on the action box.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionMixture {
    atoms: Vec<Atom>,
}

impl ActionMixture {
    /// Zero-weight atoms are dropped; weights summing to 1 within `1e-9` are
    /// renormalized.
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        let dim = match atoms.first() {
            Some(a) => a.action.len(),
            None => return Err(Error::InvalidControl("mixture has no atoms".into())),
        };
        let mut total = 0.0;
        for atom in &atoms {
            if atom.action.len() != dim || dim == 0 {
                return Err(Error::InvalidControl("mixture atoms differ in dimension".into()));
            }
            if !atom.weight.is_finite() || atom.weight < 0.0 {
                return Err(Error::InvalidControl(format!("bad atom weight {}", atom.weight)));
            }
            if atom.action.iter().any(|a| !a.is_finite()) {
                return Err(Error::NonFinite("action"));
            }
            total += atom.weight;
        }
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidControl(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        let atoms = atoms
            .into_iter()
            .filter(|a| a.weight > 0.0)
            .map(|a| Atom { weight: a.weight / total, ..a })
            .collect();
        Ok(Self { atoms })
    }

    /// Dirac mass at `action`.
    pub fn point(action: impl Into<Vec<f64>>) -> Self {
        Self { atoms: vec![Atom { action: action.into(), weight: 1.0 }] }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].action.len()
    }

    pub fn mean_action(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim()];
        for atom in &self.atoms {
            for (m, a) in mean.iter_mut().zip(&atom.action) {
                *m += atom.weight * a;
            }
        }
        mean
    }

    /// `Σ w · f(a)` over the atoms.
    pub fn expect(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.weight * f(&a.action)).sum()
    }

    pub fn check_within(&self, bounds: &ActionBox) -> Result<()> {
        for atom in &self.atoms {
            if !bounds.contains(&atom.action) {
                return Err(Error::ActionOutOfBounds { action: atom.action.clone() });
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &[f64] {
        if self.atoms.len() == 1 {
            return &self.atoms[0].action;
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for atom in &self.atoms {
            acc += atom.weight;
            if u < acc {
                return &atom.action;
            }
        }
        &self.atoms[self.atoms.len() - 1].action
    }
}

/// Relaxed control that is constant on `[t_i, t_{i+1})`; the last piece
/// extends to infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedControl {
    starts: Vec<f64>,
    pieces: Vec<ActionMixture>,
}

impl RelaxedControl {
    /// `starts[0]` must be `0` and `starts` strictly increasing, one mixture per start.
    pub fn new(starts: Vec<f64>, pieces: Vec<ActionMixture>) -> Result<Self> {
        if starts.is_empty() || starts.len() != pieces.len() {
            return Err(Error::InvalidControl(format!(
                "{} piece starts for {} pieces",
                starts.len(),
                pieces.len()
            )));
        }
        if starts[0] != 0.0 {
            return Err(Error::InvalidControl("first piece must start at t = 0".into()));
        }
        if starts.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite("control breakpoints"));
        }
        if starts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidControl("breakpoints must be strictly increasing".into()));
        }
        let dim = pieces[0].dim();
        if pieces.iter().any(|p| p.dim() != dim) {
            return Err(Error::InvalidControl("pieces differ in action dimension".into()));
        }
        Ok(Self { starts, pieces })
    }

    pub fn constant(mixture: ActionMixture) -> Self {
        Self { starts: vec![0.0], pieces: vec![mixture] }
    }

    /// Point mass at `action` for all times.
    pub fn constant_action(action: impl Into<Vec<f64>>) -> Self {
        Self::constant(ActionMixture::point(action))
    }

    /// `first` on `[0, switch_at)`, `then` afterwards.
    pub fn switching(first: ActionMixture, switch_at: f64, then: ActionMixture) -> Result<Self> {
        Self::new(vec![0.0, switch_at], vec![first, then])
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    /// Breakpoints `t_1 < … < t_k` (excluding `t_0 = 0`).
    pub fn breakpoints(&self) -> &[f64] {
        &self.starts[1..]
    }

    pub fn pieces(&self) -> &[ActionMixture] {
        &self.pieces
    }

    pub fn dim(&self) -> usize {
        self.pieces[0].dim()
    }

    pub fn piece_index_at(&self, t: f64) -> usize {
        self.starts.partition_point(|&s| s <= t).saturating_sub(1)
    }

    pub fn mixture_at(&self, t: f64) -> &ActionMixture {
        &self.pieces[self.piece_index_at(t)]
    }

    pub fn piece_end(&self, i: usize) -> f64 {
        self.starts.get(i + 1).copied().unwrap_or(f64::INFINITY)
    }

    pub fn check_within(&self, bounds: &ActionBox) -> Result<()> {
        if self.dim() != bounds.dim() {
            return Err(Error::InvalidControl(format!(
                "control has action dimension {}, box has {}",
                self.dim(),
                bounds.dim()
            )));
        }
        self.pieces.iter().try_for_each(|p| p.check_within(bounds))
    }

    /// `∫_0^t Σ w·a ds`, the displacement of a unit velocity drift.
    pub fn integrated_mean(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.add_integrated_mean(t, &mut out);
        out
    }

    /// Adds `∫_0^t Σ w·a ds` to `out`.
    #[inline]
    pub fn add_integrated_mean(&self, t: f64, out: &mut [f64]) {
        for (i, piece) in self.pieces.iter().enumerate() {
            let start = self.starts[i];
            if start >= t {
                break;
            }
            let len = self.piece_end(i).min(t) - start;
            for atom in piece.atoms() {
                for (o, a) in out.iter_mut().zip(&atom.action) {
                    *o += atom.weight * a * len;
                }
            }
        }
    }
}

fn fmt_action(f: &mut fmt::Formatter<'_>, action: &[f64]) -> fmt::Result {
    for (i, a) in action.iter().enumerate() {
        if i > 0 {
            write!(f, " ")?;
        }
        write!(f, "{a}")?;
    }
    Ok(())
}

impl fmt::Display for ActionMixture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, atom) in self.atoms.iter().enumerate() {
            if i > 0 {
                write!(f, "|")?;
            }
            fmt_action(f, &atom.action)?;
            if self.atoms.len() > 1 {
                write!(f, "*{}", atom.weight)?;
            }
        }
        Ok(())
    }
}

/// Text form: `start:mixture;start:mixture…`, mixture `a*w|a*w`, vector
/// actions space separated. A bare mixture means a constant control.
impl fmt::Display for RelaxedControl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (start, piece)) in self.starts.iter().zip(&self.pieces).enumerate() {
            if i > 0 {
                write!(f, ";")?;
            }
            write!(f, "{start}:{piece}")?;
        }
        Ok(())
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("bad number {s:?}: {e}")))
}

impl FromStr for ActionMixture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut atoms = Vec::new();
        for part in s.split('|') {
            let (action, weight) = match part.split_once('*') {
                Some((a, w)) => (a, parse_f64(w)?),
                None => (part, 1.0),
            };
            let action = action
                .split_whitespace()
                .map(parse_f64)
                .collect::<Result<Vec<_>>>()?;
            if action.is_empty() {
                return Err(Error::Parse(format!("empty action in {s:?}")));
            }
            atoms.push(Atom { action, weight });
        }
        ActionMixture::new(atoms)
    }
}

impl FromStr for RelaxedControl {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if !s.contains(':') {
            return Ok(Self::constant(s.parse()?));
        }
        let mut starts = Vec::new();
        let mut pieces = Vec::new();
        for part in s.split(';') {
            let (start, mixture) = part
                .split_once(':')
                .ok_or_else(|| Error::Parse(format!("piece {part:?} lacks a start time")))?;
            starts.push(parse_f64(start)?);
            pieces.push(mixture.parse()?);
        }
        Self::new(starts, pieces)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn piece_lookup_is_right_continuous() {
        let r = RelaxedControl::switching(
            ActionMixture::point(vec![1.0]),
            0.5,
            ActionMixture::point(vec![0.0]),
        )
        .unwrap();
        assert_eq!(r.piece_index_at(0.0), 0);
        assert_eq!(r.piece_index_at(0.4999), 0);
        assert_eq!(r.piece_index_at(0.5), 1);
        assert_eq!(r.piece_index_at(100.0), 1);
        assert_eq!(r.integrated_mean(2.0), vec![0.5]);
        assert_eq!(r.integrated_mean(0.25), vec![0.25]);
    }

    #[test]
    fn rejects_bad_breakpoints_and_weights() {
        let m = ActionMixture::point(vec![0.0]);
        assert!(RelaxedControl::new(vec![0.0, 1.0, 1.0], vec![m.clone(), m.clone(), m.clone()])
            .is_err());
        assert!(RelaxedControl::new(vec![0.5], vec![m.clone()]).is_err());
        assert!(RelaxedControl::new(vec![0.0, 1.0], vec![m]).is_err());
        let bad = ActionMixture::new(vec![
            Atom { action: vec![0.0], weight: 0.5 },
            Atom { action: vec![1.0], weight: 0.4 },
        ]);
        assert!(bad.is_err());
    }

    #[test]
    fn out_of_box_actions_are_errors_not_clamped() {
        let bounds = ActionBox::interval(-1.0, 1.0).unwrap();
        let r = RelaxedControl::constant_action(vec![1.5]);
        assert!(matches!(r.check_within(&bounds), Err(Error::ActionOutOfBounds { .. })));
        RelaxedControl::constant_action(vec![1.0]).check_within(&bounds).unwrap();
    }

    #[test]
    fn text_form_round_trips() {
        let r: RelaxedControl = "0:1;0.5:-1*0.25|1*0.75;2:0".parse().unwrap();
        assert_eq!(r.starts(), &[0.0, 0.5, 2.0]);
        assert_eq!(r.pieces()[1].atoms().len(), 2);
        let back: RelaxedControl = r.to_string().parse().unwrap();
        assert_eq!(back, r);
        let c: RelaxedControl = "-1".parse().unwrap();
        assert_eq!(c, RelaxedControl::constant_action(vec![-1.0]));
    }
}
