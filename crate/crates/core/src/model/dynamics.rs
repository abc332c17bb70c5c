//! Controlled flow `Φ^r`, hazard integral `Λ^r` and `Γ^r = βt + Λ^r`.

use super::{ActionMixture, Drift, Hazard, PopdmpModel, RelaxedControl, VectorField};
use crate::error::{Error, Result};

/// `Σ w · b(y, a)` over the atoms of `m`.
pub fn mixture_velocity(field: &VectorField, y: &[f64], m: &ActionMixture) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    let mut buf = vec![0.0; y.len()];
    accumulate_velocity(field, y, m, &mut buf, &mut out);
    out
}

#[inline]
fn accumulate_velocity(
    field: &VectorField,
    y: &[f64],
    m: &ActionMixture,
    buf: &mut [f64],
    out: &mut [f64],
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for atom in m.atoms() {
        field(y, &atom.action, buf);
        for (o, b) in out.iter_mut().zip(buf.iter()) {
            *o += atom.weight * b;
        }
    }
}

/// `Φ^r(y, t)`.
pub fn flow(model: &PopdmpModel, y: &[f64], r: &RelaxedControl, t: f64) -> Result<Vec<f64>> {
    check_time(t)?;
    if t == 0.0 {
        return Ok(y.to_vec());
    }
    match model.drift() {
        Drift::ClosedForm(phi) => {
            let mut out = vec![0.0; y.len()];
            phi(y, r, t, &mut out);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationDiverged { t });
            }
            Ok(out)
        }
        Drift::VectorField(_) => {
            let mut path = ControlledPath::new(model, y, r);
            path.advance_to(t)?;
            Ok(path.state().to_vec())
        }
    }
}

/// `Λ^r(y, t) = ∫_0^t Σ w·λ^A(Φ^r(y, s), a) ds`.
pub fn big_lambda(model: &PopdmpModel, y: &[f64], r: &RelaxedControl, t: f64) -> Result<f64> {
    check_time(t)?;
    let mut path = ControlledPath::new(model, y, r);
    path.advance_to(t)?;
    Ok(path.big_lambda())
}

/// `Γ^r(y, t) = β t + Λ^r(y, t)`.
pub fn gamma(model: &PopdmpModel, y: &[f64], r: &RelaxedControl, t: f64) -> Result<f64> {
    Ok(model.discount() * t + big_lambda(model, y, r, t)?)
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidParameter(format!("time must be finite and >= 0, got {t}")));
    }
    Ok(())
}

/// Forward-only cursor along `t ↦ (Φ^r(y, t), Λ^r(y, t))`.
///
/// Vector fields are integrated by RK4 with step `h_ode`, never stepping across
/// a control breakpoint; `Λ` rides along as an extra component. Closed-form
/// flows integrate `Λ` by composite Simpson with step `h_quad`.
pub struct ControlledPath<'a> {
    model: &'a PopdmpModel,
    control: &'a RelaxedControl,
    origin: Vec<f64>,
    state: Vec<f64>,
    t: f64,
    lambda: f64,
    piece: usize,
    scratch: Scratch,
}

struct Scratch {
    k: [Vec<f64>; 4],
    tmp: Vec<f64>,
    buf: Vec<f64>,
}

impl<'a> ControlledPath<'a> {
    pub fn new(model: &'a PopdmpModel, y: &[f64], control: &'a RelaxedControl) -> Self {
        let n = y.len();
        Self {
            model,
            control,
            origin: y.to_vec(),
            state: y.to_vec(),
            t: 0.0,
            lambda: 0.0,
            piece: 0,
            scratch: Scratch {
                k: [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]],
                tmp: vec![0.0; n],
                buf: vec![0.0; n],
            },
        }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn big_lambda(&self) -> f64 {
        self.lambda
    }

    /// `Γ^r(y, t)` at the current time.
    pub fn gamma(&self) -> f64 {
        self.model.discount() * self.t + self.lambda
    }

    /// Index of the control piece active at the current time (right-continuous).
    pub fn piece(&self) -> usize {
        self.piece
    }

    pub fn control(&self) -> &RelaxedControl {
        self.control
    }

    pub fn advance_to(&mut self, target: f64) -> Result<()> {
        if !target.is_finite() || target < self.t {
            return Err(Error::InvalidParameter(format!(
                "path at t = {} cannot move to {target}",
                self.t
            )));
        }
        while self.t < target {
            let piece_end = self.control.piece_end(self.piece);
            let seg_end = target.min(piece_end);
            self.integrate_segment(seg_end)?;
            self.t = seg_end;
            while self.control.piece_end(self.piece) <= self.t {
                self.piece += 1;
            }
        }
        Ok(())
    }

    fn integrate_segment(&mut self, end: f64) -> Result<()> {
        let model = self.model;
        let mixture = &self.control.pieces()[self.piece];
        let start = self.t;
        let len = end - start;
        if len <= 0.0 {
            return Ok(());
        }
        match model.drift() {
            Drift::ClosedForm(phi) => {
                match model.hazard() {
                    Hazard::Constant(l) => self.lambda += l * len,
                    Hazard::Function { .. } => {
                        let n = (len / model.numerics().h_quad).ceil().max(1.0) as usize;
                        let h = len / n as f64;
                        let buf = &mut self.scratch.buf;
                        let mut rate_at = |t: f64| {
                            phi(&self.origin, self.control, t, buf);
                            model.mixture_hazard(buf, mixture)
                        };
                        let mut left = rate_at(start);
                        let mut acc = 0.0;
                        for i in 0..n {
                            let a = start + i as f64 * h;
                            let b = if i + 1 == n { end } else { a + h };
                            let mid = rate_at(0.5 * (a + b));
                            let right = rate_at(b);
                            acc += (b - a) / 6.0 * (left + 4.0 * mid + right);
                            left = right;
                        }
                        self.lambda += acc;
                    }
                }
                phi(&self.origin, self.control, end, &mut self.state);
                if self.state.iter().any(|v| !v.is_finite()) || !self.lambda.is_finite() {
                    return Err(Error::IntegrationDiverged { t: end });
                }
            }
            Drift::VectorField(field) => {
                let n = (len / model.numerics().h_ode).ceil().max(1.0) as usize;
                let h = len / n as f64;
                for i in 0..n {
                    let t = start + i as f64 * h;
                    self.rk4_step(field.as_ref(), mixture, h);
                    if self.state.iter().any(|v| !v.is_finite()) || !self.lambda.is_finite() {
                        return Err(Error::IntegrationDiverged { t: t + h });
                    }
                }
            }
        }
        Ok(())
    }

    fn rk4_step(&mut self, field: &VectorField, m: &ActionMixture, h: f64) {
        let model = self.model;
        let Scratch { k, tmp, buf } = &mut self.scratch;
        let y = &mut self.state;
        let [k1, k2, k3, k4] = k;

        accumulate_velocity(field, y, m, buf, k1);
        let l1 = model.mixture_hazard(y, m);
        for ((t, y), k) in tmp.iter_mut().zip(y.iter()).zip(k1.iter()) {
            *t = y + 0.5 * h * k;
        }
        accumulate_velocity(field, tmp, m, buf, k2);
        let l2 = model.mixture_hazard(tmp, m);
        for ((t, y), k) in tmp.iter_mut().zip(y.iter()).zip(k2.iter()) {
            *t = y + 0.5 * h * k;
        }
        accumulate_velocity(field, tmp, m, buf, k3);
        let l3 = model.mixture_hazard(tmp, m);
        for ((t, y), k) in tmp.iter_mut().zip(y.iter()).zip(k3.iter()) {
            *t = y + h * k;
        }
        accumulate_velocity(field, tmp, m, buf, k4);
        let l4 = model.mixture_hazard(tmp, m);
        for i in 0..y.len() {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        self.lambda += h / 6.0 * (l1 + 2.0 * l2 + 2.0 * l3 + l4);
    }
}
