//! Piecewise-linear tables over a scalar coordinate, constant beyond the ends.

use crate::error::{Error, Result};

fn check_breakpoints(xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::InvalidModel("table needs at least one breakpoint".into()));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("table breakpoints"));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidModel("table breakpoints must be strictly increasing".into()));
    }
    Ok(())
}

/// Segment index `i` and local coordinate `t ∈ [0, 1]` with
/// `x = xs[i] + t (xs[i+1] − xs[i])`; `None` outside the table range.
#[inline]
fn locate(xs: &[f64], x: f64) -> Option<(usize, f64)> {
    let n = xs.len();
    if n < 2 || x <= xs[0] || x >= xs[n - 1] {
        return None;
    }
    let i = xs.partition_point(|&b| b <= x) - 1;
    Some((i, (x - xs[i]) / (xs[i + 1] - xs[i])))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinear {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        check_breakpoints(&xs)?;
        if xs.len() != ys.len() || ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidModel("table values must be finite, one per breakpoint".into()));
        }
        Ok(Self { xs, ys })
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.xs
    }

    pub fn values(&self) -> &[f64] {
        &self.ys
    }

    pub fn min(&self) -> f64 {
        self.ys.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.ys.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        match locate(&self.xs, x) {
            Some((i, t)) => self.ys[i] + t * (self.ys[i + 1] - self.ys[i]),
            None if x <= self.xs[0] => self.ys[0],
            None => self.ys[self.ys.len() - 1],
        }
    }
}

/// Rows of probability vectors interpolated linearly between breakpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseLinearRows {
    xs: Vec<f64>,
    rows: Vec<Vec<f64>>,
}

impl PiecewiseLinearRows {
    /// Every row must be a probability vector (sum within `1e-12`).
    pub fn new(xs: Vec<f64>, rows: Vec<Vec<f64>>) -> Result<Self> {
        check_breakpoints(&xs)?;
        if xs.len() != rows.len() {
            return Err(Error::InvalidModel("kernel table needs one row per breakpoint".into()));
        }
        let width = rows[0].len();
        for (x, row) in xs.iter().zip(&rows) {
            if row.len() != width || row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::InvalidModel(format!("kernel row at {x} is malformed")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidModel(format!(
                    "kernel row at {x} sums to {total}, expected 1"
                )));
            }
        }
        Ok(Self { xs, rows })
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.xs
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    #[inline]
    pub fn eval_into(&self, x: f64, out: &mut [f64]) {
        match locate(&self.xs, x) {
            Some((i, t)) => {
                let (lo, hi) = (&self.rows[i], &self.rows[i + 1]);
                for ((o, a), b) in out.iter_mut().zip(lo).zip(hi) {
                    *o = a + t * (b - a);
                }
            }
            None => {
                let row = if x <= self.xs[0] { &self.rows[0] } else { &self.rows[self.rows.len() - 1] };
                out.copy_from_slice(row);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolates_and_extrapolates_flat() {
        let c = PiecewiseLinear::new(vec![-2.0, -1.5, 1.5, 2.0], vec![10.0, 0.0, 0.0, 10.0]).unwrap();
        assert_eq!(c.eval(-5.0), 10.0);
        assert_eq!(c.eval(-1.75), 5.0);
        assert_eq!(c.eval(-1.5), 0.0);
        assert_eq!(c.eval(0.3), 0.0);
        assert!((c.eval(1.9) - 8.0).abs() < 1e-12);
        assert_eq!(c.eval(3.0), 10.0);
    }

    #[test]
    fn flat_rows_are_exact() {
        let q = PiecewiseLinearRows::new(
            vec![0.0, 1.0, 2.0],
            vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]],
        )
        .unwrap();
        let mut out = [0.0; 2];
        q.eval_into(0.3, &mut out);
        assert_eq!(out, [1.0, 0.0]);
        q.eval_into(1.25, &mut out);
        assert_eq!(out, [0.75, 0.25]);
        assert!(PiecewiseLinearRows::new(vec![0.0], vec![vec![0.5, 0.4]]).is_err());
    }
}
