//! Belief-simplex grid, barycentric interpolation, value iteration and
//! policy extraction.
//!
//! Grid points are the beliefs with coordinates in `{0, 1/K, …, 1}`, ranked
//! in lexicographic order of their count vectors. Interpolation uses the
//! Kuhn (Freudenthal) triangulation in cumulative coordinates
//! `z_j = K·(ρ_1 + … + ρ_j)`, which is exact on affine functions.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filter::{Belief, RegularizationKernel};
use crate::mdp::{argmin_with_ties, ControlFamily, FilteredMdp, StageQuadrature, TransitionTable, ValueFunction};
use crate::model::{DiscretePolicy, PopdmpModel, RelaxedControl};

/// Largest grid [`SimplexGrid::build`] accepts.
pub const MAX_GRID_POINTS: u128 = 10_000_000;

// Integer coordinates within this distance snap, so grid points interpolate
// to their own stored value exactly.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexGrid {
    d: usize,
    k: usize,
    points: Vec<f64>,
    // compositions[m][p] = number of ways to write m as p ordered nonnegative parts
    compositions: Vec<Vec<usize>>,
}

fn binomial_saturating(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul(n - i) {
            Some(v) => v / (i + 1),
            None => return u128::MAX,
        };
    }
    acc
}

impl SimplexGrid {
    pub fn build(d: usize, k: usize) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::InvalidParameter("grid needs d ≥ 1 and K ≥ 1".into()));
        }
        let count = binomial_saturating((k + d - 1) as u128, (d - 1) as u128);
        if count > MAX_GRID_POINTS {
            return Err(Error::GridTooLarge { points: count, limit: MAX_GRID_POINTS });
        }
        let mut compositions = vec![vec![0usize; d + 1]; k + 1];
        for (m, row) in compositions.iter_mut().enumerate() {
            row[1] = 1;
            row[0] = usize::from(m == 0);
        }
        for p in 2..=d {
            for m in 0..=k {
                compositions[m][p] = (0..=m).map(|j| compositions[m - j][p - 1]).sum();
            }
        }
        let mut points = Vec::with_capacity(count as usize * d);
        let mut counts = vec![0usize; d];
        Self::enumerate(&mut counts, 0, k, &mut |c| {
            points.extend(c.iter().map(|&n| n as f64 / k as f64));
        });
        Ok(Self { d, k, points, compositions })
    }

    fn enumerate(counts: &mut [usize], i: usize, rem: usize, emit: &mut impl FnMut(&[usize])) {
        if i + 1 == counts.len() {
            counts[i] = rem;
            emit(counts);
            return;
        }
        for n in 0..=rem {
            counts[i] = n;
            Self::enumerate(counts, i + 1, rem - n, emit);
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn subdivisions(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.d..(i + 1) * self.d]
    }

    pub fn belief(&self, i: usize) -> Belief {
        Belief::from_normalized_unchecked(self.point(i).to_vec())
    }

    /// Index of the grid point with the given counts (summing to `K`).
    pub fn rank(&self, counts: &[usize]) -> usize {
        let mut rank = 0;
        let mut rem = self.k;
        for (i, &n) in counts.iter().enumerate().take(self.d - 1) {
            let parts = self.d - i - 1;
            for j in 0..n {
                rank += self.compositions[rem - j][parts];
            }
            rem -= n;
        }
        rank
    }

    /// Grid vertices and barycentric weights of the Kuhn simplex holding
    /// `probs`; zero weights are omitted.
    pub fn locate(&self, probs: &[f64]) -> Vec<(usize, f64)> {
        let mut out = Vec::with_capacity(self.d);
        self.locate_into(probs, &mut LocateScratch::default(), &mut out);
        out
    }

    pub fn locate_into(&self, probs: &[f64], s: &mut LocateScratch, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let m = self.d - 1;
        if m == 0 {
            out.push((0, 1.0));
            return;
        }
        let kf = self.k as f64;
        s.base.clear();
        s.frac.clear();
        let mut cum = 0.0;
        let mut prev = 0.0f64;
        for &p in &probs[..m] {
            cum += p;
            let mut z = (kf * cum).clamp(0.0, kf);
            let r = z.round();
            if (z - r).abs() < SNAP {
                z = r;
            }
            z = z.max(prev);
            prev = z;
            let b = (z.floor() as usize).min(self.k - 1);
            s.base.push(b);
            s.frac.push(z - b as f64);
        }
        s.order.clear();
        s.order.extend(0..m);
        let frac = &s.frac;
        s.order.sort_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(b.cmp(&a)));

        let first = 1.0 - s.frac[s.order[0]];
        if first > 0.0 {
            out.push((self.rank_cumulative(&s.base, &mut s.counts), first));
        }
        for step in 0..m {
            let axis = s.order[step];
            s.base[axis] += 1;
            let w = if step + 1 < m { s.frac[axis] - s.frac[s.order[step + 1]] } else { s.frac[axis] };
            if w > 0.0 {
                out.push((self.rank_cumulative(&s.base, &mut s.counts), w));
            }
        }
    }

    fn rank_cumulative(&self, z: &[usize], counts: &mut Vec<usize>) -> usize {
        counts.clear();
        let mut prev = 0;
        for &zj in z {
            counts.push(zj - prev);
            prev = zj;
        }
        counts.push(self.k - prev);
        self.rank(counts)
    }
}

/// Reusable buffers for [`SimplexGrid::locate_into`].
#[derive(Debug, Default, Clone)]
pub struct LocateScratch {
    base: Vec<usize>,
    frac: Vec<f64>,
    order: Vec<usize>,
    counts: Vec<usize>,
}

/// Values (and greedy candidate indices) on a simplex grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub grid: Arc<SimplexGrid>,
    pub values: Vec<f64>,
    pub argmins: Vec<usize>,
}

impl ValueGrid {
    pub fn constant(grid: Arc<SimplexGrid>, c: f64) -> Self {
        let n = grid.len();
        Self { grid, values: vec![c; n], argmins: vec![0; n] }
    }

    pub fn interpolate(&self, rho: &Belief) -> f64 {
        self.interpolate_probs(rho.probs())
    }

    pub fn interpolate_probs(&self, probs: &[f64]) -> f64 {
        self.grid.locate(probs).iter().map(|&(i, w)| w * self.values[i]).sum()
    }

    /// Grid point carrying the largest barycentric weight (first on ties).
    pub fn nearest(&self, rho: &Belief) -> usize {
        let mut best = (usize::MAX, f64::NEG_INFINITY);
        for (i, w) in self.grid.locate(rho.probs()) {
            if w > best.1 {
                best = (i, w);
            }
        }
        best.0
    }

    pub fn sup_distance(&self, other: &ValueGrid) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

impl ValueFunction for ValueGrid {
    fn value(&self, belief: &Belief) -> f64 {
        self.interpolate(belief)
    }
}

/// Linear form `ĝ(ρ_p, r_c) + Σ w v(vertex)` of the Bellman operator at every
/// grid point `p` and candidate `c`.
pub struct Stencils {
    candidates: usize,
    stage: Vec<f64>,
    offsets: Vec<usize>,
    vertices: Vec<u32>,
    weights: Vec<f64>,
}

struct PointRows {
    stage: Vec<f64>,
    lens: Vec<usize>,
    vertices: Vec<u32>,
    weights: Vec<f64>,
}

impl Stencils {
    /// `table(p, c)` is the transition table of candidate `c` at grid point `p`.
    pub fn build<'t>(
        model: &PopdmpModel,
        grid: &SimplexGrid,
        candidates: usize,
        table: impl Fn(usize, usize) -> &'t TransitionTable + Sync,
    ) -> Self {
        let rows: Vec<PointRows> = (0..grid.len())
            .into_par_iter()
            .map_init(
                || (vec![0.0; grid.len()], Vec::new(), LocateScratch::default(), Vec::new()),
                |(acc, touched, scratch, located), p| {
                    let rho = grid.belief(p);
                    let mut rows = PointRows {
                        stage: Vec::with_capacity(candidates),
                        lens: Vec::with_capacity(candidates),
                        vertices: Vec::new(),
                        weights: Vec::new(),
                    };
                    for c in 0..candidates {
                        let t = table(p, c);
                        rows.stage.push(t.stage_cost_belief(&rho));
                        t.for_each_transition(model, &rho, |w, next| {
                            grid.locate_into(next, scratch, located);
                            for &(v, lam) in located.iter() {
                                if acc[v] == 0.0 {
                                    touched.push(v);
                                }
                                acc[v] += w * lam;
                            }
                        });
                        touched.sort_unstable();
                        rows.lens.push(touched.len());
                        for &v in touched.iter() {
                            rows.vertices.push(v as u32);
                            rows.weights.push(acc[v]);
                            acc[v] = 0.0;
                        }
                        touched.clear();
                    }
                    rows
                },
            )
            .collect();

        let mut out = Stencils {
            candidates,
            stage: Vec::with_capacity(grid.len() * candidates),
            offsets: vec![0],
            vertices: Vec::new(),
            weights: Vec::new(),
        };
        for r in rows {
            out.stage.extend(r.stage);
            for len in r.lens {
                out.offsets.push(out.offsets.last().unwrap() + len);
            }
            out.vertices.extend(r.vertices);
            out.weights.extend(r.weights);
        }
        out
    }

    pub fn candidates(&self) -> usize {
        self.candidates
    }

    /// `(L v)(ρ_p, r_c)`.
    pub fn apply(&self, values: &[f64], p: usize, c: usize) -> f64 {
        let row = p * self.candidates + c;
        let (lo, hi) = (self.offsets[row], self.offsets[row + 1]);
        let next: f64 = self.vertices[lo..hi]
            .iter()
            .zip(&self.weights[lo..hi])
            .map(|(&v, w)| w * values[v as usize])
            .sum();
        self.stage[row] + next
    }

    /// One Jacobi sweep of `T` against the snapshot `values`.
    pub fn sweep(&self, values: &[f64]) -> (Vec<f64>, Vec<usize>) {
        let points = self.stage.len() / self.candidates.max(1);
        (0..points)
            .into_par_iter()
            .map_init(
                || vec![0.0; self.candidates],
                |buf, p| {
                    for (c, b) in buf.iter_mut().enumerate() {
                        *b = self.apply(values, p, c);
                    }
                    argmin_with_ties(buf)
                },
            )
            .unzip()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-4, max_iter: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// `‖V_{n+1} − V_n‖_∞` for every sweep.
    pub residuals: Vec<f64>,
    /// `‖T V − V‖_∞` at the returned `V`.
    pub final_residual: f64,
    pub wall_time: Duration,
    pub converged: bool,
}

impl SolveReport {
    /// Largest ratio of consecutive residuals among those above `floor`.
    pub fn max_residual_ratio(&self, floor: f64) -> f64 {
        self.residuals
            .windows(2)
            .filter(|w| w[0] > floor && w[1] > floor)
            .map(|w| w[1] / w[0])
            .fold(0.0, f64::max)
    }
}

fn sup_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Iterates a precomputed Bellman operator from `V₀ ≡ 0`.
pub fn iterate_stencils(stencils: &Stencils, grid: Arc<SimplexGrid>, cfg: &SolverConfig) -> Result<(ValueGrid, SolveReport)> {
    if cfg.tol.is_nan() || cfg.tol <= 0.0 {
        return Err(Error::InvalidParameter("tol must be > 0".into()));
    }
    let start = Instant::now();
    let mut values = vec![0.0; grid.len()];
    let mut residuals = Vec::new();
    let mut converged = false;
    while residuals.len() < cfg.max_iter {
        let (next, _) = stencils.sweep(&values);
        let r = sup_gap(&next, &values);
        values = next;
        residuals.push(r);
        if !r.is_finite() {
            return Err(Error::NonFinite("value iterate"));
        }
        if r < cfg.tol {
            converged = true;
            break;
        }
    }
    let (image, argmins) = stencils.sweep(&values);
    let final_residual = sup_gap(&image, &values);
    let report = SolveReport {
        iterations: residuals.len(),
        residuals,
        final_residual,
        wall_time: start.elapsed(),
        converged,
    };
    Ok((ValueGrid { grid, values, argmins }, report))
}

/// Value iteration of `T` over the MDP's control family on `grid`.
pub fn value_iteration(mdp: &FilteredMdp, grid: Arc<SimplexGrid>, cfg: &SolverConfig) -> Result<(ValueGrid, SolveReport)> {
    check_dims(mdp.model(), &grid)?;
    let start = Instant::now();
    let stencils = Stencils::build(mdp.model(), &grid, mdp.family().len(), |_p, c| mdp.table(c));
    let (vg, mut report) = iterate_stencils(&stencils, grid, cfg)?;
    report.wall_time = start.elapsed();
    Ok((vg, report))
}

fn check_dims(model: &PopdmpModel, grid: &SimplexGrid) -> Result<()> {
    if grid.dim() != model.num_states() {
        return Err(Error::InvalidParameter(format!(
            "grid dimension {} does not match {} post-jump states",
            grid.dim(),
            model.num_states()
        )));
    }
    Ok(())
}

/// Fixed point of `T_f` on the grid for a stationary policy `f`.
pub fn evaluate_policy_on_grid(
    mdp: &FilteredMdp,
    grid: Arc<SimplexGrid>,
    policy: &dyn DiscretePolicy,
    cfg: &SolverConfig,
) -> Result<(ValueGrid, SolveReport)> {
    check_dims(mdp.model(), &grid)?;
    let mut controls: Vec<RelaxedControl> = Vec::new();
    let mut assignment = Vec::with_capacity(grid.len());
    for p in 0..grid.len() {
        let c = policy.control(&grid.belief(p));
        let idx = match controls.iter().position(|k| *k == c) {
            Some(i) => i,
            None => {
                controls.push(c);
                controls.len() - 1
            }
        };
        assignment.push(idx);
    }
    let tables = controls.par_iter().map(|c| mdp.table_for(c)).collect::<Result<Vec<_>>>()?;
    let stencils = Stencils::build(mdp.model(), &grid, 1, |p, _| &tables[assignment[p]]);
    let (mut vg, report) = iterate_stencils(&stencils, grid, cfg)?;
    vg.argmins = assignment;
    Ok((vg, report))
}

/// Stationary policy read off a solved value grid.
#[derive(Debug, Clone)]
pub struct GridPolicy {
    values: ValueGrid,
    candidates: Vec<RelaxedControl>,
}

impl GridPolicy {
    pub fn new(values: ValueGrid, family: &ControlFamily) -> Self {
        Self { values, candidates: family.candidates().to_vec() }
    }

    pub fn values(&self) -> &ValueGrid {
        &self.values
    }

    /// Candidate index used at `rho`: the greedy choice of the grid point with
    /// the largest barycentric weight.
    pub fn candidate_index(&self, rho: &Belief) -> usize {
        self.values.argmins[self.values.nearest(rho)]
    }

    /// Exact re-minimization of `L V` at an arbitrary belief.
    pub fn reoptimize(&self, mdp: &FilteredMdp, rho: &Belief) -> (f64, usize) {
        mdp.t_operator(&self.values, rho)
    }
}

impl DiscretePolicy for GridPolicy {
    fn control(&self, belief: &Belief) -> RelaxedControl {
        self.candidates[self.candidate_index(belief)].clone()
    }
}

pub fn extract_policy(values: &ValueGrid, family: &ControlFamily) -> GridPolicy {
    GridPolicy::new(values.clone(), family)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub sigma: f64,
    /// `‖V_σ − V_plain‖_∞` on the grid.
    pub gap: f64,
    /// Fraction of grid points whose greedy candidate matches the plain one.
    pub agreement: f64,
    pub report: SolveReport,
}

/// Solves once with the plain filter and once per `σ`, comparing each
/// regularized solution to the plain one.
pub fn sigma_sweep(
    model: &PopdmpModel,
    grid: Arc<SimplexGrid>,
    family: &ControlFamily,
    quad: StageQuadrature,
    sigmas: &[f64],
    cfg: &SolverConfig,
) -> Result<(ValueGrid, Vec<SweepRow>)> {
    if model.hazard_controlled() {
        return Err(Error::InvalidParameter("the plain filter is unavailable for a controlled hazard".into()));
    }
    let plain_mdp = FilteredMdp::new(model, family, quad, None)?;
    let (plain, _) = value_iteration(&plain_mdp, grid.clone(), cfg)?;
    drop(plain_mdp);
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mdp = FilteredMdp::new(model, family, quad, Some(RegularizationKernel::gaussian(sigma)?))?;
        let (vg, report) = value_iteration(&mdp, grid.clone(), cfg)?;
        let same = vg.argmins.iter().zip(&plain.argmins).filter(|(a, b)| a == b).count();
        rows.push(SweepRow {
            sigma,
            gap: vg.sup_distance(&plain),
            agreement: same as f64 / grid.len() as f64,
            report,
        });
    }
    Ok((plain, rows))
}
