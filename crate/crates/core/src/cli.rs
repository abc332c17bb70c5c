//! Configuration files and the `popdmp` command-line front end.
//!
//! A run is described by a TOML file:
//!
//! ```toml
//! output_dir = "out"
//!
//! [model]
//! builtin = "particle-steering"   # or an [model.inline] table
//! discount = 1.0                  # β, default 1
//! initial = "noise-posterior"     # or "uniform"
//!
//! [solver]
//! grid_k = 40
//! tol = 1e-4
//! max_iter = 200
//! sigma = "plain"                 # or a bandwidth such as 0.1
//!
//! [sim]
//! n_traj = 100000
//! seed = 1
//! ```
//!
//! Every omitted field takes its default, and the fully resolved file is
//! written next to the outputs as `resolved.toml`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{filter_trajectory, Belief, FilterEvent, RegularizationKernel};
use crate::mdp::{ControlFamily, FilteredMdp, StageQuadrature};
use crate::model::{
    ActionBox, ConstantPolicy, DiscretePolicy, InitialRule, NoiseModel, PiecewiseLinear,
    PiecewiseLinearRows, PopdmpModel, RelaxedControl,
};
use crate::numfmt::sig9;
use crate::sim::{cross_check, evaluate_policy_mc, simulate_trajectory, RngStream, SimConfig, Start};
use crate::solver::{extract_policy, sigma_sweep, value_iteration, SimplexGrid, SolveReport, SolverConfig, ValueGrid};

pub const PARTICLE_STEERING_NAME: &str = "particle-steering";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub filter: FilterSection,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<InlineModel>,
    pub discount: Option<f64>,
    pub initial: Option<String>,
}

/// One-dimensional model with velocity `speed · a`, piecewise-linear cost
/// and jump-kernel tables in the position, and a hazard that is constant or
/// piecewise linear in the position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineModel {
    pub states: Vec<f64>,
    pub action_bounds: [f64; 2],
    #[serde(default = "one")]
    pub speed: f64,
    pub cost: Table,
    pub kernel: KernelTable,
    pub hazard: HazardSpec,
    pub noise: NoiseSpec,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelTable {
    pub xs: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HazardSpec {
    Constant(f64),
    Table(Table),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub offsets: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SigmaSpec {
    Bandwidth(f64),
    Named(String),
}

impl SigmaSpec {
    pub fn kernel(&self) -> Result<Option<RegularizationKernel>> {
        match self {
            SigmaSpec::Bandwidth(s) => Ok(Some(RegularizationKernel::gaussian(*s)?)),
            SigmaSpec::Named(n) if n == "plain" => Ok(None),
            SigmaSpec::Named(n) => Err(Error::ConfigValidation(format!(
                "solver.sigma: expected a bandwidth or \"plain\", got {n:?}"
            ))),
        }
    }
}

impl std::str::FromStr for SigmaSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "plain" {
            return Ok(SigmaSpec::Named(s.into()));
        }
        s.parse()
            .map(SigmaSpec::Bandwidth)
            .map_err(|_| Error::Parse(format!("sigma must be a number or \"plain\", got {s:?}")))
    }
}

/// Constant controls for `actions`, then `a` on `[0, τ)` followed by `rest`
/// for each `a ≠ rest` and each switch time, then any explicit `controls`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub actions: Vec<f64>,
    pub switch_times: Vec<f64>,
    pub rest: f64,
    #[serde(default)]
    pub controls: Vec<String>,
}

impl Default for FamilySpec {
    fn default() -> Self {
        Self {
            actions: vec![0.0, 1.0, -1.0],
            switch_times: (1..=20).map(|i| i as f64 / 10.0).collect(),
            rest: 0.0,
            controls: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub grid_k: Option<usize>,
    pub tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub sigma: Option<SigmaSpec>,
    pub tail_tol: Option<f64>,
    pub quad_step: Option<f64>,
    pub family: Option<FamilySpec>,
    pub sweep_sigmas: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub n_traj: Option<usize>,
    pub seed: Option<u64>,
    pub horizon: Option<f64>,
    pub cost_step: Option<f64>,
    /// Initial observations for `simulate` and `crosscheck`.
    pub x0: Option<Vec<f64>>,
    /// `"solved"` or a control in the text format, e.g. `"0:1;0.5:0"`.
    pub policy: Option<String>,
    /// Absolute grid error forgiven by `crosscheck` z-scores.
    pub grid_slack: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub control: String,
    pub s: f64,
    pub x: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterSection {
    pub x0: Option<f64>,
    #[serde(default)]
    pub events: Vec<EventSpec>,
}

/// Parses and validates a configuration file, then fills in defaults.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text).map_err(|e| match e {
        Error::ConfigParse(m) => Error::ConfigParse(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let raw: RunConfig = toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
    let resolved = raw.resolved()?;
    resolved.build_model()?;
    resolved.family_for(&resolved.build_model()?)?;
    Ok(resolved)
}

fn finite(field: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::ConfigValidation(format!("{field} must be finite, got {v}")))
    }
}

fn positive(field: &str, v: f64) -> Result<f64> {
    if finite(field, v)? > 0.0 {
        Ok(v)
    } else {
        Err(Error::ConfigValidation(format!("{field} must be > 0, got {v}")))
    }
}

fn all_finite(field: &str, vs: &[f64]) -> Result<()> {
    for (i, v) in vs.iter().enumerate() {
        finite(&format!("{field}[{i}]"), *v)?;
    }
    Ok(())
}

impl RunConfig {
    /// The worked particle-steering example with every default spelled out.
    pub fn particle_steering_example() -> Self {
        let raw = RunConfig {
            output_dir: default_output_dir(),
            model: ModelConfig {
                builtin: Some(PARTICLE_STEERING_NAME.into()),
                inline: None,
                discount: None,
                initial: None,
            },
            solver: SolverSection::default(),
            sim: SimSection::default(),
            filter: FilterSection::default(),
        };
        raw.resolved().expect("example config is valid")
    }

    /// Copy with every optional field set to its effective value.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        match (&c.model.builtin, &c.model.inline) {
            (Some(name), None) if name == PARTICLE_STEERING_NAME => {}
            (Some(name), None) => {
                return Err(Error::ConfigValidation(format!(
                    "model.builtin: unknown model {name:?} (known: {PARTICLE_STEERING_NAME:?})"
                )))
            }
            (None, Some(_)) => {}
            _ => {
                return Err(Error::ConfigValidation(
                    "model: exactly one of `builtin` and `inline` must be given".into(),
                ))
            }
        }
        let beta = positive("model.discount", c.model.discount.unwrap_or(1.0))?;
        c.model.discount = Some(beta);
        let initial = c.model.initial.get_or_insert_with(|| "noise-posterior".into());
        if initial != "noise-posterior" && initial != "uniform" {
            return Err(Error::ConfigValidation(format!(
                "model.initial: expected \"noise-posterior\" or \"uniform\", got {initial:?}"
            )));
        }

        let s = &mut c.solver;
        let k = *s.grid_k.get_or_insert(40);
        if k == 0 {
            return Err(Error::ConfigValidation("solver.grid_k must be ≥ 1".into()));
        }
        positive("solver.tol", *s.tol.get_or_insert(1e-4))?;
        if *s.max_iter.get_or_insert(200) == 0 {
            return Err(Error::ConfigValidation("solver.max_iter must be ≥ 1".into()));
        }
        s.sigma.get_or_insert(SigmaSpec::Named("plain".into())).kernel()?;
        positive("solver.tail_tol", *s.tail_tol.get_or_insert(StageQuadrature::DEFAULT_TAIL_TOL))?;
        positive("solver.quad_step", *s.quad_step.get_or_insert(StageQuadrature::DEFAULT_STEP))?;
        let fam = s.family.get_or_insert_with(FamilySpec::default);
        all_finite("solver.family.actions", &fam.actions)?;
        all_finite("solver.family.switch_times", &fam.switch_times)?;
        finite("solver.family.rest", fam.rest)?;
        let sweep = s.sweep_sigmas.get_or_insert_with(|| vec![0.2, 0.1, 0.05]);
        for (i, v) in sweep.iter().enumerate() {
            positive(&format!("solver.sweep_sigmas[{i}]"), *v)?;
        }

        let m = &mut c.sim;
        if *m.n_traj.get_or_insert(100_000) == 0 {
            return Err(Error::ConfigValidation("sim.n_traj must be ≥ 1".into()));
        }
        m.seed.get_or_insert(1);
        if let Some(h) = m.horizon {
            positive("sim.horizon", h)?;
        }
        positive("sim.cost_step", *m.cost_step.get_or_insert(SimConfig::DEFAULT_COST_STEP))?;
        all_finite("sim.x0", m.x0.get_or_insert_with(|| vec![-2.0, 0.0, 2.0]))?;
        let policy = m.policy.get_or_insert_with(|| "solved".into());
        if policy != "solved" {
            policy
                .parse::<RelaxedControl>()
                .map_err(|e| Error::ConfigValidation(format!("sim.policy: {e}")))?;
        }
        finite("sim.grid_slack", *m.grid_slack.get_or_insert(0.02))?;

        let f = &mut c.filter;
        finite("filter.x0", *f.x0.get_or_insert(0.0))?;
        for (i, e) in f.events.iter().enumerate() {
            e.control
                .parse::<RelaxedControl>()
                .map_err(|err| Error::ConfigValidation(format!("filter.events[{i}].control: {err}")))?;
            positive(&format!("filter.events[{i}].s"), e.s)?;
            finite(&format!("filter.events[{i}].x"), e.x)?;
        }

        // the horizon default depends on the model, so it is filled last
        if c.sim.horizon.is_none() {
            let model = c.build_model()?;
            c.sim.horizon = Some(SimConfig::horizon_for(&model, SimConfig::DEFAULT_TRUNCATION_TOL));
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn inline_model(&self) -> InlineModel {
        match &self.model.inline {
            Some(m) => m.clone(),
            None => particle_steering_inline(),
        }
    }

    pub fn build_model(&self) -> Result<PopdmpModel> {
        let spec = self.inline_model();
        let field = |name: &str, e: Error| Error::ConfigValidation(format!("model.inline.{name}: {e}"));
        all_finite("model.inline.states", &spec.states)?;
        let speed = finite("model.inline.speed", spec.speed)?;
        let bounds = ActionBox::interval(spec.action_bounds[0], spec.action_bounds[1])
            .map_err(|e| field("action_bounds", e))?;
        let cost = PiecewiseLinear::new(spec.cost.xs.clone(), spec.cost.ys.clone()).map_err(|e| field("cost", e))?;
        if let Some(i) = spec.cost.ys.iter().position(|v| *v < 0.0) {
            return Err(Error::ConfigValidation(format!("model.inline.cost.ys[{i}] is negative")));
        }
        let c_max = spec.cost.ys.iter().copied().fold(0.0, f64::max);
        if let Some(i) = spec.kernel.rows.iter().position(|r| r.len() != spec.states.len()) {
            return Err(Error::ConfigValidation(format!(
                "model.inline.kernel.rows[{i}] has {} entries for {} states",
                spec.kernel.rows[i].len(),
                spec.states.len()
            )));
        }
        for (i, row) in spec.kernel.rows.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 || row.iter().any(|p| *p < 0.0) {
                return Err(Error::ConfigValidation(format!(
                    "model.inline.kernel.rows[{i}] must be a probability vector (sums to {sum})"
                )));
            }
        }
        let kernel =
            PiecewiseLinearRows::new(spec.kernel.xs.clone(), spec.kernel.rows.clone()).map_err(|e| field("kernel", e))?;
        let offsets: Vec<Vec<f64>> = spec.noise.offsets.iter().map(|o| vec![*o]).collect();
        let noise = NoiseModel::new(offsets, spec.noise.weights.clone()).map_err(|e| field("noise", e))?;

        let states = spec.states.iter().map(|s| vec![*s]).collect();
        let builder = PopdmpModel::builder(states, bounds)
            .closed_form_flow(move |y, r, t, out| {
                out.copy_from_slice(y);
                if speed == 1.0 {
                    r.add_integrated_mean(t, out);
                } else {
                    out[0] += speed * r.integrated_mean(t)[0];
                }
            })
            .jump_kernel(move |y, _a, out| kernel.eval_into(y[0], out))
            .noise(noise)
            .cost_rate(move |y, _a| cost.eval(y[0]), c_max)
            .discount(self.model.discount.unwrap_or(1.0));
        let builder = match &spec.hazard {
            HazardSpec::Constant(l) => builder.constant_hazard(positive("model.inline.hazard", *l)?),
            HazardSpec::Table(t) => {
                let table = PiecewiseLinear::new(t.xs.clone(), t.ys.clone()).map_err(|e| field("hazard", e))?;
                let lo = t.ys.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = t.ys.iter().copied().fold(0.0, f64::max);
                positive("model.inline.hazard.ys (minimum)", lo)?;
                builder.hazard(move |y, _a| table.eval(y[0]), lo, hi)
            }
        };
        let rule = match self.model.initial.as_deref() {
            Some("uniform") => InitialRule::Uniform,
            _ => InitialRule::NoisePosterior,
        };
        builder.build_with(rule).map_err(|e| Error::ConfigValidation(format!("model: {e}")))
    }

    pub fn family_for(&self, model: &PopdmpModel) -> Result<ControlFamily> {
        let spec = self.solver.family.clone().unwrap_or_default();
        let actions: Vec<Vec<f64>> = spec.actions.iter().map(|a| vec![*a]).collect();
        let wrap = |e: Error| Error::ConfigValidation(format!("solver.family: {e}"));
        let base = if actions.is_empty() {
            Vec::new()
        } else {
            ControlFamily::bang(&actions, &spec.switch_times, vec![spec.rest], model)
                .map_err(wrap)?
                .candidates()
                .to_vec()
        };
        let mut all = base;
        for (i, c) in spec.controls.iter().enumerate() {
            all.push(
                c.parse()
                    .map_err(|e| Error::ConfigValidation(format!("solver.family.controls[{i}]: {e}")))?,
            );
        }
        ControlFamily::new(all, model).map_err(wrap)
    }

    pub fn quadrature(&self, model: &PopdmpModel) -> Result<StageQuadrature> {
        StageQuadrature::for_model(
            model,
            self.solver.tail_tol.unwrap_or(StageQuadrature::DEFAULT_TAIL_TOL),
            self.solver.quad_step.unwrap_or(StageQuadrature::DEFAULT_STEP),
        )
    }

    pub fn solver_config(&self) -> SolverConfig {
        SolverConfig {
            tol: self.solver.tol.unwrap_or(1e-4),
            max_iter: self.solver.max_iter.unwrap_or(200),
        }
    }

    pub fn sim_config(&self, model: &PopdmpModel) -> Result<SimConfig> {
        let mut cfg = SimConfig::for_model(model);
        if let Some(h) = self.sim.horizon {
            cfg.horizon = h;
        }
        if let Some(s) = self.sim.cost_step {
            cfg.cost_step = s;
        }
        cfg.filter_kernel = self.kernel()?;
        Ok(cfg)
    }

    pub fn kernel(&self) -> Result<Option<RegularizationKernel>> {
        self.solver.sigma.clone().unwrap_or(SigmaSpec::Named("plain".into())).kernel()
    }
}

/// The particle-steering example as inline tables.
pub fn particle_steering_inline() -> InlineModel {
    let xs = vec![-2.0, -1.5, 1.5, 2.0];
    InlineModel {
        states: vec![-2.0, 0.0, 2.0],
        action_bounds: [-1.0, 1.0],
        speed: 1.0,
        cost: Table { xs: xs.clone(), ys: vec![10.0, 0.0, 0.0, 10.0] },
        kernel: KernelTable {
            xs,
            rows: vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
        },
        hazard: HazardSpec::Constant(1.0),
        noise: NoiseSpec { offsets: vec![-1.0, 0.0, 1.0], weights: vec![1.0 / 3.0; 3] },
    }
}

#[derive(Debug, Parser)]
#[command(name = "popdmp", version, about = "Solve and simulate partially observable PDMP control problems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Value iteration; writes value.csv, policy.csv and report.csv.
    Solve(Flags),
    /// Monte Carlo evaluation; writes evaluation.csv and a sample trajectory per x0.
    Simulate(Flags),
    /// Runs the filter over the configured events; writes filter.csv.
    Filter(Flags),
    /// Compares simulated and filtered-MDP policy costs; writes zscores.csv.
    Crosscheck(Flags),
    /// Regularization sweep; writes sigma_sweep.csv.
    Sweep(Flags),
    /// Prints the resolved particle-steering configuration.
    Example,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Configuration file; the particle-steering example when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, overriding `output_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub grid_k: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Bandwidth or "plain".
    #[arg(long)]
    pub sigma: Option<SigmaSpec>,
}

impl Flags {
    /// Loads the configuration and applies command-line overrides.
    pub fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => load_config(p)?,
            None => RunConfig::particle_steering_example(),
        };
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.sim.seed = Some(s);
        }
        if let Some(k) = self.grid_k {
            cfg.solver.grid_k = Some(k);
        }
        if let Some(t) = self.tol {
            cfg.solver.tol = Some(t);
        }
        if let Some(s) = &self.sigma {
            cfg.solver.sigma = Some(s.clone());
        }
        cfg.resolved()
    }
}

/// Exit code and the files written.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub exit_code: i32,
    pub files: Vec<PathBuf>,
}

struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    fn new(cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.output_dir)?;
        let mut out = Self { dir: cfg.output_dir.clone(), files: Vec::new() };
        out.write("resolved.toml", cfg.to_toml().as_bytes())?;
        Ok(out)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes)?;
        self.files.push(path);
        Ok(())
    }

    fn done(self, exit_code: i32) -> Outcome {
        Outcome { exit_code, files: self.files }
    }
}

fn csv_row(cells: &[String]) -> String {
    let mut s = cells.join(",");
    s.push('\n');
    s
}

pub fn value_csv(vg: &ValueGrid) -> String {
    let d = vg.grid.dim();
    let mut header: Vec<String> = (1..=d).map(|i| format!("rho{i}")).collect();
    header.extend(["value".to_string(), "argmin".to_string()]);
    let mut s = csv_row(&header);
    for i in 0..vg.grid.len() {
        let mut cells: Vec<String> = vg.grid.point(i).iter().map(|p| sig9(*p)).collect();
        cells.push(sig9(vg.values[i]));
        cells.push(vg.argmins[i].to_string());
        s += &csv_row(&cells);
    }
    s
}

pub fn report_csv(report: &SolveReport) -> String {
    let mut s = String::from("iteration,residual\n");
    for (i, r) in report.residuals.iter().enumerate() {
        s += &format!("{},{}\n", i + 1, sig9(*r));
    }
    s
}

pub fn family_csv(family: &ControlFamily) -> String {
    let mut s = String::from("index,control\n");
    for (i, c) in family.candidates().iter().enumerate() {
        s += &format!("{i},{c}\n");
    }
    s
}

struct Solved {
    model: PopdmpModel,
    family: ControlFamily,
    quad: StageQuadrature,
    grid: Arc<SimplexGrid>,
    values: ValueGrid,
    report: SolveReport,
}

fn solve(cfg: &RunConfig) -> Result<Solved> {
    let model = cfg.build_model()?;
    let family = cfg.family_for(&model)?;
    let quad = cfg.quadrature(&model)?;
    let grid = Arc::new(SimplexGrid::build(model.num_states(), cfg.solver.grid_k.unwrap_or(40))?);
    let mdp = FilteredMdp::new(&model, &family, quad, cfg.kernel()?)?;
    let (values, report) = value_iteration(&mdp, grid.clone(), &cfg.solver_config())?;
    drop(mdp);
    Ok(Solved { model, family, quad, grid, values, report })
}

pub fn cmd_solve(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Output::new(cfg)?;
    let s = solve(cfg)?;
    out.write("value.csv", value_csv(&s.values).as_bytes())?;
    out.write("policy.csv", family_csv(&s.family).as_bytes())?;
    out.write("report.csv", report_csv(&s.report).as_bytes())?;
    eprintln!(
        "{} sweeps, final residual {}, {:.1}s",
        s.report.iterations,
        sig9(s.report.final_residual),
        s.report.wall_time.as_secs_f64()
    );
    Ok(out.done(if s.report.converged { 0 } else { 2 }))
}

fn policy_for(cfg: &RunConfig) -> Result<(PopdmpModel, Arc<dyn DiscretePolicy>)> {
    match cfg.sim.policy.as_deref() {
        Some(text) if text != "solved" => {
            let model = cfg.build_model()?;
            let control: RelaxedControl = text.parse()?;
            control.check_within(model.action_box())?;
            Ok((model, Arc::new(ConstantPolicy(control))))
        }
        _ => {
            let s = solve(cfg)?;
            let policy = extract_policy(&s.values, &s.family);
            Ok((s.model, Arc::new(policy)))
        }
    }
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Output::new(cfg)?;
    let (model, policy) = policy_for(cfg)?;
    let sim = cfg.sim_config(&model)?;
    let seed = cfg.sim.seed.unwrap_or(1);
    let n = cfg.sim.n_traj.unwrap_or(100_000);
    let mut eval = String::from("x0,mean,stderr,n\n");
    for (i, x0) in cfg.sim.x0.clone().unwrap_or_default().into_iter().enumerate() {
        let est = evaluate_policy_mc(&model, &Start::Observation(vec![x0]), policy.as_ref(), n, seed, &sim)?;
        eval += &format!("{},{},{},{}\n", sig9(x0), sig9(est.mean), sig9(est.stderr), est.n);
        let mut rng = RngStream::new(seed, 0).rng();
        let tr = simulate_trajectory(&model, &[x0], policy.as_ref(), &mut rng, &sim)?;
        let mut buf = Vec::new();
        tr.write_csv(&model, &mut buf)?;
        out.write(&format!("trajectory_{i}.csv"), &buf)?;
    }
    out.write("evaluation.csv", eval.as_bytes())?;
    Ok(out.done(0))
}

pub fn cmd_filter(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Output::new(cfg)?;
    let model = cfg.build_model()?;
    let x0 = vec![cfg.filter.x0.unwrap_or(0.0)];
    let events = cfg
        .filter
        .events
        .iter()
        .map(|e| Ok(FilterEvent { control: e.control.parse()?, s: e.s, x: vec![e.x] }))
        .collect::<Result<Vec<_>>>()?;
    let kernel = cfg.kernel()?;
    let beliefs = filter_trajectory(&model, &x0, &events, kernel.as_ref())?;
    let d = model.num_states();
    let mut header = vec!["n".to_string()];
    header.extend((1..=d).map(|i| format!("rho{i}")));
    let mut s = csv_row(&header);
    for (n, b) in beliefs.iter().enumerate() {
        let mut cells = vec![n.to_string()];
        cells.extend(b.probs().iter().map(|p| sig9(*p)));
        s += &csv_row(&cells);
    }
    out.write("filter.csv", s.as_bytes())?;
    Ok(out.done(0))
}

pub fn cmd_crosscheck(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Output::new(cfg)?;
    let s = solve(cfg)?;
    let mdp = FilteredMdp::new(&s.model, &s.family, s.quad, cfg.kernel()?)?;
    let policy = extract_policy(&s.values, &s.family);
    let x0s: Vec<Vec<f64>> = cfg.sim.x0.clone().unwrap_or_default().into_iter().map(|x| vec![x]).collect();
    let sim = cfg.sim_config(&s.model)?;
    let check = cross_check(
        &mdp,
        s.grid.clone(),
        &policy,
        &x0s,
        cfg.sim.n_traj.unwrap_or(100_000),
        cfg.sim.seed.unwrap_or(1),
        &sim,
        &cfg.solver_config(),
        cfg.sim.grid_slack.unwrap_or(0.02),
    )?;
    let mut csv = String::from("x0,mc_mean,mc_stderr,mdp_value,value_interp,z,raw_z\n");
    let mut worst: f64 = 0.0;
    for row in &check.rows {
        let q0 = Belief::new(s.model.initial_distribution(&row.x0))?;
        worst = worst.max(row.z().abs());
        csv += &csv_row(&[
            sig9(row.x0[0]),
            sig9(row.mc.mean),
            sig9(row.mc.stderr),
            sig9(row.mdp_value),
            sig9(s.values.interpolate(&q0)),
            sig9(row.z()),
            sig9(row.raw_z()),
        ]);
    }
    out.write("zscores.csv", csv.as_bytes())?;
    Ok(out.done(if worst >= 4.0 { 1 } else { 0 }))
}

pub fn cmd_sweep(cfg: &RunConfig) -> Result<Outcome> {
    let mut out = Output::new(cfg)?;
    let model = cfg.build_model()?;
    let family = cfg.family_for(&model)?;
    let grid = Arc::new(SimplexGrid::build(model.num_states(), cfg.solver.grid_k.unwrap_or(40))?);
    let sigmas = cfg.solver.sweep_sigmas.clone().unwrap_or_default();
    let (_, rows) = sigma_sweep(&model, grid, &family, cfg.quadrature(&model)?, &sigmas, &cfg.solver_config())?;
    let mut csv = String::from("sigma,gap,agreement,iterations\n");
    for r in rows {
        csv += &csv_row(&[sig9(r.sigma), sig9(r.gap), sig9(r.agreement), r.report.iterations.to_string()]);
    }
    out.write("sigma_sweep.csv", csv.as_bytes())?;
    Ok(out.done(0))
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli, mut stdout: impl Write) -> Result<i32> {
    let flags = match &cli.command {
        Command::Example => {
            stdout.write_all(RunConfig::particle_steering_example().to_toml().as_bytes())?;
            return Ok(0);
        }
        Command::Solve(f) | Command::Simulate(f) | Command::Filter(f) | Command::Crosscheck(f) | Command::Sweep(f) => f,
    };
    if let Some(n) = flags.workers {
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = flags.config()?;
    let outcome = match &cli.command {
        Command::Solve(_) => cmd_solve(&cfg)?,
        Command::Simulate(_) => cmd_simulate(&cfg)?,
        Command::Filter(_) => cmd_filter(&cfg)?,
        Command::Crosscheck(_) => cmd_crosscheck(&cfg)?,
        Command::Sweep(_) => cmd_sweep(&cfg)?,
        Command::Example => unreachable!(),
    };
    for f in &outcome.files {
        writeln!(stdout, "{}", f.display())?;
    }
    Ok(outcome.exit_code)
}
