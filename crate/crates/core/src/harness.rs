//! Convergence experiments: configuration, reference solutions, error
//! measurement, order estimation and CSV reporting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::expr::{parse, Expr};
use crate::extrapolate::{combine, weights_for, ExtrapolationWeights, Variant};
use crate::grid::{make_grid, Exponent, Grid, NormSpec};
use crate::problem::{first_part_distribution, manufacture, OperatorSpec, SplitProblem};
use crate::schemes::{run_scheme, CompositionTable, FreezePoint, SchemeKind, SchemeSpec, TimeGrid, Trajectory};
use crate::substep::{unsplit_reference, Method, PropagatorConfig, DEFAULT_MAX_INTERNAL_STEPS, DEFAULT_SUBSTEP_TOL};

/// Errors below `FLOOR_FACTOR * substep_tol` are not used for order estimates.
pub const FLOOR_FACTOR: f64 = 50.0;
pub const REFERENCE_TOL: f64 = 1e-12;
pub const SUBSTEP_BUDGET: usize = 100_000;
pub const CSV_HEADER: &str = "scheme,k,n,delta,norm_m,norm_p,error,pairwise_order,fitted_order";
const FLOOR_CELL: &str = "error_floor";

/// A split problem, optionally with its exact solution.
#[derive(Clone, Debug)]
pub struct ProblemDef {
    pub name: String,
    pub problem: SplitProblem,
    pub exact: Option<Expr>,
    pub default_points: usize,
}

pub struct BuiltinProblem {
    pub name: &'static str,
    pub description: &'static str,
    build: fn() -> Result<ProblemDef>,
}

impl BuiltinProblem {
    pub fn build(&self) -> Result<ProblemDef> {
        (self.build)()
    }
}

fn e(s: &str) -> Expr {
    parse(s).expect("built-in expression parses")
}

fn heat_potential(potential: &str, name: &str) -> Result<ProblemDef> {
    let skeleton = SplitProblem::new(
        vec![
            OperatorSpec::laplacian(1, 1.0),
            OperatorSpec::multiplication(1, e(potential))?,
        ],
        vec![Expr::zero(), Expr::zero()],
        Expr::zero(),
        0.5,
    )?;
    let m = manufacture(e("exp(-t)*sin(x1)"), &skeleton, &first_part_distribution(2))?;
    Ok(ProblemDef {
        name: name.into(),
        problem: m.problem().clone(),
        exact: Some(m.exact().clone()),
        default_points: 64,
    })
}

fn p1() -> Result<ProblemDef> {
    heat_potential("cos(x1)", "p1")
}

fn p2() -> Result<ProblemDef> {
    heat_potential("cos(x1)*(1+0.5*sin(t))", "p2")
}

fn p1_free() -> Result<ProblemDef> {
    let problem = SplitProblem::new(
        vec![
            OperatorSpec::laplacian(1, 1.0),
            OperatorSpec::multiplication(1, e("cos(x1)"))?,
        ],
        vec![Expr::zero(), Expr::zero()],
        e("sin(x1)"),
        0.5,
    )?;
    Ok(ProblemDef {
        name: "p1_free".into(),
        problem,
        exact: None,
        default_points: 64,
    })
}

fn commuting() -> Result<ProblemDef> {
    let problem = SplitProblem::new(
        vec![OperatorSpec::laplacian(1, 0.5), OperatorSpec::laplacian(1, 0.5)],
        vec![Expr::zero(), Expr::zero()],
        e("sin(x1)+0.5*cos(2*x1)"),
        0.5,
    )?;
    Ok(ProblemDef {
        name: "commuting".into(),
        problem,
        exact: None,
        default_points: 64,
    })
}

fn degenerate() -> Result<ProblemDef> {
    let l1 = OperatorSpec::new(vec![vec![e("sin(x1)^2")]], vec![Expr::zero()], Expr::zero())?;
    let problem = SplitProblem::new(
        vec![l1, OperatorSpec::multiplication(1, e("cos(x1)"))?],
        vec![Expr::zero(), Expr::zero()],
        e("sin(x1)"),
        0.5,
    )?;
    Ok(ProblemDef {
        name: "degenerate".into(),
        problem,
        exact: None,
        default_points: 64,
    })
}

fn p1_2d() -> Result<ProblemDef> {
    let skeleton = SplitProblem::new(
        vec![
            OperatorSpec::laplacian(2, 1.0),
            OperatorSpec::multiplication(2, e("cos(x1)*cos(x2)"))?,
        ],
        vec![Expr::zero(), Expr::zero()],
        Expr::zero(),
        0.5,
    )?;
    let m = manufacture(e("exp(-t)*sin(x1)*sin(x2)"), &skeleton, &[0.5, 0.5])?;
    Ok(ProblemDef {
        name: "p1_2d".into(),
        problem: m.problem().clone(),
        exact: Some(m.exact().clone()),
        default_points: 32,
    })
}

pub fn builtin_problems() -> &'static [BuiltinProblem] {
    const REGISTRY: &[BuiltinProblem] = &[
        BuiltinProblem {
            name: "p1",
            description: "1D, L1 = d2/dx1^2, L2 = cos(x1), exact exp(-t)*sin(x1), T = 0.5",
            build: p1,
        },
        BuiltinProblem {
            name: "p2",
            description: "as p1 with L2 = cos(x1)*(1+0.5*sin(t))",
            build: p2,
        },
        BuiltinProblem {
            name: "p1_free",
            description: "operators of p1, f = 0, u0 = sin(x1), unsplit reference",
            build: p1_free,
        },
        BuiltinProblem {
            name: "commuting",
            description: "L1 = L2 = 0.5*d2/dx1^2, f = 0, u0 = sin(x1)+0.5*cos(2*x1)",
            build: commuting,
        },
        BuiltinProblem {
            name: "degenerate",
            description: "L1 = sin(x1)^2*d2/dx1^2, L2 = cos(x1), f = 0, u0 = sin(x1)",
            build: degenerate,
        },
        BuiltinProblem {
            name: "p1_2d",
            description: "2D, L1 = Laplacian, L2 = cos(x1)*cos(x2), exact exp(-t)*sin(x1)*sin(x2)",
            build: p1_2d,
        },
    ];
    REGISTRY
}

pub fn builtin(name: &str) -> Result<ProblemDef> {
    builtin_problems()
        .iter()
        .find(|b| b.name == name)
        .ok_or_else(|| Error::Config(format!("unknown built-in problem {name:?}")))?
        .build()
}

/// A fully validated experiment.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub problem: ProblemDef,
    pub scheme: SchemeKind,
    pub k: usize,
    pub variant: Variant,
    pub base_n: usize,
    pub levels: usize,
    pub norms: Vec<NormSpec>,
    pub points: usize,
    pub propagator: PropagatorConfig,
    pub output: Option<PathBuf>,
    /// Compute each distinct step count once and share it across levels.
    pub reuse_runs: bool,
    /// Worker threads for constituent runs; 0 uses the available parallelism.
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn new(problem: ProblemDef, scheme: SchemeKind) -> ExperimentConfig {
        let points = problem.default_points;
        ExperimentConfig {
            problem,
            scheme,
            k: 0,
            variant: Variant::General,
            base_n: 16,
            levels: 3,
            norms: vec![NormSpec::l2(), NormSpec::max()],
            points,
            propagator: PropagatorConfig::default(),
            output: None,
            reuse_runs: true,
            threads: 0,
        }
    }

    pub fn weights(&self) -> Result<ExtrapolationWeights> {
        weights_for(self.k, self.variant)
    }

    /// Step counts `(level, j) -> base_n 2^{level + j}`.
    fn step_counts(&self, runs: usize) -> Vec<Vec<usize>> {
        (0..self.levels)
            .map(|l| (0..runs).map(|j| self.base_n << (l + j)).collect())
            .collect()
    }

    fn substeps_per_step(&self) -> usize {
        let parts = self.problem.problem.parts();
        match &self.scheme {
            SchemeKind::Lie | SchemeKind::TdFrozen(_) => parts,
            SchemeKind::Strang => 2 * parts - 1,
            SchemeKind::Composition(t) => t.sequence().len(),
            SchemeKind::TdSubinterval => parts * parts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::Config(format!("levels must be at least 2, got {}", self.levels)));
        }
        if self.base_n == 0 {
            return Err(Error::Config("base_n must be positive".into()));
        }
        if self.norms.is_empty() {
            return Err(Error::Config("at least one norm is required".into()));
        }
        self.propagator.validate()?;
        let w = self.weights()?;
        if self
            .base_n
            .checked_shl((self.levels + w.runs()) as u32)
            .is_none_or(|n| n > 1 << 40)
        {
            return Err(Error::Config("step counts overflow".into()));
        }
        if self.problem.problem.operators_time_dependent()
            && matches!(
                self.scheme,
                SchemeKind::Lie | SchemeKind::Strang | SchemeKind::Composition(_)
            )
        {
            return Err(Error::TimeDependent("requested"));
        }
        let mut distinct: Vec<usize> = self.step_counts(w.runs()).into_iter().flatten().collect();
        distinct.sort_unstable();
        distinct.dedup();
        let total: usize = distinct.iter().sum::<usize>() * self.substeps_per_step();
        if total > SUBSTEP_BUDGET {
            warn!("experiment needs {total} sub-steps, above the budget of {SUBSTEP_BUDGET}");
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let raw: RawConfig = toml::from_str(text)?;
        raw.resolve()
    }

    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = ExperimentConfig::from_toml_str(&text)?;
        if let (Some(out), Some(dir)) = (&cfg.output, path.parent()) {
            if out.is_relative() {
                cfg.output = Some(dir.join(out));
            }
        }
        Ok(cfg)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    problem: RawProblem,
    scheme: RawScheme,
    #[serde(default)]
    extrapolation: RawExtrapolation,
    #[serde(default)]
    grid: RawGrid,
    #[serde(default)]
    propagator: RawPropagator,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProblem {
    name: Option<String>,
    dim: Option<usize>,
    horizon: Option<f64>,
    exact: Option<String>,
    u0: Option<String>,
    distribution: Option<Vec<f64>>,
    #[serde(default)]
    parts: Vec<RawPart>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPart {
    a2_11: Option<String>,
    a2_12: Option<String>,
    a2_21: Option<String>,
    a2_22: Option<String>,
    a1_1: Option<String>,
    a1_2: Option<String>,
    a0: Option<String>,
    f: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScheme {
    kind: String,
    base_n: Option<usize>,
    levels: Option<usize>,
    table: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    alternate: bool,
    freeze: Option<String>,
    freeze_j: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawExtrapolation {
    #[serde(default)]
    k: usize,
    variant: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    points: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawPropagator {
    method: Option<String>,
    substep_tol: Option<f64>,
    max_internal_steps: Option<usize>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    csv: Option<PathBuf>,
    norms: Option<Vec<RawNorm>>,
    reuse_runs: Option<bool>,
    threads: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNorm {
    #[serde(default)]
    m: usize,
    p: RawExponent,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawExponent {
    Finite(u32),
    Named(String),
}

fn opt_expr(s: &Option<String>) -> Result<Expr> {
    match s {
        Some(s) => Ok(parse(s)?),
        None => Ok(Expr::zero()),
    }
}

impl RawPart {
    fn operator(&self, dim: usize) -> Result<(OperatorSpec, Expr)> {
        let a2 = if dim == 1 {
            if self.a2_12.is_some() || self.a2_21.is_some() || self.a2_22.is_some() || self.a1_2.is_some() {
                return Err(Error::Config("second-axis coefficients given for a 1D problem".into()));
            }
            vec![vec![opt_expr(&self.a2_11)?]]
        } else {
            // a2_21 defaults to a2_12
            let off = opt_expr(&self.a2_12)?;
            let off_t = if self.a2_21.is_some() {
                opt_expr(&self.a2_21)?
            } else {
                off.clone()
            };
            vec![vec![opt_expr(&self.a2_11)?, off], vec![off_t, opt_expr(&self.a2_22)?]]
        };
        let a1 = if dim == 1 {
            vec![opt_expr(&self.a1_1)?]
        } else {
            vec![opt_expr(&self.a1_1)?, opt_expr(&self.a1_2)?]
        };
        let op = OperatorSpec::new(a2, a1, opt_expr(&self.a0)?)?;
        Ok((op, opt_expr(&self.f)?))
    }
}

impl RawProblem {
    fn resolve(&self) -> Result<ProblemDef> {
        if let Some(name) = &self.name {
            if self.dim.is_some()
                || self.horizon.is_some()
                || self.exact.is_some()
                || self.u0.is_some()
                || self.distribution.is_some()
                || !self.parts.is_empty()
            {
                return Err(Error::Config("a named problem takes no further [problem] keys".into()));
            }
            return builtin(name);
        }
        let dim = self
            .dim
            .ok_or_else(|| Error::Config("[problem] needs `name` or `dim`".into()))?;
        if !(1..=2).contains(&dim) {
            return Err(Error::Config(format!("dim must be 1 or 2, got {dim}")));
        }
        let horizon = self
            .horizon
            .ok_or_else(|| Error::Config("[problem] needs `horizon`".into()))?;
        if self.parts.is_empty() {
            return Err(Error::Config(
                "[problem] needs at least one [[problem.parts]] entry".into(),
            ));
        }
        let mut ops = Vec::new();
        let mut free = Vec::new();
        for part in &self.parts {
            let (op, f) = part.operator(dim)?;
            ops.push(op);
            free.push(f);
        }
        let points = if dim == 1 { 64 } else { 32 };
        match (&self.exact, &self.u0) {
            (Some(exact), None) => {
                if self.parts.iter().any(|p| p.f.is_some()) {
                    return Err(Error::Config(
                        "free terms are derived from `exact`; drop the `f` keys".into(),
                    ));
                }
                let skeleton = SplitProblem::new(ops, free, Expr::zero(), horizon)?;
                let dist = self
                    .distribution
                    .clone()
                    .unwrap_or_else(|| first_part_distribution(skeleton.parts()));
                let m = manufacture(parse(exact)?, &skeleton, &dist)?;
                Ok(ProblemDef {
                    name: "inline".into(),
                    problem: m.problem().clone(),
                    exact: Some(m.exact().clone()),
                    default_points: points,
                })
            }
            (None, Some(u0)) => {
                if self.distribution.is_some() {
                    return Err(Error::Config("`distribution` requires `exact`".into()));
                }
                Ok(ProblemDef {
                    name: "inline".into(),
                    problem: SplitProblem::new(ops, free, parse(u0)?, horizon)?,
                    exact: None,
                    default_points: points,
                })
            }
            _ => Err(Error::Config("[problem] needs exactly one of `exact` and `u0`".into())),
        }
    }
}

fn parse_scheme(raw: &RawScheme, parts: usize) -> Result<SchemeKind> {
    let only = |ok: bool, key: &str| {
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("`{key}` is not valid for scheme {:?}", raw.kind)))
        }
    };
    let kind = raw.kind.as_str();
    only(raw.table.is_none() || kind == "composition", "table")?;
    only(!raw.alternate || kind == "composition", "alternate")?;
    only(
        (raw.freeze.is_none() && raw.freeze_j.is_none()) || kind == "td_frozen",
        "freeze",
    )?;
    Ok(match kind {
        "lie" => SchemeKind::Lie,
        "strang" => SchemeKind::Strang,
        "td_subinterval" => SchemeKind::TdSubinterval,
        "composition" => {
            let rows = raw
                .table
                .clone()
                .ok_or_else(|| Error::Config("composition scheme needs `table`".into()))?;
            let table = CompositionTable::new(rows, raw.alternate)?;
            if table.parts() != parts {
                return Err(Error::Config(format!(
                    "composition table has {} columns for {parts} parts",
                    table.parts()
                )));
            }
            SchemeKind::Composition(table)
        }
        "td_frozen" => match (raw.freeze.as_deref().unwrap_or("right_all"), raw.freeze_j) {
            ("right_all", None) => SchemeKind::TdFrozen(FreezePoint::RightAll),
            ("left_for_first", Some(j)) => SchemeKind::TdFrozen(FreezePoint::LeftForFirst(j)),
            ("left_for_first", None) => {
                return Err(Error::Config("freeze = \"left_for_first\" needs `freeze_j`".into()))
            }
            (other, _) => return Err(Error::Config(format!("unknown freeze option {other:?}"))),
        },
        other => return Err(Error::Config(format!("unknown scheme kind {other:?}"))),
    })
}

impl RawConfig {
    fn resolve(self) -> Result<ExperimentConfig> {
        let problem = self.problem.resolve()?;
        let scheme = parse_scheme(&self.scheme, problem.problem.parts())?;
        let mut cfg = ExperimentConfig::new(problem, scheme);
        cfg.base_n = self.scheme.base_n.unwrap_or(cfg.base_n);
        cfg.levels = self.scheme.levels.unwrap_or(cfg.levels);
        cfg.k = self.extrapolation.k;
        cfg.variant = match self.extrapolation.variant.as_deref() {
            None | Some("general") => Variant::General,
            Some("strang") => Variant::Strang,
            Some(other) => return Err(Error::Config(format!("unknown extrapolation variant {other:?}"))),
        };
        cfg.points = self.grid.points.unwrap_or(cfg.points);
        cfg.propagator = PropagatorConfig {
            method: match self.propagator.method.as_deref() {
                None | Some("auto") => Method::Auto,
                Some("spectral_const") => Method::SpectralConst,
                Some("implicit_adaptive") => Method::ImplicitAdaptive,
                Some(other) => return Err(Error::Config(format!("unknown propagator method {other:?}"))),
            },
            substep_tol: self.propagator.substep_tol.unwrap_or(DEFAULT_SUBSTEP_TOL),
            max_internal_steps: self.propagator.max_internal_steps.unwrap_or(DEFAULT_MAX_INTERNAL_STEPS),
        };
        if let Some(norms) = self.output.norms {
            cfg.norms = norms
                .into_iter()
                .map(|n| {
                    let p = match n.p {
                        RawExponent::Finite(p) => Exponent::Finite(p),
                        RawExponent::Named(s) if s == "inf" => Exponent::Infinity,
                        RawExponent::Named(s) => return Err(Error::Config(format!("unknown norm exponent {s:?}"))),
                    };
                    NormSpec::new(n.m, p)
                })
                .collect::<Result<_>>()?;
        }
        cfg.output = self.output.csv;
        cfg.reuse_runs = self.output.reuse_runs.unwrap_or(true);
        cfg.threads = self.output.threads.unwrap_or(0);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exact samples for manufactured problems, otherwise an unsplit solve at
/// tolerance `REFERENCE_TOL` (or tighter, if `cfg` asks for it).
pub fn reference(p: &ProblemDef, grid: &Grid, times: &TimeGrid, cfg: &PropagatorConfig) -> Result<Trajectory> {
    match &p.exact {
        Some(exact) => {
            let states = times
                .nodes()
                .into_iter()
                .map(|t| grid.sample(exact, t))
                .collect::<Result<_>>()?;
            Trajectory::new(times.clone(), states)
        }
        None => {
            let tight = PropagatorConfig {
                substep_tol: cfg.substep_tol.min(REFERENCE_TOL),
                ..*cfg
            };
            unsplit_reference(&p.problem, grid, times, &tight)
        }
    }
}

/// `max_i ‖traj[i] − ref[i]‖` over the shared time nodes.
pub fn measure_error(traj: &Trajectory, reference: &Trajectory, s: NormSpec) -> Result<f64> {
    if traj.times() != reference.times() {
        return Err(Error::GridMismatch(format!(
            "trajectory has {} steps to {}, reference {} steps to {}",
            traj.times().n(),
            traj.times().horizon(),
            reference.times().n(),
            reference.times().horizon()
        )));
    }
    traj.states()
        .iter()
        .zip(reference.states())
        .try_fold(0.0f64, |acc, (a, b)| Ok(acc.max(a.sub(b)?.norm(s)?)))
}

/// Every `factor`-th state of `traj`.
pub fn subsample(traj: &Trajectory, factor: usize) -> Result<Trajectory> {
    let n = traj.times().n();
    if factor == 0 || !n.is_multiple_of(factor) {
        return Err(Error::GridMismatch(format!("cannot subsample {n} steps by {factor}")));
    }
    let times = TimeGrid::new(n / factor, traj.times().horizon())?;
    let states = (0..=n / factor).map(|i| traj.state(i * factor).clone()).collect();
    Trajectory::new(times, states)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderEstimate {
    /// `pairwise[i]` compares levels `i` and `i + 1`; `None` where either error is floored.
    pub pairwise: Vec<Option<f64>>,
    pub fitted: Option<f64>,
    pub floored: Vec<bool>,
    pub dropped_coarsest: bool,
}

impl OrderEstimate {
    pub fn floor_reached(&self) -> bool {
        self.floored.iter().any(|&f| f)
    }
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (sx, sy) = points.iter().fold((0.0, 0.0), |(a, b), &(x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let (num, den) = points.iter().fold((0.0, 0.0), |(a, b), &(x, y)| {
        (a + (x - mx) * (y - my), b + (x - mx) * (x - mx))
    });
    num / den
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Orders from `(δ, e)` pairs listed coarse to fine with halving `δ`.
/// Errors below `floor` are flagged and left out of every estimate.
pub fn estimate_order(errors: &[(f64, f64)], floor: f64) -> Result<OrderEstimate> {
    if errors.len() < 2 {
        return Err(Error::Config("order estimation needs at least two levels".into()));
    }
    for w in errors.windows(2) {
        let ratio = w[0].0 / w[1].0;
        if (ratio - 2.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "step sizes {} and {} are not dyadic",
                w[0].0, w[1].0
            )));
        }
    }
    if errors.iter().any(|&(_, e)| !(e >= 0.0 && e.is_finite())) {
        return Err(Error::Config("errors must be finite and non-negative".into()));
    }
    let floored: Vec<bool> = errors.iter().map(|&(_, e)| e < floor || e == 0.0).collect();
    let pairwise: Vec<Option<f64>> = errors
        .windows(2)
        .zip(floored.windows(2))
        .map(|(w, f)| (!f[0] && !f[1]).then(|| (w[0].1 / w[1].1).log2()))
        .collect();
    let mut usable: Vec<usize> = (0..errors.len()).filter(|&i| !floored[i]).collect();
    let mut dropped_coarsest = false;
    let valid: Vec<f64> = pairwise.iter().flatten().copied().collect();
    if usable.len() >= 3 && usable[0] == 0 {
        if let Some(first) = pairwise[0] {
            if (first - median(&valid)).abs() > 0.5 {
                usable.remove(0);
                dropped_coarsest = true;
            }
        }
    }
    let fitted = (usable.len() >= 2).then(|| {
        let pts: Vec<(f64, f64)> = usable
            .iter()
            .map(|&i| (errors[i].0.log2(), errors[i].1.log2()))
            .collect();
        slope(&pts)
    });
    Ok(OrderEstimate {
        pairwise,
        fitted,
        floored,
        dropped_coarsest,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub scheme: String,
    pub k: usize,
    pub n: usize,
    pub delta: f64,
    pub norm: NormSpec,
    pub error: f64,
    pub pairwise_order: Option<f64>,
    pub fitted_order: Option<f64>,
    pub floored: bool,
    /// Error of the finest constituent run, measured on the same nodes.
    pub finest_constituent_error: f64,
}

#[derive(Clone, Debug)]
pub struct ReportMetadata {
    pub problem: String,
    pub substep_tol: f64,
    pub points: usize,
    pub variant: Variant,
    pub weights: Vec<f64>,
    pub wall_time: f64,
    /// Norms whose fit left out the coarsest level.
    pub dropped_coarsest: Vec<NormSpec>,
}

#[derive(Clone, Debug)]
pub struct ConvergenceReport {
    pub rows: Vec<ReportRow>,
    pub metadata: ReportMetadata,
}

fn norm_key(s: &NormSpec) -> (usize, u64) {
    let p = match s.exponent {
        Exponent::Finite(p) => u64::from(p),
        Exponent::Infinity => u64::MAX,
    };
    (s.sobolev_order, p)
}

impl ConvergenceReport {
    /// Rows for one norm, coarse to fine.
    pub fn series(&self, norm: NormSpec) -> Vec<&ReportRow> {
        self.rows.iter().filter(|r| r.norm == norm).collect()
    }

    pub fn fitted_order(&self, norm: NormSpec) -> Option<f64> {
        self.series(norm).first().and_then(|r| r.fitted_order)
    }

    pub fn floor_reached(&self, norm: NormSpec) -> bool {
        self.series(norm).iter().any(|r| r.floored)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let order = |o: Option<f64>, flagged: bool| match o {
            Some(v) => format!("{v}"),
            None if flagged => FLOOR_CELL.to_string(),
            None => String::new(),
        };
        w.write_record(CSV_HEADER.split(',')).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.scheme.clone(),
                r.k.to_string(),
                r.n.to_string(),
                format!("{:e}", r.delta),
                r.norm.sobolev_order.to_string(),
                r.norm.exponent.to_string(),
                format!("{:e}", r.error),
                order(r.pairwise_order, r.floored),
                order(r.fitted_order, self.floor_reached(r.norm)),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ASCII output")
    }

    /// Human-readable summary.
    pub fn order_table(&self) -> String {
        let m = &self.metadata;
        let mut out = format!(
            "problem {}  M = {}  substep_tol = {:e}  weights {:?}  wall time {:.2} s\n",
            m.problem, m.points, m.substep_tol, m.weights, m.wall_time
        );
        let _ = writeln!(
            out,
            "{:<16} {:>2} {:>6} {:>8} {:>12} {:>14} {:>10} {:>10}",
            "scheme", "k", "n", "norm", "delta", "error", "pairwise", "fitted"
        );
        let cell = |o: Option<f64>, flagged| match o {
            Some(v) => format!("{v:.4}"),
            None if flagged => "floor".into(),
            None => "-".into(),
        };
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<16} {:>2} {:>6} {:>8} {:>12.4e} {:>14.6e} {:>10} {:>10}",
                r.scheme,
                r.k,
                r.n,
                r.norm.to_string(),
                r.delta,
                r.error,
                cell(r.pairwise_order, r.floored),
                cell(r.fitted_order, self.floor_reached(r.norm)),
            );
        }
        for norm in &m.dropped_coarsest {
            let _ = writeln!(out, "note: coarsest level left out of the {norm} fit (preasymptotic)");
        }
        out
    }
}

/// Writes via a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn run_all(cfg: &ExperimentConfig, grid: &Grid, jobs: &[usize]) -> Result<Vec<Trajectory>> {
    let threads = match cfg.threads {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        t => t,
    }
    .min(jobs.len())
    .max(1);
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Trajectory>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let spec = SchemeSpec {
                    kind: cfg.scheme.clone(),
                    n: jobs[i],
                };
                let out = run_scheme(&cfg.problem.problem, &spec, grid, &cfg.propagator).map_err(|err| Error::Case {
                    case: format!("{} n={}", cfg.scheme.id(), jobs[i]),
                    source: Box::new(err),
                });
                results.lock().expect("no worker panicked")[i] = Some(out);
            });
        }
    });
    results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let started = Instant::now();
    let w = cfg.weights()?;
    let grid = make_grid(cfg.problem.problem.dim(), cfg.points)?;
    let counts = cfg.step_counts(w.runs());

    let jobs: Vec<usize> = if cfg.reuse_runs {
        let mut d: Vec<usize> = counts.iter().flatten().copied().collect();
        d.sort_unstable();
        d.dedup();
        d
    } else {
        counts.iter().flatten().copied().collect()
    };
    info!("running {} constituent trajectories", jobs.len());
    let runs = run_all(cfg, &grid, &jobs)?;
    let lookup = |level: usize, j: usize| -> &Trajectory {
        if cfg.reuse_runs {
            let pos = jobs.binary_search(&counts[level][j]).expect("step count scheduled");
            &runs[pos]
        } else {
            &runs[level * w.runs() + j]
        }
    };

    let finest = TimeGrid::new(
        *counts.last().expect("levels >= 2").first().expect("runs >= 1"),
        cfg.problem.problem.horizon(),
    )?;
    let fine_ref = reference(&cfg.problem, &grid, &finest, &cfg.propagator)?;

    let mut per_level = Vec::with_capacity(cfg.levels);
    for level in 0..cfg.levels {
        let level_runs: Vec<Trajectory> = (0..w.runs()).map(|j| lookup(level, j).clone()).collect();
        let combined = combine(&level_runs, &w)?;
        let reference = subsample(&fine_ref, 1 << (cfg.levels - 1 - level))?;
        let finest_run = subsample(level_runs.last().expect("runs >= 1"), 1 << (w.runs() - 1))?;
        per_level.push((combined, reference, finest_run));
    }

    let floor = FLOOR_FACTOR * cfg.propagator.substep_tol;
    let mut norms = cfg.norms.clone();
    norms.sort_by_key(norm_key);
    norms.dedup();
    let mut rows = Vec::new();
    let mut dropped = Vec::new();
    let scheme = cfg.scheme.id();
    for &norm in &norms {
        let mut series = Vec::with_capacity(cfg.levels);
        for (combined, reference, finest_run) in &per_level {
            series.push((
                combined.times().step(),
                measure_error(combined, reference, norm)?,
                measure_error(finest_run, reference, norm)?,
            ));
        }
        let pairs: Vec<(f64, f64)> = series.iter().map(|&(d, e, _)| (d, e)).collect();
        let est = estimate_order(&pairs, floor)?;
        if est.dropped_coarsest {
            dropped.push(norm);
        }
        for (level, &(delta, error, finest_err)) in series.iter().enumerate() {
            rows.push(ReportRow {
                scheme: scheme.clone(),
                k: cfg.k,
                n: counts[level][0],
                delta,
                norm,
                error,
                pairwise_order: level.checked_sub(1).and_then(|i| est.pairwise[i]),
                fitted_order: est.fitted,
                floored: est.floored[level],
                finest_constituent_error: finest_err,
            });
        }
    }

    let report = ConvergenceReport {
        rows,
        metadata: ReportMetadata {
            problem: cfg.problem.name.clone(),
            substep_tol: cfg.propagator.substep_tol,
            points: cfg.points,
            variant: cfg.variant,
            weights: w.b.clone(),
            wall_time: started.elapsed().as_secs_f64(),
            dropped_coarsest: dropped,
        },
    };
    if let Some(path) = &cfg.output {
        write_atomic(path, &report.to_csv())?;
    }
    Ok(report)
}

/// One parsed CSV record: `(norm_m, norm_p, n, error, pairwise_order)`.
pub type CsvRecord = (usize, String, usize, f64, Option<f64>);

/// Parses a CSV written by [`ConvergenceReport::to_csv`].
pub fn parse_csv(text: &str) -> Result<Vec<CsvRecord>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Config(e.to_string()))?;
    if header.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::Config("unexpected CSV header".into()));
    }
    reader
        .records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Config(e.to_string()))?;
            let bad = || Error::Config(format!("malformed CSV row {rec:?}"));
            let pairwise = match &rec[7] {
                "" | FLOOR_CELL => None,
                v => Some(v.parse().map_err(|_| bad())?),
            };
            Ok((
                rec[4].parse().map_err(|_| bad())?,
                rec[5].to_string(),
                rec[2].parse().map_err(|_| bad())?,
                rec[6].parse().map_err(|_| bad())?,
                pairwise,
            ))
        })
        .collect()
}

/// Pairwise orders recomputed from parsed CSV records, keyed by norm.
pub fn recompute_pairwise(records: &[CsvRecord]) -> BTreeMap<(usize, String), Vec<f64>> {
    let mut by_norm: BTreeMap<(usize, String), Vec<f64>> = BTreeMap::new();
    for (m, p, _, e, _) in records {
        by_norm.entry((*m, p.clone())).or_default().push(*e);
    }
    by_norm
        .into_iter()
        .map(|(k, errs)| (k, errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_series_orders() {
        let h = 0.1;
        let est = estimate_order(&[(h, 0.1), (h / 2.0, 0.05), (h / 4.0, 0.025)], 1e-10).unwrap();
        assert_eq!(est.pairwise, vec![Some(1.0), Some(1.0)]);
        assert!((est.fitted.unwrap() - 1.0).abs() < 1e-12);
        let est = estimate_order(&[(h, 0.1), (h / 2.0, 0.025), (h / 4.0, 0.00625)], 1e-10).unwrap();
        assert!((est.fitted.unwrap() - 2.0).abs() < 1e-12);
        assert!(!est.dropped_coarsest);
    }

    #[test]
    fn preasymptotic_coarsest_dropped() {
        let est = estimate_order(&[(1.0, 1.0), (0.5, 0.9), (0.25, 0.225), (0.125, 0.05625)], 1e-10).unwrap();
        assert!(est.dropped_coarsest);
        assert!((est.fitted.unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn floor_flags_cells() {
        let est = estimate_order(&[(1.0, 1e-6), (0.5, 1e-8), (0.25, 1e-12)], 5e-11).unwrap();
        assert_eq!(est.floored, vec![false, false, true]);
        assert_eq!(est.pairwise[1], None);
        assert!((est.fitted.unwrap() - 100f64.log2()).abs() < 1e-12);
        let est = estimate_order(&[(1.0, 1e-6), (0.5, 1e-12), (0.25, 0.0)], 5e-11).unwrap();
        assert_eq!(est.fitted, None);
        assert!(est.floor_reached());
    }

    #[test]
    fn order_input_checks() {
        assert!(estimate_order(&[(1.0, 0.1)], 0.0).is_err());
        assert!(estimate_order(&[(1.0, 0.1), (0.3, 0.01)], 0.0).is_err());
        assert!(estimate_order(&[(1.0, 0.1), (0.5, f64::NAN)], 0.0).is_err());
    }

    #[test]
    fn registry_builds() {
        for b in builtin_problems() {
            let p = b.build().unwrap();
            assert_eq!(p.name, b.name);
        }
        assert!(builtin("nope").is_err());
    }

    #[test]
    fn manufactured_reference_is_exact() {
        let p = builtin("p1").unwrap();
        let g = make_grid(1, 32).unwrap();
        let times = TimeGrid::new(4, 0.5).unwrap();
        let r = reference(&p, &g, &times, &PropagatorConfig::default()).unwrap();
        let want = g.sample(&e("exp(-0.5)*sin(x1)"), 0.0).unwrap();
        assert!(r.last().sub(&want).unwrap().max_abs() < 1e-15);
        assert_eq!(measure_error(&r, &r, NormSpec::max()).unwrap(), 0.0);
    }

    #[test]
    fn fourier_reference_matches_modes() {
        let p = builtin("commuting").unwrap();
        let g = make_grid(1, 32).unwrap();
        let times = TimeGrid::new(4, 0.5).unwrap();
        let r = reference(&p, &g, &times, &PropagatorConfig::default()).unwrap();
        for (i, t) in times.nodes().into_iter().enumerate() {
            let want = g.sample(&e("exp(-t)*sin(x1)+0.5*exp(-4*t)*cos(2*x1)"), t).unwrap();
            assert!(r.state(i).sub(&want).unwrap().max_abs() < 1e-10);
        }
    }

    #[test]
    fn zero_problem_reference_is_zero() {
        let problem = SplitProblem::new(
            vec![OperatorSpec::laplacian(1, 1.0)],
            vec![Expr::zero()],
            Expr::zero(),
            1.0,
        )
        .unwrap();
        let p = ProblemDef {
            name: "zero".into(),
            problem,
            exact: None,
            default_points: 16,
        };
        let g = make_grid(1, 16).unwrap();
        let r = reference(&p, &g, &TimeGrid::new(3, 1.0).unwrap(), &PropagatorConfig::default()).unwrap();
        assert!(r.states().iter().all(|s| s.max_abs() == 0.0));
    }

    #[test]
    fn constant_shift_error() {
        let g = make_grid(1, 16).unwrap();
        let times = TimeGrid::new(2, 1.0).unwrap();
        let a = Trajectory::new(times.clone(), vec![g.zeros(); 3]).unwrap();
        let b = Trajectory::new(times, vec![g.constant(0.25); 3]).unwrap();
        let one = g.constant(1.0).norm(NormSpec::l2()).unwrap();
        assert!((measure_error(&b, &a, NormSpec::l2()).unwrap() - 0.25 * one).abs() < 1e-14);
        assert!((measure_error(&b, &a, NormSpec::max()).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn config_parsing() {
        let text = r#"
            [problem]
            dim = 1
            horizon = 0.5
            exact = "exp(-t)*sin(x1)"
            [[problem.parts]]
            a2_11 = "1"
            [[problem.parts]]
            a0 = "cos(x1)"
            [scheme]
            kind = "lie"
            base_n = 8
            levels = 2
            [extrapolation]
            k = 1
            [output]
            norms = [{ m = 0, p = 2 }, { m = 1, p = "inf" }]
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.k, 1);
        assert_eq!(cfg.points, 64);
        assert_eq!(cfg.norms[1], NormSpec::new(1, Exponent::Infinity).unwrap());
        assert!(cfg.problem.exact.is_some());

        let unknown = text.replace("levels = 2", "levels = 2\nbogus = 1");
        assert!(ExperimentConfig::from_toml_str(&unknown).is_err());
        let one_level = text.replace("levels = 2", "levels = 1");
        assert!(ExperimentConfig::from_toml_str(&one_level).is_err());
        let named = "[problem]\nname = \"p2\"\n[scheme]\nkind = \"lie\"\n";
        assert!(matches!(
            ExperimentConfig::from_toml_str(named),
            Err(Error::TimeDependent(_))
        ));
        let frozen =
            "[problem]\nname = \"p2\"\n[scheme]\nkind = \"td_frozen\"\nfreeze = \"left_for_first\"\nfreeze_j = 1\n";
        let cfg = ExperimentConfig::from_toml_str(frozen).unwrap();
        assert_eq!(cfg.scheme, SchemeKind::TdFrozen(FreezePoint::LeftForFirst(1)));
    }

    #[test]
    fn csv_roundtrip_and_atomic_write() {
        let mut cfg = ExperimentConfig::new(builtin("p1").unwrap(), SchemeKind::Lie);
        cfg.base_n = 4;
        cfg.points = 16;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        cfg.output = Some(path.clone());
        let report = run_experiment(&cfg).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, report.to_csv());
        let records = parse_csv(&text).unwrap();
        assert_eq!(records.len(), 6);
        for ((_, p), orders) in recompute_pairwise(&records) {
            let column: Vec<f64> = records.iter().filter(|r| r.1 == p).filter_map(|r| r.4).collect();
            assert_eq!(orders.len(), column.len());
            for (a, b) in orders.iter().zip(&column) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
