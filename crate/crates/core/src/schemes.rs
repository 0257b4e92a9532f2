//! Splitting schemes on the uniform time grid `t_i = iT/n`: Lie, Strang,
//! general compositions, and two variants for time-dependent coefficients.

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::grid::{Grid, GridFunction};
use crate::problem::{OperatorSpec, SplitProblem};
use crate::substep::{Propagator, PropagatorConfig, TimeMode};

#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    n: usize,
    horizon: f64,
}

impl TimeGrid {
    pub fn new(n: usize, horizon: f64) -> Result<TimeGrid> {
        if n == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Config(format!("horizon must be positive, got {horizon}")));
        }
        Ok(TimeGrid { n, horizon })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.n as f64
    }

    /// `t_i = iT/n`. Dyadic refinements reproduce coarse nodes bit for bit.
    pub fn node(&self, i: usize) -> f64 {
        if i == self.n {
            return self.horizon;
        }
        i as f64 * self.horizon / self.n as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.n).map(|i| self.node(i)).collect()
    }

    pub fn refined(&self, factor: usize) -> Result<TimeGrid> {
        TimeGrid::new(self.n * factor, self.horizon)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    times: TimeGrid,
    states: Vec<GridFunction>,
}

impl Trajectory {
    pub fn new(times: TimeGrid, states: Vec<GridFunction>) -> Result<Trajectory> {
        if states.len() != times.n() + 1 {
            return Err(Error::Config(format!(
                "trajectory on {} steps needs {} states, got {}",
                times.n(),
                times.n() + 1,
                states.len()
            )));
        }
        if let Some(first) = states.first() {
            if states.iter().any(|s| s.grid() != first.grid()) {
                return Err(Error::GridMismatch("trajectory states on different grids".into()));
            }
        }
        if let Some(i) = states.iter().position(|s| !s.is_finite()) {
            return Err(Error::Eval(format!("non-finite state at node {i}")));
        }
        Ok(Trajectory { times, states })
    }

    pub fn times(&self) -> &TimeGrid {
        &self.times
    }

    pub fn states(&self) -> &[GridFunction] {
        &self.states
    }

    pub fn state(&self, i: usize) -> &GridFunction {
        &self.states[i]
    }

    pub fn last(&self) -> &GridFunction {
        self.states.last().expect("trajectory has at least one state")
    }

    pub fn grid(&self) -> &Grid {
        self.states[0].grid()
    }
}

/// Coefficients `c^{ij}` of a composition: row `i` applies parts
/// `1..=d1` with widths `c^{ij} δ`. With `alternate`, even-numbered rows
/// (second, fourth, …) sweep the parts in reverse order.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositionTable {
    rows: Vec<Vec<f64>>,
    alternate: bool,
}

impl CompositionTable {
    pub fn new(rows: Vec<Vec<f64>>, alternate: bool) -> Result<CompositionTable> {
        if rows.is_empty() {
            return Err(Error::Config("composition table has no rows".into()));
        }
        let width = rows[0].len();
        if width == 0 || rows.iter().any(|r| r.len() != width) {
            return Err(Error::Config(
                "composition table rows must share a non-zero length".into(),
            ));
        }
        for (i, row) in rows.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if !c.is_finite() {
                    return Err(Error::Config(format!(
                        "composition coefficient c[{i}][{j}] is not finite"
                    )));
                }
                if c < 0.0 {
                    return Err(Error::NegativeCoefficient {
                        row: i,
                        col: j,
                        value: c,
                    });
                }
            }
        }
        Ok(CompositionTable { rows, alternate })
    }

    /// One row of ones: the Lie sequence.
    pub fn lie(parts: usize) -> CompositionTable {
        CompositionTable {
            rows: vec![vec![1.0; parts]],
            alternate: false,
        }
    }

    /// Two half-weight rows swept forward then backward.
    pub fn strang(parts: usize) -> CompositionTable {
        CompositionTable {
            rows: vec![vec![0.5; parts]; 2],
            alternate: true,
        }
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn alternate(&self) -> bool {
        self.alternate
    }

    pub fn parts(&self) -> usize {
        self.rows[0].len()
    }

    /// `(part, coefficient)` in application order.
    pub fn sequence(&self) -> Vec<(usize, f64)> {
        let mut seq = Vec::new();
        for (i, row) in self.rows.iter().enumerate() {
            let forward: Vec<usize> = (0..row.len()).collect();
            let order: Vec<usize> = if self.alternate && i % 2 == 1 {
                forward.into_iter().rev().collect()
            } else {
                forward
            };
            seq.extend(order.into_iter().map(|j| (j, row[j])));
        }
        seq
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum FreezePoint {
    /// Freeze every part at the right end `t_{i+1}`.
    #[default]
    RightAll,
    /// Freeze parts `1..=j` at `t_i` and the rest at `t_{i+1}`.
    LeftForFirst(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum SchemeKind {
    Lie,
    Strang,
    Composition(CompositionTable),
    TdSubinterval,
    TdFrozen(FreezePoint),
}

impl SchemeKind {
    pub fn id(&self) -> String {
        match self {
            SchemeKind::Lie => "lie".into(),
            SchemeKind::Strang => "strang".into(),
            SchemeKind::Composition(t) => format!("composition{}x{}", t.rows.len(), t.parts()),
            SchemeKind::TdSubinterval => "td_subinterval".into(),
            SchemeKind::TdFrozen(FreezePoint::RightAll) => "td_frozen".into(),
            SchemeKind::TdFrozen(FreezePoint::LeftForFirst(j)) => format!("td_frozen_left{j}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SchemeSpec {
    pub kind: SchemeKind,
    pub n: usize,
}

/// Applies splitting steps for one problem, reusing cached sub-propagators.
pub struct Splitter<'a> {
    problem: &'a SplitProblem,
    prop: Propagator,
}

impl<'a> Splitter<'a> {
    pub fn new(problem: &'a SplitProblem, cfg: &PropagatorConfig) -> Result<Splitter<'a>> {
        Ok(Splitter {
            problem,
            prop: Propagator::new(*cfg)?,
        })
    }

    fn part(&self, r: usize) -> (&'a OperatorSpec, &'a Expr) {
        (&self.problem.ops()[r], &self.problem.free_terms()[r])
    }

    fn require_steady(&self, scheme: &'static str) -> Result<()> {
        if self.problem.operators_time_dependent() {
            return Err(Error::TimeDependent(scheme));
        }
        Ok(())
    }

    /// Runs the parts in the table's order. Each part keeps its own clock,
    /// starting at `t_i` and advancing by its sub-step widths, so a consistent
    /// table (column sums 1) evaluates time-dependent free terms on `[t_i, t_i + δ]`.
    fn sweep(&mut self, table: &CompositionTable, u: &GridFunction, t_i: f64, delta: f64) -> Result<GridFunction> {
        if table.parts() != self.problem.parts() {
            return Err(Error::Config(format!(
                "composition table has {} columns for {} parts",
                table.parts(),
                self.problem.parts()
            )));
        }
        let mut clocks = vec![t_i; self.problem.parts()];
        let mut v = u.clone();
        for (r, c) in table.sequence() {
            if c == 0.0 {
                continue;
            }
            let (op, f) = self.part(r);
            let start = clocks[r];
            let end = start + c * delta;
            v = self.prop.propagate(op, f, &v, start, end, TimeMode::AsGiven)?;
            clocks[r] = end;
        }
        Ok(v)
    }

    pub fn lie_step(&mut self, u: &GridFunction, t_i: f64, delta: f64) -> Result<GridFunction> {
        self.require_steady("lie")?;
        let table = CompositionTable::lie(self.problem.parts());
        self.sweep(&table, u, t_i, delta)
    }

    pub fn strang_step(&mut self, u: &GridFunction, t_i: f64, delta: f64) -> Result<GridFunction> {
        self.require_steady("strang")?;
        let table = CompositionTable::strang(self.problem.parts());
        self.sweep(&table, u, t_i, delta)
    }

    pub fn compose_step(
        &mut self,
        u: &GridFunction,
        t_i: f64,
        delta: f64,
        table: &CompositionTable,
    ) -> Result<GridFunction> {
        self.require_steady("composition")?;
        self.sweep(table, u, t_i, delta)
    }

    pub fn td_subinterval_step(&mut self, u: &GridFunction, t_i: f64, delta: f64) -> Result<GridFunction> {
        let d1 = self.problem.parts();
        let factor = u32::try_from(d1).map_err(|_| Error::Config("too many parts".into()))?;
        let mut v = u.clone();
        for j in 0..d1 {
            let (op, f) = self.part(j);
            let start = t_i + j as f64 * delta / d1 as f64;
            let end = if j + 1 == d1 {
                t_i + delta
            } else {
                t_i + (j + 1) as f64 * delta / d1 as f64
            };
            v = self.prop.propagate(op, f, &v, start, end, TimeMode::Scaled(factor))?;
        }
        Ok(v)
    }

    pub fn td_frozen_step(
        &mut self,
        u: &GridFunction,
        t_i: f64,
        delta: f64,
        freeze: FreezePoint,
    ) -> Result<GridFunction> {
        let d1 = self.problem.parts();
        if let FreezePoint::LeftForFirst(j) = freeze {
            if j > d1 {
                return Err(Error::Config(format!("freeze prefix {j} exceeds {d1} parts")));
            }
        }
        let t_next = t_i + delta;
        let mut v = u.clone();
        for r in 0..d1 {
            let s = match freeze {
                FreezePoint::LeftForFirst(j) if r < j => t_i,
                _ => t_next,
            };
            let (op, f) = self.part(r);
            v = self.prop.propagate(op, f, &v, t_i, t_next, TimeMode::FrozenAt(s))?;
        }
        Ok(v)
    }

    pub fn step(&mut self, kind: &SchemeKind, u: &GridFunction, t_i: f64, delta: f64) -> Result<GridFunction> {
        match kind {
            SchemeKind::Lie => self.lie_step(u, t_i, delta),
            SchemeKind::Strang => self.strang_step(u, t_i, delta),
            SchemeKind::Composition(table) => self.compose_step(u, t_i, delta, table),
            SchemeKind::TdSubinterval => self.td_subinterval_step(u, t_i, delta),
            SchemeKind::TdFrozen(freeze) => self.td_frozen_step(u, t_i, delta, *freeze),
        }
    }
}

pub fn lie_step(
    p: &SplitProblem,
    u: &GridFunction,
    t_i: f64,
    delta: f64,
    cfg: &PropagatorConfig,
) -> Result<GridFunction> {
    Splitter::new(p, cfg)?.lie_step(u, t_i, delta)
}

pub fn strang_step(
    p: &SplitProblem,
    u: &GridFunction,
    t_i: f64,
    delta: f64,
    cfg: &PropagatorConfig,
) -> Result<GridFunction> {
    Splitter::new(p, cfg)?.strang_step(u, t_i, delta)
}

pub fn compose_step(
    p: &SplitProblem,
    u: &GridFunction,
    t_i: f64,
    delta: f64,
    table: &CompositionTable,
    cfg: &PropagatorConfig,
) -> Result<GridFunction> {
    Splitter::new(p, cfg)?.compose_step(u, t_i, delta, table)
}

pub fn td_subinterval_step(
    p: &SplitProblem,
    u: &GridFunction,
    t_i: f64,
    delta: f64,
    cfg: &PropagatorConfig,
) -> Result<GridFunction> {
    Splitter::new(p, cfg)?.td_subinterval_step(u, t_i, delta)
}

pub fn td_frozen_step(
    p: &SplitProblem,
    u: &GridFunction,
    t_i: f64,
    delta: f64,
    cfg: &PropagatorConfig,
    freeze: FreezePoint,
) -> Result<GridFunction> {
    Splitter::new(p, cfg)?.td_frozen_step(u, t_i, delta, freeze)
}

/// `states[0] = u0`, `states[i+1] = step(states[i], t_i, δ)`.
pub fn run_scheme(p: &SplitProblem, spec: &SchemeSpec, grid: &Grid, cfg: &PropagatorConfig) -> Result<Trajectory> {
    let times = TimeGrid::new(spec.n, p.horizon())?;
    let delta = times.step();
    let mut splitter = Splitter::new(p, cfg)?;
    let mut states = Vec::with_capacity(spec.n + 1);
    states.push(grid.sample(p.u0(), 0.0)?);
    for i in 0..spec.n {
        let next = splitter.step(&spec.kind, &states[i], times.node(i), delta)?;
        states.push(next);
    }
    Trajectory::new(times, states)
}
