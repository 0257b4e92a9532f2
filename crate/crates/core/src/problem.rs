//! Second-order operators `a^{ij} D_ij + a^i D_i + a`, splittings of an
//! equation into `d1` parts, ellipticity checks and manufactured solutions.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::expr::{Expr, Var};
use crate::grid::{periodicity_defect, Grid, GridFunction, MAX_DIM};

pub const DEFAULT_ELLIPTICITY_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-13;
const PERIODICITY_TOL: f64 = 1e-10;
const CHECK_TIMES: [f64; 3] = [0.0, 0.37, 1.0];

#[derive(Clone, Debug, PartialEq)]
pub struct OperatorSpec {
    dim: usize,
    a2: Vec<Vec<Expr>>,
    a1: Vec<Expr>,
    a0: Expr,
}

impl OperatorSpec {
    /// Validates symmetry of `a2` and periodicity of every coefficient.
    pub fn new(a2: Vec<Vec<Expr>>, a1: Vec<Expr>, a0: Expr) -> Result<OperatorSpec> {
        let dim = a1.len();
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::Problem(format!("operator dimension {dim} not in 1..={MAX_DIM}")));
        }
        if a2.len() != dim || a2.iter().any(|row| row.len() != dim) {
            return Err(Error::Problem(
                "second-order coefficients must form a dim x dim matrix".into(),
            ));
        }
        let op = OperatorSpec { dim, a2, a1, a0 };
        for c in op.coefficients() {
            let axis = usize::from(c.max_axis());
            if axis > dim {
                return Err(Error::Problem(format!(
                    "coefficient {c} references x{axis} in dimension {dim}"
                )));
            }
            let defect = periodicity_defect(c, dim, &CHECK_TIMES)?;
            if defect > PERIODICITY_TOL {
                return Err(Error::Problem(format!(
                    "coefficient {c} is not 2π-periodic (defect {defect:.2e})"
                )));
            }
        }
        for i in 0..dim {
            for j in i + 1..dim {
                op.check_symmetric(i, j)?;
            }
        }
        Ok(op)
    }

    pub fn zero(dim: usize) -> OperatorSpec {
        OperatorSpec {
            dim,
            a2: vec![vec![Expr::zero(); dim]; dim],
            a1: vec![Expr::zero(); dim],
            a0: Expr::zero(),
        }
    }

    /// `coeff * Δ`.
    pub fn laplacian(dim: usize, coeff: f64) -> OperatorSpec {
        let mut op = OperatorSpec::zero(dim);
        for i in 0..dim {
            op.a2[i][i] = Expr::Const(coeff);
        }
        op
    }

    /// Multiplication by `potential`.
    pub fn multiplication(dim: usize, potential: Expr) -> Result<OperatorSpec> {
        OperatorSpec::new(vec![vec![Expr::zero(); dim]; dim], vec![Expr::zero(); dim], potential)
    }

    fn check_symmetric(&self, i: usize, j: usize) -> Result<()> {
        let lattice = [0.1, 1.3, 2.9, 4.4, 5.7];
        for &t in &CHECK_TIMES {
            for &x1 in &lattice {
                for &x2 in &lattice {
                    let x = [x1, x2];
                    let a = self.a2[i][j].eval(t, &x[..self.dim]);
                    let b = self.a2[j][i].eval(t, &x[..self.dim]);
                    let (a, b) = (
                        a.map_err(|e| Error::Eval(e.to_string()))?,
                        b.map_err(|e| Error::Eval(e.to_string()))?,
                    );
                    if (a - b).abs() > SYMMETRY_TOL {
                        return Err(Error::Problem(format!(
                            "a2[{i}][{j}] and a2[{j}][{i}] differ at t={t}, x={x:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn a2(&self) -> &[Vec<Expr>] {
        &self.a2
    }

    pub fn a1(&self) -> &[Expr] {
        &self.a1
    }

    pub fn a0(&self) -> &Expr {
        &self.a0
    }

    pub fn coefficients(&self) -> impl Iterator<Item = &Expr> {
        self.a2
            .iter()
            .flatten()
            .chain(self.a1.iter())
            .chain(std::iter::once(&self.a0))
    }

    pub fn time_dependent(&self) -> bool {
        self.coefficients().any(|c| c.depends_on(Var::T))
    }

    pub fn space_dependent(&self) -> bool {
        self.coefficients().any(Expr::depends_on_space)
    }

    /// True when only the zero-order coefficient can be non-zero.
    pub fn is_multiplication(&self) -> bool {
        self.a2.iter().flatten().chain(self.a1.iter()).all(Expr::is_zero)
    }

    pub fn is_zero(&self) -> bool {
        self.coefficients().all(Expr::is_zero)
    }

    fn map(&self, f: impl Fn(&Expr) -> Expr) -> OperatorSpec {
        OperatorSpec {
            dim: self.dim,
            a2: self.a2.iter().map(|row| row.iter().map(&f).collect()).collect(),
            a1: self.a1.iter().map(&f).collect(),
            a0: f(&self.a0),
        }
    }

    /// `factor * L`.
    pub fn scaled(&self, factor: f64) -> OperatorSpec {
        self.map(|c| Expr::mul(Expr::Const(factor), c.clone()))
    }

    /// Coefficients with `t` replaced by the constant `s`.
    pub fn frozen_at(&self, s: f64) -> OperatorSpec {
        self.map(|c| c.substitute(Var::T, &Expr::Const(s)))
    }

    pub fn plus(&self, other: &OperatorSpec) -> Result<OperatorSpec> {
        if self.dim != other.dim {
            return Err(Error::Problem("operators of different dimension".into()));
        }
        let dim = self.dim;
        Ok(OperatorSpec {
            dim,
            a2: (0..dim)
                .map(|i| {
                    (0..dim)
                        .map(|j| Expr::add(self.a2[i][j].clone(), other.a2[i][j].clone()))
                        .collect()
                })
                .collect(),
            a1: (0..dim)
                .map(|i| Expr::add(self.a1[i].clone(), other.a1[i].clone()))
                .collect(),
            a0: Expr::add(self.a0.clone(), other.a0.clone()),
        })
    }

    /// Symbolic `L e`.
    pub fn apply_symbolic(&self, e: &Expr) -> Expr {
        let mut out = Expr::mul(self.a0.clone(), e.clone());
        for i in 0..self.dim {
            let di = e.differentiate(Var::X(i as u8 + 1));
            for j in 0..self.dim {
                if self.a2[i][j].is_zero() {
                    continue;
                }
                let dij = di.differentiate(Var::X(j as u8 + 1));
                out = Expr::add(out, Expr::mul(self.a2[i][j].clone(), dij));
            }
            out = Expr::add(out, Expr::mul(self.a1[i].clone(), di));
        }
        out
    }

    /// Constant coefficient values, if every coefficient is free of `x`
    /// (time is ignored; callers freeze it first).
    pub fn constant_coefficients(&self, t: f64) -> Option<ConstantCoefficients> {
        if self.space_dependent() {
            return None;
        }
        let ev = |c: &Expr| c.eval(t, &[]).ok();
        let mut a2 = [[0.0; MAX_DIM]; MAX_DIM];
        let mut a1 = [0.0; MAX_DIM];
        for i in 0..self.dim {
            for (dst, e) in a2[i].iter_mut().zip(&self.a2[i]) {
                *dst = ev(e)?;
            }
            a1[i] = ev(&self.a1[i])?;
        }
        Some(ConstantCoefficients {
            dim: self.dim,
            a2,
            a1,
            a0: ev(&self.a0)?,
        })
    }

    /// Coefficients evaluated on the grid at time `t`, multiplied by `factor`.
    pub fn sample(&self, grid: &Grid, t: f64, factor: f64) -> Result<SampledOperator> {
        if grid.dim() != self.dim {
            return Err(Error::GridMismatch(format!(
                "operator of dimension {} applied on a {}-dimensional grid",
                self.dim,
                grid.dim()
            )));
        }
        let take = |c: &Expr| -> Result<Option<GridFunction>> {
            if c.is_zero() {
                Ok(None)
            } else {
                Ok(Some(grid.sample(c, t)?.scale(factor)))
            }
        };
        let mut terms = Vec::new();
        for i in 0..self.dim {
            for j in 0..self.dim {
                if let Some(g) = take(&self.a2[i][j])? {
                    let mut gamma = vec![0; self.dim];
                    gamma[i] += 1;
                    gamma[j] += 1;
                    terms.push((gamma, g));
                }
            }
            if let Some(g) = take(&self.a1[i])? {
                let mut gamma = vec![0; self.dim];
                gamma[i] = 1;
                terms.push((gamma, g));
            }
        }
        Ok(SampledOperator {
            grid: grid.clone(),
            derivative_terms: terms,
            potential: take(&self.a0)?,
        })
    }

    pub fn apply(&self, u: &GridFunction, t: f64) -> Result<GridFunction> {
        self.sample(u.grid(), t, 1.0)?.apply(u)
    }
}

pub fn apply_operator(op: &OperatorSpec, u: &GridFunction, t: f64) -> Result<GridFunction> {
    op.apply(u, t)
}

/// Coefficients of an operator that does not vary in space.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantCoefficients {
    pub dim: usize,
    pub a2: [[f64; MAX_DIM]; MAX_DIM],
    pub a1: [f64; MAX_DIM],
    pub a0: f64,
}

impl ConstantCoefficients {
    /// Fourier symbol at the mode with bins `bins`, consistent with
    /// [`Grid::derivative_symbol`].
    pub fn symbol(&self, grid: &Grid, bins: &[usize]) -> Complex64 {
        let mut s = Complex64::new(self.a0, 0.0);
        let mut gamma = [0usize; MAX_DIM];
        for i in 0..self.dim {
            for j in 0..self.dim {
                if self.a2[i][j] != 0.0 {
                    gamma[..self.dim].fill(0);
                    gamma[i] += 1;
                    gamma[j] += 1;
                    s += self.a2[i][j] * grid.derivative_symbol(&gamma[..self.dim], bins);
                }
            }
            if self.a1[i] != 0.0 {
                gamma[..self.dim].fill(0);
                gamma[i] = 1;
                s += self.a1[i] * grid.derivative_symbol(&gamma[..self.dim], bins);
            }
        }
        s
    }

    /// Bit patterns of every coefficient, usable as a cache key.
    pub fn key(&self) -> Vec<u64> {
        let mut k = vec![self.dim as u64];
        for i in 0..self.dim {
            k.extend(self.a2[i][..self.dim].iter().map(|v| v.to_bits()));
            k.push(self.a1[i].to_bits());
        }
        k.push(self.a0.to_bits());
        k
    }
}

/// An operator with coefficients pre-sampled on a grid at a fixed time.
#[derive(Clone, Debug)]
pub struct SampledOperator {
    grid: Grid,
    derivative_terms: Vec<(Vec<usize>, GridFunction)>,
    potential: Option<GridFunction>,
}

impl SampledOperator {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn potential(&self) -> Option<&GridFunction> {
        self.potential.as_ref()
    }

    pub fn is_multiplication(&self) -> bool {
        self.derivative_terms.is_empty()
    }

    /// Spatial means of the coefficients, used to build preconditioners.
    pub fn mean_coefficients(&self) -> ConstantCoefficients {
        let dim = self.grid.dim();
        let mean = |g: &GridFunction| g.values().iter().sum::<f64>() / g.values().len() as f64;
        let mut c = ConstantCoefficients {
            dim,
            a2: [[0.0; MAX_DIM]; MAX_DIM],
            a1: [0.0; MAX_DIM],
            a0: self.potential.as_ref().map_or(0.0, mean),
        };
        for (gamma, g) in &self.derivative_terms {
            let order: usize = gamma.iter().sum();
            let axes: Vec<usize> = gamma
                .iter()
                .enumerate()
                .flat_map(|(axis, &k)| std::iter::repeat_n(axis, k))
                .collect();
            if order == 2 {
                // a2[i][j] and a2[j][i] each contribute one term
                let (i, j) = (axes[0], axes[1]);
                if i == j {
                    c.a2[i][i] += mean(g);
                } else {
                    c.a2[i][j] += 0.5 * mean(g);
                    c.a2[j][i] += 0.5 * mean(g);
                }
            } else {
                c.a1[axes[0]] += mean(g);
            }
        }
        c
    }

    pub fn apply(&self, u: &GridFunction) -> Result<GridFunction> {
        if *u.grid() != self.grid {
            return Err(Error::GridMismatch("operator sampled on a different grid".into()));
        }
        let n = self.grid.len();
        let mut out = match &self.potential {
            Some(a) => a.zip_with(u, |a, v| a * v)?.into_values(),
            None => vec![0.0; n],
        };
        if !self.derivative_terms.is_empty() {
            let spec = self.grid.spectrum(u);
            let dim = self.grid.dim();
            let mut bins = [0usize; MAX_DIM];
            for (gamma, coeff) in &self.derivative_terms {
                let mut d = spec.clone();
                for (i, c) in d.iter_mut().enumerate() {
                    self.grid.node_index(i, &mut bins[..dim]);
                    *c *= self.grid.derivative_symbol(gamma, &bins[..dim]);
                }
                let du = self.grid.from_spectrum(d)?;
                for ((o, a), v) in out.iter_mut().zip(coeff.values()).zip(du.values()) {
                    *o += a * v;
                }
            }
        }
        self.grid.from_values(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EllipticityReport {
    pub min_eigenvalue: f64,
    pub worst_time: f64,
    pub worst_node: usize,
    pub tol: f64,
    pub passed: bool,
}

fn min_eigenvalue(m: &[[f64; MAX_DIM]; MAX_DIM], dim: usize) -> f64 {
    match dim {
        1 => m[0][0],
        _ => {
            let (a, b, d) = (m[0][0], 0.5 * (m[0][1] + m[1][0]), m[1][1]);
            let mean = 0.5 * (a + d);
            let radius = (0.25 * (a - d) * (a - d) + b * b).sqrt();
            mean - radius
        }
    }
}

/// Minimum eigenvalue of `a2` over all nodes and listed times; passes iff it
/// is `>= -tol`, so degenerate operators are admitted.
pub fn check_ellipticity(op: &OperatorSpec, grid: &Grid, times: &[f64], tol: f64) -> Result<EllipticityReport> {
    if grid.dim() != op.dim {
        return Err(Error::GridMismatch(
            "ellipticity check on a grid of another dimension".into(),
        ));
    }
    let dim = op.dim;
    let mut report = EllipticityReport {
        min_eigenvalue: f64::INFINITY,
        worst_time: 0.0,
        worst_node: 0,
        tol,
        passed: true,
    };
    for &t in times {
        let sampled: Vec<Vec<GridFunction>> = op
            .a2
            .iter()
            .map(|row| row.iter().map(|c| grid.sample(c, t)).collect::<Result<_>>())
            .collect::<Result<_>>()?;
        for node in 0..grid.len() {
            let mut m = [[0.0; MAX_DIM]; MAX_DIM];
            for i in 0..dim {
                for j in 0..dim {
                    m[i][j] = sampled[i][j].values()[node];
                }
            }
            let lambda = min_eigenvalue(&m, dim);
            if lambda < report.min_eigenvalue {
                report.min_eigenvalue = lambda;
                report.worst_time = t;
                report.worst_node = node;
            }
        }
    }
    report.passed = report.min_eigenvalue >= -tol;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitProblem {
    ops: Vec<OperatorSpec>,
    free_terms: Vec<Expr>,
    u0: Expr,
    horizon: f64,
}

impl SplitProblem {
    pub fn new(ops: Vec<OperatorSpec>, free_terms: Vec<Expr>, u0: Expr, horizon: f64) -> Result<SplitProblem> {
        if ops.is_empty() {
            return Err(Error::Problem("a splitting needs at least one operator".into()));
        }
        if free_terms.len() != ops.len() {
            return Err(Error::Problem(format!(
                "{} operators but {} free terms",
                ops.len(),
                free_terms.len()
            )));
        }
        let dim = ops[0].dim;
        if ops.iter().any(|op| op.dim != dim) {
            return Err(Error::Problem("all operators must share one dimension".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Problem(format!("horizon must be positive, got {horizon}")));
        }
        for e in free_terms.iter().chain(std::iter::once(&u0)) {
            if usize::from(e.max_axis()) > dim {
                return Err(Error::Problem(format!("{e} references a coordinate beyond x{dim}")));
            }
            let defect = periodicity_defect(e, dim, &CHECK_TIMES)?;
            if defect > PERIODICITY_TOL {
                return Err(Error::Problem(format!("{e} is not 2π-periodic (defect {defect:.2e})")));
            }
        }
        Ok(SplitProblem {
            ops,
            free_terms,
            u0,
            horizon,
        })
    }

    pub fn dim(&self) -> usize {
        self.ops[0].dim
    }

    /// Number of parts `d1`.
    pub fn parts(&self) -> usize {
        self.ops.len()
    }

    pub fn ops(&self) -> &[OperatorSpec] {
        &self.ops
    }

    pub fn free_terms(&self) -> &[Expr] {
        &self.free_terms
    }

    pub fn u0(&self) -> &Expr {
        &self.u0
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn with_horizon(&self, horizon: f64) -> Result<SplitProblem> {
        SplitProblem::new(self.ops.clone(), self.free_terms.clone(), self.u0.clone(), horizon)
    }

    pub fn with_initial(&self, u0: Expr) -> Result<SplitProblem> {
        SplitProblem::new(self.ops.clone(), self.free_terms.clone(), u0, self.horizon)
    }

    pub fn with_free_terms(&self, free_terms: Vec<Expr>) -> Result<SplitProblem> {
        SplitProblem::new(self.ops.clone(), free_terms, self.u0.clone(), self.horizon)
    }

    /// Whether any operator coefficient depends on `t`.
    pub fn operators_time_dependent(&self) -> bool {
        self.ops.iter().any(OperatorSpec::time_dependent)
    }

    pub fn time_dependent(&self) -> bool {
        self.operators_time_dependent() || self.free_terms.iter().any(|f| f.depends_on(Var::T))
    }

    pub fn total_forcing(&self) -> Expr {
        self.free_terms
            .iter()
            .cloned()
            .reduce(Expr::add)
            .unwrap_or_else(Expr::zero)
    }

    /// The single-part problem `L = Σ L_r`, `f = Σ f_r`.
    pub fn unsplit(&self) -> Result<SplitProblem> {
        SplitProblem::new(
            vec![total_operator(self)?],
            vec![self.total_forcing()],
            self.u0.clone(),
            self.horizon,
        )
    }
}

/// Coefficient-wise symbolic sum of the parts.
pub fn total_operator(p: &SplitProblem) -> Result<OperatorSpec> {
    let mut total = p.ops[0].clone();
    for op in &p.ops[1..] {
        total = total.plus(op)?;
    }
    Ok(total)
}

/// A split problem whose forcing was derived so that `exact` solves it.
#[derive(Clone, Debug, PartialEq)]
pub struct ManufacturedProblem {
    problem: SplitProblem,
    exact: Expr,
    forcing: Expr,
}

impl ManufacturedProblem {
    pub fn problem(&self) -> &SplitProblem {
        &self.problem
    }

    pub fn exact(&self) -> &Expr {
        &self.exact
    }

    /// `∂_t u − L u` before distribution over the parts.
    pub fn forcing(&self) -> &Expr {
        &self.forcing
    }

    /// Symbolic residual `∂_t u − L u − Σ f_r`.
    pub fn residual(&self) -> Result<Expr> {
        let l = total_operator(&self.problem)?.apply_symbolic(&self.exact);
        Ok(Expr::sub(
            Expr::sub(self.exact.differentiate(Var::T), l),
            self.problem.total_forcing(),
        ))
    }
}

/// Derives `f = ∂_t u − L u` symbolically and distributes it over the parts
/// with the given weights. The skeleton's own free terms and initial data are
/// replaced.
pub fn manufacture(exact: Expr, skeleton: &SplitProblem, distribution: &[f64]) -> Result<ManufacturedProblem> {
    if distribution.len() != skeleton.parts() {
        return Err(Error::Problem(format!(
            "distribution has {} weights for {} parts",
            distribution.len(),
            skeleton.parts()
        )));
    }
    let sum: f64 = distribution.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::Problem(format!("distribution weights sum to {sum}, not 1")));
    }
    let total = total_operator(skeleton)?;
    let forcing = Expr::sub(exact.differentiate(Var::T), total.apply_symbolic(&exact));
    let free_terms = distribution
        .iter()
        .map(|&w| Expr::mul(Expr::Const(w), forcing.clone()))
        .collect();
    let u0 = exact.substitute(Var::T, &Expr::Const(0.0));
    let problem = SplitProblem::new(skeleton.ops.clone(), free_terms, u0, skeleton.horizon)?;
    Ok(ManufacturedProblem {
        problem,
        exact,
        forcing,
    })
}

/// Weight vector placing all forcing on the first part.
pub fn first_part_distribution(parts: usize) -> Vec<f64> {
    let mut w = vec![0.0; parts];
    w[0] = 1.0;
    w
}
