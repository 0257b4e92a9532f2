//! Sub-propagators: tolerance-controlled solves of `v' = L_r v + f_r` over
//! one sub-interval.
//!
//! Three routes are available:
//!
//! * **Diagonal exponential.** When the effective coefficients do not change
//!   over the sub-interval and the operator is diagonal in some basis, the
//!   flow is an exact exponential per component. Constant coefficients are
//!   diagonal in Fourier space (`spectral_const`); a pure multiplication
//!   operator is diagonal in physical space. The forcing enters through the
//!   Duhamel integral, exact for time-independent forcing and otherwise
//!   computed with adaptive composite Gauss–Legendre quadrature.
//! * **Implicit adaptive.** An L-stable, stiffly accurate SDIRK method of
//!   order 4 on the spectrally discretised operator, with step-doubling error
//!   control. Stage systems are solved by preconditioned GMRES.
//! * **Auto** picks the first applicable route above.

use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::expr::{Expr, Var};
use crate::grid::{Grid, GridFunction, NormSpec, MAX_DIM};
use crate::krylov::{gmres, GmresOptions};
use crate::problem::{OperatorSpec, SampledOperator, SplitProblem};
use crate::schemes::{TimeGrid, Trajectory};

pub const DEFAULT_SUBSTEP_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_INTERNAL_STEPS: usize = 1_000_000;
const BLOW_UP_FACTOR: f64 = 1e8;
const MAX_QUADRATURE_PANELS: usize = 1 << 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    SpectralConst,
    ImplicitAdaptive,
    Auto,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagatorConfig {
    pub method: Method,
    pub substep_tol: f64,
    pub max_internal_steps: usize,
}

impl Default for PropagatorConfig {
    fn default() -> Self {
        PropagatorConfig {
            method: Method::Auto,
            substep_tol: DEFAULT_SUBSTEP_TOL,
            max_internal_steps: DEFAULT_MAX_INTERNAL_STEPS,
        }
    }
}

impl PropagatorConfig {
    pub fn with_tol(substep_tol: f64) -> Self {
        PropagatorConfig {
            substep_tol,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.substep_tol > 0.0 && self.substep_tol.is_finite()) {
            return Err(Error::Config(format!(
                "substep_tol must be positive, got {}",
                self.substep_tol
            )));
        }
        if self.max_internal_steps == 0 {
            return Err(Error::Config("max_internal_steps must be positive".into()));
        }
        Ok(())
    }
}

/// How the coefficients of one sub-problem are read over the sub-interval.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TimeMode {
    AsGiven,
    /// Coefficients and free term evaluated at `s` and held constant.
    FrozenAt(f64),
    /// Operator and free term multiplied by the factor.
    Scaled(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Route {
    FourierDiagonal,
    PhysicalDiagonal,
    Implicit,
}

/// Exact one-interval propagator of a diagonal operator.
struct Kernel {
    lambda: Vec<Complex64>,
    exp: Vec<Complex64>,
    phi1: Vec<Complex64>,
}

#[derive(Clone, PartialEq, Eq, Hash)]
struct KernelKey {
    route: Route,
    coefficients: String,
    width: u64,
}

/// A sub-solver that caches diagonal propagators per (operator, width).
/// Results are identical with or without the cache.
pub struct Propagator {
    cfg: PropagatorConfig,
    cache: HashMap<KernelKey, Arc<Kernel>>,
}

// 8-point Gauss–Legendre rule on [-1, 1].
const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_2,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_3,
    0.222_381_034_453_374_5,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

// Stiffly accurate, L-stable SDIRK of order 4 (five stages, gamma = 1/4).
const SDIRK_GAMMA: f64 = 0.25;
const SDIRK_C: [f64; 5] = [0.25, 0.75, 11.0 / 20.0, 0.5, 1.0];
const SDIRK_A: [[f64; 5]; 5] = [
    [0.25, 0.0, 0.0, 0.0, 0.0],
    [0.5, 0.25, 0.0, 0.0, 0.0],
    [17.0 / 50.0, -1.0 / 25.0, 0.25, 0.0, 0.0],
    [371.0 / 1360.0, -137.0 / 2720.0, 15.0 / 544.0, 0.25, 0.0],
    [25.0 / 24.0, -49.0 / 48.0, 125.0 / 16.0, -85.0 / 12.0, 0.25],
];
const SDIRK_ORDER: i32 = 4;

/// `(e^z - 1) / z`, accurate near zero.
fn phi1(z: Complex64) -> Complex64 {
    if z.norm() < 0.5 {
        let mut term = Complex64::new(1.0, 0.0);
        let mut sum = term;
        for k in 2..24 {
            term *= z / k as f64;
            sum += term;
        }
        sum
    } else {
        (z.exp() - 1.0) / z
    }
}

/// The sub-problem as seen by the solver after applying the time mode.
struct Effective {
    op: OperatorSpec,
    forcing: Expr,
    factor: f64,
}

impl Effective {
    fn new(op: &OperatorSpec, f: &Expr, mode: TimeMode) -> Result<Effective> {
        Ok(match mode {
            TimeMode::AsGiven => Effective {
                op: op.clone(),
                forcing: f.clone(),
                factor: 1.0,
            },
            TimeMode::FrozenAt(s) => Effective {
                op: op.frozen_at(s),
                forcing: f.substitute(Var::T, &Expr::Const(s)),
                factor: 1.0,
            },
            TimeMode::Scaled(d) => {
                if d == 0 {
                    return Err(Error::Config("scaling factor must be at least 1".into()));
                }
                Effective {
                    op: op.clone(),
                    forcing: f.clone(),
                    factor: f64::from(d),
                }
            }
        })
    }

    fn route(&self, method: Method) -> Result<Route> {
        let steady = !self.op.time_dependent();
        let fourier = steady && !self.op.space_dependent();
        match method {
            Method::SpectralConst if fourier => Ok(Route::FourierDiagonal),
            Method::SpectralConst => Err(Error::SpectralInvalid),
            Method::ImplicitAdaptive => Ok(Route::Implicit),
            Method::Auto if fourier => Ok(Route::FourierDiagonal),
            Method::Auto if steady && self.op.is_multiplication() => Ok(Route::PhysicalDiagonal),
            Method::Auto => Ok(Route::Implicit),
        }
    }

    fn forcing_at(&self, grid: &Grid, t: f64) -> Result<GridFunction> {
        Ok(grid.sample(&self.forcing, t)?.scale(self.factor))
    }
}

/// Which route `propagate` would take for this sub-problem.
pub fn select_route(op: &OperatorSpec, f: &Expr, cfg: &PropagatorConfig, mode: TimeMode) -> Result<Route> {
    Effective::new(op, f, mode)?.route(cfg.method)
}

impl Propagator {
    pub fn new(cfg: PropagatorConfig) -> Result<Propagator> {
        cfg.validate()?;
        Ok(Propagator {
            cfg,
            cache: HashMap::new(),
        })
    }

    pub fn config(&self) -> &PropagatorConfig {
        &self.cfg
    }

    /// `v(t1)` for `v' = L̃ v + f̃`, `v(t0) = u`, with `(L̃, f̃)` given by `mode`.
    pub fn propagate(
        &mut self,
        op: &OperatorSpec,
        f: &Expr,
        u: &GridFunction,
        t0: f64,
        t1: f64,
        mode: TimeMode,
    ) -> Result<GridFunction> {
        if t1.partial_cmp(&t0).is_none_or(|o| o.is_lt()) {
            return Err(Error::Config(format!("sub-interval [{t0}, {t1}] is reversed")));
        }
        if op.dim() != u.grid().dim() {
            return Err(Error::GridMismatch(format!(
                "operator of dimension {} on a {}-dimensional grid",
                op.dim(),
                u.grid().dim()
            )));
        }
        let eff = Effective::new(op, f, mode)?;
        let route = eff.route(self.cfg.method)?;
        if t1 == t0 || (eff.op.is_zero() && eff.forcing.is_zero()) {
            return Ok(u.clone());
        }
        let scale = 1.0 + u.norm(NormSpec::l2())?;
        let tol = self.cfg.substep_tol * scale;
        let out = match route {
            Route::FourierDiagonal | Route::PhysicalDiagonal => self.diagonal(&eff, route, u, t0, t1, tol)?,
            Route::Implicit => implicit(&eff, u, t0, t1, tol, &self.cfg)?,
        };
        let initial = u.norm(NormSpec::l2())?;
        let current = out.norm(NormSpec::l2())?;
        if current > BLOW_UP_FACTOR * initial.max(1.0) {
            return Err(Error::Instability { initial, current });
        }
        Ok(out)
    }

    fn kernel(&mut self, eff: &Effective, route: Route, grid: &Grid, width: f64) -> Result<Arc<Kernel>> {
        let coefficients = match route {
            Route::FourierDiagonal => {
                let c = eff.op.constant_coefficients(0.0).ok_or(Error::SpectralInvalid)?;
                format!("{:?}/{}", c.key(), eff.factor.to_bits())
            }
            _ => format!("{}/{}", eff.op.a0(), eff.factor.to_bits()),
        };
        let key = KernelKey {
            route,
            coefficients,
            width: width.to_bits(),
        };
        if let Some(k) = self.cache.get(&key) {
            return Ok(Arc::clone(k));
        }
        let lambda: Vec<Complex64> = match route {
            Route::FourierDiagonal => {
                let c = eff.op.constant_coefficients(0.0).ok_or(Error::SpectralInvalid)?;
                let mut bins = [0usize; MAX_DIM];
                (0..grid.len())
                    .map(|i| {
                        grid.node_index(i, &mut bins[..grid.dim()]);
                        eff.factor * c.symbol(grid, &bins[..grid.dim()])
                    })
                    .collect()
            }
            _ => grid
                .sample(eff.op.a0(), 0.0)?
                .values()
                .iter()
                .map(|&a| Complex64::new(eff.factor * a, 0.0))
                .collect(),
        };
        let kernel = Arc::new(Kernel {
            exp: lambda.iter().map(|&l| (l * width).exp()).collect(),
            phi1: lambda.iter().map(|&l| phi1(l * width) * width).collect(),
            lambda,
        });
        self.cache.insert(key, Arc::clone(&kernel));
        Ok(kernel)
    }

    fn diagonal(
        &mut self,
        eff: &Effective,
        route: Route,
        u: &GridFunction,
        t0: f64,
        t1: f64,
        tol: f64,
    ) -> Result<GridFunction> {
        let grid = u.grid();
        let width = t1 - t0;
        let kernel = self.kernel(eff, route, grid, width)?;
        let fourier = route == Route::FourierDiagonal;
        let to_basis = |g: &GridFunction| -> Vec<Complex64> {
            if fourier {
                grid.spectrum(g)
            } else {
                g.values().iter().map(|&v| Complex64::new(v, 0.0)).collect()
            }
        };
        let mut state: Vec<Complex64> = to_basis(u).iter().zip(&kernel.exp).map(|(a, e)| a * e).collect();

        if !eff.forcing.is_zero() {
            let duhamel = if !eff.forcing.depends_on(Var::T) {
                let g = to_basis(&eff.forcing_at(grid, t0)?);
                g.iter().zip(&kernel.phi1).map(|(a, p)| a * p).collect()
            } else {
                let norm_scale = if fourier { 1.0 / grid.len() as f64 } else { 1.0 };
                duhamel_quadrature(
                    &kernel.lambda,
                    |s| Ok(to_basis(&eff.forcing_at(grid, s)?)),
                    t0,
                    t1,
                    tol,
                    norm_scale,
                )?
            };
            for (s, d) in state.iter_mut().zip(duhamel) {
                *s += d;
            }
        }

        if fourier {
            grid.from_spectrum(state)
        } else {
            grid.from_values(state.iter().map(|c| c.re).collect())
        }
    }
}

/// `∫_{t0}^{t1} e^{λ(t1-s)} g(s) ds` per component, refining composite
/// Gauss–Legendre panels until two successive estimates agree within `tol`
/// (measured as `norm_scale * Σ|Δ|`, a bound on the sup-norm change).
fn duhamel_quadrature<G>(
    lambda: &[Complex64],
    g: G,
    t0: f64,
    t1: f64,
    tol: f64,
    norm_scale: f64,
) -> Result<Vec<Complex64>>
where
    G: Fn(f64) -> Result<Vec<Complex64>>,
{
    let estimate = |panels: usize| -> Result<Vec<Complex64>> {
        let n = lambda.len();
        let mut acc = vec![Complex64::new(0.0, 0.0); n];
        let h = (t1 - t0) / panels as f64;
        for p in 0..panels {
            let a = t0 + p as f64 * h;
            for (node, weight) in GL_NODES.iter().zip(GL_WEIGHTS) {
                let s = a + 0.5 * h * (node + 1.0);
                let gs = g(s)?;
                let w = 0.5 * h * weight;
                for ((acc, l), gv) in acc.iter_mut().zip(lambda).zip(&gs) {
                    *acc += w * (l * (t1 - s)).exp() * gv;
                }
            }
        }
        Ok(acc)
    };
    let mut panels = 1;
    let mut coarse = estimate(panels)?;
    loop {
        panels *= 2;
        let fine = estimate(panels)?;
        let diff: f64 = coarse.iter().zip(&fine).map(|(a, b)| (a - b).norm()).sum::<f64>() * norm_scale;
        if diff <= tol {
            return Ok(fine);
        }
        if panels >= MAX_QUADRATURE_PANELS {
            return Err(Error::MaxSteps(panels * GL_NODES.len()));
        }
        coarse = fine;
    }
}

/// Stage data for one implicit step on `v' = A(t) v + g(t)`.
struct Linearised<'a> {
    eff: &'a Effective,
    grid: Grid,
    steady: Option<SampledOperator>,
}

/// Relative level below which step-doubling differences are linear-solve noise.
const SOLVE_NOISE: f64 = 1e-14;

fn noise_level(v: &GridFunction) -> f64 {
    let l2 = v.values().iter().map(|x| x * x).sum::<f64>().sqrt();
    SOLVE_NOISE * (1.0 + l2)
}

impl Linearised<'_> {
    fn operator_at(&self, t: f64) -> Result<SampledOperator> {
        match &self.steady {
            Some(op) => Ok(op.clone()),
            None => self.eff.op.sample(&self.grid, t, self.eff.factor),
        }
    }

    fn forcing_at(&self, t: f64) -> Result<Option<GridFunction>> {
        if self.eff.forcing.is_zero() {
            Ok(None)
        } else {
            Ok(Some(self.eff.forcing_at(&self.grid, t)?))
        }
    }

    /// Solves `(I - c A) y = rhs` to residual `target`, floored at the noise level.
    fn solve(
        &self,
        a: &SampledOperator,
        c: f64,
        rhs: &GridFunction,
        guess: &GridFunction,
        target: f64,
    ) -> Result<GridFunction> {
        if a.is_multiplication() {
            return match a.potential() {
                None => Ok(rhs.clone()),
                Some(p) => rhs.zip_with(p, |r, pv| r / (1.0 - c * pv)),
            };
        }
        let grid = &self.grid;
        let mean = a.mean_coefficients();
        let mut bins = [0usize; MAX_DIM];
        let inv_symbol: Vec<Complex64> = (0..grid.len())
            .map(|i| {
                grid.node_index(i, &mut bins[..grid.dim()]);
                let d = Complex64::new(1.0, 0.0) - c * mean.symbol(grid, &bins[..grid.dim()]);
                if d.norm() < 1e-3 {
                    Complex64::new(1.0, 0.0)
                } else {
                    d.inv()
                }
            })
            .collect();
        let apply = |v: &[f64]| -> Result<Vec<f64>> {
            let vf = grid.from_values(v.to_vec())?;
            let av = a.apply(&vf)?;
            Ok(v.iter().zip(av.values()).map(|(x, y)| x - c * y).collect())
        };
        let precond = |v: &[f64]| -> Result<Vec<f64>> {
            let mut s = grid.spectrum(&grid.from_values(v.to_vec())?);
            for (x, m) in s.iter_mut().zip(&inv_symbol) {
                *x *= m;
            }
            Ok(grid.from_spectrum(s)?.into_values())
        };
        let opts = GmresOptions {
            restart: 40,
            max_iterations: 400,
            tol: target.max(noise_level(rhs)),
        };
        let x = gmres(apply, precond, rhs.values(), guess.values().to_vec(), &opts)?;
        grid.from_values(x)
    }

    fn step(&self, y: &GridFunction, t: f64, h: f64, target: f64) -> Result<GridFunction> {
        let mut slopes: Vec<GridFunction> = Vec::with_capacity(5);
        let mut stage = y.clone();
        for (s, row) in SDIRK_A.iter().enumerate() {
            let ts = t + SDIRK_C[s] * h;
            let a = self.operator_at(ts)?;
            let g = self.forcing_at(ts)?;
            let mut rhs = y.clone();
            for (j, k) in slopes.iter().enumerate() {
                rhs = rhs.axpy(h * row[j], k)?;
            }
            if let Some(g) = &g {
                rhs = rhs.axpy(h * SDIRK_GAMMA, g)?;
            }
            stage = self.solve(&a, h * SDIRK_GAMMA, &rhs, &stage, target)?;
            let mut k = a.apply(&stage)?;
            if let Some(g) = &g {
                k = k.add(g)?;
            }
            slopes.push(k);
        }
        // stiffly accurate: the last stage is the step result
        Ok(stage)
    }
}

fn implicit(
    eff: &Effective,
    u: &GridFunction,
    t0: f64,
    t1: f64,
    tol: f64,
    cfg: &PropagatorConfig,
) -> Result<GridFunction> {
    let grid = u.grid().clone();
    let steady = if eff.op.time_dependent() {
        None
    } else {
        Some(eff.op.sample(&grid, t0, eff.factor)?)
    };
    let lin = Linearised { eff, grid, steady };
    let width = t1 - t0;
    let error_divisor = f64::from(2_i32.pow(SDIRK_ORDER as u32) - 1);
    let mut t = t0;
    let mut y = u.clone();
    let mut h = width;
    let mut attempts = 0usize;
    while t < t1 {
        let last = t + h >= t1 || (t1 - (t + h)) < 1e-12 * width;
        if last {
            h = t1 - t;
        }
        attempts += 1;
        if attempts > cfg.max_internal_steps {
            return Err(Error::MaxSteps(cfg.max_internal_steps));
        }
        // below the noise floor the estimate cannot resolve the error
        let allowed = (0.5 * tol * h / width).max(10.0 * noise_level(&y));
        let target = 0.1 * allowed;
        let full = lin.step(&y, t, h, target);
        let halves = lin
            .step(&y, t, 0.5 * h, target)
            .and_then(|mid| lin.step(&mid, t + 0.5 * h, 0.5 * h, target));
        let (full, fine) = match (full, halves) {
            (Ok(a), Ok(b)) => (a, b),
            // A failed linear solve is treated like a rejected step.
            (Err(Error::LinearSolve { .. }), _) | (_, Err(Error::LinearSolve { .. })) => {
                h *= 0.5;
                continue;
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let err = fine.sub(&full)?.max_abs() / error_divisor;
        if err <= allowed {
            t = if last { t1 } else { t + h };
            y = fine;
            let grow = if err == 0.0 {
                2.0
            } else {
                (0.9 * (allowed / err).powf(1.0 / f64::from(SDIRK_ORDER))).clamp(0.2, 2.0)
            };
            h *= grow;
        } else {
            // halve at least; shrink further when the estimate says so
            let shrink = (0.9 * (allowed / err).powf(1.0 / f64::from(SDIRK_ORDER))).clamp(0.1, 0.5);
            h *= shrink;
        }
        if h <= 0.0 || !h.is_finite() {
            return Err(Error::MaxSteps(attempts));
        }
    }
    Ok(y)
}

/// One-shot propagation without caching.
pub fn propagate(
    op: &OperatorSpec,
    f: &Expr,
    u: &GridFunction,
    t0: f64,
    t1: f64,
    cfg: &PropagatorConfig,
    mode: TimeMode,
) -> Result<GridFunction> {
    Propagator::new(*cfg)?.propagate(op, f, u, t0, t1, mode)
}

/// Solves the unsplit problem `v' = (Σ L_r) v + Σ f_r` and records `v` on the
/// nodes of `times`.
pub fn unsplit_reference(
    p: &SplitProblem,
    grid: &Grid,
    times: &TimeGrid,
    cfg: &PropagatorConfig,
) -> Result<Trajectory> {
    let whole = p.unsplit()?;
    let op = &whole.ops()[0];
    let f = &whole.free_terms()[0];
    let mut prop = Propagator::new(PropagatorConfig {
        method: Method::Auto,
        ..*cfg
    })?;
    let mut states = Vec::with_capacity(times.n() + 1);
    let mut v = grid.sample(p.u0(), 0.0)?;
    states.push(v.clone());
    for i in 0..times.n() {
        v = prop.propagate(op, f, &v, times.node(i), times.node(i + 1), TimeMode::AsGiven)?;
        states.push(v);
        v = states[i + 1].clone();
    }
    Trajectory::new(times.clone(), states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use crate::grid::make_grid;
    use crate::problem::manufacture;

    fn e(s: &str) -> Expr {
        parse(s).unwrap()
    }

    fn op1(a2: &str, a1: &str, a0: &str) -> OperatorSpec {
        OperatorSpec::new(vec![vec![e(a2)]], vec![e(a1)], e(a0)).unwrap()
    }

    fn cfg(method: Method) -> PropagatorConfig {
        PropagatorConfig {
            method,
            ..Default::default()
        }
    }

    #[test]
    fn phi1_series_matches_direct() {
        for z in [
            Complex64::new(0.49, 0.0),
            Complex64::new(-0.3, 0.2),
            Complex64::new(0.0, 0.45),
        ] {
            let direct = (z.exp() - 1.0) / z;
            assert!((phi1(z) - direct).norm() < 1e-14);
        }
        assert_eq!(phi1(Complex64::new(0.0, 0.0)), Complex64::new(1.0, 0.0));
    }

    #[test]
    fn sdirk_order_conditions() {
        let b = SDIRK_A[4];
        let c = SDIRK_C;
        for (row, ci) in SDIRK_A.iter().zip(c) {
            assert!((row.iter().sum::<f64>() - ci).abs() < 1e-14);
        }
        let ac: Vec<f64> = SDIRK_A
            .iter()
            .map(|r| r.iter().zip(c).map(|(a, c)| a * c).sum())
            .collect();
        let dotb = |v: &[f64]| b.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
        assert!((dotb(&[1.0; 5]) - 1.0).abs() < 1e-14);
        assert!((dotb(&c) - 0.5).abs() < 1e-14);
        assert!((dotb(&c.map(|x| x * x)) - 1.0 / 3.0).abs() < 1e-14);
        assert!((dotb(&ac) - 1.0 / 6.0).abs() < 1e-14);
        assert!((dotb(&c.map(|x| x * x * x)) - 0.25).abs() < 1e-14);
    }

    #[test]
    fn heat_mode_decay() {
        let g = make_grid(1, 64).unwrap();
        let u = g.sample(&e("sin(x1)"), 0.0).unwrap();
        let want = u.scale((-0.1f64).exp());
        for m in [Method::Auto, Method::SpectralConst, Method::ImplicitAdaptive] {
            let v = propagate(
                &OperatorSpec::laplacian(1, 1.0),
                &Expr::zero(),
                &u,
                0.0,
                0.1,
                &cfg(m),
                TimeMode::AsGiven,
            )
            .unwrap();
            assert!(v.sub(&want).unwrap().max_abs() < 1e-10, "{m:?}");
        }
    }

    #[test]
    fn zero_operator_is_identity() {
        let g = make_grid(1, 32).unwrap();
        let u = g.sample(&e("cos(x1)+0.3*sin(2*x1)"), 0.0).unwrap();
        let v = propagate(
            &OperatorSpec::zero(1),
            &Expr::zero(),
            &u,
            0.0,
            1.0,
            &cfg(Method::Auto),
            TimeMode::AsGiven,
        )
        .unwrap();
        assert_eq!(v, u);
    }

    #[test]
    fn scalar_growth() {
        let g = make_grid(1, 32).unwrap();
        let u = g.sample(&e("1+cos(x1)"), 0.0).unwrap();
        let want = u.scale(1f64.exp());
        for m in [Method::Auto, Method::ImplicitAdaptive] {
            let v = propagate(
                &op1("0", "0", "1"),
                &Expr::zero(),
                &u,
                0.0,
                1.0,
                &cfg(m),
                TimeMode::AsGiven,
            )
            .unwrap();
            assert!(v.sub(&want).unwrap().max_abs() < 1e-10, "{m:?}");
        }
    }

    #[test]
    fn spectral_rejects_variable_coefficients() {
        let g = make_grid(1, 32).unwrap();
        let u = g.sample(&e("sin(x1)"), 0.0).unwrap();
        let r = propagate(
            &op1("0", "0", "cos(x1)"),
            &Expr::zero(),
            &u,
            0.0,
            0.1,
            &cfg(Method::SpectralConst),
            TimeMode::AsGiven,
        );
        assert!(matches!(r, Err(Error::SpectralInvalid)));
        let r = propagate(
            &op1("1", "0", "t"),
            &Expr::zero(),
            &u,
            0.0,
            0.1,
            &cfg(Method::SpectralConst),
            TimeMode::AsGiven,
        );
        assert!(matches!(r, Err(Error::SpectralInvalid)));
        // frozen time-dependent constants are fine
        let r = propagate(
            &op1("1", "0", "t"),
            &Expr::zero(),
            &u,
            0.0,
            0.1,
            &cfg(Method::SpectralConst),
            TimeMode::FrozenAt(0.3),
        );
        assert!(r.is_ok());
    }

    #[test]
    fn route_selection() {
        let c = cfg(Method::Auto);
        let z = Expr::zero();
        assert_eq!(
            select_route(&OperatorSpec::laplacian(1, 1.0), &z, &c, TimeMode::AsGiven).unwrap(),
            Route::FourierDiagonal
        );
        assert_eq!(
            select_route(&op1("0", "0", "cos(x1)"), &z, &c, TimeMode::AsGiven).unwrap(),
            Route::PhysicalDiagonal
        );
        assert_eq!(
            select_route(&op1("0", "0", "t*cos(x1)"), &z, &c, TimeMode::AsGiven).unwrap(),
            Route::Implicit
        );
        assert_eq!(
            select_route(&op1("0", "0", "t*cos(x1)"), &z, &c, TimeMode::FrozenAt(1.0)).unwrap(),
            Route::PhysicalDiagonal
        );
        assert_eq!(
            select_route(&op1("sin(x1)^2", "0", "0"), &z, &c, TimeMode::AsGiven).unwrap(),
            Route::Implicit
        );
    }

    #[test]
    fn blow_up_guard() {
        let g = make_grid(1, 16).unwrap();
        let u = g.sample(&e("1"), 0.0).unwrap();
        let r = propagate(
            &op1("0", "0", "30"),
            &Expr::zero(),
            &u,
            0.0,
            1.0,
            &cfg(Method::Auto),
            TimeMode::AsGiven,
        );
        assert!(matches!(r, Err(Error::Instability { .. })));
    }

    #[test]
    fn max_steps_guard() {
        let g = make_grid(1, 32).unwrap();
        let u = g.sample(&e("sin(x1)"), 0.0).unwrap();
        let c = PropagatorConfig {
            method: Method::ImplicitAdaptive,
            substep_tol: 1e-12,
            max_internal_steps: 3,
        };
        let r = propagate(
            &op1("0", "0", "cos(x1)"),
            &Expr::zero(),
            &u,
            0.0,
            1.0,
            &c,
            TimeMode::AsGiven,
        );
        assert!(matches!(r, Err(Error::MaxSteps(_))));
    }

    #[test]
    fn rejects_reversed_interval() {
        let g = make_grid(1, 16).unwrap();
        let u = g.zeros();
        assert!(propagate(
            &OperatorSpec::zero(1),
            &Expr::zero(),
            &u,
            1.0,
            0.5,
            &cfg(Method::Auto),
            TimeMode::AsGiven
        )
        .is_err());
        assert!(PropagatorConfig::with_tol(0.0).validate().is_err());
    }

    #[test]
    fn time_dependent_forcing_all_routes() {
        // v' = v_xx + f with exact solution exp(-t) sin(x) + t cos(2x)
        let g = make_grid(1, 64).unwrap();
        let skeleton = SplitProblem::new(
            vec![OperatorSpec::laplacian(1, 1.0)],
            vec![Expr::zero()],
            Expr::zero(),
            1.0,
        )
        .unwrap();
        let m = manufacture(e("exp(-t)*sin(x1)+t*cos(2*x1)"), &skeleton, &[1.0]).unwrap();
        let f = &m.problem().free_terms()[0];
        let u = g.sample(m.exact(), 0.2).unwrap();
        let want = g.sample(m.exact(), 0.35).unwrap();
        for meth in [Method::Auto, Method::ImplicitAdaptive] {
            let v = propagate(
                &OperatorSpec::laplacian(1, 1.0),
                f,
                &u,
                0.2,
                0.35,
                &cfg(meth),
                TimeMode::AsGiven,
            )
            .unwrap();
            assert!(v.sub(&want).unwrap().max_abs() < 1e-10, "{meth:?}");
        }
    }

    #[test]
    fn variable_diffusion_implicit_matches_fine_reference() {
        // degenerate diffusion through GMRES; compare tolerances 1e-9 and 1e-12
        let g = make_grid(1, 32).unwrap();
        let op = op1("sin(x1)^2", "0.3", "cos(x1)");
        let u = g.sample(&e("sin(x1)+0.2*cos(3*x1)"), 0.0).unwrap();
        let fine = propagate(
            &op,
            &Expr::zero(),
            &u,
            0.0,
            0.05,
            &PropagatorConfig::with_tol(1e-12),
            TimeMode::AsGiven,
        )
        .unwrap();
        let coarse = propagate(
            &op,
            &Expr::zero(),
            &u,
            0.0,
            0.05,
            &PropagatorConfig::with_tol(1e-9),
            TimeMode::AsGiven,
        )
        .unwrap();
        assert!(fine.sub(&coarse).unwrap().max_abs() < 1e-8);
        assert!(fine.is_finite());
    }
}
