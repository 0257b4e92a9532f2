//! Periodic uniform grids on `[0, 2π)^dim`, grid functions, spectral
//! derivatives and discrete Sobolev-type norms.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::expr::Expr;

pub const AXIS_LENGTH: f64 = 2.0 * PI;
pub const MAX_DIM: usize = 2;
pub const MIN_POINTS: usize = 8;

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

#[derive(Clone)]
pub struct Grid {
    dim: usize,
    points: usize,
    plans: Arc<Plans>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("dim", &self.dim)
            .field("points", &self.points)
            .finish()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.points == other.points
    }
}

impl Eq for Grid {}

impl Grid {
    pub fn new(dim: usize, points: usize) -> Result<Grid> {
        if !(1..=MAX_DIM).contains(&dim) {
            return Err(Error::Config(format!("grid dimension {dim} not in 1..={MAX_DIM}")));
        }
        if points < MIN_POINTS || !points.is_power_of_two() {
            return Err(Error::Config(format!(
                "points per axis must be a power of two >= {MIN_POINTS}, got {points}"
            )));
        }
        let mut planner = FftPlanner::new();
        let plans = Plans {
            forward: planner.plan_fft_forward(points),
            inverse: planner.plan_fft_inverse(points),
        };
        Ok(Grid {
            dim,
            points,
            plans: Arc::new(plans),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points_per_axis(&self) -> usize {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        AXIS_LENGTH / self.points as f64
    }

    /// Quadrature weight `h^dim` of one node.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    /// Per-axis indices of flat node `i`; the last axis varies fastest.
    pub fn node_index(&self, mut flat: usize, out: &mut [usize]) {
        for axis in (0..self.dim).rev() {
            out[axis] = flat % self.points;
            flat /= self.points;
        }
    }

    pub fn node_coords(&self, flat: usize) -> [f64; MAX_DIM] {
        let mut idx = [0usize; MAX_DIM];
        self.node_index(flat, &mut idx[..self.dim]);
        let h = self.spacing();
        let mut x = [0.0; MAX_DIM];
        for axis in 0..self.dim {
            x[axis] = idx[axis] as f64 * h;
        }
        x
    }

    /// Signed wavenumber of FFT bin `j`; the Nyquist bin maps to `+M/2`.
    pub fn wavenumber(&self, j: usize) -> f64 {
        if j <= self.points / 2 {
            j as f64
        } else {
            j as f64 - self.points as f64
        }
    }

    pub fn is_nyquist(&self, j: usize) -> bool {
        j == self.points / 2
    }

    /// Fourier multiplier of `D^gamma` at the mode with per-axis bins `bins`.
    ///
    /// Odd per-axis derivative orders annihilate the Nyquist bin so that
    /// derivatives of real fields stay real.
    pub fn derivative_symbol(&self, gamma: &[usize], bins: &[usize]) -> Complex64 {
        let mut s = Complex64::new(1.0, 0.0);
        for (axis, &order) in gamma.iter().enumerate() {
            if order == 0 {
                continue;
            }
            let j = bins[axis];
            if order % 2 == 1 && self.is_nyquist(j) {
                return Complex64::new(0.0, 0.0);
            }
            let ik = Complex64::new(0.0, self.wavenumber(j));
            s *= ik.powu(order as u32);
        }
        s
    }

    pub fn zeros(&self) -> GridFunction {
        GridFunction {
            grid: self.clone(),
            values: vec![0.0; self.len()],
        }
    }

    pub fn constant(&self, c: f64) -> GridFunction {
        GridFunction {
            grid: self.clone(),
            values: vec![c; self.len()],
        }
    }

    pub fn from_values(&self, values: Vec<f64>) -> Result<GridFunction> {
        if values.len() != self.len() {
            return Err(Error::GridMismatch(format!(
                "expected {} values, got {}",
                self.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Eval(format!("non-finite value at node {i}")));
        }
        Ok(GridFunction {
            grid: self.clone(),
            values,
        })
    }

    /// In-place multi-dimensional FFT over a row-major buffer.
    pub fn fft(&self, data: &mut [Complex64], inverse: bool) {
        let plan = if inverse {
            &self.plans.inverse
        } else {
            &self.plans.forward
        };
        let m = self.points;
        match self.dim {
            1 => plan.process(data),
            2 => {
                // rows (axis 2, contiguous)
                plan.process(data);
                // columns (axis 1)
                let mut column = vec![Complex64::new(0.0, 0.0); m];
                for c in 0..m {
                    for r in 0..m {
                        column[r] = data[r * m + c];
                    }
                    plan.process(&mut column);
                    for r in 0..m {
                        data[r * m + c] = column[r];
                    }
                }
            }
            _ => unreachable!("dimension validated at construction"),
        }
    }

    /// Forward transform of a real field.
    pub fn spectrum(&self, u: &GridFunction) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = u.values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft(&mut data, false);
        data
    }

    /// Inverse transform, normalised, keeping the real part.
    pub fn from_spectrum(&self, mut data: Vec<Complex64>) -> Result<GridFunction> {
        self.fft(&mut data, true);
        let scale = 1.0 / self.len() as f64;
        self.from_values(data.iter().map(|c| c.re * scale).collect())
    }

    pub fn sample(&self, expr: &Expr, t: f64) -> Result<GridFunction> {
        let axis = usize::from(expr.max_axis());
        if axis > self.dim {
            return Err(Error::Eval(format!(
                "expression references x{axis} on a {}-dimensional grid",
                self.dim
            )));
        }
        if let Some(c) = expr.constant_value() {
            return Ok(self.constant(c));
        }
        let mut values = Vec::with_capacity(self.len());
        for i in 0..self.len() {
            let x = self.node_coords(i);
            let v = expr
                .eval(t, &x[..self.dim])
                .map_err(|e| Error::Eval(format!("{e} at node {i}")))?;
            values.push(v);
        }
        self.from_values(values)
    }
}

pub fn make_grid(dim: usize, points: usize) -> Result<Grid> {
    Grid::new(dim, points)
}

pub fn sample(expr: &Expr, t: f64, grid: &Grid) -> Result<GridFunction> {
    grid.sample(expr, t)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridFunction {
    grid: Grid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_same(&self, other: &GridFunction) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch(format!("{:?} vs {:?}", self.grid, other.grid)));
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> GridFunction {
        self.map(|v| c * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> GridFunction {
        GridFunction {
            grid: self.grid.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, other: &GridFunction, f: impl Fn(f64, f64) -> f64) -> Result<GridFunction> {
        self.check_same(other)?;
        Ok(GridFunction {
            grid: self.grid.clone(),
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a - b)
    }

    /// `self + c * other`
    pub fn axpy(&self, c: f64, other: &GridFunction) -> Result<GridFunction> {
        self.zip_with(other, |a, b| a + c * b)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn derivative(&self, gamma: &[usize]) -> Result<GridFunction> {
        derivative(self, gamma)
    }

    pub fn norm(&self, spec: NormSpec) -> Result<f64> {
        norm(self, spec)
    }
}

/// Spectral derivative `D^gamma u`; `gamma[k]` is the order along axis `k+1`.
pub fn derivative(u: &GridFunction, gamma: &[usize]) -> Result<GridFunction> {
    let grid = u.grid();
    if gamma.len() != grid.dim() {
        return Err(Error::GridMismatch(format!(
            "multi-index of length {} on a {}-dimensional grid",
            gamma.len(),
            grid.dim()
        )));
    }
    let order: usize = gamma.iter().sum();
    if order > 4 {
        return Err(Error::Config(format!("derivative order {order} exceeds 4")));
    }
    if order == 0 {
        return Ok(u.clone());
    }
    let mut spec = grid.spectrum(u);
    let mut bins = [0usize; MAX_DIM];
    for (i, c) in spec.iter_mut().enumerate() {
        grid.node_index(i, &mut bins[..grid.dim()]);
        *c *= grid.derivative_symbol(gamma, &bins[..grid.dim()]);
    }
    grid.from_spectrum(spec)
}

/// Summation by recursive halving, fixed order regardless of caller.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Exponent {
    Finite(u32),
    Infinity,
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exponent::Finite(p) => write!(f, "{p}"),
            Exponent::Infinity => f.write_str("inf"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NormSpec {
    pub sobolev_order: usize,
    pub exponent: Exponent,
}

impl NormSpec {
    pub fn new(sobolev_order: usize, exponent: Exponent) -> Result<NormSpec> {
        if let Exponent::Finite(p) = exponent {
            if p < 2 || p % 2 != 0 {
                return Err(Error::Config(format!("norm exponent must be even and >= 2, got {p}")));
            }
        }
        if sobolev_order > 4 {
            return Err(Error::Config(format!("Sobolev order {sobolev_order} exceeds 4")));
        }
        Ok(NormSpec {
            sobolev_order,
            exponent,
        })
    }

    pub fn l2() -> NormSpec {
        NormSpec {
            sobolev_order: 0,
            exponent: Exponent::Finite(2),
        }
    }

    pub fn max() -> NormSpec {
        NormSpec {
            sobolev_order: 0,
            exponent: Exponent::Infinity,
        }
    }
}

impl fmt::Display for NormSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "W^{},{}", self.sobolev_order, self.exponent)
    }
}

/// All multi-indices of length `dim` with total order at most `m`.
pub fn multi_indices(dim: usize, m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = vec![0; dim];
    fn rec(axis: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if axis == cur.len() {
            out.push(cur.clone());
            return;
        }
        for k in 0..=left {
            cur[axis] = k;
            rec(axis + 1, left - k, cur, out);
        }
        cur[axis] = 0;
    }
    rec(0, m, &mut cur, &mut out);
    out.sort_by_key(|g| g.iter().sum::<usize>());
    out
}

/// Discrete `W^m_p` norm: `(Σ_{|γ|≤m} h^d Σ |D^γ u|^p)^{1/p}`, or the
/// maximum of `|D^γ u|` over nodes and `|γ| ≤ m` for `p = ∞`.
pub fn norm(u: &GridFunction, spec: NormSpec) -> Result<f64> {
    let grid = u.grid();
    let indices = multi_indices(grid.dim(), spec.sobolev_order);
    match spec.exponent {
        Exponent::Infinity => {
            let mut best = 0.0_f64;
            for gamma in &indices {
                best = best.max(derivative(u, gamma)?.max_abs());
            }
            Ok(best)
        }
        Exponent::Finite(p) => {
            let mut parts = Vec::with_capacity(indices.len());
            for gamma in &indices {
                let d = derivative(u, gamma)?;
                let terms: Vec<f64> = d.values().iter().map(|v| v.abs().powi(p as i32)).collect();
                parts.push(grid.cell_volume() * pairwise_sum(&terms));
            }
            Ok(pairwise_sum(&parts).powf(1.0 / f64::from(p)))
        }
    }
}

/// Largest mismatch between `expr` at `x_k = 0` and at `x_k = 2π`, over a
/// lattice of the remaining coordinates and the given times.
pub fn periodicity_defect(expr: &Expr, dim: usize, times: &[f64]) -> Result<f64> {
    let lattice: Vec<f64> = (0..7).map(|i| 0.37 + i as f64 * AXIS_LENGTH / 7.0).collect();
    let mut worst = 0.0_f64;
    let mut x = [0.0; MAX_DIM];
    for &t in times {
        for axis in 0..dim {
            let others = lattice.len().pow(dim as u32 - 1);
            for combo in 0..others {
                let mut c = combo;
                for (k, xk) in x.iter_mut().enumerate().take(dim) {
                    if k != axis {
                        *xk = lattice[c % lattice.len()];
                        c /= lattice.len();
                    }
                }
                x[axis] = 0.0;
                let left = expr.eval(t, &x[..dim]).map_err(|e| Error::Eval(e.to_string()))?;
                x[axis] = AXIS_LENGTH;
                let right = expr.eval(t, &x[..dim]).map_err(|e| Error::Eval(e.to_string()))?;
                worst = worst.max((left - right).abs());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;

    fn sampled(src: &str, t: f64, grid: &Grid) -> GridFunction {
        grid.sample(&parse(src).unwrap(), t).unwrap()
    }

    #[test]
    fn make_grid_examples() {
        let g = make_grid(1, 64).unwrap();
        assert_eq!(g.spacing(), 2.0 * PI / 64.0);
        assert!((g.spacing() * 64.0 - AXIS_LENGTH).abs() < 1e-15);
        assert_eq!(make_grid(2, 8).unwrap().len(), 64);
        assert!(make_grid(1, 7).is_err());
        assert!(make_grid(1, 4).is_err());
        assert!(make_grid(3, 8).is_err());
        assert!(make_grid(0, 8).is_err());
    }

    #[test]
    fn sample_examples() {
        let g = make_grid(1, 64).unwrap();
        assert!(sampled("0", 3.0, &g).values().iter().all(|&v| v == 0.0));
        let s = sampled("sin(x1)", 0.0, &g);
        for (j, v) in s.values().iter().enumerate() {
            assert_eq!(*v, (2.0 * PI * j as f64 / 64.0).sin());
        }
        let d = sampled("exp(-t)*sin(x1)", 1.0, &g);
        for (a, b) in d.values().iter().zip(s.values()) {
            assert!((a - (-1.0f64).exp() * b).abs() < 1e-15);
        }
        assert!(g.sample(&parse("x2").unwrap(), 0.0).is_err());
    }

    #[test]
    fn row_major_layout() {
        let g = make_grid(2, 8).unwrap();
        let u = sampled("x1 + 10*x2", 0.0, &g);
        let h = g.spacing();
        // flat index 8*r + c holds x1 = r h, x2 = c h
        assert!((u.values()[8 * 3 + 5] - (3.0 * h + 50.0 * h)).abs() < 1e-12);
    }

    #[test]
    fn derivative_examples() {
        let g = make_grid(1, 64).unwrap();
        let u = sampled("sin(x1)", 0.0, &g);
        let du = derivative(&u, &[1]).unwrap();
        let d2u = derivative(&u, &[2]).unwrap();
        let cos = sampled("cos(x1)", 0.0, &g);
        for i in 0..64 {
            assert!((du.values()[i] - cos.values()[i]).abs() < 1e-12);
            assert!((d2u.values()[i] + u.values()[i]).abs() < 1e-12);
        }
        let c = g.constant(3.5);
        assert!(derivative(&c, &[3]).unwrap().max_abs() < 1e-12);
        assert!(derivative(&u, &[5]).is_err());
        assert!(derivative(&u, &[1, 0]).is_err());
    }

    #[test]
    fn mixed_derivative_2d() {
        let g = make_grid(2, 16).unwrap();
        let u = sampled("sin(x1)*cos(2*x2)", 0.0, &g);
        let d = derivative(&u, &[1, 1]).unwrap();
        let want = sampled("-2*cos(x1)*sin(2*x2)", 0.0, &g);
        assert!(d.sub(&want).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn norm_examples() {
        let g = make_grid(1, 64).unwrap();
        let specs = [
            NormSpec::l2(),
            NormSpec::max(),
            NormSpec::new(1, Exponent::Finite(2)).unwrap(),
            NormSpec::new(2, Exponent::Finite(4)).unwrap(),
        ];
        for s in specs {
            assert_eq!(norm(&g.zeros(), s).unwrap(), 0.0);
        }
        let u = sampled("sin(x1)", 0.0, &g);
        assert!((norm(&u, NormSpec::l2()).unwrap() - PI.sqrt()).abs() < 1e-6);
        let a = norm(&u.scale(-3.0), specs[2]).unwrap();
        assert!((a - 3.0 * norm(&u, specs[2]).unwrap()).abs() < 1e-13 * a);
        // W^1_2 of sin: ∫ sin² + cos² = 2π
        assert!((norm(&u, specs[2]).unwrap() - (2.0 * PI).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn norm_spec_validation() {
        assert!(NormSpec::new(0, Exponent::Finite(1)).is_err());
        assert!(NormSpec::new(0, Exponent::Finite(3)).is_err());
        assert!(NormSpec::new(0, Exponent::Finite(4)).is_ok());
        assert!(NormSpec::new(5, Exponent::Infinity).is_err());
    }

    #[test]
    fn multi_index_enumeration() {
        assert_eq!(multi_indices(1, 2), vec![vec![0], vec![1], vec![2]]);
        assert_eq!(multi_indices(2, 1).len(), 3);
        assert_eq!(multi_indices(2, 2).len(), 6);
    }

    #[test]
    fn periodicity_check() {
        let p = parse("cos(x1)*sin(2*x2)").unwrap();
        assert!(periodicity_defect(&p, 2, &[0.0, 1.0]).unwrap() < 1e-10);
        let q = parse("x1").unwrap();
        assert!(periodicity_defect(&q, 1, &[0.0]).unwrap() > 1.0);
    }
}
