//! Weights `b = e₁ V⁻¹` for dyadic Richardson-type combinations
//! `v_n = Σ_j b_j u_{2^j n}`, and the combination itself.
//!
//! Row `i` of `V` belongs to the run with `2^i n` steps; column `j` is a
//! power of the step ratio. In the general variant `V[i][j] = 2^{-ij}` for
//! `i, j = 0..=k`, which cancels the error terms `δ^1 … δ^k`. The Strang
//! variant uses `k` runs, `V[i][0] = 1` and `V[i][j] = 2^{-i(j+1)}` for
//! `j ≥ 1`, skipping the first-order column that a second-order base scheme
//! does not need.

use std::fmt;

use log::warn;
use num_rational::Ratio;

use crate::error::{Error, Result};
use crate::schemes::Trajectory;

pub const MAX_K: usize = 8;
pub const CONDITION_WARNING: f64 = 1e8;
pub const MAX_EXACT_K: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Variant {
    #[default]
    General,
    Strang,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::General => "general",
            Variant::Strang => "strang",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtrapolationWeights {
    pub k: usize,
    pub variant: Variant,
    pub b: Vec<f64>,
    /// 1-norm condition number of `V`.
    pub condition: f64,
}

impl ExtrapolationWeights {
    /// Number of constituent runs (`n, 2n, …`).
    pub fn runs(&self) -> usize {
        self.b.len()
    }

    /// Largest `|Σ_i b_i V[i][j] - δ_{j0}|` over all columns.
    pub fn moment_defect(&self) -> f64 {
        let v = vandermonde(self.k, self.variant);
        let size = v.len();
        (0..size)
            .map(|j| {
                let s: f64 = (0..size).map(|i| self.b[i] * v[i][j]).sum();
                let target = if j == 0 { 1.0 } else { 0.0 };
                (s - target).abs()
            })
            .fold(0.0, f64::max)
    }
}

fn check_range(k: usize, variant: Variant) -> Result<()> {
    let min = match variant {
        Variant::General => 0,
        Variant::Strang => 1,
    };
    if k < min || k > MAX_K {
        return Err(Error::WeightRange { k, min, max: MAX_K });
    }
    Ok(())
}

fn size(k: usize, variant: Variant) -> usize {
    match variant {
        Variant::General => k + 1,
        Variant::Strang => k,
    }
}

/// Exponent of `1/2` in `V[i][j]`.
fn exponent(i: usize, j: usize, variant: Variant) -> i32 {
    match variant {
        Variant::General => (i * j) as i32,
        Variant::Strang if j == 0 => 0,
        Variant::Strang => (i * (j + 1)) as i32,
    }
}

pub fn vandermonde(k: usize, variant: Variant) -> Vec<Vec<f64>> {
    let n = size(k, variant);
    (0..n)
        .map(|i| (0..n).map(|j| 0.5f64.powi(exponent(i, j, variant))).collect())
        .collect()
}

/// LU with partial pivoting; returns the factors and the row permutation.
struct Lu {
    lu: Vec<Vec<f64>>,
    perm: Vec<usize>,
}

impl Lu {
    fn factor(mut a: Vec<Vec<f64>>) -> Result<Lu> {
        let n = a.len();
        let mut perm: Vec<usize> = (0..n).collect();
        for c in 0..n {
            let p = (c..n)
                .max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs()))
                .unwrap_or(c);
            if a[p][c] == 0.0 {
                return Err(Error::Config("singular extrapolation matrix".into()));
            }
            a.swap(c, p);
            perm.swap(c, p);
            let pivot = a[c].clone();
            for row in a.iter_mut().skip(c + 1) {
                let f = row[c] / pivot[c];
                row[c] = f;
                for (x, p) in row[c + 1..].iter_mut().zip(&pivot[c + 1..]) {
                    *x -= f * p;
                }
            }
        }
        Ok(Lu { lu: a, perm })
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = rhs.len();
        let mut y: Vec<f64> = self.perm.iter().map(|&p| rhs[p]).collect();
        for i in 0..n {
            for j in 0..i {
                y[i] -= self.lu[i][j] * y[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                y[i] -= self.lu[i][j] * y[j];
            }
            y[i] /= self.lu[i][i];
        }
        y
    }
}

fn one_norm(m: &[Vec<f64>]) -> f64 {
    (0..m.len())
        .map(|j| m.iter().map(|row| row[j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn weights(k: usize, variant: Variant) -> Result<ExtrapolationWeights> {
    check_range(k, variant)?;
    let v = vandermonde(k, variant);
    let n = v.len();
    let vt: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| v[j][i]).collect()).collect();
    let lu = Lu::factor(vt)?;
    let mut e1 = vec![0.0; n];
    e1[0] = 1.0;
    let b = lu.solve(&e1);

    let inv_t: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut unit = vec![0.0; n];
            unit[c] = 1.0;
            lu.solve(&unit)
        })
        .collect();
    // inv_t[c] is column c of (Vᵀ)⁻¹, i.e. row c of V⁻¹.
    let condition = one_norm(&v) * one_norm(&inv_t);
    if condition > CONDITION_WARNING {
        warn!("extrapolation matrix for k = {k} ({variant}) has condition number {condition:.3e}");
    }
    Ok(ExtrapolationWeights {
        k,
        variant,
        b,
        condition,
    })
}

/// General weights for `k + 1` runs, `0 <= k <= 8`.
pub fn richardson_weights(k: usize) -> Result<ExtrapolationWeights> {
    weights(k, Variant::General)
}

/// Weights for `k` runs of a second-order base scheme, `1 <= k <= 8`.
pub fn strang_weights(k: usize) -> Result<ExtrapolationWeights> {
    weights(k, Variant::Strang)
}

pub fn weights_for(k: usize, variant: Variant) -> Result<ExtrapolationWeights> {
    weights(k, variant)
}

/// Exact rational weights by fraction-valued elimination, for `k <= 4`.
pub fn exact_weights(k: usize, variant: Variant) -> Result<Vec<Ratio<i128>>> {
    check_range(k, variant)?;
    if k > MAX_EXACT_K {
        return Err(Error::WeightRange {
            k,
            min: 0,
            max: MAX_EXACT_K,
        });
    }
    let n = size(k, variant);
    let entry = |i: usize, j: usize| Ratio::new(1i128, 1i128 << exponent(i, j, variant));
    // augmented [Vᵀ | e₁]
    let mut a: Vec<Vec<Ratio<i128>>> = (0..n)
        .map(|i| {
            let mut row: Vec<Ratio<i128>> = (0..n).map(|j| entry(j, i)).collect();
            row.push(Ratio::from_integer(i128::from(i == 0)));
            row
        })
        .collect();
    let zero = Ratio::from_integer(0);
    for c in 0..n {
        let p = (c..n)
            .find(|&r| a[r][c] != zero)
            .expect("Vandermonde matrix is invertible");
        a.swap(c, p);
        let pivot = a[c].clone();
        for (r, row) in a.iter_mut().enumerate() {
            if r != c && row[c] != zero {
                let f = row[c] / pivot[c];
                for (x, p) in row[c..].iter_mut().zip(&pivot[c..]) {
                    *x -= f * p;
                }
            }
        }
    }
    Ok((0..n).map(|i| a[i][n] / a[i][i]).collect())
}

/// `Σ_j b_j · runs[j]` on the nodes of the coarsest run. Run `j` must have
/// `2^j` times as many steps as run 0 over the same horizon and grid.
pub fn combine(runs: &[Trajectory], w: &ExtrapolationWeights) -> Result<Trajectory> {
    if runs.len() != w.runs() {
        return Err(Error::Combine(format!(
            "{} trajectories for {} weights",
            runs.len(),
            w.runs()
        )));
    }
    let base = &runs[0];
    let n = base.times().n();
    for (j, run) in runs.iter().enumerate() {
        if run.times().horizon() != base.times().horizon() {
            return Err(Error::Combine(format!("run {j} has a different horizon")));
        }
        if run.times().n() != n << j {
            return Err(Error::Combine(format!(
                "run {j} has {} steps, expected {}",
                run.times().n(),
                n << j
            )));
        }
        if run.grid() != base.grid() {
            return Err(Error::Combine(format!("run {j} uses a different spatial grid")));
        }
    }
    let mut states = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let mut acc = base.grid().zeros();
        for (j, (run, &b)) in runs.iter().zip(&w.b).enumerate() {
            acc = acc.axpy(b, run.state(i << j))?;
        }
        states.push(acc);
    }
    Trajectory::new(base.times().clone(), states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::schemes::TimeGrid;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn general_examples() {
        assert_eq!(richardson_weights(0).unwrap().b, vec![1.0]);
        assert!(close(&richardson_weights(1).unwrap().b, &[-1.0, 2.0], 1e-12));
        assert!(close(
            &richardson_weights(2).unwrap().b,
            &[1.0 / 3.0, -2.0, 8.0 / 3.0],
            1e-12
        ));
    }

    #[test]
    fn strang_examples() {
        assert_eq!(strang_weights(1).unwrap().b, vec![1.0]);
        assert!(close(&strang_weights(2).unwrap().b, &[-1.0 / 3.0, 4.0 / 3.0], 1e-15));
        let w3 = strang_weights(3).unwrap();
        // 1/21, -4/7, 32/21 from exact elimination
        assert!(close(&w3.b, &[1.0 / 21.0, -4.0 / 7.0, 32.0 / 21.0], 1e-12));
        assert!(w3.moment_defect() < 1e-10);
    }

    #[test]
    fn range_checks() {
        assert!(richardson_weights(9).is_err());
        assert!(strang_weights(0).is_err());
        assert!(strang_weights(9).is_err());
        assert!(exact_weights(5, Variant::General).is_err());
    }

    #[test]
    fn invariants_hold_for_all_k() {
        for k in 0..=MAX_K {
            let w = richardson_weights(k).unwrap();
            assert!((w.b.iter().sum::<f64>() - 1.0).abs() < 1e-12, "k={k}");
            assert!(w.moment_defect() < 1e-10, "k={k}");
        }
        for k in 1..=MAX_K {
            let w = strang_weights(k).unwrap();
            assert!((w.b.iter().sum::<f64>() - 1.0).abs() < 1e-12, "k={k}");
            assert!(w.moment_defect() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn condition_grows() {
        let conds: Vec<f64> = (0..=MAX_K).map(|k| richardson_weights(k).unwrap().condition).collect();
        assert!(conds.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(conds[0], 1.0);
        // the k = 8 system is past the warning threshold
        assert!(conds[MAX_K] > CONDITION_WARNING);
    }

    #[test]
    fn exact_rationals() {
        let show = |v: Vec<Ratio<i128>>| v.iter().map(|r| r.to_string()).collect::<Vec<_>>();
        assert_eq!(show(exact_weights(2, Variant::General).unwrap()), ["1/3", "-2", "8/3"]);
        assert_eq!(
            show(exact_weights(4, Variant::General).unwrap()),
            ["1/315", "-2/21", "8/9", "-64/21", "1024/315"]
        );
        assert_eq!(show(exact_weights(2, Variant::Strang).unwrap()), ["-1/3", "4/3"]);
        assert_eq!(
            show(exact_weights(4, Variant::Strang).unwrap()),
            ["-1/315", "4/45", "-32/45", "512/315"]
        );
    }

    fn constant_run(n: usize, value: f64) -> Trajectory {
        let g = make_grid(1, 8).unwrap();
        let times = TimeGrid::new(n, 1.0).unwrap();
        let states = (0..=n).map(|i| g.constant(value + i as f64 / n as f64)).collect();
        Trajectory::new(times, states).unwrap()
    }

    #[test]
    fn combine_identity_and_affine() {
        let r = constant_run(4, 1.0);
        let out = combine(std::slice::from_ref(&r), &richardson_weights(0).unwrap()).unwrap();
        assert_eq!(out, r);
        // the same function sampled on nested grids: Σb = 1 reproduces it
        let runs = [constant_run(4, 2.0), constant_run(8, 2.0), constant_run(16, 2.0)];
        let out = combine(&runs, &richardson_weights(2).unwrap()).unwrap();
        for (a, b) in out.states().iter().zip(runs[0].states()) {
            assert!(a.sub(b).unwrap().max_abs() < 1e-14);
        }
    }

    #[test]
    fn combine_rejects_mismatches() {
        let w = richardson_weights(1).unwrap();
        assert!(combine(&[constant_run(4, 0.0)], &w).is_err());
        assert!(combine(&[constant_run(4, 0.0), constant_run(12, 0.0)], &w).is_err());
        let g = make_grid(1, 16).unwrap();
        let other = Trajectory::new(TimeGrid::new(8, 1.0).unwrap(), vec![g.zeros(); 9]).unwrap();
        assert!(combine(&[constant_run(4, 0.0), other], &w).is_err());
        let long = Trajectory::new(
            TimeGrid::new(8, 2.0).unwrap(),
            vec![make_grid(1, 8).unwrap().zeros(); 9],
        )
        .unwrap();
        assert!(combine(&[constant_run(4, 0.0), long], &w).is_err());
    }
}
