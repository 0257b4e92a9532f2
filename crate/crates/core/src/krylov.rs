//! Restarted GMRES with right preconditioning, matrix-free.

use crate::error::{Error, Result};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub struct GmresOptions {
    pub restart: usize,
    pub max_iterations: usize,
    /// Absolute bound on the Euclidean residual norm.
    pub tol: f64,
}

/// Solves `A x = b` for `x`, starting from `x0`. `apply` computes `A v`,
/// `precond` computes `M^{-1} v`.
pub fn gmres<A, P>(apply: A, precond: P, b: &[f64], x0: Vec<f64>, opts: &GmresOptions) -> Result<Vec<f64>>
where
    A: Fn(&[f64]) -> Result<Vec<f64>>,
    P: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let m = opts.restart.max(1);
    let mut x = x0;
    let mut iterations = 0;
    let mut residual;
    loop {
        let ax = apply(&x)?;
        let r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
        let beta = norm2(&r);
        residual = beta;
        if beta <= opts.tol {
            return Ok(x);
        }
        if iterations >= opts.max_iterations {
            break;
        }
        let mut basis: Vec<Vec<f64>> = vec![r.iter().map(|v| v / beta).collect()];
        let mut z_basis: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut h = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            iterations += 1;
            let z = precond(&basis[k])?;
            let mut w = apply(&z)?;
            z_basis.push(z);
            // modified Gram-Schmidt
            for (j, q) in basis.iter().enumerate() {
                let hj = dot(&w, q);
                h[j][k] = hj;
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= hj * qi;
                }
            }
            let hn = norm2(&w);
            h[k + 1][k] = hn;
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let denom = (h[k][k] * h[k][k] + h[k + 1][k] * h[k + 1][k]).sqrt();
            if denom == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            if g[k + 1].abs() <= 0.5 * opts.tol || iterations >= opts.max_iterations || hn == 0.0 {
                break;
            }
            basis.push(w.iter().map(|v| v / hn).collect());
        }
        // back substitution on the k_used x k_used triangle
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for (xi, zi) in x.iter_mut().zip(&z_basis[j]) {
                *xi += yj * zi;
            }
        }
        if k_used == 0 {
            break;
        }
    }
    Err(Error::LinearSolve { residual, iterations })
}
