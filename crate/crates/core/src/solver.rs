//! Linear solves with `Λ = I − γP̃`: conjugate gradient, then restarted GMRES
//! when CG stalls on the nonsymmetric system, then dense LU for small systems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{NopgError, Result};

/// Matrix-free square operator.
pub trait LinearOperator {
    fn dim(&self) -> usize;

    /// `y = A x`.
    fn apply(&self, x: &[f64], y: &mut [f64]);

    /// Dense copy for the LU fallback. The default applies the operator to
    /// every unit vector.
    fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            self.apply(&e, &mut col);
            m.column_mut(j).copy_from_slice(&col);
            e[j] = 0.0;
        }
        m
    }
}

impl LinearOperator for DMatrix<f64> {
    fn dim(&self) -> usize {
        self.nrows()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    fn to_dense(&self) -> DMatrix<f64> {
        self.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Target relative residual `‖Ax − b‖₂ / ‖b‖₂`.
    pub tol: f64,
    pub max_iter: usize,
    pub restart: usize,
    /// Largest system solved densely when the Krylov methods fail.
    pub dense_limit: usize,
    /// CG is abandoned after this many iterations without a new best residual.
    pub cg_patience: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 2000,
            restart: 60,
            dense_limit: 2000,
            cg_patience: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMethod {
    Trivial,
    ConjugateGradient,
    Gmres,
    DenseLu,
}

/// How a solve finished.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveReport {
    pub method: SolverMethod,
    /// Total Krylov iterations across all attempted methods.
    pub iterations: usize,
    pub relative_residual: f64,
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn residual<A: LinearOperator + ?Sized>(op: &A, x: &[f64], b: &[f64], scratch: &mut [f64]) -> f64 {
    op.apply(x, scratch);
    scratch.iter_mut().zip(b).for_each(|(ax, bi)| *ax = bi - *ax);
    norm(scratch)
}

/// Solve `A x = b` to relative residual `cfg.tol`.
pub fn solve_linear<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveReport)> {
    let n = op.dim();
    if b.len() != n {
        return Err(NopgError::DimensionMismatch {
            expected: n,
            got: b.len(),
            context: "solver right-hand side",
        });
    }
    let b_norm = norm(b);
    if b_norm == 0.0 {
        let report = SolveReport {
            method: SolverMethod::Trivial,
            iterations: 0,
            relative_residual: 0.0,
        };
        return Ok((vec![0.0; n], report));
    }
    let target = cfg.tol * b_norm;

    let (mut x, mut iterations, mut best) = conjugate_gradient(op, b, target, cfg);
    if best <= target {
        return Ok((x, report(SolverMethod::ConjugateGradient, iterations, best / b_norm)));
    }

    let (gx, gits, gres) = gmres(op, b, &x, target, cfg);
    iterations += gits;
    if gres < best {
        x = gx;
        best = gres;
    }
    if best <= target {
        return Ok((x, report(SolverMethod::Gmres, iterations, best / b_norm)));
    }

    if n <= cfg.dense_limit {
        if let Some(lu_x) = op.to_dense().lu().solve(&DVector::from_column_slice(b)) {
            let lu_x: Vec<f64> = lu_x.as_slice().to_vec();
            let mut scratch = vec![0.0; n];
            let r = residual(op, &lu_x, b, &mut scratch);
            if r.is_finite() && r < best {
                x = lu_x;
                best = r;
            }
            if best <= target {
                return Ok((x, report(SolverMethod::DenseLu, iterations, best / b_norm)));
            }
        }
    }
    Err(NopgError::SolverFailure {
        best_residual: best / b_norm,
    })
}

fn report(method: SolverMethod, iterations: usize, relative_residual: f64) -> SolveReport {
    SolveReport {
        method,
        iterations,
        relative_residual,
    }
}

/// Plain CG from zero. Returns the best iterate, iteration count and its
/// residual norm. Stops early on breakdown (`pᵀAp ≤ 0`) or stagnation.
fn conjugate_gradient<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[f64],
    target: f64,
    cfg: &SolverConfig,
) -> (Vec<f64>, usize, f64) {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let mut best_x = x.clone();
    let mut best = rr.sqrt();
    let mut since_best = 0;
    let mut it = 0;
    while it < cfg.max_iter && best > target {
        it += 1;
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new = dot(&r, &r);
        // The recursive residual drifts on nonsymmetric systems; judge progress
        // by the true residual.
        let true_res = residual(op, &x, b, &mut ap);
        if true_res < best {
            best = true_res;
            best_x.copy_from_slice(&x);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.cg_patience || !true_res.is_finite() {
                break;
            }
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    (best_x, it, best)
}

/// Restarted GMRES(m) with modified Gram-Schmidt and Givens rotations.
fn gmres<A: LinearOperator + ?Sized>(
    op: &A,
    b: &[f64],
    x0: &[f64],
    target: f64,
    cfg: &SolverConfig,
) -> (Vec<f64>, usize, f64) {
    let n = b.len();
    let m = cfg.restart.max(1).min(n.max(1));
    let mut x = x0.to_vec();
    let mut scratch = vec![0.0; n];
    let mut total = 0;
    let mut res = residual(op, &x, b, &mut scratch);
    while total < cfg.max_iter && res > target {
        let r: Vec<f64> = scratch.clone();
        let beta = norm(&r);
        if beta == 0.0 {
            break;
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|ri| ri / beta).collect()];
        let mut h = vec![vec![0.0; m]; m + 1];
        let mut cs = vec![0.0; m];
        let mut sn = vec![0.0; m];
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            total += 1;
            let mut w = vec![0.0; n];
            op.apply(&v[k], &mut w);
            for (j, vj) in v.iter().enumerate() {
                let hjk = dot(&w, vj);
                h[j][k] = hjk;
                w.iter_mut().zip(vj).for_each(|(wi, vi)| *wi -= hjk * vi);
            }
            let wn = norm(&w);
            h[k + 1][k] = wn;
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let denom = h[k][k].hypot(h[k + 1][k]);
            if denom == 0.0 {
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            k_used = k + 1;
            if g[k + 1].abs() <= target || wn == 0.0 || total >= cfg.max_iter {
                break;
            }
            v.push(w.iter().map(|wi| wi / wn).collect());
        }
        if k_used == 0 {
            break;
        }
        // Back substitution for the least-squares coefficients.
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let s: f64 = ((i + 1)..k_used).map(|j| h[i][j] * y[j]).sum();
            y[i] = (g[i] - s) / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            x.iter_mut().zip(&v[j]).for_each(|(xi, vi)| *xi += yj * vi);
        }
        let new_res = residual(op, &x, b, &mut scratch);
        if !(new_res < res * (1.0 - 1e-12)) {
            res = new_res.min(res);
            break;
        }
        res = new_res;
    }
    (x, total, res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    /// `I − γP` with a random row-stochastic `P`.
    fn random_lambda(n: usize, gamma: f64, seed: u64) -> DMatrix<f64> {
        let mut rng = substream(seed, "solver-test");
        let mut p = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>().powi(4));
        for mut row in p.row_iter_mut() {
            let s = row.sum();
            row /= s;
        }
        DMatrix::identity(n, n) - p * gamma
    }

    #[test]
    fn identity_returns_rhs() {
        let a = DMatrix::<f64>::identity(4, 4);
        let b = [1.0, -2.0, 3.0, 0.5];
        let (x, rep) = solve_linear(&a, &b, &SolverConfig::default()).unwrap();
        assert_eq!(x, b.to_vec());
        assert_eq!(rep.method, SolverMethod::ConjugateGradient);
    }

    #[test]
    fn self_loop() {
        let a = DMatrix::from_element(1, 1, 1.0 - 0.9);
        let (x, _) = solve_linear(&a, &[1.0], &SolverConfig::default()).unwrap();
        assert!((x[0] - 10.0).abs() < 1e-8);
    }

    #[test]
    fn zero_rhs() {
        let a = random_lambda(5, 0.9, 1);
        let (x, rep) = solve_linear(&a, &[0.0; 5], &SolverConfig::default()).unwrap();
        assert_eq!(x, vec![0.0; 5]);
        assert_eq!(rep.method, SolverMethod::Trivial);
    }

    #[test]
    fn matches_dense_lu_on_random_instances() {
        for seed in 0..10 {
            let a = random_lambda(50, 0.95, seed);
            let mut rng = substream(seed, "rhs");
            let b: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (x, rep) = solve_linear(&a, &b, &SolverConfig::default()).unwrap();
            let lu = a.clone().lu().solve(&DVector::from_column_slice(&b)).unwrap();
            let err = (DVector::from_column_slice(&x) - &lu).norm() / lu.norm();
            assert!(err < 1e-6, "seed {seed}: {err}");
            assert!(rep.relative_residual <= 1e-8);
            // Transposed system as used for the state distribution.
            let at = a.transpose();
            let (y, _) = solve_linear(&at, &b, &SolverConfig::default()).unwrap();
            let lu_t = at.lu().solve(&DVector::from_column_slice(&b)).unwrap();
            assert!((DVector::from_column_slice(&y) - &lu_t).norm() / lu_t.norm() < 1e-6);
        }
    }

    #[test]
    fn gmres_recovers_when_cg_breaks_down() {
        // Strongly nonsymmetric: a rotation-like block defeats CG.
        let a = DMatrix::from_row_slice(3, 3, &[1.0, -0.99, 0.0, 0.99, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let b = [1.0, 2.0, 3.0];
        let (x, rep) = solve_linear(&a, &b, &SolverConfig::default()).unwrap();
        let mut ax = vec![0.0; 3];
        a.apply(&x, &mut ax);
        assert!(ax.iter().zip(&b).all(|(u, v)| (u - v).abs() < 1e-7));
        assert!(rep.relative_residual <= 1e-8);
    }

    #[test]
    fn dense_fallback_and_failure() {
        let a = random_lambda(30, 0.99, 3);
        let b = vec![1.0; 30];
        let cfg = SolverConfig {
            max_iter: 1,
            ..Default::default()
        };
        let (_, rep) = solve_linear(&a, &b, &cfg).unwrap();
        assert!(matches!(
            rep.method,
            SolverMethod::DenseLu | SolverMethod::ConjugateGradient | SolverMethod::Gmres
        ));
        let singular = DMatrix::<f64>::zeros(3, 3);
        let cfg = SolverConfig { dense_limit: 0, ..cfg };
        match solve_linear(&singular, &[1.0, 0.0, 0.0], &cfg) {
            Err(NopgError::SolverFailure { best_residual }) => assert!((best_residual - 1.0).abs() < 1e-12),
            other => panic!("expected failure, got {other:?}"),
        }
    }
}
