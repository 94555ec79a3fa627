//! Cholesky factorization, triangular inversion and a one-sided Jacobi SVD.

use crate::error::{AraError, Result};
use crate::tensor::Matrix;

/// Default relative damping added to the Gram diagonal when the undamped
/// factorization fails.
pub const DEFAULT_DAMPING: f64 = 1e-6;

/// Smallest accepted squared pivot of an undamped factorization, relative to
/// the mean diagonal.
const PIVOT_FLOOR: f64 = 1e-12;
const MAX_DAMPING_RETRIES: usize = 6;

const SYMMETRY_TOL: f64 = 1e-10;
const JACOBI_TOL: f64 = 1e-15;
const MAX_SWEEPS: usize = 80;

/// Lower-triangular `S` with `S S^T = H + eps I`, `eps = damping * mean(diag(H))`.
pub fn cholesky_damped(h: &Matrix, damping: f64) -> Result<Matrix> {
    let n = h.rows();
    if h.cols() != n {
        return Err(AraError::input(format!("cholesky of non-square {:?}", h.shape())));
    }
    if n == 0 {
        return Err(AraError::input("cholesky of empty matrix"));
    }
    if damping < 0.0 || !damping.is_finite() {
        return Err(AraError::input(format!("damping must be >= 0, got {damping}")));
    }
    let scale = h.max_abs().max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (h[(i, j)] - h[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(AraError::input(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    h[(i, j)],
                    h[(j, i)]
                )));
            }
        }
    }
    let mean_diag = (0..n).map(|i| h[(i, i)]).sum::<f64>() / n as f64;
    let eps = damping * mean_diag;
    let mut s = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = h[(j, j)] + eps;
        for k in 0..j {
            d -= s[(j, k)] * s[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(AraError::Numerical(format!(
                "cholesky pivot {j} is {d:e} after damping {eps:e}"
            )));
        }
        let djj = d.sqrt();
        s[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut v = h[(i, j)];
            for k in 0..j {
                v -= s[(i, k)] * s[(j, k)];
            }
            s[(i, j)] = v / djj;
        }
    }
    Ok(s)
}

/// Undamped Cholesky when `H` is numerically positive definite; otherwise
/// `damping`, raised tenfold per retry. Returns `S` and the damping used.
pub fn cholesky_adaptive(h: &Matrix, damping: f64) -> Result<(Matrix, f64)> {
    if let Ok(s) = cholesky_damped(h, 0.0) {
        let n = h.rows();
        let mean_diag = (0..n).map(|i| h[(i, i)]).sum::<f64>() / n as f64;
        if (0..n).all(|i| s[(i, i)] * s[(i, i)] >= PIVOT_FLOOR * mean_diag) {
            return Ok((s, 0.0));
        }
    }
    let mut d = damping.max(f64::MIN_POSITIVE);
    let mut last = None;
    for _ in 0..MAX_DAMPING_RETRIES {
        match cholesky_damped(h, d) {
            Ok(s) => return Ok((s, d)),
            Err(e @ AraError::Numerical(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
        d *= 10.0;
    }
    Err(last.unwrap_or_else(|| AraError::Numerical("cholesky failed".into())))
}

/// Inverse of a lower-triangular matrix, one forward substitution per column
/// of the identity.
pub fn lower_triangular_inverse(s: &Matrix) -> Result<Matrix> {
    let n = s.rows();
    if s.cols() != n {
        return Err(AraError::input("triangular inverse of non-square matrix"));
    }
    let mut inv = Matrix::zeros(n, n);
    for col in 0..n {
        for i in col..n {
            let mut v = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                v -= s[(i, k)] * inv[(k, col)];
            }
            let d = s[(i, i)];
            if d == 0.0 {
                return Err(AraError::Numerical(format!("zero pivot at {i}")));
            }
            inv[(i, col)] = v / d;
        }
    }
    Ok(inv)
}

/// Thin SVD `A = U diag(sigma) V^T` with `k = min(m, n)` singular values in
/// non-increasing order.
///
/// Each right singular vector is signed so that its first entry of
/// non-negligible magnitude is non-negative.
#[derive(Clone, Debug)]
pub struct Svd {
    /// m x k, orthonormal columns.
    pub u: Matrix,
    pub sigma: Vec<f64>,
    /// n x k, orthonormal columns.
    pub v: Matrix,
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    if !a.is_finite() {
        return Err(AraError::Numerical("svd input has non-finite entries".into()));
    }
    if a.rows() == 0 || a.cols() == 0 {
        return Err(AraError::input("svd of empty matrix"));
    }
    let mut out = if a.rows() >= a.cols() {
        jacobi_tall(a)?
    } else {
        let t = jacobi_tall(&a.transpose())?;
        Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }
    };
    fix_signs(&mut out);
    Ok(out)
}

/// One-sided (Hestenes) Jacobi on a tall matrix. Columns are kept as rows of
/// the transposed working copy so rotations touch contiguous memory.
fn jacobi_tall(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    let mut cols = a.transpose(); // n x m
    let mut vt = Matrix::identity(n); // row j is column j of V

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (cols.row(p), cols.row(q));
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_rows(&mut cols, p, q, c, s);
                rotate_rows(&mut vt, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(AraError::Numerical(format!(
            "jacobi svd did not converge in {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| cols.row(j).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let largest = norms[order[0]];
    let negligible = largest * (m.max(n) as f64) * f64::EPSILON;
    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (k, &j) in order.iter().enumerate() {
        let s = norms[j];
        sigma.push(s);
        for r in 0..n {
            v[(r, k)] = vt[(j, r)];
        }
        if s > negligible && s > 0.0 {
            for r in 0..m {
                u[(r, k)] = cols[(j, r)] / s;
            }
        } else {
            missing.push(k);
        }
    }
    complete_orthonormal(&mut u, &missing);
    Ok(Svd { u, sigma, v })
}

fn rotate_rows(mat: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let cols = mat.cols();
    let data = mat.as_mut_slice();
    let (head, tail) = data.split_at_mut(q * cols);
    let rp = &mut head[p * cols..(p + 1) * cols];
    let rq = &mut tail[..cols];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the listed columns of `u` with unit vectors orthogonal to all other
/// columns (Gram-Schmidt over the standard basis).
fn complete_orthonormal(u: &mut Matrix, missing: &[usize]) {
    let m = u.rows();
    for &k in missing {
        for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for _ in 0..2 {
                for j in 0..u.cols() {
                    if j == k || (missing.contains(&j) && j > k) {
                        continue;
                    }
                    let dot: f64 = (0..m).map(|r| u[(r, j)] * cand[r]).sum();
                    for (r, c) in cand.iter_mut().enumerate() {
                        *c -= dot * u[(r, j)];
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                for (r, c) in cand.iter().enumerate() {
                    u[(r, k)] = c / norm;
                }
                break;
            }
        }
    }
}

fn fix_signs(svd: &mut Svd) {
    let k = svd.sigma.len();
    for j in 0..k {
        let col = svd.v.col(j);
        let scale = col.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let first = col.iter().find(|x| x.abs() > 1e-12 * scale.max(1e-300));
        if matches!(first, Some(&x) if x < 0.0) {
            for r in 0..svd.v.rows() {
                svd.v[(r, j)] = -svd.v[(r, j)];
            }
            for r in 0..svd.u.rows() {
                svd.u[(r, j)] = -svd.u[(r, j)];
            }
        }
    }
}
