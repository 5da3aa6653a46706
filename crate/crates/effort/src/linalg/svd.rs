use super::{dot, Matrix};
use crate::error::{invalid, Error, Result};

const MAX_SWEEPS: usize = 80;
const ROTATION_TOL: f64 = 1e-15;

/// Thin SVD `m = u · diag(s) · vᵀ`. For an n×n input all three factors are full (n×n, n).
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl SvdFactors {
    pub fn reconstruct(&self) -> Matrix {
        self.u.scale_cols(&self.s).matmul_t(&self.v)
    }
}

/// One-sided (Hestenes) Jacobi SVD.
///
/// Singular values come out sorted descending (stable by column index on ties) and each
/// column of `u` has its largest-magnitude entry non-negative, lowest index winning ties.
pub fn svd(m: &Matrix) -> Result<SvdFactors> {
    if !m.is_finite() {
        return invalid("svd input contains non-finite entries");
    }
    if m.rows() < m.cols() {
        let t = svd_tall(&m.transpose(), m.shape())?;
        let mut f = SvdFactors { u: t.v, s: t.s, v: t.u };
        fix_signs(&mut f);
        return Ok(f);
    }
    let mut f = svd_tall(m, m.shape())?;
    fix_signs(&mut f);
    Ok(f)
}

/// rows >= cols. Rotates column pairs of a working copy until all are mutually orthogonal.
fn svd_tall(a: &Matrix, orig: (usize, usize)) -> Result<SvdFactors> {
    let (rows, cols) = a.shape();
    let mut w: Vec<Vec<f64>> = (0..cols).map(|j| a.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| {
            let mut e = vec![0.0; cols];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!("svd of {}x{} matrix did not converge in {MAX_SWEEPS} sweeps", orig.0, orig.1)));
    }

    let norms: Vec<f64> = w.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    // sort_by is stable, so equal values keep column order
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let smax = norms.iter().cloned().fold(0.0, f64::max);
    let tiny = smax * 1e-13 * rows as f64;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut pending = Vec::new();
    let mut s = Vec::with_capacity(cols);
    for (k, &j) in order.iter().enumerate() {
        s.push(norms[j]);
        if norms[j] > tiny && norms[j] > 0.0 {
            u_cols.push(w[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            pending.push(k);
        }
    }
    // Null directions: complete U with standard basis vectors orthogonalized against the rest.
    for k in pending {
        let basis: Vec<Vec<f64>> = u_cols.iter().enumerate().filter(|(i, c)| *i != k && c.iter().any(|x| *x != 0.0)).map(|(_, c)| c.clone()).collect();
        u_cols[k] = complete(&basis, rows);
    }

    let u = Matrix::from_fn(rows, cols, |i, k| u_cols[k][i]);
    let vm = Matrix::from_fn(cols, cols, |i, k| v[order[k]][i]);
    Ok(SvdFactors { u, s, v: vm })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// First standard basis vector that survives Gram-Schmidt against `basis`, normalized.
fn complete(basis: &[Vec<f64>], dim: usize) -> Vec<f64> {
    for e in 0..dim {
        let mut x = vec![0.0; dim];
        x[e] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let d = dot(&x, b);
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi -= d * bi;
                }
            }
        }
        let nrm = dot(&x, &x).sqrt();
        if nrm > 0.5 {
            return x.into_iter().map(|v| v / nrm).collect();
        }
    }
    unreachable!("a basis with fewer than dim vectors always has a completion")
}

pub(crate) fn sign_anchor(col: &[f64]) -> f64 {
    let mut best = 0usize;
    for (i, v) in col.iter().enumerate() {
        if v.abs() > col[best].abs() {
            best = i;
        }
    }
    if col[best] < 0.0 {
        -1.0
    } else {
        1.0
    }
}

fn fix_signs(f: &mut SvdFactors) {
    for k in 0..f.s.len() {
        if sign_anchor(&f.u.col(k)) < 0.0 {
            for i in 0..f.u.rows() {
                f.u[(i, k)] = -f.u[(i, k)];
            }
            for i in 0..f.v.rows() {
                f.v[(i, k)] = -f.v[(i, k)];
            }
        }
    }
}
