use super::svd::sign_anchor;
use super::Matrix;
use crate::error::{invalid, Error, Result};

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues descending and eigenvectors as columns, same sign rule as `svd`.
pub fn sym_eig(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    if !m.is_square() {
        return invalid(format!("sym_eig needs a square matrix, got {:?}", m.shape()));
    }
    let n = m.rows();
    let mut a = m.clone();
    let mut v = Matrix::identity(n);
    let scale: f64 = a.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut converged = false;
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[(i, j)] * a[(i, j)]).sum();
        if off.sqrt() <= 1e-15 * scale || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numerical(format!("symmetric eigensolver did not converge on {n}x{n} matrix")));
    }
    let vals: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[j].partial_cmp(&vals[i]).unwrap());
    let mut vecs = Matrix::from_fn(n, n, |i, k| v[(i, order[k])]);
    for k in 0..n {
        if sign_anchor(&vecs.col(k)) < 0.0 {
            for i in 0..n {
                vecs[(i, k)] = -vecs[(i, k)];
            }
        }
    }
    Ok((order.iter().map(|&i| vals[i]).collect(), vecs))
}

/// Explained-variance ratios. `zero_variance` is set (and ratios are all 0) for constant data.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    pub ratios: Vec<f64>,
    pub zero_variance: bool,
}

/// Principal axes of a samples×dims matrix.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Covariance eigenvalues, descending, clamped at 0.
    pub variances: Vec<f64>,
    /// Principal directions as columns.
    pub axes: Matrix,
}

pub fn pca(features: &Matrix) -> Result<Pca> {
    let n = features.rows();
    if n < 2 {
        return invalid(format!("pca needs at least 2 samples, got {n}"));
    }
    if !features.is_finite() {
        return invalid("pca input contains non-finite entries");
    }
    let mean = features.col_means();
    let mut centered = features.clone();
    let neg: Vec<f64> = mean.iter().map(|m| -m).collect();
    centered.add_row_vector(&neg);
    let cov = centered.t_matmul(&centered).scale(1.0 / (n as f64 - 1.0));
    let (vals, axes) = sym_eig(&cov)?;
    Ok(Pca { mean, variances: vals.into_iter().map(|v| v.max(0.0)).collect(), axes })
}

pub fn pca_spectrum(features: &Matrix) -> Result<Spectrum> {
    let p = pca(features)?;
    let total: f64 = p.variances.iter().sum();
    if total <= 0.0 {
        return Ok(Spectrum { ratios: vec![0.0; p.variances.len()], zero_variance: true });
    }
    Ok(Spectrum { ratios: p.variances.iter().map(|v| v / total).collect(), zero_variance: false })
}
