use super::{Matrix, SvdFactors};
use crate::error::{invalid, Result};

/// Principal (top-r) and residual (remaining) SVD factors of a square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SubspaceSplit {
    pub r: usize,
    pub u_r: Matrix,
    pub s_r: Vec<f64>,
    pub v_r: Matrix,
    pub u_nr: Matrix,
    pub s_nr: Vec<f64>,
    pub v_nr: Matrix,
    /// Σ s_i² over all singular values at split time, i.e. ‖W‖_F².
    pub frozen_frob_sq: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Principal,
    Residual,
    Both,
}

pub fn split(f: &SvdFactors, r: usize) -> Result<SubspaceSplit> {
    let n = f.s.len();
    if r > n {
        return invalid(format!("split rank {r} exceeds {n} singular values"));
    }
    Ok(SubspaceSplit {
        r,
        u_r: f.u.cols_range(0, r),
        s_r: f.s[..r].to_vec(),
        v_r: f.v.cols_range(0, r),
        u_nr: f.u.cols_range(r, n),
        s_nr: f.s[r..].to_vec(),
        v_nr: f.v.cols_range(r, n),
        frozen_frob_sq: f.s.iter().map(|s| s * s).sum(),
    })
}

pub(crate) fn low_rank(u: &Matrix, s: &[f64], v: &Matrix) -> Matrix {
    if s.is_empty() {
        return Matrix::zeros(u.rows(), v.rows());
    }
    u.scale_cols(s).matmul_t(v)
}

pub fn reconstruct(split: &SubspaceSplit, part: Part) -> Matrix {
    match part {
        Part::Principal => low_rank(&split.u_r, &split.s_r, &split.v_r),
        Part::Residual => low_rank(&split.u_nr, &split.s_nr, &split.v_nr),
        Part::Both => reconstruct(split, Part::Principal).add(&reconstruct(split, Part::Residual)),
    }
}

impl SubspaceSplit {
    pub fn n(&self) -> usize {
        self.u_r.rows()
    }

    /// ‖W − W_r‖_F² predicted by the discarded singular values.
    pub fn tail_energy(&self) -> f64 {
        self.s_nr.iter().map(|s| s * s).sum()
    }
}
