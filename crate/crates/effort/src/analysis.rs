//! Feature-space and training-dynamics diagnostics.

use crate::error::{invalid, Result};
use crate::linalg::{pca, pca_spectrum, Matrix};
use serde::Serialize;

pub const DEFAULT_RANK_THRESHOLD: f64 = 0.90;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankReport {
    pub spectrum: Vec<f64>,
    /// Smallest k whose leading ratios sum to at least `threshold`; 0 for constant data.
    pub effective_rank: usize,
    pub threshold: f64,
    pub zero_variance: bool,
    pub source: String,
}

pub fn effective_rank(features: &Matrix, threshold: f64) -> Result<RankReport> {
    effective_rank_tagged(features, threshold, "features")
}

pub fn effective_rank_tagged(features: &Matrix, threshold: f64, source: &str) -> Result<RankReport> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return invalid(format!("rank threshold must be in (0, 1], got {threshold}"));
    }
    let spec = pca_spectrum(features)?;
    let effective_rank = if spec.zero_variance { 0 } else { rank_from_ratios(&spec.ratios, threshold) };
    Ok(RankReport { spectrum: spec.ratios, effective_rank, threshold, zero_variance: spec.zero_variance, source: source.into() })
}

/// Smallest k with Σ_{i≤k} ratio_i ≥ threshold. A tiny slack absorbs summation rounding
/// (five ratios of exactly 0.2 must reach 1.0).
pub fn rank_from_ratios(ratios: &[f64], threshold: f64) -> usize {
    let mut cum = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        cum += r;
        if cum >= threshold - 1e-12 {
            return i + 1;
        }
    }
    ratios.len()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AsymmetryPoint {
    pub iter: usize,
    pub real_loss: f64,
    pub fake_loss: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsymmetryTrace {
    pub points: Vec<AsymmetryPoint>,
    /// First iteration where real/fake ≥ threshold.
    pub crossing: Option<usize>,
}

/// real/fake loss ratio per iteration. A zero fake loss with positive real loss counts as ∞.
pub fn asymmetry_trace(real: &[f64], fake: &[f64], threshold: f64) -> AsymmetryTrace {
    let points: Vec<AsymmetryPoint> = real
        .iter()
        .zip(fake)
        .enumerate()
        .map(|(iter, (&r, &f))| {
            let ratio = if f > 0.0 {
                r / f
            } else if r > 0.0 {
                f64::INFINITY
            } else {
                1.0
            };
            AsymmetryPoint { iter, real_loss: r, fake_loss: f, ratio }
        })
        .collect();
    let crossing = points.iter().find(|p| p.ratio >= threshold).map(|p| p.iter);
    AsymmetryTrace { points, crossing }
}

impl AsymmetryTrace {
    /// Fraction of iterations from `start` on where fake loss is strictly below real loss.
    pub fn fake_below_fraction(&self, start: usize) -> f64 {
        let tail = &self.points[start.min(self.points.len())..];
        if tail.is_empty() {
            return 0.0;
        }
        tail.iter().filter(|p| p.fake_loss < p.real_loss).count() as f64 / tail.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CollapseThresholds {
    pub slope_tol: f64,
    pub residual_frac: f64,
}

impl Default for CollapseThresholds {
    fn default() -> Self {
        CollapseThresholds { slope_tol: 0.2, residual_frac: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogitLineFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual_rms: f64,
    /// Population std of the fake-class logit.
    pub fake_std: f64,
    /// The real-class logit has no variance, so the fit is meaningless.
    pub degenerate: bool,
}

impl LogitLineFit {
    pub fn collapsed(&self, t: CollapseThresholds) -> bool {
        !self.degenerate && (self.slope + 1.0).abs() <= t.slope_tol && self.residual_rms <= t.residual_frac * self.fake_std
    }
}

/// OLS of the fake-class logit (column 1) on the real-class logit (column 0).
pub fn logit_line_fit(logits: &Matrix) -> Result<LogitLineFit> {
    if logits.rows() < 2 || logits.cols() != 2 {
        return invalid(format!("logit_line_fit needs a batch×2 matrix with batch ≥ 2, got {:?}", logits.shape()));
    }
    let b = logits.rows() as f64;
    let x = logits.col(0);
    let y = logits.col(1);
    let mx = x.iter().sum::<f64>() / b;
    let my = y.iter().sum::<f64>() / b;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, c)| (a - mx) * (c - my)).sum();
    let fake_std = (y.iter().map(|v| (v - my) * (v - my)).sum::<f64>() / b).sqrt();
    if sxx <= 0.0 {
        return Ok(LogitLineFit { slope: 0.0, intercept: my, residual_rms: fake_std, fake_std, degenerate: true });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual_rms = (x.iter().zip(&y).map(|(a, c)| (c - slope * a - intercept).powi(2)).sum::<f64>() / b).sqrt();
    Ok(LogitLineFit { slope, intercept, residual_rms, fake_std, degenerate: false })
}

/// Centered features projected onto the top-k principal directions.
pub fn projection_export(features: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 || k > features.cols() {
        return invalid(format!("projection needs 1 ≤ k ≤ {}, got {k}", features.cols()));
    }
    let p = pca(features)?;
    let mut centered = features.clone();
    let neg: Vec<f64> = p.mean.iter().map(|m| -m).collect();
    centered.add_row_vector(&neg);
    Ok(centered.matmul(&p.axes.cols_range(0, k)))
}
