#![allow(clippy::needless_range_loop)]

use effort::analysis::*;
use effort::experiment::train::pretrain_with_world;
use effort::experiment::{finetune, EvalSets, ExperimentConfig, Regime, TrainConfig};
use effort::linalg::pca;
use effort::rng;
use effort::Matrix;
use proptest::prelude::*;

/// Two rows ±a_j·e_j per axis: zero mean, covariance exactly diagonal.
fn constructed(variances: &[f64]) -> Matrix {
    let d = variances.len();
    let mut m = Matrix::zeros(2 * d, d);
    for (j, v) in variances.iter().enumerate() {
        m[(2 * j, j)] = v.sqrt();
        m[(2 * j + 1, j)] = -v.sqrt();
    }
    m
}

#[test]
fn effective_rank_examples() {
    let iso = rng::gaussian(&mut rng::stream(1, &[]), 20_000, 5, 1.0);
    assert_eq!(effective_rank(&iso, 0.9).unwrap().effective_rank, 5);
    assert_eq!(effective_rank(&constructed(&[0.2; 5]), 0.9).unwrap().effective_rank, 5);

    let line = Matrix::from_fn(30, 4, |i, j| (i as f64 - 7.0) * [1.0, 2.0, -1.0, 0.5][j]);
    assert_eq!(effective_rank(&line, 0.9).unwrap().effective_rank, 1);

    let r = effective_rank(&constructed(&[0.5, 0.3, 0.15, 0.05]), 0.9).unwrap();
    assert_eq!(r.effective_rank, 3);
    for (got, want) in r.spectrum.iter().zip([0.5, 0.3, 0.15, 0.05]) {
        assert!((got - want).abs() <= 1e-12);
    }
    assert_eq!(effective_rank(&constructed(&[0.5, 0.3, 0.15, 0.05]), 0.8).unwrap().effective_rank, 2);
}

#[test]
fn effective_rank_edge_cases() {
    let flat = Matrix::from_fn(6, 3, |_, j| j as f64);
    let r = effective_rank(&flat, 0.9).unwrap();
    assert!(r.zero_variance && r.effective_rank == 0);
    assert!(effective_rank(&flat, 0.0).is_err());
    assert!(effective_rank(&flat, 1.5).is_err());
    assert!(effective_rank(&Matrix::zeros(1, 3), 0.9).is_err());
    assert_eq!(effective_rank_tagged(&constructed(&[1.0, 1.0]), 0.9, "semantic_eval").unwrap().source, "semantic_eval");
}

#[test]
fn asymmetry_examples() {
    let t = asymmetry_trace(&[0.7; 10], &[0.7; 10], 5.0);
    assert!(t.points.iter().all(|p| p.ratio == 1.0));
    assert_eq!(t.crossing, None);

    let t = asymmetry_trace(&[1.0; 4], &[0.01; 4], 5.0);
    assert!(t.points.iter().all(|p| (p.ratio - 100.0).abs() <= 1e-12));
    assert_eq!(t.crossing, Some(0));
    assert_eq!(t.fake_below_fraction(0), 1.0);

    let t = asymmetry_trace(&[1.0, 1.0, 1.0, 1.0], &[1.0, 0.5, 0.1, 0.0], 5.0);
    assert_eq!(t.crossing, Some(2));
    assert_eq!(t.points[3].ratio, f64::INFINITY);
    assert_eq!(t.fake_below_fraction(1), 1.0);
    assert_eq!(t.fake_below_fraction(0), 0.75);
}

#[test]
fn fft_seed_7_crosses_early() {
    let cfg = ExperimentConfig::default_toy();
    let world = cfg.data.world().unwrap();
    let (pre, _) = pretrain_with_world(&cfg.backbone, &cfg.data, &world, &cfg.pretrain).unwrap();
    let sets = EvalSets::generate(&cfg.data, &world).unwrap();
    let ft = TrainConfig { regime: Regime::Fft, seed: 7, ..cfg.finetune.clone() };
    let (_, report) = finetune(&pre, &sets, &ft).unwrap();
    let real: Vec<f64> = report.trace.iter().map(|r| r.real).collect();
    let fake: Vec<f64> = report.trace.iter().map(|r| r.fake).collect();
    let t = asymmetry_trace(&real, &fake, 5.0);
    let crossing = t.crossing.expect("ratio never reached 5");
    assert!(crossing * 5 < report.trace.len(), "crossing at {crossing} of {}", report.trace.len());
    assert_eq!(report.asym_crossing, Some(crossing));
}

#[test]
fn logit_fit_examples() {
    let exact = Matrix::from_fn(10, 2, |i, j| if j == 0 { i as f64 * 0.3 - 1.0 } else { 3.0 - (i as f64 * 0.3 - 1.0) });
    let fit = logit_line_fit(&exact).unwrap();
    assert!((fit.slope + 1.0).abs() <= 1e-12 && (fit.intercept - 3.0).abs() <= 1e-12 && fit.residual_rms <= 1e-12);
    assert!(fit.collapsed(CollapseThresholds::default()));

    let iso = rng::gaussian(&mut rng::stream(2, &[]), 2000, 2, 1.0);
    let fit = logit_line_fit(&iso).unwrap();
    assert!(fit.slope.abs() <= 0.1, "slope {}", fit.slope);
    assert!(!fit.collapsed(CollapseThresholds::default()));

    let flat = Matrix::from_fn(5, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
    let fit = logit_line_fit(&flat).unwrap();
    assert!(fit.degenerate && !fit.collapsed(CollapseThresholds::default()));
    assert!(logit_line_fit(&Matrix::zeros(1, 2)).is_err());
    assert!(logit_line_fit(&Matrix::zeros(4, 3)).is_err());
}

#[test]
fn collapse_thresholds_are_configurable() {
    let mut g = rng::stream(3, &[]);
    let noisy = Matrix::from_fn(500, 2, |i, j| {
        let x = (i as f64) / 50.0;
        if j == 0 {
            x
        } else {
            1.0 - 0.7 * x + 0.05 * rng::normal(&mut g)
        }
    });
    let fit = logit_line_fit(&noisy).unwrap();
    assert!(!fit.collapsed(CollapseThresholds::default()));
    assert!(fit.collapsed(CollapseThresholds { slope_tol: 0.35, residual_frac: 0.1 }));
}

#[test]
fn projection_examples() {
    let dir = [0.6, 0.0, 0.8];
    let line = Matrix::from_fn(20, 3, |i, j| 2.0 + (i as f64 - 4.0) * dir[j]);
    let p = projection_export(&line, 1).unwrap();
    // centred coordinate of row i is ±(i − 9.5)
    let sign = -p[(0, 0)].signum();
    for i in 0..20 {
        assert!((p[(i, 0)] - sign * (i as f64 - 9.5)).abs() <= 1e-8);
    }

    let x = rng::gaussian(&mut rng::stream(4, &[]), 30, 4, 1.0);
    let full = projection_export(&x, 4).unwrap();
    for (a, b) in [(0, 1), (3, 17), (29, 8)] {
        let d_x = x.row(a).iter().zip(x.row(b)).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        let d_p = full.row(a).iter().zip(full.row(b)).map(|(p, q)| (p - q).powi(2)).sum::<f64>();
        assert!((d_x - d_p).abs() <= 1e-10 * d_x);
    }

    let vars = pca(&x).unwrap().variances;
    for j in 0..4 {
        let col = full.col(j);
        let mean = col.iter().sum::<f64>() / 30.0;
        let var = col.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / 29.0;
        assert!((var - vars[j]).abs() <= 1e-8);
    }
    assert!(projection_export(&x, 5).is_err());
    assert!(projection_export(&x, 0).is_err());
}

proptest! {
    #[test]
    fn effective_rank_is_monotone_in_threshold(seed in any::<u64>(), a in 0.05f64..0.95, b in 0.05f64..0.95) {
        let scale = Matrix::diag(&[3.0, 2.0, 1.5, 1.0, 0.5, 0.2]);
        let x = rng::gaussian(&mut rng::stream(seed, &[]), 40, 6, 1.0).matmul(&scale);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(effective_rank(&x, lo).unwrap().effective_rank <= effective_rank(&x, hi).unwrap().effective_rank);
    }

    #[test]
    fn effective_rank_ignores_rotation_and_scale(seed in any::<u64>(), c in 0.1f64..10.0) {
        let mut g = rng::stream(seed, &[]);
        let x = rng::gaussian(&mut g, 40, 5, 1.0).matmul(&Matrix::diag(&[4.0, 2.0, 1.0, 0.5, 0.25]));
        let q = effort::linalg::svd(&rng::gaussian(&mut g, 5, 5, 1.0)).unwrap().u;
        let y = x.matmul(&q).scale(c);
        let (rx, ry) = (effective_rank(&x, 0.9).unwrap(), effective_rank(&y, 0.9).unwrap());
        for (p, r) in rx.spectrum.iter().zip(&ry.spectrum) {
            prop_assert!((p - r).abs() <= 1e-9);
        }
        prop_assert!(rank_from_ratios(&rx.spectrum, 0.9) == rx.effective_rank);
    }
}
