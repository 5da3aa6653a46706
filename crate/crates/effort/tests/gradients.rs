//! Analytic gradients of L_cls + λ1·mean orth + λ2·mean ksv against central differences.

#![allow(clippy::needless_range_loop)]

use effort::adapter::{AdapterKind, RegularizerWeights};
use effort::model::{BackboneConfig, BackboneKind, ToyModel};
use effort::rng;
use effort::Matrix;

const H: f64 = 1e-5;

fn batch(n: usize, samples: usize, seq_len: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let mut g = rng::stream(seed, &[1]);
    let x = rng::gaussian(&mut g, samples * seq_len, n, 1.0);
    (x, (0..samples).map(|i| i % 2).collect())
}

/// Moves every trainable entry off its initial value so the regularizers and their kinks
/// are exercised away from zero.
fn perturb(model: &mut ToyModel, seed: u64, size: f64) {
    let mut g = rng::stream(seed, &[2]);
    for p in model.params_mut() {
        for v in p.iter_mut() {
            *v += size * rng::normal(&mut g);
        }
    }
}

fn check(model: &mut ToyModel, x: &Matrix, y: &[usize], lambdas: RegularizerWeights) -> (f64, usize) {
    let (_, grads) = model.loss_and_grads(x, y, lambdas).unwrap();
    let names = model.param_names();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for t in 0..grads.len() {
        for j in 0..grads[t].len() {
            let orig = model.params()[t][j];
            model.params_mut()[t][j] = orig + H;
            let up = model.loss_and_grads(x, y, lambdas).unwrap().0.total;
            model.params_mut()[t][j] = orig - H;
            let down = model.loss_and_grads(x, y, lambdas).unwrap().0.total;
            model.params_mut()[t][j] = orig;
            let fd = (up - down) / (2.0 * H);
            let an = grads[t][j];
            let err = (fd - an).abs();
            let ok = err <= 1e-5 * fd.abs().max(an.abs()) || err <= 1e-8;
            assert!(ok, "{}[{j}]: analytic {an:e} vs numeric {fd:e}", names[t]);
            if an.abs() > 1e-3 {
                worst = worst.max(err / an.abs());
            }
            checked += 1;
        }
    }
    (worst, checked)
}

fn toy(kind: BackboneKind, adapter: AdapterKind, rank: usize, seed: u64) -> ToyModel {
    let seq_len = if kind == BackboneKind::Attention { 4 } else { 1 };
    let cfg = BackboneConfig { kind, n: 8, depth: 1, seq_len, init_scale: 1.0 };
    let mut g = rng::stream(seed, &[3]);
    let base = ToyModel::init(&cfg, 3, &mut g).unwrap();
    base.adapt(adapter, rank, &mut g).unwrap()
}

#[test]
fn mlp_effort_gradients_match_finite_differences() {
    let mut m = toy(BackboneKind::Mlp, AdapterKind::Effort, 3, 10);
    perturb(&mut m, 11, 0.05);
    let (x, y) = batch(8, 4, 1, 12);
    let (_, k) = check(&mut m, &x, &y, RegularizerWeights { lambda1: 1.0, lambda2: 1.0 });
    assert_eq!(k, 3 * 17 + 2 * 8 + 2);
}

#[test]
fn attention_effort_gradients_match_finite_differences() {
    let mut m = toy(BackboneKind::Attention, AdapterKind::Effort, 2, 20);
    perturb(&mut m, 21, 0.05);
    let (x, y) = batch(8, 2, 4, 22);
    check(&mut m, &x, &y, RegularizerWeights { lambda1: 0.7, lambda2: 1.3 });
}

#[test]
fn lora_and_full_gradients_match_finite_differences() {
    for (kind, seq) in [(BackboneKind::Mlp, 1), (BackboneKind::Attention, 4)] {
        for adapter in [AdapterKind::Lora, AdapterKind::Full] {
            let mut m = toy(kind, adapter, 2, 30);
            perturb(&mut m, 31, 0.05);
            let (x, y) = batch(8, 3, seq, 32);
            check(&mut m, &x, &y, RegularizerWeights::default());
        }
    }
}

#[test]
fn pretraining_gradients_include_biases() {
    let cfg = BackboneConfig { kind: BackboneKind::Attention, n: 8, depth: 2, seq_len: 4, init_scale: 1.0 };
    let mut m = ToyModel::init(&cfg, 3, &mut rng::stream(40, &[])).unwrap();
    perturb(&mut m, 41, 0.05);
    let mut g = rng::stream(42, &[]);
    let x = rng::gaussian(&mut g, 12, 8, 1.0);
    let y = vec![0, 2, 1];
    check(&mut m, &x, &y, RegularizerWeights { lambda1: 0.0, lambda2: 0.0 });
}
