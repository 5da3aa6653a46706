use effort::adapter::{Adapter, AdapterKind, RegularizerWeights};
use effort::model::{cls_loss, cross_entropy, BackboneConfig, BackboneKind, ToyModel};
use effort::rng;
use effort::{Error, Matrix};

fn cfg(kind: BackboneKind, n: usize, depth: usize, seq_len: usize) -> BackboneConfig {
    BackboneConfig { kind, n, depth, seq_len, init_scale: 1.0 }
}

#[test]
fn mlp_composition_oracle() {
    let mut g = rng::stream(1, &[]);
    let mut m = ToyModel::init(&cfg(BackboneKind::Mlp, 4, 1, 1), 2, &mut g).unwrap();
    m.layers[0].bias = vec![0.1, -0.2, 0.3, 0.0];
    m.head_b = vec![0.5, -0.5];
    let x = rng::gaussian(&mut g, 3, 4, 1.0);
    let (logits, features) = m.forward(&x).unwrap();
    let w = m.layers[0].adapter.effective_weight();
    for s in 0..3 {
        let h: Vec<f64> = (0..4).map(|j| ((0..4).map(|k| w[(j, k)] * x[(s, k)]).sum::<f64>() + m.layers[0].bias[j]).tanh()).collect();
        for j in 0..4 {
            assert!((features[(s, j)] - h[j]).abs() <= 1e-12);
        }
        for c in 0..2 {
            let z: f64 = (0..4).map(|j| m.head_w[(c, j)] * h[j]).sum::<f64>() + m.head_b[c];
            assert!((logits[(s, c)] - z).abs() <= 1e-12);
        }
    }
}

#[test]
fn zero_weights_give_bias_logits() {
    for kind in [BackboneKind::Mlp, BackboneKind::Attention] {
        let mut g = rng::stream(2, &[]);
        let mut m = ToyModel::init(&cfg(kind, 6, 2, 3), 2, &mut g).unwrap();
        for l in m.layers.iter_mut() {
            l.adapter = Adapter::Full(Matrix::zeros(6, 6));
        }
        m.head_w = Matrix::zeros(2, 6);
        m.head_b = vec![1.5, -0.25];
        let (logits, _) = m.forward(&rng::gaussian(&mut g, 12, 6, 1.0)).unwrap();
        for s in 0..4 {
            assert_eq!(logits.row(s), &[1.5, -0.25]);
        }
    }
}

#[test]
fn forward_is_deterministic_and_checks_shapes() {
    let mut g = rng::stream(3, &[]);
    let m = ToyModel::init(&cfg(BackboneKind::Attention, 8, 2, 4), 3, &mut g).unwrap();
    let x = rng::gaussian(&mut g, 8, 8, 1.0);
    assert_eq!(m.forward(&x).unwrap().0, m.forward(&x).unwrap().0);
    assert_eq!(m.forward(&x).unwrap().0.shape(), (2, 3));
    assert!(m.forward(&Matrix::zeros(6, 8)).is_err());
    assert!(m.forward(&Matrix::zeros(4, 7)).is_err());
    assert!(ToyModel::init(&cfg(BackboneKind::Mlp, 3, 1, 1), 2, &mut g).is_err());
}

#[test]
fn cross_entropy_examples() {
    let l = cls_loss(&Matrix::zeros(1, 2), &[0]).unwrap();
    assert!((l.mean - 2f64.ln()).abs() <= 1e-15);
    let confident = Matrix::new(2, 2, vec![20.0, -20.0, -20.0, 20.0]).unwrap();
    assert!(cls_loss(&confident, &[0, 1]).unwrap().mean <= 1e-8);
    let wrong = cls_loss(&confident, &[1, 0]).unwrap();
    assert!((wrong.mean - 40.0).abs() <= 1e-8);

    let z = rng::gaussian(&mut rng::stream(4, &[]), 5, 3, 2.0);
    let labels = [0, 2, 1, 1, 0];
    let ce = cross_entropy(&z, &labels).unwrap();
    let direct: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let sum: f64 = z.row(i).iter().map(|v| v.exp()).sum();
            -(z[(i, y)].exp() / sum).ln()
        })
        .sum::<f64>()
        / 5.0;
    assert!((ce.mean - direct).abs() <= 1e-12);
    assert!(cross_entropy(&z, &[0, 1]).is_err());
    assert!(cross_entropy(&z, &[0, 1, 3, 0, 0]).is_err());
}

#[test]
fn per_class_means() {
    let z = Matrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0]).unwrap();
    let ce = cls_loss(&z, &[0, 1, 1]).unwrap();
    assert!((ce.real - ce.per_sample[0]).abs() <= 1e-15);
    assert!((ce.fake - (ce.per_sample[1] + ce.per_sample[2]) / 2.0).abs() <= 1e-15);
    assert!(cls_loss(&z, &[0, 0, 0]).unwrap().fake.is_nan());
}

#[test]
fn adapted_models_match_at_init() {
    let mut g = rng::stream(5, &[]);
    let pre = ToyModel::init(&cfg(BackboneKind::Attention, 8, 2, 4), 4, &mut g).unwrap();
    let x = rng::gaussian(&mut g, 16, 8, 1.0);
    let mut feats = Vec::new();
    for kind in [AdapterKind::Frozen, AdapterKind::Effort, AdapterKind::Lora, AdapterKind::Full] {
        let mut m = pre.adapt(kind, 2, &mut rng::stream(6, &[])).unwrap();
        m.head_w = Matrix::from_fn(2, 8, |i, j| (i + j) as f64 * 0.1);
        feats.push((m.forward(&x).unwrap().0, m.trainable_count()));
    }
    for (f, _) in &feats[1..] {
        assert!(f.max_abs_diff(&feats[0].0) <= 1e-8);
    }
    assert_eq!(feats[0].1, 18);
    assert_eq!(feats[1].1, 8 * 2 * 17 + 18);
    assert_eq!(feats[2].1, 8 * 32 + 18);
    assert_eq!(feats[3].1, 8 * 64 + 18);
}

#[test]
fn effort_step_only_moves_trainable_parts() {
    let mut g = rng::stream(7, &[]);
    let pre = ToyModel::init(&cfg(BackboneKind::Attention, 8, 1, 2), 2, &mut g).unwrap();
    let mut m = pre.adapt(AdapterKind::Effort, 1, &mut g).unwrap();
    let before = m.clone();
    let x = rng::gaussian(&mut g, 8, 8, 1.0);
    let (_, grads) = m.loss_and_grads(&x, &[0, 1, 0, 1], RegularizerWeights::new(1.0, 1.0).unwrap()).unwrap();
    for (p, gr) in m.params_mut().into_iter().zip(&grads) {
        p.iter_mut().zip(gr).for_each(|(v, d)| *v -= 0.1 * d);
    }
    for (a, b) in m.layers.iter().zip(&before.layers) {
        assert_eq!(a.bias, b.bias);
        let (Adapter::Effort(ea), Adapter::Effort(eb)) = (&a.adapter, &b.adapter) else { panic!("not effort") };
        let (sa, sb) = (ea.split(), eb.split());
        assert_eq!(sa.u_r, sb.u_r);
        assert_eq!(sa.s_r, sb.s_r);
        assert_eq!(sa.v_r, sb.v_r);
        assert_ne!(sa.u_nr, sb.u_nr);
    }
}

#[test]
fn backward_needs_forward() {
    let mut g = rng::stream(8, &[]);
    let m = ToyModel::init(&cfg(BackboneKind::Mlp, 4, 1, 1), 2, &mut g).unwrap();
    assert!(matches!(m.backward(&Matrix::zeros(1, 2)), Err(Error::State(_))));
}

#[test]
fn regularizers_enter_total_with_their_weights() {
    let mut g = rng::stream(9, &[]);
    let pre = ToyModel::init(&cfg(BackboneKind::Mlp, 6, 2, 1), 2, &mut g).unwrap();
    let mut m = pre.adapt(AdapterKind::Effort, 1, &mut g).unwrap();
    for p in m.params_mut() {
        p.iter_mut().for_each(|v| *v += 0.05);
    }
    let x = rng::gaussian(&mut g, 4, 6, 1.0);
    let (parts, _) = m.loss_and_grads(&x, &[0, 1, 1, 0], RegularizerWeights::new(0.3, 2.0).unwrap()).unwrap();
    assert!(parts.orth > 0.0 && parts.ksv > 0.0);
    assert!((parts.total - (parts.cls + 0.3 * parts.orth + 2.0 * parts.ksv)).abs() <= 1e-12);
    let mean_orth = m.adapters().iter().map(|a| a.orth_loss()).sum::<f64>() / 2.0;
    assert!((parts.orth - mean_orth).abs() <= 1e-15);
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut g = rng::stream(10, &[]);
    let pre = ToyModel::init(&cfg(BackboneKind::Attention, 6, 1, 2), 3, &mut g).unwrap();
    for kind in [AdapterKind::Full, AdapterKind::Effort, AdapterKind::Lora, AdapterKind::Frozen] {
        let m = if kind == AdapterKind::Full { pre.clone() } else { pre.adapt(kind, 2, &mut g).unwrap() };
        let p = dir.path().join(format!("{kind:?}"));
        m.save(&p).unwrap();
        let back = ToyModel::load(&p).unwrap();
        assert_eq!(back.layers, m.layers);
        assert_eq!(back.head_w, m.head_w);
        assert_eq!(back.train_biases, m.train_biases);
        let x = rng::gaussian(&mut g, 4, 6, 1.0);
        assert_eq!(back.forward(&x).unwrap().0, m.forward(&x).unwrap().0);
    }
    assert!(ToyModel::load(&dir.path().join("missing")).is_err());
}
