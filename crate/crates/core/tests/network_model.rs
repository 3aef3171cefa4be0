//! Network shape trace, head independence, initialization and persistence.

use mmis::fusion::FusionVariant;
use mmis::network::{bind_params, head_name, init_params, predict, residual_double_conv, NetworkConfig, Params};
use mmis::{Checkpoint, Error, FusionConfig, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn input(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn small(num_classes: usize) -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        depth: 2,
        num_classes,
        ..NetworkConfig::default()
    }
}

#[test]
fn default_network_shape_trace() {
    let cfg = NetworkConfig::default();
    let params = init_params(&cfg, 0).unwrap();
    let y = predict(&cfg, &params, &input(&[2, 1, 64, 64], 1)).unwrap();
    assert_eq!(y.shape(), &[2, 19, 64, 64]);
    assert!(y.data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn every_legal_extent_round_trips_shape() {
    for depth in 1..=3 {
        for variant in [FusionVariant::SelectOne, FusionVariant::FuseClosestPair] {
            let cfg = NetworkConfig {
                base_channels: 2,
                depth,
                num_classes: 3,
                fusion: FusionConfig {
                    variant,
                    ..FusionConfig::default()
                },
                ..NetworkConfig::default()
            };
            let params = init_params(&cfg, 4).unwrap();
            let m = cfg.spatial_multiple();
            for (h, w) in [(m, m), (2 * m, 3 * m)] {
                let y = predict(&cfg, &params, &input(&[1, 1, h, w], 5)).unwrap();
                assert_eq!(y.shape(), &[1, 3, h, w]);
            }
            let bad = predict(&cfg, &params, &input(&[1, 1, m + 1, m], 5));
            assert!(matches!(bad, Err(Error::Shape(_))), "depth {depth}");
        }
    }
}

fn channel(t: &Tensor, c: usize) -> Vec<f64> {
    let [b, n, h, w] = t.dims4().unwrap();
    (0..b).flat_map(|bi| t.data()[(bi * n + c) * h * w..][..h * w].to_vec()).collect()
}

#[test]
fn heads_are_independent() {
    let cfg = small(4);
    let mut params = init_params(&cfg, 7).unwrap();
    for c in 0..4 {
        params.get_mut(&format!("{}.b", head_name(c))).unwrap().data_mut()[0] = 0.1 * (c as f64 + 1.0);
    }
    let x = input(&[2, 1, 16, 16], 8);
    let base = predict(&cfg, &params, &x).unwrap();

    let mut doubled = params.clone();
    doubled.get_mut("head.002.b").unwrap().data_mut()[0] *= 2.0;
    let y = predict(&cfg, &doubled, &x).unwrap();
    for c in 0..4 {
        assert_eq!(channel(&y, c) == channel(&base, c), c != 2, "channel {c}");
    }

    let mut zeroed = params.clone();
    for suffix in ["w", "b"] {
        let t = zeroed.get_mut(&format!("head.001.{suffix}")).unwrap();
        *t = Tensor::zeros(t.shape());
    }
    let y = predict(&cfg, &zeroed, &x).unwrap();
    assert!(channel(&y, 1).iter().all(|&p| p == 0.5));
    for c in [0, 2, 3] {
        assert_eq!(channel(&y, c), channel(&base, c));
    }
}

#[test]
fn pixels_can_belong_to_several_classes() {
    let cfg = small(3);
    let mut params = init_params(&cfg, 9).unwrap();
    for c in 0..3 {
        let name = head_name(c);
        let w = params.get_mut(&format!("{name}.w")).unwrap();
        *w = Tensor::zeros(w.shape());
        params.get_mut(&format!("{name}.b")).unwrap().data_mut()[0] = 2.0;
    }
    let y = predict(&cfg, &params, &input(&[1, 1, 8, 8], 1)).unwrap();
    assert!(y.data().iter().all(|&p| p > 0.5));
}

#[test]
fn initialization_statistics() {
    let cfg = NetworkConfig::default();
    let a = init_params(&cfg, 1).unwrap();
    assert_eq!(a, init_params(&cfg, 1).unwrap());
    assert_ne!(a, init_params(&cfg, 2).unwrap());
    for name in ["enc2.conv2.w", "dec2.conv1.w", "dec1.conv2.w"] {
        let t = &a[name];
        let fan_in: usize = t.shape()[1..].iter().product();
        let n = t.numel() as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let want = 2.0 / fan_in as f64;
        assert!((var / want - 1.0).abs() < 0.2, "{name}: {var} vs {want}");
    }
    assert!(a.iter().filter(|(k, _)| k.ends_with(".b")).all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn residual_gradient_reaches_both_branches() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut params = Params::new();
    for (name, shape) in [
        ("blk.conv1.w", vec![3, 2, 3, 3]),
        ("blk.conv1.b", vec![3]),
        ("blk.conv2.w", vec![3, 3, 3, 3]),
        ("blk.conv2.b", vec![3]),
        ("blk.proj.w", vec![3, 2, 1, 1]),
        ("blk.proj.b", vec![3]),
    ] {
        params.insert(name.to_string(), Tensor::randn(&shape, 0.5, &mut rng));
    }
    let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
    let probe = Tensor::randn(&[1, 3, 5, 5], 1.0, &mut rng);
    let value = |p: &Params| -> f64 {
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, p, false).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let y = residual_double_conv(&mut tape, &bound, "blk", xv).unwrap();
        tape.value(y).dot(&probe)
    };

    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &params, true).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let y = residual_double_conv(&mut tape, &bound, "blk", xv).unwrap();
    let grads = tape.backward_with(y, probe.clone()).unwrap();
    for name in ["blk.conv1.w", "blk.conv2.w", "blk.proj.w"] {
        let g = grads.get(bound[name]).unwrap();
        assert!(g.norm() > 0.0, "{name} gets no gradient");
        let h = 1e-6;
        for i in [0, g.numel() / 2, g.numel() - 1] {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= h;
            let fd = (value(&plus) - value(&minus)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() <= 1e-6 * fd.abs().max(1.0), "{name}[{i}]: {fd} vs {}", g.data()[i]);
        }
    }
}

#[test]
fn overflow_names_the_layer() {
    let cfg = small(2);
    let mut params = init_params(&cfg, 3).unwrap();
    params.get_mut("enc0.conv1.w").unwrap().data_mut().fill(1e307);
    match predict(&cfg, &params, &Tensor::full(&[1, 1, 8, 8], 1e3)) {
        Err(Error::Numeric { op }) => assert!(op.starts_with("enc0"), "{op}"),
        other => panic!("expected numeric error, got {other:?}"),
    }
}

#[test]
fn checkpoint_round_trip_keeps_forward_bitwise() {
    let cfg = small(2);
    let ckpt = Checkpoint::init(cfg.clone(), Vec::new(), 12).unwrap();
    let x = input(&[1, 1, 16, 16], 13);
    let before = predict(&cfg, &ckpt.params, &x).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    let after = predict(&loaded.config, &loaded.params, &x).unwrap();
    assert_eq!(before.data(), after.data());
    assert_eq!(&std::fs::read(&path).unwrap()[..4], b"MMCK");
}
