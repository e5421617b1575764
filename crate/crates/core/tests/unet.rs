mod common;

use common::{max_diff, rng};
use rand::Rng;
use shiftseg::autodiff::Tape;
use shiftseg::ops::{Padding, PoolKind};
use shiftseg::tensor::Tensor;
use shiftseg::unet::{
    build_unet, read_checkpoint, write_checkpoint, CheckpointMeta, DownsamplingSpec, UNetConfig,
};
use shiftseg::Error;

fn variants() -> Vec<DownsamplingSpec> {
    vec![
        DownsamplingSpec::MaxPool,
        DownsamplingSpec::BlurPool(3),
        DownsamplingSpec::BlurPool(5),
        DownsamplingSpec::BlurPool(7),
        DownsamplingSpec::pyramidal_default(),
    ]
}

fn conv_params(cin: usize, cout: usize, k: usize) -> usize {
    cin * cout * k * k + cout
}

/// Parameter count written out from the architecture description.
fn expected_params(c: usize, depth: usize) -> usize {
    let enc: Vec<usize> = (0..=depth).map(|l| c << l.min(depth - 1)).collect();
    let mut total = 0;
    let mut cin = 1;
    for &e in &enc {
        total += conv_params(cin, e, 3) + conv_params(e, e, 3);
        cin = e;
    }
    let mut below = enc[depth];
    for l in (0..depth).rev() {
        let input = below + enc[l];
        let out = if l == 0 { c } else { enc[l - 1] };
        total += conv_params(input, input / 2, 3) + conv_params(input / 2, out, 3);
        below = out;
    }
    total + conv_params(c, 1, 1)
}

fn small(depth: usize, d: DownsamplingSpec) -> UNetConfig {
    UNetConfig {
        base_channels: 2,
        depth,
        downsampling: d,
        input_size: (32, 32),
        padding: Padding::Zero,
    }
}

#[test]
fn parameter_count_is_shared_and_matches_the_layout() {
    for depth in 1..=4 {
        for base in [2, 8] {
            let expected = expected_params(base, depth);
            for d in variants() {
                let d = match d {
                    DownsamplingSpec::Pyramidal(s) => {
                        DownsamplingSpec::Pyramidal(s[..depth].to_vec())
                    }
                    other => other,
                };
                let cfg = UNetConfig {
                    base_channels: base,
                    depth,
                    downsampling: d.clone(),
                    ..UNetConfig::default()
                };
                let net = build_unet::<f32>(cfg, 0).unwrap();
                assert_eq!(net.param_count(), expected, "depth {depth} base {base} {d}");
            }
        }
    }
}

#[test]
fn outputs_are_probabilities_of_input_shape() {
    for depth in 1..=4 {
        for d in variants() {
            let d = match d {
                DownsamplingSpec::Pyramidal(s) => DownsamplingSpec::Pyramidal(s[..depth].to_vec()),
                other => other,
            };
            let net = build_unet::<f64>(small(depth, d.clone()), 5).unwrap();
            let mut r = rng(depth as u64);
            let x = Tensor::from_fn(&[2, 1, 32, 32], |_| r.gen_range(0.0..1.0));
            let y = net.forward(&x).unwrap();
            assert_eq!(y.shape(), &[2, 1, 32, 32]);
            assert!(
                y.data().iter().all(|&p| p > 0.0 && p < 1.0),
                "{d} depth {depth}"
            );
        }
    }
}

#[test]
fn initialization_is_seeded_and_biases_start_at_zero() {
    for d in variants() {
        let cfg = UNetConfig::default().with_downsampling(d);
        let a = build_unet::<f32>(cfg.clone(), 11).unwrap();
        let b = build_unet::<f32>(cfg.clone(), 11).unwrap();
        let c = build_unet::<f32>(cfg, 12).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        for (name, t) in a.params().iter() {
            if name.ends_with(".bias") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }
}

#[test]
fn weights_follow_lecun_variance() {
    // enc1.conv2 at base 8 has 16 input channels and 3x3 kernels.
    let fan_in = 16.0 * 9.0;
    let mut values = Vec::new();
    for seed in 0..5 {
        let net = build_unet::<f64>(UNetConfig::default(), seed).unwrap();
        values.extend_from_slice(net.params().get("enc1.conv2.weight").unwrap().data());
    }
    assert!(values.len() >= 10_000, "{}", values.len());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    assert!(mean.abs() < 3.0 * (1.0 / fan_in / n).sqrt(), "mean {mean}");
    assert!(
        (var * fan_in - 1.0).abs() < 0.2,
        "variance {var} vs {}",
        1.0 / fan_in
    );
}

#[test]
fn zero_input_gives_finite_output() {
    for d in variants() {
        let net = build_unet::<f32>(UNetConfig::default().with_downsampling(d), 3).unwrap();
        let y = net.forward(&Tensor::zeros(&[1, 1, 128, 128])).unwrap();
        assert!(y.is_finite());
    }
}

#[test]
fn samples_in_a_batch_are_independent() {
    for d in [
        DownsamplingSpec::MaxPool,
        DownsamplingSpec::pyramidal_default(),
    ] {
        let net = build_unet::<f64>(small(4, d), 9).unwrap();
        let mut r = rng(2);
        let a = Tensor::from_fn(&[1, 1, 32, 32], |_| r.gen_range(0.0..1.0));
        let b = Tensor::from_fn(&[1, 1, 32, 32], |_| r.gen_range(0.0..1.0));
        let both = net
            .forward(&Tensor::concat_batch(&[a.clone(), b.clone()]).unwrap())
            .unwrap();
        let separate =
            Tensor::concat_batch(&[net.forward(&a).unwrap(), net.forward(&b).unwrap()]).unwrap();
        assert!(max_diff(&both, &separate) < 1e-6);
    }
}

#[test]
fn maxpool_is_the_even_phase_of_dense_max() {
    let net = build_unet::<f64>(small(2, DownsamplingSpec::MaxPool), 4).unwrap();
    let mut r = rng(6);
    let x = Tensor::from_fn(&[1, 1, 32, 32], |_| r.gen_range(0.0..1.0));
    let mut tape = Tape::new();
    let input = tape.input("x", x).unwrap();
    let h = net
        .graph()
        .stride1_prefix(&mut tape, net.params(), input)
        .unwrap();
    let pooled = tape.maxpool(h, 2, 2).unwrap();
    let dense = tape.dense_maxpool(h, 2).unwrap();
    let (pooled, dense) = (tape.value(pooled), tape.value(dense));
    let (n, c, ph, pw) = pooled.dims4().unwrap();
    for s in 0..n {
        for ch in 0..c {
            for y in 0..ph {
                for x in 0..pw {
                    assert_eq!(
                        common::at(pooled, s, ch, y, x),
                        common::at(dense, s, ch, 2 * y, 2 * x)
                    );
                }
            }
        }
    }
}

#[test]
fn blurpool_network_starts_with_the_dense_max() {
    let net = build_unet::<f64>(small(2, DownsamplingSpec::BlurPool(5)), 4).unwrap();
    let base = build_unet::<f64>(small(2, DownsamplingSpec::MaxPool), 4).unwrap();
    assert_eq!(net.params(), base.params());
    let mut r = rng(8);
    let x = Tensor::from_fn(&[1, 1, 32, 32], |_| r.gen_range(0.0..1.0));
    let mut tape = Tape::new();
    let input = tape.input("x", x).unwrap();
    let h = base
        .graph()
        .stride1_prefix(&mut tape, base.params(), input)
        .unwrap();
    let dense = net
        .graph()
        .stride1_prefix(&mut tape, net.params(), input)
        .unwrap();
    let expected = common::dense_maxpool(tape.value(h), 2, Padding::Replicate);
    assert!(max_diff(tape.value(dense), &expected) < 1e-12);
}

#[test]
fn pyramidal_schedule_places_large_blurs_at_high_resolution() {
    let cfg = UNetConfig::default().with_downsampling(DownsamplingSpec::pyramidal_default());
    let layers: Vec<(usize, usize)> = cfg
        .downsampling_layers()
        .into_iter()
        .map(|((h, _), spec)| {
            assert_eq!(spec.kind, PoolKind::PyramidalSlot);
            assert_eq!((spec.window, spec.stride), (2, 2));
            (h, spec.blur_size.unwrap())
        })
        .collect();
    assert_eq!(layers, [(128, 7), (64, 5), (32, 3), (16, 2)]);
    for m in [3, 5, 7] {
        let cfg = UNetConfig::default().with_downsampling(DownsamplingSpec::BlurPool(m));
        assert!(cfg
            .downsampling_layers()
            .iter()
            .all(|(_, s)| s.blur_size == Some(m)));
    }
    let base = UNetConfig::default().downsampling_layers();
    assert!(base
        .iter()
        .all(|(_, s)| s.kind == PoolKind::MaxPool && s.blur_size.is_none()));
}

#[test]
fn invalid_configurations_are_rejected() {
    let bad = [
        UNetConfig {
            input_size: (120, 128),
            ..UNetConfig::default()
        },
        UNetConfig {
            base_channels: 0,
            ..UNetConfig::default()
        },
        UNetConfig {
            depth: 0,
            ..UNetConfig::default()
        },
        UNetConfig::default().with_downsampling(DownsamplingSpec::BlurPool(4)),
        UNetConfig::default().with_downsampling(DownsamplingSpec::Pyramidal(vec![7, 5, 3])),
        UNetConfig::default().with_downsampling(DownsamplingSpec::Pyramidal(vec![3, 5, 5, 7])),
    ];
    for cfg in bad {
        assert!(
            matches!(
                build_unet::<f32>(cfg.clone(), 0),
                Err(Error::InvalidConfig(_))
            ),
            "{cfg:?}"
        );
    }
}

#[test]
fn checkpoints_round_trip_and_detect_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let cfg = UNetConfig {
        padding: Padding::Circular,
        ..small(4, DownsamplingSpec::pyramidal_default())
    };
    let net = build_unet::<f32>(cfg, 21).unwrap();
    let meta = CheckpointMeta {
        run_id: "pbp_none_seed1-abcd".into(),
        seed: 1,
        epoch: 17,
        val_loss: 0.125,
        fingerprint: "0123456789abcdef".into(),
    };
    write_checkpoint(&path, &net, &meta).unwrap();
    let back = read_checkpoint(&path).unwrap();
    assert_eq!(back.meta, meta);
    assert_eq!(back.model.config(), net.config());
    assert_eq!(back.model.params(), net.params());

    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
    std::fs::write(&path, &bytes[..mid]).unwrap();
    assert!(read_checkpoint(&path).is_err());
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(read_checkpoint(&path).is_err());
}
