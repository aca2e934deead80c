use super::*;
use crate::data::sample_message;
use crate::tensor::gradcheck::finite_diff_check;
use rand::Rng;

fn tiny() -> NetConfig {
    NetConfig {
        image_side: 16,
        message_len: 8,
        base_channels: 2,
        leaky_slope: 0.2,
    }
}

fn random_images(cfg: &NetConfig, n: usize, seed: u64) -> Vec<GrayImage> {
    let mut rng = keyed_rng(seed, "net-test-images");
    let s = cfg.image_side;
    (0..n)
        .map(|_| GrayImage::new(s, s, (0..s * s).map(|_| rng.gen()).collect()).unwrap())
        .collect()
}

#[test]
fn default_parameter_counts() {
    let nets = Nets::zeroed(&NetConfig::default());
    assert_eq!(nets.generator.param_count(), 749_425);
    assert_eq!(nets.discriminator.param_count(), 251_479);
    assert_eq!(nets.steganalyzer.param_count(), 205_425);
    assert_eq!(nets.param_count(), DEFAULT_PARAM_COUNT);
}

#[test]
fn config_validation() {
    assert!(NetConfig { image_side: 24, ..NetConfig::default() }.validate().is_err());
    assert!(NetConfig { message_len: 1025, ..NetConfig::default() }.validate().is_err());
    assert_eq!(NetConfig::for_payload(32, 0.1).unwrap().message_len, 102);
    assert!(init_params(&NetConfig { image_side: 0, ..NetConfig::default() }, 1).is_err());
}

#[test]
fn init_is_deterministic_per_seed() {
    let cfg = tiny();
    let a = init_params(&cfg, 5).unwrap();
    assert_eq!(a, init_params(&cfg, 5).unwrap());
    let b = init_params(&cfg, 6).unwrap();
    assert_ne!(a.generator.fingerprint(), b.generator.fingerprint());
}

#[test]
fn init_moments() {
    let nets = init_params(&NetConfig::default(), 3).unwrap();
    let w = &nets.generator.fc.weight.data()[..10_000];
    let mean = w.iter().sum::<f64>() / 1e4;
    let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 1e4).sqrt();
    assert!(mean.abs() < 0.01, "{mean}");
    assert!((std - 0.02).abs() < 0.005, "{std}");
    for l in nets.discriminator.layers() {
        assert!(l.bias.data().iter().all(|&b| b == 0.0));
    }
}

#[test]
fn generator_shape_and_range() {
    let cfg = NetConfig::default();
    let nets = init_params(&cfg, 1).unwrap();
    let covers = random_images(&cfg, 2, 1);
    let msgs = [sample_message(102, 1), sample_message(102, 2)];
    let mut g = Graph::new();
    let x = g.constant(images_to_tensor(&cfg, &covers.iter().collect::<Vec<_>>()).unwrap());
    let m = g.constant(messages_to_tensor(&cfg, &msgs.iter().collect::<Vec<_>>()).unwrap());
    let gp = nets.generator.bind(&mut g, false);
    let s = generator_forward(&mut g, &cfg, &gp, x, m).unwrap();
    assert_eq!(g.shape(s), &[2, 1, 32, 32]);
    assert!(g.value(s).data().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn generator_depends_on_every_message_bit_pattern() {
    let cfg = tiny();
    let nets = init_params(&cfg, 2).unwrap();
    let cover = random_images(&cfg, 1, 2).remove(0);
    let m = sample_message(8, 3);
    let mut flipped = m.bits().to_vec();
    flipped[4] = !flipped[4];
    let run = |msg: &BitMessage| {
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(&cfg, &[&cover]).unwrap());
        let mt = g.constant(messages_to_tensor(&cfg, &[msg]).unwrap());
        let gp = nets.generator.bind(&mut g, false);
        let s = generator_forward(&mut g, &cfg, &gp, x, mt).unwrap();
        g.value(s).data().to_vec()
    };
    let a = run(&m);
    let b = run(&BitMessage::new(flipped));
    let l1: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    assert!(l1 > 0.0);
}

#[test]
fn generator_rejects_wrong_shapes() {
    let cfg = tiny();
    let nets = init_params(&cfg, 2).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
    let m = g.constant(Tensor::zeros(&[1, 8]));
    let gp = nets.generator.bind(&mut g, false);
    assert!(matches!(
        generator_forward(&mut g, &cfg, &gp, x, m),
        Err(TensorError::Dimension { axis: 2, .. })
    ));
    let x = g.constant(Tensor::zeros(&[1, 1, 16, 16]));
    let m = g.constant(Tensor::zeros(&[1, 7]));
    assert!(matches!(
        generator_forward(&mut g, &cfg, &gp, x, m),
        Err(TensorError::Dimension { axis: 1, .. })
    ));
    let long = sample_message(9, 0);
    assert!(messages_to_tensor(&cfg, &[&long]).is_err());
}

#[test]
fn generator_fc_gradient_matches_finite_differences() {
    let cfg = tiny();
    let nets = init_params(&cfg, 4).unwrap();
    let cover = images_to_tensor(&cfg, &[&random_images(&cfg, 1, 4)[0]]).unwrap();
    let msg = messages_to_tensor(&cfg, &[&sample_message(8, 4)]).unwrap();
    let err = finite_diff_check(
        |g, w| {
            let mut gp = nets.generator.bind(g, false);
            gp[0].weight = w;
            let x = g.constant(cover.clone());
            let m = g.constant(msg.clone());
            let s = generator_forward(g, &cfg, &gp, x, m)?;
            // Mean output, rescaled so the gradient is O(1).
            let mean = g.mean(s)?;
            g.scale(mean, 1e3)
        },
        &nets.generator.fc.weight,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn discriminator_ranges_and_chance_decoding() {
    let cfg = NetConfig::default();
    let nets = init_params(&cfg, 7).unwrap();
    let images = random_images(&cfg, 10, 7);
    let refs: Vec<&GrayImage> = images.iter().collect();
    let out = nets.discriminate(&refs).unwrap();
    let mut hits = 0;
    for (i, (p, dec)) in out.iter().enumerate() {
        assert!(*p > 0.0 && *p < 1.0);
        assert_eq!(dec.len(), 102);
        assert!(dec.iter().all(|&q| q > 0.0 && q < 1.0));
        let m = sample_message(102, 100 + i as u64);
        hits += dec.iter().zip(m.bits()).filter(|(&q, &b)| (q >= 0.5) == b).count();
    }
    // 1020 bits against fresh random messages.
    let acc = hits as f64 / 1020.0;
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
}

#[test]
fn discriminator_conv_gradient_matches_finite_differences() {
    let cfg = tiny();
    let nets = init_params(&cfg, 8).unwrap();
    let img = images_to_tensor(&cfg, &[&random_images(&cfg, 1, 8)[0]]).unwrap();
    for layer in 0..4 {
        let err = finite_diff_check(
            |g, k| {
                let mut dp = nets.discriminator.bind(g, false);
                dp[layer].weight = k;
                let x = g.constant(img.clone());
                let out = discriminator_forward(g, &cfg, &dp, x)?;
                let a = g.sum(out.decoded)?;
                let b = g.sum(out.realfake)?;
                let s = g.add(a, b)?;
                g.scale(s, 1e2)
            },
            &nets.discriminator.conv[layer].weight,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "conv{}: {err}", layer + 1);
    }
}

#[test]
fn kv_kernel_table() {
    let k = kv_kernel();
    assert_eq!(k.shape(), &[1, 1, 5, 5]);
    let d = k.data();
    assert_eq!(d[12], -12.0 / 12.0);
    for corner in [0, 4, 20, 24] {
        assert_eq!(d[corner], -1.0 / 12.0);
    }
    assert_eq!(KV_KERNEL.iter().sum::<f64>(), 0.0);
}

#[test]
fn constant_image_has_zero_residual() {
    for level in 0..=255u8 {
        let im = GrayImage::filled(16, 16, level);
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(&tiny(), &[&im]).unwrap());
        let r = high_pass(&mut g, x).unwrap();
        assert_eq!(g.shape(r), &[1, 1, 16, 16]);
        let worst = g.value(r).data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        // Integer-valued inputs cancel exactly; others to rounding.
        if level == 0 || level == 255 {
            assert_eq!(worst, 0.0);
        }
        assert!(worst <= 1e-15, "level {level}: {worst}");
    }
}

#[test]
fn steganalyzer_range_and_fixed_filter() {
    let cfg = tiny();
    let nets = init_params(&cfg, 9).unwrap();
    let images = random_images(&cfg, 3, 9);
    let probs = nets.cover_probability(&images.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(probs.len(), 3);
    assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));

    // The high-pass kernel enters as a constant and never receives a gradient.
    let mut g = Graph::new();
    let k = g.constant(kv_kernel());
    let x = g.constant(images_to_tensor(&cfg, &[&images[0]]).unwrap());
    let padded = g.pad_replicate(x, 2).unwrap();
    let r = g.conv2d(padded, k, 1, 0).unwrap();
    let sp = nets.steganalyzer.bind(&mut g, true);
    let n = 1;
    let f = conv_features(&mut g, &cfg, &sp[..4], r, n).unwrap();
    let h = dense(&mut g, f, &sp[4], Some(0.2)).unwrap();
    let z = dense(&mut g, h, &sp[5], None).unwrap();
    let loss = g.sum(z).unwrap();
    g.backward(loss).unwrap();
    assert!(g.grad(k).is_none());
    assert!(g.grad(sp[0].weight).is_some());
    let mut s = nets.steganalyzer.clone();
    s.collect_grads(&mut g, &sp).unwrap();
    assert!(s.tensors().iter().all(|t| t.grad().is_some()));
}

#[test]
fn forwards_are_deterministic() {
    let cfg = tiny();
    let nets = init_params(&cfg, 10).unwrap();
    let images = random_images(&cfg, 2, 10);
    let refs: Vec<&GrayImage> = images.iter().collect();
    let msgs = [sample_message(8, 1), sample_message(5, 2)];
    let mrefs: Vec<&BitMessage> = msgs.iter().collect();
    assert_eq!(nets.embed(&refs, &mrefs).unwrap(), nets.embed(&refs, &mrefs).unwrap());
    assert_eq!(nets.discriminate(&refs).unwrap(), nets.discriminate(&refs).unwrap());
    assert_eq!(
        nets.cover_probability(&refs).unwrap(),
        nets.cover_probability(&refs).unwrap()
    );
    assert_eq!(nets.extract(&refs, 5).unwrap()[0].len(), 5);
    assert!(nets.extract(&refs, 9).is_err());
}

fn checkpoint_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(ckpt, &mut out).unwrap();
    out
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let mut ckpt = Checkpoint::fresh(init_params(&tiny(), 11).unwrap());
    ckpt.step = 42;
    ckpt.optim[1].mean_square[0].data_mut()[3] = 0.125;
    let bytes = checkpoint_bytes(&ckpt);
    let back = read_checkpoint(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(checkpoint_bytes(&back), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    save_checkpoint(&ckpt, &path).unwrap();
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
}

#[test]
fn default_checkpoint_preserves_param_count() {
    let ckpt = Checkpoint::fresh(init_params(&NetConfig::default(), 1).unwrap());
    let back = read_checkpoint(&checkpoint_bytes(&ckpt)).unwrap();
    assert_eq!(back.nets.param_count(), DEFAULT_PARAM_COUNT);
}

#[test]
fn corrupted_checkpoints_fail_cleanly() {
    let ckpt = Checkpoint::fresh(init_params(&tiny(), 12).unwrap());
    let bytes = checkpoint_bytes(&ckpt);

    let short = &bytes[..bytes.len() - 1];
    assert!(matches!(read_checkpoint(short), Err(CheckpointError::Truncated { .. })));
    for cut in [0, 3, 10, 20, 200] {
        assert!(matches!(
            read_checkpoint(&bytes[..cut]),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_checkpoint(&bad), Err(CheckpointError::BadMagic)));

    let mut ver = bytes.clone();
    ver[8] = 9;
    assert!(matches!(
        read_checkpoint(&ver),
        Err(CheckpointError::VersionMismatch { found: 9, expected: 1 })
    ));

    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(read_checkpoint(&extra), Err(CheckpointError::Malformed(_))));

    let text = String::from_utf8_lossy(&bytes).replace("image_side=16", "image_side=17");
    let mut hdr = bytes.clone();
    let at = text.find("image_side=17").unwrap();
    hdr[at + 11] = b'7';
    assert!(matches!(read_checkpoint(&hdr), Err(CheckpointError::Malformed(_))));
}
