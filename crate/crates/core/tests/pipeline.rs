use randreg_core::metrics::{dice, foreground_labels, ndv_percent, NdvMode};
use randreg_core::net::Checkpoint;
use randreg_core::synth::{make_pair, DownstreamConfig, DownstreamDataset, PairConfig, PairStream};
use randreg_core::train::{self, instance_optimize, InstanceConfig, Phase, TrainConfig};
use randreg_core::volume::{compose, warp_scalar};
use randreg_core::{FieldKind, ModelConfig, ModelMode, RegistrationModel, ScalarVolume, Shape3, VectorField};

fn small_pairs() -> PairConfig {
    PairConfig { shape: Shape3::cube(16).unwrap(), channels: 6, svf_amplitude: 2.0, ..PairConfig::default() }
}

fn small_model(mode: ModelMode) -> ModelConfig {
    ModelConfig { stages: 2, base_channels: 4, decoder_channels: 4, mode, ..ModelConfig::default() }
}

fn short_run(seed: u64) -> TrainConfig {
    TrainConfig { epochs: 2, pairs_per_epoch: 4, seed, ncc_window: 5, lr: Some(1e-3), ..TrainConfig::default() }
}

#[test]
fn pair_stream_is_reproducible_and_random_access() {
    let s = PairStream::new(small_pairs(), 42).unwrap();
    let a = s.pair_at(3);
    let b = PairStream::new(small_pairs(), 42).unwrap().pair_at(3);
    assert_eq!(a.fixed, b.fixed);
    assert_eq!(a.moving, b.moving);
    assert_ne!(a.fixed, s.pair_at(4).fixed);
    assert_eq!(a.seed, s.seed_of(3));
}

#[test]
fn zero_amplitude_gives_identical_images() {
    let cfg = PairConfig { svf_amplitude: 0.0, ..small_pairs() };
    let p = make_pair(&cfg, 5).unwrap();
    assert_eq!(p.fixed, p.moving);
    assert_eq!(p.fixed_labels, p.moving_labels);
}

#[test]
fn random_pairs_are_misaligned_but_diffeomorphic() {
    let cfg = PairConfig { svf_amplitude: 3.0, ..small_pairs() };
    for seed in 0..4 {
        let p = make_pair(&cfg, seed).unwrap();
        let (f, m) = (p.fixed_labels.unwrap(), p.moving_labels.unwrap());
        let d = dice(&f, &m, &foreground_labels(cfg.channels)).unwrap().mean;
        assert!(d < 0.95, "seed {seed}: dice {d}");
        assert_eq!(ndv_percent(&p.phi_to_fixed, NdvMode::Central).unwrap(), 0.0);
        assert_eq!(ndv_percent(&p.phi_to_moving, NdvMode::Central).unwrap(), 0.0);
        let used = (0..cfg.channels).filter(|&c| f.data().contains(&c)).count();
        assert!(used >= cfg.channels as usize / 2, "only {used} labels present");
    }
}

#[test]
fn pretraining_curves_are_bit_identical_for_a_seed() {
    let run = |seed| {
        let mut m = RegistrationModel::new(small_model(ModelMode::Pretrain), 3).unwrap();
        let out = train::pretrain(&mut m, &small_pairs(), &short_run(seed)).unwrap();
        (out.log.train, out.last.values)
    };
    let (a, wa) = run(8);
    let (b, wb) = run(8);
    assert_eq!(
        a.iter().map(|x| x.1.to_bits()).collect::<Vec<_>>(),
        b.iter().map(|x| x.1.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(wa, wb);
    let (c, _) = run(9);
    assert_ne!(a, c);
}

#[test]
fn checkpoint_round_trips_and_transfers_the_encoder() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let pre = RegistrationModel::<f32>::new(small_model(ModelMode::Pretrain), 11).unwrap();
    let ck = Checkpoint::from_model(&pre).with_seed("init", 11);
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.to_bytes(), ck.to_bytes());
    assert_eq!(back.seed("init"), Some(11));
    let restored: RegistrationModel<f32> = back.to_model().unwrap();
    assert_eq!(Checkpoint::from_model(&restored).values, ck.values);

    let mut bb = RegistrationModel::<f32>::new(small_model(ModelMode::Backbone), 12).unwrap();
    back.transfer_encoder(&mut bb).unwrap();
    let moved = Checkpoint::from_model(&bb);
    for e in moved.entries.iter().filter(|e| e.name.starts_with("encoder.")) {
        assert_eq!(moved.get(&e.name), back.get(&e.name), "{}", e.name);
    }
    let mut wrong =
        RegistrationModel::<f32>::new(ModelConfig { base_channels: 8, ..small_model(ModelMode::Backbone) }, 0).unwrap();
    assert!(back.transfer_encoder(&mut wrong).is_err());
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let ck = Checkpoint::from_model(&RegistrationModel::<f32>::new(small_model(ModelMode::Backbone), 1).unwrap());
    let bytes = ck.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], "t".as_ref()).is_err());
}

fn smooth_image(s: Shape3, shift: [f64; 3]) -> ScalarVolume {
    ScalarVolume::from_fn(s, |[i, j, k]| {
        let (x, y, z) = (i as f64 - shift[0], j as f64 - shift[1], k as f64 - shift[2]);
        ((x * 0.45).sin() * (y * 0.35).cos() + (z * 0.4).sin() + 0.3 * (x * 0.2 + y * 0.25).cos()) as f32
    })
}

#[test]
fn instance_optimization_keeps_identity_for_equal_images() {
    let s = Shape3::cube(12).unwrap();
    let f = smooth_image(s, [0.0; 3]);
    let cfg = InstanceConfig { iterations: 30, ncc_window: 5, ..InstanceConfig::default() };
    let out = instance_optimize(&f, &f, &cfg, None).unwrap();
    assert!(out.velocity.max_abs() < 0.1, "{}", out.velocity.max_abs());
}

#[test]
fn instance_optimization_recovers_a_translation() {
    let s = Shape3::cube(16).unwrap();
    let t = [1.0, -0.5, 0.5];
    let f = smooth_image(s, [0.0; 3]);
    let m = smooth_image(s, t);
    let cfg = InstanceConfig { iterations: 150, ncc_window: 5, lambda: 0.1, ..InstanceConfig::default() };
    let out = instance_optimize(&f, &m, &cfg, None).unwrap();
    assert!(out.losses.last() < out.losses.first());
    // The moving image is the fixed one shifted by t, so phi(x) = x + t.
    let mut err = 0.0;
    let mut n = 0.0;
    for c in s.iter().filter(|&c| s.is_interior(c, 4)) {
        let p = out.phi.get(c[0], c[1], c[2]);
        for a in 0..3 {
            err += (p[a] as f64 - c[a] as f64 - t[a]).abs();
        }
        n += 3.0;
    }
    assert!(err / n < 0.25, "mean error {}", err / n);
    let warped = warp_scalar(&m, &out.phi).unwrap();
    let before: f32 = f.data().iter().zip(m.data()).map(|(a, b)| (a - b).abs()).sum();
    let after: f32 = f.data().iter().zip(warped.data()).map(|(a, b)| (a - b).abs()).sum();
    assert!(after < 0.5 * before);
}

#[test]
fn warm_start_beats_zero_start_for_the_same_budget() {
    let s = Shape3::cube(16).unwrap();
    let t = [1.5, 0.0, -1.0];
    let (f, m) = (smooth_image(s, [0.0; 3]), smooth_image(s, t));
    let cfg = InstanceConfig { iterations: 5, ncc_window: 5, ..InstanceConfig::default() };
    let guess = VectorField::from_fn(s, FieldKind::Velocity, |_| [t[0] as f32 * 0.9, 0.0, t[2] as f32 * 0.9]);
    let warm = instance_optimize(&f, &m, &cfg, Some(&guess)).unwrap();
    let cold = instance_optimize(&f, &m, &cfg, None).unwrap();
    assert!(warm.losses.last() < cold.losses.last());
}

#[test]
fn composing_with_an_inverse_returns_near_identity() {
    let s = Shape3::cube(16).unwrap();
    let v = randreg_core::synth::random_svf(s, 1.5, 3, 4).unwrap();
    let mut neg = v.clone();
    neg.scale(-1.0);
    let ss = randreg_core::deform::SsConfig::default();
    let fwd = randreg_core::deform::scaling_and_squaring(&v, ss);
    let inv = randreg_core::deform::scaling_and_squaring(&neg, ss);
    let id = compose(&fwd, &inv).unwrap();
    // Trilinear resampling leaves a small bias; the mean stays well below it.
    let (mut worst, mut sum, mut n) = (0.0f32, 0.0f32, 0.0f32);
    for c in s.iter().filter(|&c| s.is_interior(c, 4)) {
        let p = id.get(c[0], c[1], c[2]);
        for a in 0..3 {
            let e = (p[a] - c[a] as f32).abs();
            worst = worst.max(e);
            sum += e;
            n += 1.0;
        }
    }
    assert!(worst < 0.25 && sum / n < 0.05, "max {worst}, mean {}", sum / n);
}

#[test]
fn finetuning_improves_over_identity() {
    let data = DownstreamDataset::generate(&DownstreamConfig {
        shape: Shape3::cube(16).unwrap(),
        labels: 4,
        deform_amplitude: 3.0,
        train: 8,
        val: 4,
        test: 4,
        ..DownstreamConfig::default()
    })
    .unwrap();
    let before = train::identity_dice(train::Validation::test(&data)).unwrap();
    let mut m = RegistrationModel::new(small_model(ModelMode::Backbone), 2).unwrap();
    let cfg = TrainConfig { phase: Phase::Scratch, epochs: 6, ..short_run(2) };
    let out = train::finetune(&mut m, &data, &cfg).unwrap();
    assert_eq!(out.log.val_dice().len(), 6);
    let after = train::evaluate(&mut m, train::Validation::test(&data)).unwrap();
    assert!(after > before, "{after} <= {before}");
}
