use proptest::prelude::*;
use randreg_core::deform::{scaling_and_squaring, SsConfig};
use randreg_core::io::{moving_average, nifti, rvol, Rvol};
use randreg_core::losses::{kl_gaussian, ncc_loss, pretrain_loss, LossWeights, NccConfig, RegistrationTarget};
use randreg_core::metrics::{dice, foreground_labels};
use randreg_core::train::select_fraction;
use randreg_core::volume::{compose, trilinear_sample};
use randreg_core::{FieldKind, GaussianField, LabelVolume, ScalarVolume, Shape3, VectorField};

fn shape() -> impl Strategy<Value = Shape3> {
    (2usize..7, 2usize..7, 2usize..7).prop_map(|(a, b, c)| Shape3::new(a, b, c).unwrap())
}

fn values(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n)
}

fn scalar(s: Shape3) -> impl Strategy<Value = ScalarVolume<f64>> {
    values(s.len(), -1.0, 1.0).prop_map(move |d| ScalarVolume::from_vec(s, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn trilinear_is_linear_in_the_volume(
        (s, a, b) in shape().prop_flat_map(|s| (Just(s), scalar(s), scalar(s))),
        p in prop::array::uniform3(-1.0f64..7.0),
        wa in -2.0f64..2.0,
        wb in -2.0f64..2.0,
    ) {
        let mix = ScalarVolume::from_vec(s, a.data().iter().zip(b.data()).map(|(x, y)| wa * x + wb * y).collect()).unwrap();
        let lhs = trilinear_sample(&mix, p);
        let rhs = wa * trilinear_sample(&a, p) + wb * trilinear_sample(&b, p);
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn translations_compose_by_addition(t1 in prop::array::uniform3(-2.0f64..2.0), t2 in prop::array::uniform3(-2.0f64..2.0)) {
        let s = Shape3::cube(12).unwrap();
        let shift = |t: [f64; 3]| VectorField::<f64>::from_fn(s, FieldKind::Displacement, |_| t).to_deformation();
        let both = compose(&shift(t1), &shift(t2)).unwrap();
        for c in s.iter().filter(|&c| s.is_interior(c, 3)) {
            let q = both.get(c[0], c[1], c[2]);
            for a in 0..3 {
                prop_assert!((q[a] - (c[a] as f64 + t1[a] + t2[a])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn squaring_is_a_semigroup(data in values(3 * 216, -1.5, 1.5), n in 0u32..5) {
        let s = Shape3::cube(6).unwrap();
        let v = VectorField::from_vec(s, data, FieldKind::Velocity).unwrap();
        let mut half = v.clone();
        half.scale(0.5);
        let h = scaling_and_squaring(&half, SsConfig::new(n).unwrap());
        let stepped = compose(&h, &h).unwrap();
        let direct = scaling_and_squaring(&v, SsConfig::new(n + 1).unwrap());
        for (a, b) in stepped.data().iter().zip(direct.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn ncc_is_bounded((a, b) in scalar(Shape3::cube(6).unwrap()).prop_flat_map(|a| (Just(a), scalar(Shape3::cube(6).unwrap())))) {
        let v = ncc_loss(&a, &b, &NccConfig::desk()).unwrap().value;
        prop_assert!((-1.0 - 1e-9..=1e-9).contains(&v), "{}", v);
    }

    #[test]
    fn kl_is_non_negative(m1 in values(24, -3.0, 3.0), m2 in values(24, -3.0, 3.0), s1 in values(24, -4.0, 4.0), s2 in values(24, -4.0, 4.0)) {
        let s = Shape3::cube(2).unwrap();
        let g = |m: Vec<f64>, v: Vec<f64>| GaussianField {
            mean: VectorField::from_vec(s, m, FieldKind::Velocity).unwrap(),
            log_variance: VectorField::from_vec(s, v, FieldKind::Velocity).unwrap(),
        };
        let (kl, _, _) = kl_gaussian(&g(m1.clone(), s1.clone()), &g(m2, s2)).unwrap();
        prop_assert!(kl >= -1e-15);
        let (same, _, _) = kl_gaussian(&g(m1.clone(), s1.clone()), &g(m1, s1)).unwrap();
        prop_assert!(same.abs() < 1e-12);
    }

    #[test]
    fn dice_is_symmetric_and_bounded(a in prop::collection::vec(0u16..4, 64), b in prop::collection::vec(0u16..4, 64)) {
        let s = Shape3::cube(4).unwrap();
        let (la, lb) = (LabelVolume::from_vec(s, a, 4).unwrap(), LabelVolume::from_vec(s, b, 4).unwrap());
        let labels = foreground_labels(4);
        let ab = dice(&la, &lb, &labels).unwrap().mean;
        let ba = dice(&lb, &la, &labels).unwrap().mean;
        prop_assert!((ab - ba).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&la, &la, &labels).unwrap().mean, 1.0);
    }

    #[test]
    fn pretrain_loss_is_linear_in_eta(e1 in 0.0f64..2.0, e2 in 0.0f64..2.0, seed in 0u64..1000) {
        let s = Shape3::cube(6).unwrap();
        let f = ScalarVolume::from_fn(s, |[i, j, k]| ((i + 2 * j + 3 * k) as f64 * 0.37 + seed as f64).sin());
        let m = ScalarVolume::from_fn(s, |[i, j, k]| ((2 * i + j + k) as f64 * 0.41 + seed as f64).cos());
        let field = |phase: f64, amp: f64| {
            VectorField::from_fn(s, FieldKind::Velocity, |[i, j, k]| {
                let x = (i + j * 3 + k * 5) as f64 * 0.3 + phase + seed as f64;
                [amp * x.sin(), amp * x.cos(), amp * (2.0 * x).sin()]
            })
        };
        let ens = GaussianField { mean: field(0.0, 0.8), log_variance: field(1.0, 0.5) };
        let dec = vec![GaussianField { mean: field(2.0, 0.8), log_variance: field(3.0, 0.5) }];
        let target = RegistrationTarget::ncc(&f, &m, NccConfig { window: 3, epsilon: 1e-5 });
        let at = |eta: f64| pretrain_loss(&ens, &dec, &target, &LossWeights { lambda: 1.0, eta }, SsConfig::default()).unwrap();
        let (l1, l2) = (at(e1), at(e2));
        prop_assert!(l1.kl >= 0.0);
        prop_assert!((l2.total - l1.total - (e2 - e1) * l1.kl).abs() < 1e-9);
        if e2 > e1 { prop_assert!(l2.total >= l1.total); }
    }

    #[test]
    fn rvol_round_trips_bit_exactly(s in shape(), seed in any::<u64>(), spacing in prop::array::uniform3(0.1f64..4.0)) {
        let mut x = seed;
        let mut next = || { x = x.wrapping_mul(6364136223846793005).wrapping_add(1); f32::from_bits((x >> 33) as u32 & 0x7f7f_ffff) };
        let vol = ScalarVolume::from_fn(s, |_| next()).with_spacing(spacing);
        let field = VectorField::from_fn(s, FieldKind::Deformation, |_| [next(), next(), next()]);
        let labels = LabelVolume::from_vec(s, (0..s.len()).map(|i| (i % 7) as u16).collect(), 7).unwrap();
        for v in [Rvol::Scalar(vol), Rvol::Field(field), Rvol::Labels(labels)] {
            let back = rvol::decode(&rvol::encode(&v), "mem".as_ref()).unwrap();
            prop_assert_eq!(rvol::encode(&back), rvol::encode(&v));
            prop_assert_eq!(back, v);
        }
    }

    #[test]
    fn nifti_f32_round_trips_bit_exactly(s in shape(), data in prop::collection::vec(-1e6f32..1e6, 216)) {
        let vol = ScalarVolume::from_vec(s, data[..s.len()].to_vec()).unwrap().with_spacing([1.5, 1.0, 2.0]);
        let back = nifti::decode(&nifti::encode(&vol), "mem".as_ref()).unwrap().into_scalar();
        prop_assert_eq!(back.data(), vol.data());
        prop_assert_eq!(back.spacing, vol.spacing);
    }

    #[test]
    fn moving_average_is_trailing_mean(v in values(30, -5.0, 5.0), w in 1usize..8) {
        let m = moving_average(&v, w);
        for i in 0..v.len() {
            let lo = (i + 1).saturating_sub(w);
            let direct = v[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64;
            prop_assert!((m[i] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn data_fraction_is_a_nested_prefix(n in 1usize..200, f1 in 0.01f64..1.0, f2 in 0.01f64..1.0, seed in any::<u64>()) {
        let (lo, hi) = if f1 < f2 { (f1, f2) } else { (f2, f1) };
        let a = select_fraction(n, lo, seed).unwrap();
        let b = select_fraction(n, hi, seed).unwrap();
        prop_assert_eq!(&b[..a.len()], &a[..]);
        prop_assert_eq!(a.len(), ((lo * n as f64).ceil() as usize).clamp(1, n));
    }
}
