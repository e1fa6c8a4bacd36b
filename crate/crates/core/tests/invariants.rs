use dipreg::field::{compose, exp_velocity, jacobian_determinant_f64, warp, FieldRole, VectorField, Volume};
use dipreg::io::{normalize_intensity, read_raw, write_raw, Normalization, Payload, RawVolume};
use dipreg::losses::ncc_dissimilarity;
use dipreg::metrics::{dice, sdjdet, warp_mask, Mask};
use proptest::prelude::*;

fn extent() -> impl Strategy<Value = [usize; 3]> {
    [3usize..7, 3usize..7, 3usize..7]
}

fn mask_pair() -> impl Strategy<Value = (Mask, Mask)> {
    extent().prop_flat_map(|e| {
        let n = e.iter().product::<usize>();
        (
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(a, b)| (Mask::new(e, a).unwrap(), Mask::new(e, b).unwrap()))
    })
}

fn volume() -> impl Strategy<Value = Volume> {
    extent().prop_flat_map(|e| {
        let n = e.iter().product::<usize>();
        proptest::collection::vec(-100.0f32..100.0, n).prop_map(move |d| Volume::new(e, [1.0; 3], d).unwrap())
    })
}

fn small_field(e: [usize; 3], amp: f32) -> impl Strategy<Value = VectorField> {
    let n = 3 * e.iter().product::<usize>();
    proptest::collection::vec(-amp..amp, n).prop_map(move |d| VectorField::new(e, FieldRole::Displacement, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dice_is_symmetric_and_bounded((a, b) in mask_pair()) {
        let ab = dice(&a, &b).unwrap();
        prop_assert_eq!(ab, dice(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn warp_mask_by_integer_shift_moves_the_interior(
        (a, _) in mask_pair(),
        s in [-1i32..=1, -1i32..=1, -1i32..=1],
    ) {
        let e = a.extent();
        let phi = VectorField::from_fn(e, FieldRole::Displacement, |_, _, _| [s[2] as f32, s[1] as f32, s[0] as f32]);
        let w = warp_mask(&a, &phi).unwrap();
        for z in 1..e[0] - 1 {
            for y in 1..e[1] - 1 {
                for x in 1..e[2] - 1 {
                    let src = [(z as i32 + s[0]) as usize, (y as i32 + s[1]) as usize, (x as i32 + s[2]) as usize];
                    let k = (z * e[1] + y) * e[2] + x;
                    let ks = (src[0] * e[1] + src[1]) * e[2] + src[2];
                    prop_assert_eq!(w.data()[k], a.data()[ks]);
                }
            }
        }
    }

    #[test]
    fn zero_field_is_a_two_sided_compose_identity(phi in extent().prop_flat_map(|e| small_field(e, 2.0))) {
        let zero = VectorField::zeros(phi.extent(), FieldRole::Displacement);
        prop_assert_eq!(compose(&phi, &zero).unwrap().into_data(), phi.data().to_vec());
        prop_assert_eq!(compose(&zero, &phi).unwrap().into_data(), phi.data().to_vec());
    }

    #[test]
    fn exp_of_small_velocity_does_not_fold(v in small_field([6, 6, 6], 0.1)) {
        let phi = exp_velocity(&v.with_role(FieldRole::Velocity), 7).unwrap();
        let det = jacobian_determinant_f64(&phi).unwrap();
        prop_assert!(det.iter().all(|&d| d > 0.0));
        prop_assert!(sdjdet(&phi).unwrap() >= 0.0);
    }

    #[test]
    fn minmax_output_is_unit_range_and_shift_invariant(v in volume(), shift in -50.0f32..50.0) {
        let a = normalize_intensity(&v, Normalization::MinMax);
        let lo = a.data().iter().copied().fold(f32::INFINITY, f32::min);
        let hi = a.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert!(lo >= 0.0 && hi <= 1.0);
        let shifted = Volume::new(v.extent(), v.spacing(), v.data().iter().map(|x| x + shift).collect()).unwrap();
        let b = normalize_intensity(&shifted, Normalization::MinMax);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-3);
        }
    }

    #[test]
    fn ncc_ignores_positive_affine_intensity_maps(
        f in volume(),
        seed in proptest::collection::vec(-1.0f32..1.0, 216),
        gain in 0.5f32..4.0,
        bias in -3.0f32..3.0,
    ) {
        let e = f.extent();
        let n = f.len();
        let w = Volume::new(e, [1.0; 3], seed.iter().cycle().take(n).copied().collect()).unwrap();
        let w2 = Volume::new(e, [1.0; 3], w.data().iter().map(|x| gain * x + bias).collect()).unwrap();
        let a = ncc_dissimilarity(&f, &w, 3).unwrap();
        let b = ncc_dissimilarity(&f, &w2, 3).unwrap();
        prop_assert!((a - b).abs() < 2e-3, "{a} vs {b}");
    }

    #[test]
    fn volume_files_round_trip_bitwise(v in volume(), sx in 0.1f64..5.0) {
        let raw = RawVolume {
            extent: v.extent(),
            spacing: [1.0, 2.5, sx],
            channels: 1,
            payload: Payload::F32(v.data().to_vec()),
        };
        let mut bytes = Vec::new();
        write_raw(&mut bytes, &raw).unwrap();
        let back = read_raw(bytes.as_slice(), "mem").unwrap();
        prop_assert_eq!(back.extent, raw.extent);
        prop_assert_eq!(back.spacing, raw.spacing);
        match (back.payload, raw.payload) {
            (Payload::F32(a), Payload::F32(b)) => {
                prop_assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            }
            _ => prop_assert!(false, "payload kind changed"),
        }
    }

    #[test]
    fn warping_a_constant_keeps_it_constant(phi in small_field([5, 4, 6], 3.0), c in -10.0f32..10.0) {
        let m = Volume::filled([5, 4, 6], c);
        let w = warp(&m, &phi).unwrap();
        for x in w.data() {
            prop_assert!((x - c).abs() <= 1e-5 * c.abs().max(1.0));
        }
    }
}
