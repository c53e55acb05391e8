use layershift_core::rng::seeded;
use layershift_core::{Geometry, Slice2D, Volume};
use proptest::prelude::*;

fn geometry() -> impl Strategy<Value = Geometry> {
    (
        prop::array::uniform3(1usize..6),
        prop::array::uniform3(prop::sample::select(vec![0.5, 1.0, 1.5, 2.0, 3.0])),
    )
        .prop_map(|(shape, spacing)| Geometry::new(shape, spacing).unwrap())
}

proptest! {
    #[test]
    fn resampling_constant_stays_constant(
        g in geometry(),
        target in prop::array::uniform3(prop::sample::select(vec![0.5, 1.0, 2.0])),
        c in -5.0f32..5.0,
    ) {
        let v = Volume::filled(g, c).unwrap();
        let r = v.resample_to_isotropic(target).unwrap();
        prop_assert!(r.data().iter().all(|&x| (x - c).abs() <= 1e-5 * c.abs().max(1.0)));
        prop_assert_eq!(r.spacing(), target);
    }

    #[test]
    fn integer_ratio_round_trip_keeps_shape(g in geometry(), k in 1usize..4) {
        let v = Volume::filled(g, 1.0).unwrap();
        let fine: Vec<f64> = g.spacing.iter().map(|s| s / k as f64).collect();
        let up = v.resample_to_isotropic([fine[0], fine[1], fine[2]]).unwrap();
        let back = up.resample_to_isotropic(g.spacing).unwrap();
        prop_assert_eq!(back.shape(), v.shape());
    }

    #[test]
    fn rescale_is_idempotent_and_bounded(
        shape in prop::array::uniform3(1usize..5),
        seed in 0u64..10_000,
    ) {
        use rand::Rng;
        let g = Geometry::new(shape, [1.0; 3]).unwrap();
        let mut rng = seeded(seed);
        let v = Volume::new(g, (0..g.len()).map(|_| rng.random_range(-100.0f32..100.0)).collect()).unwrap();
        let once = v.rescale_intensity().unwrap();
        prop_assert!(once.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        let twice = once.rescale_intensity().unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn crops_have_requested_shape(
        rows in 1usize..40, cols in 1usize..40, h in 1usize..40, w in 1usize..40, seed in 0u64..1000,
    ) {
        let s = Slice2D::new(rows, cols, vec![1.0; rows * cols]).unwrap();
        let a = s.random_crop((h, w), &mut seeded(seed)).unwrap();
        let b = s.random_crop((h, w), &mut seeded(seed)).unwrap();
        prop_assert_eq!((a.rows, a.cols), (h, w));
        prop_assert_eq!(a, b);
    }
}

#[test]
fn trilinear_ramp_matches_hand_oracle() {
    // v(x) = 10 x at 2 mm, 4 voxels -> 8 voxels at 1 mm. Output j sits at
    // input coordinate j / 2, clamped to the last voxel.
    let g = Geometry::new([4, 1, 1], [2.0, 1.0, 1.0]).unwrap();
    let v = Volume::from_fn(g, |x, _, _| 10.0 * x as f32).unwrap();
    let r = v.resample_to_isotropic([1.0, 1.0, 1.0]).unwrap();
    assert_eq!(r.shape(), [8, 1, 1]);
    let oracle = |j: usize| {
        let pos = (j as f64 / 2.0).min(3.0);
        let lo = pos.floor();
        let hi = (lo + 1.0).min(3.0);
        let t = pos - lo;
        (1.0 - t) * 10.0 * lo + t * 10.0 * hi
    };
    for j in 0..8 {
        assert!((r.get(j, 0, 0) as f64 - oracle(j)).abs() < 1e-5, "j={j}");
    }
    assert_eq!(r.get(3, 0, 0), 15.0);
}

#[test]
fn crop_offsets_cover_valid_range() {
    let s = Slice2D::new(300, 300, vec![0.0; 90_000]).unwrap();
    let mut rng = seeded(1);
    let (mut lo, mut hi) = ((usize::MAX, usize::MAX), (0, 0));
    for _ in 0..5000 {
        let w = s.random_window((256, 256), &mut rng).unwrap();
        assert!(w.offset.0 <= 44 && w.offset.1 <= 44);
        lo = (lo.0.min(w.offset.0), lo.1.min(w.offset.1));
        hi = (hi.0.max(w.offset.0), hi.1.max(w.offset.1));
    }
    assert_eq!((lo, hi), ((0, 0), (44, 44)));
}
