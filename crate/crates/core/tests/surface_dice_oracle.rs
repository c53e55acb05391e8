//! Production Surface Dice against the all-pairs definition.

use layershift_core::rng::seeded;
use layershift_core::{dice, extract_surface, surface_dice, Geometry, Mask};
use rand::Rng;

/// Direct definition: every surface point of one mask scanned against every
/// surface point of the other.
pub fn brute_surface_dice(a: &Mask, b: &Mask, tol: f64) -> f64 {
    let sa = extract_surface(a).points;
    let sb = extract_surface(b).points;
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    if sa.is_empty() || sb.is_empty() {
        return 0.0;
    }
    let near = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter().any(|q| {
            let d2: f64 = (0..3).map(|i| (p[i] - q[i]).powi(2)).sum();
            d2.sqrt() <= tol
        })
    };
    let hits = sa.iter().filter(|p| near(p, &sb)).count() + sb.iter().filter(|q| near(q, &sa)).count();
    hits as f64 / (sa.len() + sb.len()) as f64
}

fn random_pair<R: Rng>(rng: &mut R) -> (Mask, Mask) {
    let shape = [rng.random_range(1..=12), rng.random_range(1..=12), rng.random_range(1..=12)];
    let spacing = [
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
        rng.random_range(0.5..2.0),
    ];
    let g = Geometry::new(shape, spacing).unwrap();
    // blobs and sparse noise, so both compact and ragged surfaces occur
    let blob = |rng: &mut R| {
        let c: Vec<f64> = shape.iter().map(|&n| rng.random_range(0.0..n as f64)).collect();
        let r = rng.random_range(0.5..5.0);
        let p = rng.random_range(0.0..0.15);
        let noise: Vec<bool> = (0..g.len()).map(|_| rng.random_bool(p)).collect();
        Mask::from_fn(g, |x, y, z| {
            let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
            d2 <= r * r || noise[g.index(x, y, z)]
        })
        .unwrap()
    };
    let a = blob(rng);
    let b = blob(rng);
    (a, b)
}

#[test]
fn matches_brute_force_on_200_pairs() {
    let start = std::time::Instant::now();
    let mut rng = seeded(2024);
    for _ in 0..200 {
        let (a, b) = random_pair(&mut rng);
        for tol in [0.0, 0.5, 1.0, 2.0] {
            let fast = surface_dice(&a, &b, tol).unwrap().value;
            let slow = brute_surface_dice(&a, &b, tol);
            assert!((fast - slow).abs() <= 1e-9, "tol {tol}: {fast} vs {slow}");
        }
    }
    assert!(start.elapsed().as_secs() < 60);
}

#[test]
fn symmetric_and_bounded() {
    let mut rng = seeded(5);
    for _ in 0..50 {
        let (a, b) = random_pair(&mut rng);
        let ab = surface_dice(&a, &b, 1.0).unwrap().value;
        let ba = surface_dice(&b, &a, 1.0).unwrap().value;
        assert_eq!(ab, ba);
        assert!((0.0..=1.0).contains(&ab));
        assert_eq!(surface_dice(&a, &a, 0.0).unwrap().value, 1.0);
        let d = dice(&a, &b).unwrap().value;
        assert!((0.0..=1.0).contains(&d));
    }
}

#[test]
fn tolerance_is_monotone() {
    let mut rng = seeded(6);
    for _ in 0..50 {
        let (a, b) = random_pair(&mut rng);
        let mut last = 0.0;
        for tol in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let v = surface_dice(&a, &b, tol).unwrap().value;
            assert!(v >= last);
            last = v;
        }
    }
}
