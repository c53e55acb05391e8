use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use layershift_core::par::with_threads;
use layershift_core::rng::seeded;
use layershift_core::synth::{default_domains, generate_cases, make_phantom};
use layershift_core::{surface_dice, Geometry, Mask};

fn shifted(m: &Mask) -> Mask {
    let g = m.geometry();
    let [nx, _, _] = g.shape;
    Mask::from_fn(g, |x, y, z| x + 1 < nx && m.get(x + 1, y, z)).unwrap()
}

fn bench_surface_dice(c: &mut Criterion) {
    let g = Geometry::new([64, 64, 32], [1.0; 3]).unwrap();
    let a = make_phantom(&mut seeded(3), g).unwrap().mask;
    let b = shifted(&a);
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut group = c.benchmark_group("surface_dice_64x64x32");
    for (label, t) in [("sequential", 1), ("parallel", threads)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &t, |bch, &t| {
            bch.iter(|| with_threads(t, || surface_dice(&a, &b, 1.0).unwrap()))
        });
    }
    group.finish();
}

fn bench_phantoms(c: &mut Criterion) {
    let g = Geometry::new([32, 32, 16], [1.0; 3]).unwrap();
    let domains = default_domains();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut group = c.benchmark_group("generate_3x4_phantoms");
    group.sample_size(10);
    for (label, t) in [("sequential", 1), ("parallel", threads)] {
        group.bench_with_input(BenchmarkId::from_parameter(label), &t, |bch, &t| {
            bch.iter(|| with_threads(t, || generate_cases(&domains, 4, g, 7).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_surface_dice, bench_phantoms);
criterion_main!(benches);
