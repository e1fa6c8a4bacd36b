//! Hot kernels, forward plus backward, on a one-worker pool and on the
//! default pool. Without the `parallel` feature only the sequential row runs.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dipreg::autodiff::{Shape, Tape, Var};

const EXT: [usize; 3] = [32; 3];

fn noise(n: usize, amp: f32) -> Vec<f32> {
    (0..n)
        .map(|i| ((i.wrapping_mul(2654435761) % 1000) as f32 / 1000.0 - 0.5) * amp)
        .collect()
}

type Build = fn(&mut Tape<f32>) -> Var;

fn conv(t: &mut Tape<f32>) -> Var {
    let n: usize = EXT.iter().product();
    let x = t.leaf(Shape::grid(8, EXT), noise(8 * n, 1.0), true).unwrap();
    let w = t.leaf(Shape::new(&[8, 8, 3, 3, 3]), noise(1728, 0.3), true).unwrap();
    t.conv3(x, w, None, 1).unwrap()
}

fn resample(t: &mut Tape<f32>) -> Var {
    let n: usize = EXT.iter().product();
    let m = t.leaf(Shape::grid(1, EXT), noise(n, 1.0), true).unwrap();
    let d = t.leaf(Shape::grid(3, EXT), noise(3 * n, 2.0), true).unwrap();
    t.resample(m, d).unwrap()
}

fn exp(t: &mut Tape<f32>) -> Var {
    let n: usize = EXT.iter().product();
    let v = t.leaf(Shape::grid(3, EXT), noise(3 * n, 2.0), true).unwrap();
    t.exp_velocity(v, 7).unwrap()
}

fn ncc(t: &mut Tape<f32>) -> Var {
    let n: usize = EXT.iter().product();
    let f = noise(n, 1.0);
    let w = t.leaf(Shape::grid(1, EXT), noise(n, 0.7), true).unwrap();
    t.ncc(&f, w, 7).unwrap()
}

fn step(build: Build) {
    let mut t = Tape::new();
    let out = build(&mut t);
    let l = t.mean(out).unwrap();
    t.backward(l).unwrap();
}

fn kernels(c: &mut Criterion) {
    let cases: [(&str, Build); 4] = [("conv3_8x8", conv), ("resample", resample), ("exp_velocity", exp), ("ncc", ncc)];
    let mut g = c.benchmark_group("kernels_32");
    g.sample_size(10);
    #[cfg(feature = "parallel")]
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    for (name, build) in cases {
        #[cfg(feature = "parallel")]
        {
            g.bench_with_input(BenchmarkId::new("sequential", name), &build, |b, &f| {
                b.iter(|| single.install(|| step(f)))
            });
            g.bench_with_input(BenchmarkId::new("parallel", name), &build, |b, &f| b.iter(|| step(f)));
        }
        #[cfg(not(feature = "parallel"))]
        g.bench_with_input(BenchmarkId::new("sequential", name), &build, |b, &f| b.iter(|| step(f)));
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
