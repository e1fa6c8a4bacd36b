//! Scaling and squaring against closed forms: linear velocity fields flow to
//! `(e^A - I) x`, constant ones to plain translations.

use dipreg::field::{exp_velocity, FieldRole, VectorField, DEFAULT_SQUARING_STEPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type M3 = [[f64; 3]; 3];

fn matmul(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Truncated Taylor series; 30 terms is far past f64 precision for small `a`.
fn expm(a: &M3) -> M3 {
    let mut out = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut term = out;
    for k in 1..30 {
        term = matmul(&term, a);
        for row in term.iter_mut() {
            for v in row.iter_mut() {
                *v /= k as f64;
            }
        }
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] += term[i][j];
            }
        }
    }
    out
}

fn frobenius(a: &M3) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

const N: usize = 20;
const MARGIN: usize = 3;

fn interior() -> impl Iterator<Item = (usize, usize, usize)> {
    (MARGIN..N - MARGIN).flat_map(|z| (MARGIN..N - MARGIN).flat_map(move |y| (MARGIN..N - MARGIN).map(move |x| (z, y, x))))
}

#[test]
fn linear_velocity_matches_matrix_exponential() {
    let c = (N - 1) as f64 / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..8 {
        // Coordinates are ordered (x, y, z) to match the field's components.
        let mut a: M3 = [[0.0; 3]; 3];
        for v in a.iter_mut().flatten() {
            *v = rng.random_range(-1.0..1.0);
        }
        let s = rng.random_range(0.02..0.1) / frobenius(&a);
        for v in a.iter_mut().flatten() {
            *v *= s;
        }
        let ea = expm(&a);
        let vel = VectorField::from_fn([N; 3], FieldRole::Velocity, |z, y, x| {
            let p = [x as f64 - c, y as f64 - c, z as f64 - c];
            [0, 1, 2].map(|i| (0..3).map(|j| a[i][j] * p[j]).sum::<f64>() as f32)
        });
        let phi = exp_velocity(&vel, DEFAULT_SQUARING_STEPS).unwrap();
        for (z, y, x) in interior() {
            let p = [x as f64 - c, y as f64 - c, z as f64 - c];
            let got = phi.at(z, y, x);
            for i in 0..3 {
                let want: f64 = (0..3).map(|j| ea[i][j] * p[j]).sum::<f64>() - p[i];
                worst = worst.max((got[i] as f64 - want).abs());
            }
        }
    }
    assert!(worst <= 1e-2, "max interior error {worst} voxels");
}

#[test]
fn constant_velocity_translates_exactly_in_the_interior() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..5 {
        let t: [f32; 3] = [0, 1, 2].map(|_| rng.random_range(-2.0f32..2.0));
        let vel = VectorField::from_fn([N; 3], FieldRole::Velocity, |_, _, _| t);
        let phi = exp_velocity(&vel, DEFAULT_SQUARING_STEPS).unwrap();
        for (z, y, x) in interior() {
            let got = phi.at(z, y, x);
            for i in 0..3 {
                assert!((got[i] - t[i]).abs() <= 1e-5, "{got:?} vs {t:?}");
            }
        }
    }
}
