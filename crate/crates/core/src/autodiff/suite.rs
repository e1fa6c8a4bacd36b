//! The standard gradient-check suite over every differentiable operator and
//! loss term, at small extents with inputs kept away from kinks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{check, project, GradCase, GradReport};
use super::{Real, ResizeFactor, Shape, Tape, Var};
use crate::error::Result;

/// Central-difference step of the standard suite.
pub const SUITE_STEP: f64 = 1e-3;
/// Largest accepted relative gradient error.
pub const SUITE_TOLERANCE: f64 = 1e-3;
/// Seeds the standard suite runs over.
pub const SUITE_SEEDS: u64 = 10;

#[derive(Clone)]
enum Kind {
    Arith,
    LeakyRelu,
    Conv { stride: usize, bias: bool },
    ConvTranspose,
    MaxPool,
    Resize(ResizeFactor),
    Resample,
    Compose,
    Exp,
    Upsample,
    Ncc(Vec<f32>),
    Smoothness,
    NegJacobian,
}

/// One operator or loss term with seeded inputs.
pub struct SuiteCase {
    kind: Kind,
    seed: u64,
    inputs: Vec<(Shape, Vec<f64>)>,
}

impl GradCase for SuiteCase {
    fn name(&self) -> String {
        let k = match &self.kind {
            Kind::Arith => "arith".to_string(),
            Kind::LeakyRelu => "leaky_relu".into(),
            Kind::Conv { stride, bias } => format!("conv_s{stride}_b{bias}"),
            Kind::ConvTranspose => "conv_transpose".into(),
            Kind::MaxPool => "max_pool".into(),
            Kind::Resize(f) => format!("resize_{f:?}"),
            Kind::Resample => "resample".into(),
            Kind::Compose => "compose".into(),
            Kind::Exp => "exp_velocity".into(),
            Kind::Upsample => "upsample_field".into(),
            Kind::Ncc(_) => "ncc".into(),
            Kind::Smoothness => "smoothness".into(),
            Kind::NegJacobian => "negative_jacobian".into(),
        };
        format!("{k}/seed{}", self.seed)
    }

    fn inputs(&self) -> Vec<(Shape, Vec<f64>)> {
        self.inputs.clone()
    }

    fn build<T: Real>(&self, t: &mut Tape<T>, x: &[Var]) -> Result<Var> {
        let out = match &self.kind {
            Kind::Arith => {
                let a = t.mul(x[0], x[1])?;
                let b = t.sub(a, x[0])?;
                let c = t.scale(b, T::of(0.7))?;
                let d = t.add(c, x[1])?;
                return t.mean(d);
            }
            Kind::LeakyRelu => t.leaky_relu(x[0], T::of(0.2))?,
            Kind::Conv { stride, .. } => t.conv3(x[0], x[1], x.get(2).copied(), *stride)?,
            Kind::ConvTranspose => t.conv3_transpose(x[0], x[1], 2)?,
            Kind::MaxPool => t.max_pool2(x[0])?,
            Kind::Resize(f) => t.trilinear_resize(x[0], *f)?,
            Kind::Resample => t.resample(x[0], x[1])?,
            Kind::Compose => t.compose(x[0], x[1])?,
            Kind::Exp => t.exp_velocity(x[0], 3)?,
            Kind::Upsample => t.upsample_field(x[0])?,
            Kind::Ncc(fixed) => return t.ncc(fixed, x[0], 3),
            Kind::Smoothness => return t.smoothness(x[0]),
            Kind::NegJacobian => return t.neg_jacobian(x[0]),
        };
        project(t, out, self.seed)
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero so FD steps never cross the activation kink.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect()
}

/// Displacements whose sample positions stay inside the grid with fractional
/// parts in [0.15, 0.85].
fn interior_displacement(rng: &mut ChaCha8Rng, ext: [usize; 3]) -> Vec<f64> {
    let n: usize = ext.iter().product();
    let mut d = vec![0.0; 3 * n];
    for v in 0..n {
        let pos = [v % ext[2], (v / ext[2]) % ext[1], v / (ext[1] * ext[2])];
        let lens = [ext[2], ext[1], ext[0]];
        for a in 0..3 {
            let target_cell = rng.random_range(0..lens[a] - 1) as f64;
            let frac = rng.random_range(0.15..0.85);
            d[a * n + v] = target_cell + frac - pos[a] as f64;
        }
    }
    d
}

/// Every differentiable operator and loss term, with inputs drawn from `seed`.
pub fn suite_cases(seed: u64) -> Vec<SuiteCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut push = |kind: Kind, inputs: Vec<(Shape, Vec<f64>)>| out.push(SuiteCase { kind, seed, inputs });
    let e4 = [4, 4, 4];
    let n4 = 64;

    push(
        Kind::Arith,
        vec![
            (Shape::grid(1, [2, 3, 4]), uniform(&mut rng, 24, -1.0, 1.0)),
            (Shape::grid(1, [2, 3, 4]), uniform(&mut rng, 24, -1.0, 1.0)),
        ],
    );
    push(Kind::LeakyRelu, vec![(Shape::grid(2, [3, 3, 3]), signed_away_from_zero(&mut rng, 54))]);
    for stride in [1, 2] {
        for bias in [false, true] {
            let mut inputs = vec![
                (Shape::grid(2, e4), uniform(&mut rng, 2 * n4, -1.0, 1.0)),
                (Shape::new(&[3, 2, 3, 3, 3]), uniform(&mut rng, 162, -0.5, 0.5)),
            ];
            if bias {
                inputs.push((Shape::new(&[3]), uniform(&mut rng, 3, -0.5, 0.5)));
            }
            push(Kind::Conv { stride, bias }, inputs);
        }
    }
    push(
        Kind::ConvTranspose,
        vec![
            (Shape::grid(2, [2, 3, 2]), uniform(&mut rng, 24, -1.0, 1.0)),
            (Shape::new(&[2, 3, 2, 2, 2]), uniform(&mut rng, 48, -0.5, 0.5)),
        ],
    );
    // Distinct values at least 0.01 apart so no FD step reorders a window.
    let mut perm: Vec<f64> = (0..2 * n4).map(|i| i as f64 * 0.01 - 0.6).collect();
    perm.shuffle(&mut rng);
    push(Kind::MaxPool, vec![(Shape::grid(2, e4), perm)]);
    push(Kind::Resize(ResizeFactor::Half), vec![(Shape::grid(2, [6, 4, 6]), uniform(&mut rng, 288, -1.0, 1.0))]);
    push(Kind::Resize(ResizeFactor::Double), vec![(Shape::grid(2, [2, 3, 3]), uniform(&mut rng, 36, -1.0, 1.0))]);
    push(
        Kind::Resample,
        vec![
            (Shape::grid(2, e4), uniform(&mut rng, 2 * n4, -1.0, 1.0)),
            (Shape::grid(3, e4), interior_displacement(&mut rng, e4)),
        ],
    );
    push(
        Kind::Compose,
        vec![
            (Shape::grid(3, e4), uniform(&mut rng, 3 * n4, -1.0, 1.0)),
            (Shape::grid(3, e4), interior_displacement(&mut rng, e4)),
        ],
    );
    let smooth_velocity = |rng: &mut ChaCha8Rng, ext: [usize; 3], amp: f64| -> Vec<f64> {
        let n: usize = ext.iter().product();
        let ph: Vec<f64> = uniform(rng, 9, 0.0, 6.28);
        (0..3 * n)
            .map(|i| {
                let (a, v) = (i / n, i % n);
                let (x, y, z) = ((v % ext[2]) as f64, ((v / ext[2]) % ext[1]) as f64, (v / (ext[1] * ext[2])) as f64);
                amp * ((0.9 * x + ph[3 * a]).sin() + (0.7 * y + ph[3 * a + 1]).cos() + (0.8 * z + ph[3 * a + 2]).sin())
            })
            .collect()
    };
    // An offset of 2.6 puts the squaring-step samples at fractional offsets
    // .325/.65/.3, so the small smooth part never drags an FD step across a
    // cell boundary of the piecewise-linear interpolant.
    let e5 = [5, 5, 5];
    let mut v = smooth_velocity(&mut rng, e5, 0.05);
    for a in 0..3 {
        let c = if rng.random::<bool>() { 2.6 } else { -2.6 };
        v[a * 125..(a + 1) * 125].iter_mut().for_each(|x| *x += c);
    }
    push(Kind::Exp, vec![(Shape::grid(3, e5), v)]);
    push(Kind::Upsample, vec![(Shape::grid(3, [2, 3, 3]), uniform(&mut rng, 54, -1.0, 1.0))]);
    let fixed: Vec<f32> = uniform(&mut rng, 125, 0.0, 1.0).into_iter().map(|v| v as f32).collect();
    push(Kind::Ncc(fixed), vec![(Shape::grid(1, [5, 5, 5]), uniform(&mut rng, 125, 0.0, 1.0))]);
    push(Kind::Smoothness, vec![(Shape::grid(3, [4, 5, 3]), uniform(&mut rng, 180, -1.0, 1.0))]);
    push(Kind::NegJacobian, vec![(Shape::grid(3, e4), uniform(&mut rng, 3 * n4, -1.5, 1.5))]);
    out
}

/// Runs every case for seeds `0..seeds`, in a fixed order.
pub fn run_suite(seeds: u64) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for seed in 0..seeds {
        for case in suite_cases(seed) {
            out.push(check(&case, SUITE_STEP, SUITE_TOLERANCE)?);
        }
    }
    Ok(out)
}
