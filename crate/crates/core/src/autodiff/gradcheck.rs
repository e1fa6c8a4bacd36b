//! Central finite-difference gradient checks.
//!
//! The analytic gradient comes from the production `f32` tape; the reference
//! re-evaluates the same graph on an `f64` tape with perturbed inputs and never
//! calls `backward`, so it only shares the forward kernels with the path it
//! checks.

use super::{Real, Shape, Tape, Var};
use crate::error::Result;

/// A scalar-valued function of one or more tensors that can be built on any tape.
pub trait GradCase {
    fn name(&self) -> String;

    /// Shapes and values of the differentiable inputs.
    fn inputs(&self) -> Vec<(Shape, Vec<f64>)>;

    /// Builds the graph and returns a scalar node.
    fn build<T: Real>(&self, tape: &mut Tape<T>, inputs: &[Var]) -> Result<Var>;
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    /// `|g_analytic - g_fd| / |g_fd|` per input, Euclidean norms.
    pub rel_errors: Vec<f64>,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.rel_errors.iter().all(|&e| e <= self.tolerance)
    }
}

fn eval_f64<C: GradCase>(case: &C, inputs: &[(Shape, Vec<f64>)]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars = inputs
        .iter()
        .map(|(s, v)| tape.leaf(s.clone(), v.clone(), false))
        .collect::<Result<Vec<_>>>()?;
    let out = case.build(&mut tape, &vars)?;
    Ok(tape.value(out)[0])
}

/// Compares analytic `f32` gradients with central differences of step `h` in `f64`.
pub fn check<C: GradCase>(case: &C, h: f64, tolerance: f64) -> Result<GradReport> {
    let inputs = case.inputs();

    let mut tape = Tape::<f32>::new();
    let vars = inputs
        .iter()
        .map(|(s, v)| tape.leaf(s.clone(), v.iter().map(|&x| x as f32).collect(), true))
        .collect::<Result<Vec<_>>>()?;
    let out = case.build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (k, var) in vars.iter().enumerate() {
        let analytic: Vec<f64> = match tape.grad(*var) {
            Some(g) => g.iter().map(|&x| x as f64).collect(),
            None => vec![0.0; inputs[k].1.len()],
        };
        let mut probe = inputs.clone();
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..inputs[k].1.len() {
            let x0 = inputs[k].1[j];
            probe[k].1[j] = x0 + h;
            let fp = eval_f64(case, &probe)?;
            probe[k].1[j] = x0 - h;
            let fm = eval_f64(case, &probe)?;
            probe[k].1[j] = x0;
            let fd = (fp - fm) / (2.0 * h);
            num += (analytic[j] - fd).powi(2);
            den += fd * fd;
        }
        let rel = if den > 0.0 {
            (num / den).sqrt()
        } else {
            num.sqrt()
        };
        rel_errors.push(rel);
    }
    Ok(GradReport {
        name: case.name(),
        rel_errors,
        tolerance,
    })
}

/// Reduces a tensor to a scalar through a fixed pseudo-random projection.
///
/// Plain sums hide errors in operators whose adjoint preserves totals.
pub fn project<T: Real>(tape: &mut Tape<T>, x: Var, salt: u64) -> Result<Var> {
    let n = tape.shape(x).numel();
    let weights = (0..n)
        .map(|i| {
            let mut z = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt;
            z ^= z >> 31;
            z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z ^= z >> 29;
            T::of((z % 2001) as f64 / 1000.0 - 1.0)
        })
        .collect();
    let r = tape.constant(tape.shape(x).clone(), weights)?;
    let p = tape.mul(x, r)?;
    tape.sum(p)
}
