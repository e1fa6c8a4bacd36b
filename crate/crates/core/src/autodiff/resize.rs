//! Corner-aligned separable trilinear resampling.

use super::{Op, Real, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::par;

/// Resize factors supported by [`Tape::trilinear_resize`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResizeFactor {
    Quarter,
    Half,
    Double,
}

impl ResizeFactor {
    pub fn from_ratio(num: u32, den: u32) -> Result<Self> {
        match (num, den) {
            (1, 4) => Ok(ResizeFactor::Quarter),
            (1, 2) => Ok(ResizeFactor::Half),
            (2, 1) => Ok(ResizeFactor::Double),
            _ => Err(Error::invalid(
                "trilinear_resize",
                format!("unsupported factor {num}/{den}"),
            )),
        }
    }

    pub fn value(self) -> f64 {
        match self {
            ResizeFactor::Quarter => 0.25,
            ResizeFactor::Half => 0.5,
            ResizeFactor::Double => 2.0,
        }
    }

    /// Extent after resizing: rounded to nearest, at least 1.
    pub fn apply(self, n: usize) -> usize {
        ((n as f64 * self.value()).round() as usize).max(1)
    }
}

#[derive(Clone, Debug)]
struct AxisPlan {
    n_in: usize,
    n_out: usize,
    // (lower index, upper index, weight of upper)
    taps: Vec<(usize, usize, f64)>,
}

impl AxisPlan {
    fn new(n_in: usize, n_out: usize) -> Self {
        let taps = (0..n_out)
            .map(|o| {
                let pos = if n_out == 1 {
                    0.0
                } else {
                    (o * (n_in - 1)) as f64 / (n_out - 1) as f64
                };
                let i0 = (pos.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect();
        AxisPlan { n_in, n_out, taps }
    }
}

/// Per-axis interpolation taps for a `[c, z, y, x]` resize.
#[derive(Clone, Debug)]
pub(crate) struct ResizePlan {
    channels: usize,
    axes: [AxisPlan; 3],
}

/// Applies one axis of a `[outer, n, inner]` view.
fn along<T: Real>(src: &[T], outer: usize, inner: usize, plan: &AxisPlan) -> Vec<T> {
    let (ni, no) = (plan.n_in, plan.n_out);
    let mut out = vec![T::zero(); outer * no * inner];
    par::for_each_chunk_mut(&mut out, no * inner, |a, dst| {
        let s = &src[a * ni * inner..(a + 1) * ni * inner];
        for (o, &(i0, i1, w)) in plan.taps.iter().enumerate() {
            let w1 = T::of(w);
            let d = &mut dst[o * inner..(o + 1) * inner];
            let (r0, r1) = (&s[i0 * inner..(i0 + 1) * inner], &s[i1 * inner..(i1 + 1) * inner]);
            for b in 0..inner {
                d[b] = r0[b] + w1 * (r1[b] - r0[b]);
            }
        }
    });
    out
}

fn along_adjoint<T: Real>(g: &[T], outer: usize, inner: usize, plan: &AxisPlan) -> Vec<T> {
    let (ni, no) = (plan.n_in, plan.n_out);
    let mut out = vec![T::zero(); outer * ni * inner];
    par::for_each_chunk_mut(&mut out, ni * inner, |a, dst| {
        let s = &g[a * no * inner..(a + 1) * no * inner];
        for (o, &(i0, i1, w)) in plan.taps.iter().enumerate() {
            let (w0, w1) = (T::of(1.0 - w), T::of(w));
            let r = &s[o * inner..(o + 1) * inner];
            for b in 0..inner {
                dst[i0 * inner + b] += w0 * r[b];
            }
            for b in 0..inner {
                dst[i1 * inner + b] += w1 * r[b];
            }
        }
    });
    out
}

impl ResizePlan {
    pub(crate) fn new(channels: usize, from: [usize; 3], to: [usize; 3]) -> Self {
        ResizePlan {
            channels,
            axes: [
                AxisPlan::new(from[0], to[0]),
                AxisPlan::new(from[1], to[1]),
                AxisPlan::new(from[2], to[2]),
            ],
        }
    }

    pub(crate) fn output(&self) -> [usize; 3] {
        [self.axes[0].n_out, self.axes[1].n_out, self.axes[2].n_out]
    }

    /// Resamples along x, then y, then z.
    pub(crate) fn apply<T: Real>(&self, src: &[T]) -> Vec<T> {
        let c = self.channels;
        let [pz, py, px] = &self.axes;
        let a = along(src, c * pz.n_in * py.n_in, 1, px);
        let b = along(&a, c * pz.n_in, px.n_out, py);
        along(&b, c, py.n_out * px.n_out, pz)
    }

    pub(crate) fn adjoint<T: Real>(&self, g: &[T]) -> Vec<T> {
        let c = self.channels;
        let [pz, py, px] = &self.axes;
        let b = along_adjoint(g, c, py.n_out * px.n_out, pz);
        let a = along_adjoint(&b, c * pz.n_in, px.n_out, py);
        along_adjoint(&a, c * pz.n_in * py.n_in, 1, px)
    }
}

impl<T: Real> Tape<T> {
    /// Differentiable corner-aligned trilinear resize of a `[c, z, y, x]` tensor.
    pub fn trilinear_resize(&mut self, x: Var, factor: ResizeFactor) -> Result<Var> {
        let (_, ext) = self.shape(x).as_grid("trilinear_resize")?;
        self.resize_to(x, ext.map(|e| factor.apply(e)))
    }

    pub(crate) fn resize_to(&mut self, x: Var, to: [usize; 3]) -> Result<Var> {
        self.check(x)?;
        let (c, ext) = self.shape(x).as_grid("trilinear_resize")?;
        let plan = ResizePlan::new(c, ext, to);
        let value = plan.apply(self.value(x));
        let rg = self.rg(&[x]);
        Ok(self.push(Shape::grid(c, plan.output()), value, Op::Resize { x, plan }, rg))
    }
}
