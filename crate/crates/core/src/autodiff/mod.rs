//! Reverse-mode automatic differentiation over a closed operator set.
//!
//! A [`Tape`] records every operation in creation order, which makes the
//! graph acyclic and topologically sorted by construction. [`Var`] is a
//! cheap handle into one tape. The tape is generic over the scalar type so
//! the same graph can be replayed in `f64` as a gradient-check reference.
//!
//! ```
//! use dipreg::autodiff::{Shape, Tape};
//!
//! let mut tape = Tape::<f32>::new();
//! let x = tape.leaf(Shape::new(&[2]), vec![1.0, -2.0], true).unwrap();
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
//! ```

mod adam;
mod conv;
pub(crate) mod gemm;
pub mod gradcheck;
pub mod suite;
mod pool;
mod resize;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::par;

pub use adam::{Adam, AdamConfig, AdamState};
pub use resize::ResizeFactor;

pub(crate) use conv::ConvGeom;
pub(crate) use resize::ResizePlan;

/// Scalar types the tape can run on.
pub trait Real:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// Raw GEMM entry point, see [`matrixmultiply::sgemm`].
    ///
    /// # Safety
    /// Same contract as the `matrixmultiply` kernels.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Tensor extents, outermost first. Spatial tensors are `[channels, z, y, x]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Self {
        Shape(dims.to_vec())
    }

    pub fn grid(channels: usize, extent: [usize; 3]) -> Self {
        Shape(vec![channels, extent[0], extent[1], extent[2]])
    }

    pub fn scalar() -> Self {
        Shape(vec![1])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// `(channels, [z, y, x])` for a rank-4 spatial tensor.
    pub fn as_grid(&self, op: &'static str) -> Result<(usize, [usize; 3])> {
        if self.0.len() != 4 {
            return Err(Error::shape(op, "rank", 4, self.0.len()));
        }
        Ok((self.0[0], [self.0[1], self.0[2], self.0[3]]))
    }
}

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    idx: usize,
    tape_id: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    Resize {
        x: Var,
        plan: ResizePlan,
    },
    Resample {
        src: Var,
        disp: Var,
    },
    Ncc {
        w: Var,
        fixed: Vec<f64>,
        window: usize,
        exact: f64,
    },
    Smoothness {
        phi: Var,
        exact: f64,
    },
    NegJacobian {
        phi: Var,
        exact: f64,
    },
}

struct Node<T> {
    shape: Shape,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// A dynamically recorded computation graph.
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
    swept: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            swept: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<T> {
        assert_eq!(v.tape_id, self.id, "Var used on a foreign tape");
        &self.nodes[v.idx]
    }

    pub fn shape(&self, v: Var) -> &Shape {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    /// Gradient of the last backward sweep, if this node received one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    /// 64-bit value of a loss-term node, before rounding to `T`.
    pub fn exact_value(&self, v: Var) -> Option<f64> {
        match &self.nodes.get(v.idx)?.op {
            Op::Ncc { exact, .. } | Op::Smoothness { exact, .. } | Op::NegJacobian { exact, .. } => Some(*exact),
            _ => None,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub(crate) fn push(&mut self, shape: Shape, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.numel(), value.len());
        let idx = self.nodes.len();
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var {
            idx,
            tape_id: self.id,
        }
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape_id != self.id || v.idx >= self.nodes.len() {
            return Err(Error::invalid("tape", "variable does not belong to this tape"));
        }
        Ok(())
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, shape: Shape, value: Vec<T>, requires_grad: bool) -> Result<Var> {
        if shape.numel() != value.len() {
            return Err(Error::shape("leaf", "numel", shape.numel(), value.len()));
        }
        Ok(self.push(shape, value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: Shape, value: Vec<T>) -> Result<Var> {
        self.leaf(shape, value, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            let axis = sa
                .dims()
                .iter()
                .zip(sb.dims())
                .position(|(x, y)| x != y)
                .unwrap_or(sa.dims().len().min(sb.dims().len()));
            let (e, f) = (
                sa.dims().get(axis).copied().unwrap_or(0),
                sb.dims().get(axis).copied().unwrap_or(0),
            );
            return Err(Error::shape(op, format!("axis {axis}"), e, f));
        }
        Ok(())
    }

    pub(crate) fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|&v| self.node(v).requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).clone(), value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).clone(), value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).clone(), value, Op::Mul(a, b), rg))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, k: T) -> Result<Var> {
        self.check(a)?;
        let value = self.value(a).iter().map(|&x| x * k).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).clone(), value, Op::Scale(a, k), rg))
    }

    /// Sum of all elements, accumulated in 64-bit.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = sum64(self.value(a));
        let rg = self.rg(&[a]);
        Ok(self.push(Shape::scalar(), vec![T::of(s)], Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let v = self.value(a);
        let s = sum64(v) / v.len().max(1) as f64;
        let rg = self.rg(&[a]);
        Ok(self.push(Shape::scalar(), vec![T::of(s)], Op::Mean(a), rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        self.check(x)?;
        if !(slope > T::zero() && slope < T::one()) {
            return Err(Error::invalid("leaky_relu", "slope must lie in (0, 1)"));
        }
        let value = self
            .value(x)
            .iter()
            .map(|&v| if v >= T::zero() { v } else { v * slope })
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(self.shape(x).clone(), value, Op::LeakyRelu { x, slope }, rg))
    }

    /// Clears gradients so the tape can be swept again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.swept = false;
    }

    /// Propagates `dloss/dnode` to every node that requires a gradient.
    ///
    /// Gradients of interior nodes are released once propagated; leaves keep theirs.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.swept {
            return Err(Error::Backward(
                "tape already swept; call zero_grad before another backward".into(),
            ));
        }
        if !self.shape(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss).dims()
            )));
        }
        if !self.node(loss).requires_grad {
            return Err(Error::Backward(
                "loss does not depend on any variable that requires a gradient".into(),
            ));
        }
        self.nodes[loss.idx].grad = Some(vec![T::one()]);
        for i in (0..=loss.idx).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.propagate(i, &g);
            for (v, c) in contributions {
                let node = &mut self.nodes[v.idx];
                if !node.requires_grad {
                    continue;
                }
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        self.swept = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.idx].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if rg(*b) {
                    out.push((*b, g.iter().map(|&x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, zip_map(g, self.value(*b), |x, y| x * y)));
                }
                if rg(*b) {
                    out.push((*b, zip_map(g, self.value(*a), |x, y| x * y)));
                }
            }
            Op::Scale(a, k) => {
                if rg(*a) {
                    out.push((*a, g.iter().map(|&x| x * *k).collect()));
                }
            }
            Op::Sum(a) => {
                if rg(*a) {
                    out.push((*a, vec![g[0]; self.value(*a).len()]));
                }
            }
            Op::Mean(a) => {
                if rg(*a) {
                    let n = self.value(*a).len();
                    let v = T::of(g[0].f64() / n as f64);
                    out.push((*a, vec![v; n]));
                }
            }
            Op::LeakyRelu { x, slope } => {
                if rg(*x) {
                    let gx = zip_map(g, self.value(*x), |gv, xv| {
                        if xv >= T::zero() {
                            gv
                        } else {
                            gv * *slope
                        }
                    });
                    out.push((*x, gx));
                }
            }
            Op::Conv { x, w, b, geom } => {
                if rg(*x) {
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    conv::input_grad(geom, g, self.value(*w), &mut gx);
                    out.push((*x, gx));
                }
                if rg(*w) {
                    let mut gw = vec![T::zero(); self.value(*w).len()];
                    conv::weight_grad(geom, self.value(*x), g, &mut gw);
                    out.push((*w, gw));
                }
                if let Some(b) = b {
                    if rg(*b) {
                        out.push((*b, conv::bias_grad(geom, g)));
                    }
                }
            }
            Op::ConvTranspose { x, w, geom } => {
                // y = A^T x where A is the strided convolution described by `geom`.
                if rg(*x) {
                    let mut gx = vec![T::zero(); self.value(*x).len()];
                    conv::forward(geom, g, self.value(*w), None, &mut gx);
                    out.push((*x, gx));
                }
                if rg(*w) {
                    let mut gw = vec![T::zero(); self.value(*w).len()];
                    conv::weight_grad(geom, g, self.value(*x), &mut gw);
                    out.push((*w, gw));
                }
            }
            Op::MaxPool { x, argmax } => {
                if rg(*x) {
                    out.push((*x, pool::backward(self.shape(*x), argmax, g)));
                }
            }
            Op::Resize { x, plan } => {
                if rg(*x) {
                    out.push((*x, plan.adjoint(g)));
                }
            }
            Op::Resample { src, disp } => {
                let (c, ext) = self.shape(*src).as_grid("resample").expect("checked");
                let (gs, gd) = crate::field::sample::resample_grads(
                    self.value(*src),
                    c,
                    ext,
                    self.value(*disp),
                    g,
                    rg(*src),
                    rg(*disp),
                );
                if let Some(gs) = gs {
                    out.push((*src, gs));
                }
                if let Some(gd) = gd {
                    out.push((*disp, gd));
                }
            }
            Op::Ncc { w, fixed, window, .. } => {
                if rg(*w) {
                    let (_, ext) = self.shape(*w).as_grid("ncc").expect("checked");
                    let gw = crate::losses::ncc_grad(fixed, self.value(*w), ext, *window, g[0]);
                    out.push((*w, gw));
                }
            }
            Op::Smoothness { phi, .. } => {
                if rg(*phi) {
                    let (_, ext) = self.shape(*phi).as_grid("smoothness").expect("checked");
                    out.push((
                        *phi,
                        crate::losses::smoothness_grad(self.value(*phi), ext, g[0]),
                    ));
                }
            }
            Op::NegJacobian { phi, .. } => {
                if rg(*phi) {
                    let (_, ext) = self.shape(*phi).as_grid("jacobian").expect("checked");
                    out.push((
                        *phi,
                        crate::losses::neg_jacobian_grad(self.value(*phi), ext, g[0]),
                    ));
                }
            }
        }
        out
    }
}

pub(crate) fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    par::for_each_chunk_mut(&mut out, par::REDUCE_CHUNK, |ci, chunk| {
        let lo = ci * par::REDUCE_CHUNK;
        for (j, o) in chunk.iter_mut().enumerate() {
            *o = f(a[lo + j], b[lo + j]);
        }
    });
    out
}

pub(crate) fn sum64<T: Real>(v: &[T]) -> f64 {
    par::sum_f64(v.len(), |i| v[i].f64())
}
