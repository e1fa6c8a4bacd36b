//! Trilinear sampling at displaced grid positions with clamp-to-boundary.
//!
//! Displacements are channel-planar `[dx, dy, dz]` in voxel units; a sample
//! for voxel `(z, y, x)` is taken at `(z + dz, y + dy, x + dx)`.

use crate::autodiff::Real;
use crate::par;

/// Lower/upper neighbour, fractional offset, and whether the coordinate was inside the grid.
#[inline]
fn locate<T: Real>(p: T, n: usize) -> (usize, usize, T, bool) {
    let hi = T::of((n - 1) as f64);
    if !(p > T::zero()) {
        (0, 0, T::zero(), false)
    } else if p >= hi {
        (n - 1, n - 1, T::zero(), false)
    } else {
        let i0 = p.floor().to_usize().unwrap_or(0).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - T::of(i0 as f64), true)
    }
}

#[derive(Clone, Copy)]
struct Cell<T> {
    idx: [usize; 8],
    f: [T; 3], // fz, fy, fx
    inside: [bool; 3],
}

impl<T: Real> Cell<T> {
    #[inline]
    fn at(ext: [usize; 3], v: usize, disp: &[T]) -> Self {
        let n = ext[0] * ext[1] * ext[2];
        let x = v % ext[2];
        let y = (v / ext[2]) % ext[1];
        let z = v / (ext[1] * ext[2]);
        let (x0, x1, fx, ix) = locate(T::of(x as f64) + disp[v], ext[2]);
        let (y0, y1, fy, iy) = locate(T::of(y as f64) + disp[n + v], ext[1]);
        let (z0, z1, fz, iz) = locate(T::of(z as f64) + disp[2 * n + v], ext[0]);
        let at = |zz: usize, yy: usize, xx: usize| (zz * ext[1] + yy) * ext[2] + xx;
        Cell {
            idx: [
                at(z0, y0, x0),
                at(z0, y0, x1),
                at(z0, y1, x0),
                at(z0, y1, x1),
                at(z1, y0, x0),
                at(z1, y0, x1),
                at(z1, y1, x0),
                at(z1, y1, x1),
            ],
            f: [fz, fy, fx],
            inside: [iz, iy, ix],
        }
    }

    #[inline]
    fn weights(&self) -> [T; 8] {
        let one = T::one();
        let [fz, fy, fx] = self.f;
        let (gz, gy, gx) = (one - fz, one - fy, one - fx);
        [
            gz * gy * gx,
            gz * gy * fx,
            gz * fy * gx,
            gz * fy * fx,
            fz * gy * gx,
            fz * gy * fx,
            fz * fy * gx,
            fz * fy * fx,
        ]
    }

    #[inline]
    fn sample(&self, plane: &[T]) -> T {
        let [fz, fy, fx] = self.f;
        let one = T::one();
        let s = |k: usize| plane[self.idx[k]];
        let lx = |a: usize, b: usize| (one - fx) * s(a) + fx * s(b);
        let c0 = (one - fy) * lx(0, 1) + fy * lx(2, 3);
        let c1 = (one - fy) * lx(4, 5) + fy * lx(6, 7);
        (one - fz) * c0 + fz * c1
    }

    /// Partial derivatives of the interpolant with respect to `(z, y, x)`.
    #[inline]
    fn slopes(&self, plane: &[T]) -> [T; 3] {
        let [fz, fy, fx] = self.f;
        let one = T::one();
        let s = |k: usize| plane[self.idx[k]];
        let (gz, gy, gx) = (one - fz, one - fy, one - fx);
        let dz = if self.inside[0] {
            gy * gx * (s(4) - s(0))
                + gy * fx * (s(5) - s(1))
                + fy * gx * (s(6) - s(2))
                + fy * fx * (s(7) - s(3))
        } else {
            T::zero()
        };
        let dy = if self.inside[1] {
            gz * gx * (s(2) - s(0))
                + gz * fx * (s(3) - s(1))
                + fz * gx * (s(6) - s(4))
                + fz * fx * (s(7) - s(5))
        } else {
            T::zero()
        };
        let dx = if self.inside[2] {
            gz * gy * (s(1) - s(0))
                + gz * fy * (s(3) - s(2))
                + fz * gy * (s(5) - s(4))
                + fz * fy * (s(7) - s(6))
        } else {
            T::zero()
        };
        [dz, dy, dx]
    }
}

/// Samples each of the `c` planes of `src` at the displaced positions.
pub(crate) fn resample_forward<T: Real>(src: &[T], c: usize, ext: [usize; 3], disp: &[T]) -> Vec<T> {
    let n = ext[0] * ext[1] * ext[2];
    // Voxel-major so each cell is located once for all channels.
    let mut inter = vec![T::zero(); c * n];
    par::for_each_chunk_mut(&mut inter, c * par::REDUCE_CHUNK, |ci, chunk| {
        let lo = ci * par::REDUCE_CHUNK;
        for (j, o) in chunk.chunks_mut(c).enumerate() {
            let cell = Cell::at(ext, lo + j, disp);
            for (ch, o) in o.iter_mut().enumerate() {
                *o = cell.sample(&src[ch * n..(ch + 1) * n]);
            }
        }
    });
    planar(inter, c, n)
}

fn planar<T: Real>(inter: Vec<T>, c: usize, n: usize) -> Vec<T> {
    if c == 1 {
        return inter;
    }
    let mut out = vec![T::zero(); c * n];
    for (v, vals) in inter.chunks(c).enumerate() {
        for (ch, &x) in vals.iter().enumerate() {
            out[ch * n + v] = x;
        }
    }
    out
}

/// Adjoints of [`resample_forward`] with respect to `src` and to the
/// displacement, each computed only when requested.
pub(crate) fn resample_grads<T: Real>(
    src: &[T],
    c: usize,
    ext: [usize; 3],
    disp: &[T],
    g: &[T],
    want_src: bool,
    want_disp: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let n = ext[0] * ext[1] * ext[2];
    type Cells<T> = Vec<([u32; 8], [T; 8])>;
    // Per chunk of voxels: corner indices and weights (for the source
    // adjoint) and the (dz, dy, dx) gradient (for the displacement).
    let parts: Vec<(Cells<T>, Vec<[T; 3]>)> = par::map_range(n.div_ceil(par::REDUCE_CHUNK), |ci| {
        let lo = ci * par::REDUCE_CHUNK;
        let hi = (lo + par::REDUCE_CHUNK).min(n);
        let mut cells = Vec::with_capacity(if want_src { hi - lo } else { 0 });
        let mut dg = Vec::with_capacity(if want_disp { hi - lo } else { 0 });
        for v in lo..hi {
            let cell = Cell::at(ext, v, disp);
            if want_disp {
                let mut acc = [T::zero(); 3];
                for ch in 0..c {
                    let gv = g[ch * n + v];
                    if gv == T::zero() {
                        continue;
                    }
                    let s = cell.slopes(&src[ch * n..(ch + 1) * n]);
                    for a in 0..3 {
                        acc[a] += gv * s[a];
                    }
                }
                dg.push(acc);
            }
            if want_src {
                cells.push((cell.idx.map(|i| i as u32), cell.weights()));
            }
        }
        (cells, dg)
    });
    let gsrc = want_src.then(|| {
        let mut out = vec![T::zero(); c * n];
        par::for_each_chunk_mut(&mut out, n, |ch, plane| {
            let gp = &g[ch * n..(ch + 1) * n];
            let cells = parts.iter().flat_map(|p| p.0.iter());
            for (&gv, (idx, w)) in gp.iter().zip(cells) {
                if gv == T::zero() {
                    continue;
                }
                for k in 0..8 {
                    plane[idx[k] as usize] += w[k] * gv;
                }
            }
        });
        out
    });
    let gdisp = want_disp.then(|| {
        let mut out = vec![T::zero(); 3 * n];
        for (v, d) in parts.iter().flat_map(|p| p.1.iter()).enumerate() {
            out[v] = d[2];
            out[n + v] = d[1];
            out[2 * n + v] = d[0];
        }
        out
    });
    (gsrc, gdisp)
}
