//! Strided 3D convolution and its adjoint, lowered to GEMM over im2col slabs.
//!
//! The output grid is processed in slabs of whole z-slices. Slabs run in a
//! fixed order; inside a slab the column gather and scatter are split by
//! column row (gather) or input channel (scatter), so no two workers touch
//! the same element and results do not depend on the worker count.

use super::gemm::{gemm, MatRef};
use super::{Op, Real, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::par;

/// Target number of output columns per im2col slab.
const SLAB_COLS: usize = 16 * 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    fn new(cin: usize, cout: usize, k: usize, stride: usize, input: [usize; 3]) -> Option<Self> {
        let pad = (k - 1) / 2;
        let mut output = [0; 3];
        for d in 0..3 {
            if input[d] + 2 * pad < k {
                return None;
            }
            output[d] = (input[d] + 2 * pad - k) / stride + 1;
        }
        Some(ConvGeom {
            cin,
            cout,
            k,
            stride,
            pad,
            input,
            output,
        })
    }

    fn kvol(&self) -> usize {
        self.k * self.k * self.k
    }

    fn krows(&self) -> usize {
        self.cin * self.kvol()
    }

    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn slab_slices(&self) -> usize {
        let per = self.output[1] * self.output[2];
        (SLAB_COLS / per.max(1)).max(1)
    }

    fn slabs(&self) -> impl Iterator<Item = (usize, usize)> {
        let step = self.slab_slices();
        let nz = self.output[0];
        (0..nz).step_by(step).map(move |z0| (z0, (z0 + step).min(nz)))
    }

    /// Output indices `o` along one axis with `0 <= o*stride + tap - pad < n_in`.
    fn valid(&self, tap: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
        let hi = if n_in + p > tap {
            ((n_in - 1 + p - tap) / s + 1).min(n_out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn split_tap(rem: usize, k: usize) -> (usize, usize, usize) {
    (rem / (k * k), (rem / k) % k, rem % k)
}

/// Gathers the receptive fields of output slices `z0..z1` into `col` (`krows x n`).
fn im2col<T: Real>(g: &ConvGeom, src: &[T], z0: usize, z1: usize, col: &mut [T]) {
    let [nz, ny, nx] = g.input;
    let [_, oy, ox] = g.output;
    let n = (z1 - z0) * oy * ox;
    let kvol = g.kvol();
    let in_len = g.in_len();
    par::for_each_chunk_mut(&mut col[..g.krows() * n], n, |r, row| {
        let ci = r / kvol;
        let (kz, ky, kx) = split_tap(r % kvol, g.k);
        let plane = &src[ci * in_len..(ci + 1) * in_len];
        let (xlo, xhi) = g.valid(kx, nx, ox);
        let (ylo, yhi) = g.valid(ky, ny, oy);
        let (zlo, zhi) = g.valid(kz, nz, g.output[0]);
        for (dz, z) in (z0..z1).enumerate() {
            let slice = &mut row[dz * oy * ox..(dz + 1) * oy * ox];
            if z < zlo || z >= zhi {
                slice.fill(T::zero());
                continue;
            }
            let iz = z * g.stride + kz - g.pad;
            for y in 0..oy {
                let dst = &mut slice[y * ox..(y + 1) * ox];
                if y < ylo || y >= yhi {
                    dst.fill(T::zero());
                    continue;
                }
                let iy = y * g.stride + ky - g.pad;
                let base = (iz * ny + iy) * nx;
                dst[..xlo].fill(T::zero());
                dst[xhi..].fill(T::zero());
                if g.stride == 1 {
                    let off = base + xlo + kx - g.pad;
                    dst[xlo..xhi].copy_from_slice(&plane[off..off + (xhi - xlo)]);
                } else {
                    for (x, d) in dst.iter_mut().enumerate().take(xhi).skip(xlo) {
                        *d = plane[base + x * g.stride + kx - g.pad];
                    }
                }
            }
        }
    });
}

/// Adjoint of [`im2col`]: scatters `col` back onto `dst` with accumulation.
fn col2im_add<T: Real>(g: &ConvGeom, col: &[T], z0: usize, z1: usize, dst: &mut [T]) {
    let [nz, ny, nx] = g.input;
    let [_, oy, ox] = g.output;
    let n = (z1 - z0) * oy * ox;
    let kvol = g.kvol();
    par::for_each_chunk_mut(&mut dst[..g.cin * g.in_len()], g.in_len(), |ci, plane| {
        for rem in 0..kvol {
            let (kz, ky, kx) = split_tap(rem, g.k);
            let row = &col[(ci * kvol + rem) * n..(ci * kvol + rem + 1) * n];
            let (xlo, xhi) = g.valid(kx, nx, ox);
            let (ylo, yhi) = g.valid(ky, ny, oy);
            let (zlo, zhi) = g.valid(kz, nz, g.output[0]);
            for (dz, z) in (z0..z1).enumerate() {
                if z < zlo || z >= zhi {
                    continue;
                }
                let iz = z * g.stride + kz - g.pad;
                for y in ylo..yhi {
                    let iy = y * g.stride + ky - g.pad;
                    let base = (iz * ny + iy) * nx;
                    let src = &row[(dz * oy + y) * ox..(dz * oy + y + 1) * ox];
                    if g.stride == 1 {
                        let off = base + xlo + kx - g.pad;
                        plane[off..off + (xhi - xlo)]
                            .iter_mut()
                            .zip(&src[xlo..xhi])
                            .for_each(|(p, &s)| *p += s);
                    } else {
                        for x in xlo..xhi {
                            plane[base + x * g.stride + kx - g.pad] += src[x];
                        }
                    }
                }
            }
        }
    });
}

/// `out = W * im2col(x) + b`.
pub(crate) fn forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: Option<&[T]>, out: &mut [T]) {
    let kr = g.krows();
    let no = g.out_len();
    let plane = g.output[1] * g.output[2];
    let mut col = vec![T::zero(); kr * g.slab_slices().min(g.output[0]) * plane];
    for (z0, z1) in g.slabs() {
        let n = (z1 - z0) * plane;
        im2col(g, x, z0, z1, &mut col);
        gemm(
            T::one(),
            MatRef::row_major(w, g.cout, kr, kr),
            MatRef::row_major(&col[..kr * n], kr, n, n),
            T::zero(),
            &mut out[z0 * plane..],
            no,
        );
    }
    if let Some(b) = b {
        par::for_each_chunk_mut(&mut out[..g.cout * no], no, |co, row| {
            let bv = b[co];
            row.iter_mut().for_each(|v| *v += bv);
        });
    }
}

/// `gx += im2col^T(W^T * gy)`, the adjoint of [`forward`] with respect to its input.
pub(crate) fn input_grad<T: Real>(g: &ConvGeom, gy: &[T], w: &[T], gx: &mut [T]) {
    let kr = g.krows();
    let no = g.out_len();
    let plane = g.output[1] * g.output[2];
    let mut col = vec![T::zero(); kr * g.slab_slices().min(g.output[0]) * plane];
    for (z0, z1) in g.slabs() {
        let n = (z1 - z0) * plane;
        gemm(
            T::one(),
            MatRef::transposed(w, g.cout, kr, kr),
            MatRef {
                data: &gy[z0 * plane..],
                rows: g.cout,
                cols: n,
                rs: no,
                cs: 1,
            },
            T::zero(),
            &mut col[..kr * n],
            n,
        );
        col2im_add(g, &col[..kr * n], z0, z1, gx);
    }
}

/// `gw += gy * im2col(x)^T`, accumulated slab by slab in a fixed order.
pub(crate) fn weight_grad<T: Real>(g: &ConvGeom, x: &[T], gy: &[T], gw: &mut [T]) {
    let kr = g.krows();
    let no = g.out_len();
    let plane = g.output[1] * g.output[2];
    let mut col = vec![T::zero(); kr * g.slab_slices().min(g.output[0]) * plane];
    for (z0, z1) in g.slabs() {
        let n = (z1 - z0) * plane;
        im2col(g, x, z0, z1, &mut col);
        gemm(
            T::one(),
            MatRef {
                data: &gy[z0 * plane..],
                rows: g.cout,
                cols: n,
                rs: no,
                cs: 1,
            },
            MatRef::transposed(&col[..kr * n], kr, n, n),
            T::one(),
            gw,
            kr,
        );
    }
}

pub(crate) fn bias_grad<T: Real>(g: &ConvGeom, gy: &[T]) -> Vec<T> {
    let no = g.out_len();
    (0..g.cout)
        .map(|co| T::of(super::sum64(&gy[co * no..(co + 1) * no])))
        .collect()
}

fn weight_dims(op: &'static str, w: &Shape) -> Result<(usize, usize, usize)> {
    let d = w.dims();
    if d.len() != 5 {
        return Err(Error::shape(op, "weight rank", 5, d.len()));
    }
    if d[2] != d[3] || d[2] != d[4] || d[2] == 0 {
        return Err(Error::invalid(op, format!("kernel must be cubic, got {:?}", &d[2..])));
    }
    Ok((d[0], d[1], d[2]))
}

impl<T: Real> Tape<T> {
    /// 3D convolution with zero padding `(k-1)/2`; `weight` is `[c_out, c_in, k, k, k]`.
    pub fn conv3(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        let (cin, ext) = self.shape(x).as_grid("conv3")?;
        let (cout, wcin, k) = weight_dims("conv3", self.shape(weight))?;
        if k % 2 == 0 {
            return Err(Error::invalid("conv3", format!("kernel size must be odd, got {k}")));
        }
        if wcin != cin {
            return Err(Error::shape("conv3", "input channels", wcin, cin));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::invalid("conv3", format!("stride must be 1 or 2, got {stride}")));
        }
        if let Some(b) = bias {
            self.check(b)?;
            let bs = self.shape(b).numel();
            if bs != cout {
                return Err(Error::shape("conv3", "bias channels", cout, bs));
            }
        }
        let geom = ConvGeom::new(cin, cout, k, stride, ext)
            .ok_or_else(|| Error::invalid("conv3", "kernel larger than padded input"))?;
        let mut out = vec![T::zero(); cout * geom.out_len()];
        forward(
            &geom,
            self.value(x),
            self.value(weight),
            bias.map(|b| self.value(b)),
            &mut out,
        );
        let mut deps = vec![x, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            Shape::grid(cout, geom.output),
            out,
            Op::Conv {
                x,
                w: weight,
                b: bias,
                geom,
            },
            rg,
        ))
    }

    /// Transposed convolution producing `stride` times the input extent.
    ///
    /// `weight` is `[c_in, c_out, k, k, k]`, the same layout [`Tape::conv3`]
    /// uses for the forward map this operator is the adjoint of.
    pub fn conv3_transpose(&mut self, x: Var, weight: Var, stride: usize) -> Result<Var> {
        let (_, ext) = self.shape(x).as_grid("conv3_transpose")?;
        if stride != 2 {
            return Err(Error::invalid(
                "conv3_transpose",
                format!("stride must be 2, got {stride}"),
            ));
        }
        self.conv3_transpose_to(x, weight, stride, ext.map(|e| e * stride))
    }

    /// Transposed convolution onto an explicit output extent.
    ///
    /// The extent must be one the matching strided convolution maps back onto
    /// the input extent.
    pub fn conv3_transpose_to(
        &mut self,
        x: Var,
        weight: Var,
        stride: usize,
        out_extent: [usize; 3],
    ) -> Result<Var> {
        self.check(x)?;
        self.check(weight)?;
        let (cy, ext) = self.shape(x).as_grid("conv3_transpose")?;
        let (wc0, wc1, k) = weight_dims("conv3_transpose", self.shape(weight))?;
        if wc0 != cy {
            return Err(Error::shape("conv3_transpose", "input channels", wc0, cy));
        }
        if stride == 0 {
            return Err(Error::invalid("conv3_transpose", "stride must be positive"));
        }
        let geom = ConvGeom::new(wc1, wc0, k, stride, out_extent)
            .ok_or_else(|| Error::invalid("conv3_transpose", "kernel larger than output"))?;
        for (d, axis) in ["z", "y", "x"].iter().enumerate() {
            if geom.output[d] != ext[d] {
                return Err(Error::shape(
                    "conv3_transpose",
                    format!("{axis} (extent incompatible with stride/kernel)"),
                    geom.output[d],
                    ext[d],
                ));
            }
        }
        let mut out = vec![T::zero(); wc1 * geom.in_len()];
        input_grad(&geom, self.value(x), self.value(weight), &mut out);
        let rg = self.rg(&[x, weight]);
        Ok(self.push(
            Shape::grid(wc1, out_extent),
            out,
            Op::ConvTranspose {
                x,
                w: weight,
                geom,
            },
            rg,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as an oracle.
    fn naive(
        x: &[f64],
        cin: usize,
        ext: [usize; 3],
        w: &[f64],
        cout: usize,
        k: usize,
        s: usize,
    ) -> (Vec<f64>, [usize; 3]) {
        let p = (k - 1) as isize / 2;
        let o = ext.map(|n| (n + 2 * p as usize - k) / s + 1);
        let mut out = vec![0.0; cout * o[0] * o[1] * o[2]];
        for co in 0..cout {
            for oz in 0..o[0] {
                for oy in 0..o[1] {
                    for ox in 0..o[2] {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (oz * s + kz) as isize - p;
                                        let iy = (oy * s + ky) as isize - p;
                                        let ix = (ox * s + kx) as isize - p;
                                        if iz < 0
                                            || iy < 0
                                            || ix < 0
                                            || iz >= ext[0] as isize
                                            || iy >= ext[1] as isize
                                            || ix >= ext[2] as isize
                                        {
                                            continue;
                                        }
                                        let xi = ((ci * ext[0] + iz as usize) * ext[1]
                                            + iy as usize)
                                            * ext[2]
                                            + ix as usize;
                                        let wi = (((co * cin + ci) * k + kz) * k + ky) * k + kx;
                                        acc += x[xi] * w[wi];
                                    }
                                }
                            }
                        }
                        out[((co * o[0] + oz) * o[1] + oy) * o[2] + ox] = acc;
                    }
                }
            }
        }
        (out, o)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn pointwise_kernel_doubles_input() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Shape::grid(1, [3, 3, 3]), vec![1.0; 27], false).unwrap();
        let w = t.leaf(Shape::new(&[1, 1, 1, 1, 1]), vec![2.0], true).unwrap();
        let b = t.leaf(Shape::new(&[1]), vec![0.0], true).unwrap();
        let y = t.conv3(x, w, Some(b), 1).unwrap();
        assert_eq!(t.value(y), &[2.0; 27]);
    }

    #[test]
    fn strided_ones_kernel_sums_padded_neighbourhoods() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs = rand_vec(&mut rng, 64);
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Shape::grid(1, [4, 4, 4]), xs.clone(), false).unwrap();
        let w = t.leaf(Shape::new(&[1, 1, 3, 3, 3]), vec![1.0; 27], false).unwrap();
        let y = t.conv3(x, w, None, 2).unwrap();
        assert_eq!(t.shape(y).dims(), &[1, 2, 2, 2]);
        // Each output voxel (oz,oy,ox) covers input [2o-1, 2o+1] clipped.
        for oz in 0usize..2 {
            for oy in 0usize..2 {
                for ox in 0usize..2 {
                    let mut s = 0.0;
                    for z in (2 * oz).saturating_sub(1)..=(2 * oz + 1).min(3) {
                        for y_ in (2 * oy).saturating_sub(1)..=(2 * oy + 1).min(3) {
                            for x_ in (2 * ox).saturating_sub(1)..=(2 * ox + 1).min(3) {
                                s += xs[(z * 4 + y_) * 4 + x_];
                            }
                        }
                    }
                    let got = t.value(y)[(oz * 2 + oy) * 2 + ox];
                    assert!((got - s).abs() < 1e-12, "{got} vs {s}");
                }
            }
        }
    }

    #[test]
    fn matches_naive_oracle_multichannel() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(cin, cout, k, s, ext) in &[
            (2usize, 3usize, 3usize, 1usize, [5usize, 4, 6]),
            (3, 2, 3, 2, [6, 5, 4]),
            (1, 2, 1, 2, [3, 3, 3]),
            (2, 2, 5, 1, [4, 6, 5]),
        ] {
            let xs = rand_vec(&mut rng, cin * ext.iter().product::<usize>());
            let ws = rand_vec(&mut rng, cout * cin * k * k * k);
            let (want, o) = naive(&xs, cin, ext, &ws, cout, k, s);
            let mut t = Tape::<f64>::new();
            let x = t.leaf(Shape::grid(cin, ext), xs, false).unwrap();
            let w = t.leaf(Shape::new(&[cout, cin, k, k, k]), ws, false).unwrap();
            let y = t.conv3(x, w, None, s).unwrap();
            assert_eq!(t.shape(y).dims(), &[cout, o[0], o[1], o[2]]);
            for (a, b) in t.value(y).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_of_unit_voxel_with_2_kernel_fills_block() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Shape::grid(1, [1, 1, 1]), vec![1.0], false).unwrap();
        let w = t.leaf(Shape::new(&[1, 1, 2, 2, 2]), vec![1.0; 8], false).unwrap();
        let y = t.conv3_transpose(x, w, 2).unwrap();
        assert_eq!(t.shape(y).dims(), &[1, 2, 2, 2]);
        assert_eq!(t.value(y), &[1.0; 8]);
    }

    #[test]
    fn transpose_doubles_extent() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Shape::grid(1, [4, 4, 4]), vec![0.5; 64], false).unwrap();
        let w = t.leaf(Shape::new(&[1, 1, 3, 3, 3]), vec![0.1; 27], false).unwrap();
        let y = t.conv3_transpose(x, w, 2).unwrap();
        assert_eq!(t.shape(y).dims(), &[1, 8, 8, 8]);
    }

    #[test]
    fn transpose_equals_explicit_matrix_transpose() {
        // Build the dense matrix of conv3(stride 2) on a 3^3 grid column by
        // column, then compare its transpose against conv3_transpose_to.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (cin, cout, k, ext) = (2usize, 3usize, 3usize, [3usize, 3, 3]);
        let ws = rand_vec(&mut rng, cout * cin * k * k * k);
        let nin = cin * 27;
        let (_, o) = naive(&vec![0.0; nin], cin, ext, &ws, cout, k, 2);
        let nout = cout * o.iter().product::<usize>();
        let mut mat = vec![0.0; nout * nin];
        for j in 0..nin {
            let mut e = vec![0.0; nin];
            e[j] = 1.0;
            let (col, _) = naive(&e, cin, ext, &ws, cout, k, 2);
            for i in 0..nout {
                mat[i * nin + j] = col[i];
            }
        }
        let ys = rand_vec(&mut rng, nout);
        let want: Vec<f64> = (0..nin)
            .map(|j| (0..nout).map(|i| mat[i * nin + j] * ys[i]).sum())
            .collect();
        let mut t = Tape::<f64>::new();
        let y = t.leaf(Shape::grid(cout, o), ys, false).unwrap();
        let w = t.leaf(Shape::new(&[cout, cin, k, k, k]), ws, false).unwrap();
        let xt = t.conv3_transpose_to(y, w, 2, ext).unwrap();
        for (a, b) in t.value(xt).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_identity_with_three_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (cin, cout) = (2, 3);
        let ext = [6, 4, 6];
        let xs: Vec<f32> = (0..cin * 144).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ws: Vec<f32> = (0..cout * cin * 27).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Shape::grid(cin, ext), xs.clone(), false).unwrap();
        let w = t.leaf(Shape::new(&[cout, cin, 3, 3, 3]), ws, false).unwrap();
        let cx = t.conv3(x, w, None, 2).unwrap();
        let ys: Vec<f32> = (0..t.value(cx).len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = t.leaf(t.shape(cx).clone(), ys.clone(), false).unwrap();
        let ty = t.conv3_transpose(y, w, 2).unwrap();
        let lhs: f64 = t.value(cx).iter().zip(&ys).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = xs.iter().zip(t.value(ty)).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() <= 1e-4 * lhs.abs().max(rhs.abs()), "{lhs} vs {rhs}");
    }

    #[test]
    fn rejects_channel_mismatch_with_axis_name() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(Shape::grid(2, [3, 3, 3]), vec![0.0; 54], false).unwrap();
        let w = t.leaf(Shape::new(&[1, 3, 3, 3, 3]), vec![0.0; 81], true).unwrap();
        let err = t.conv3(x, w, None, 1).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
        let w2 = t.leaf(Shape::new(&[1, 2, 2, 2, 2]), vec![0.0; 16], true).unwrap();
        assert!(t.conv3(x, w2, None, 1).is_err());
        let w3 = t.leaf(Shape::new(&[1, 2, 3, 3, 3]), vec![0.0; 54], true).unwrap();
        assert!(t.conv3(x, w3, None, 3).is_err());
    }
}
