//! Finite-difference Jacobian of `x -> x + phi(x)`.

use crate::autodiff::Real;
use crate::par;

/// `(minus, plus, scale)` so that `d/di f ~ scale * (f[plus] - f[minus])`.
///
/// Central differences inside, one-sided at the two faces.
#[inline]
pub(crate) fn stencil(i: usize, n: usize) -> (usize, usize, f64) {
    if n < 2 {
        (0, 0, 0.0)
    } else if i == 0 {
        (0, 1, 1.0)
    } else if i == n - 1 {
        (n - 2, n - 1, 1.0)
    } else {
        (i - 1, i + 1, 0.5)
    }
}

/// Spatial gradient entries `du[a][b] = d phi_a / d axis_b` at voxel `v`,
/// with components and axes both ordered `(x, y, z)`.
#[inline]
pub(crate) fn displacement_gradient<T: Real>(phi: &[T], ext: [usize; 3], v: usize) -> [[f64; 3]; 3] {
    let n = ext[0] * ext[1] * ext[2];
    let x = v % ext[2];
    let y = (v / ext[2]) % ext[1];
    let z = v / (ext[1] * ext[2]);
    let strides = [1, ext[2], ext[1] * ext[2]];
    let pos = [x, y, z];
    let lens = [ext[2], ext[1], ext[0]];
    let mut du = [[0.0; 3]; 3];
    for b in 0..3 {
        let (m, p, s) = stencil(pos[b], lens[b]);
        let vm = v - pos[b] * strides[b] + m * strides[b];
        let vp = v - pos[b] * strides[b] + p * strides[b];
        for (a, row) in du.iter_mut().enumerate() {
            row[b] = s * (phi[a * n + vp].f64() - phi[a * n + vm].f64());
        }
    }
    du
}

#[inline]
pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Cofactor matrix, so that `d det / d m[a][b] = cof[a][b]`.
#[inline]
pub(crate) fn cofactors(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    [
        [
            m[1][1] * m[2][2] - m[1][2] * m[2][1],
            m[1][2] * m[2][0] - m[1][0] * m[2][2],
            m[1][0] * m[2][1] - m[1][1] * m[2][0],
        ],
        [
            m[0][2] * m[2][1] - m[0][1] * m[2][2],
            m[0][0] * m[2][2] - m[0][2] * m[2][0],
            m[0][1] * m[2][0] - m[0][0] * m[2][1],
        ],
        [
            m[0][1] * m[1][2] - m[0][2] * m[1][1],
            m[0][2] * m[1][0] - m[0][0] * m[1][2],
            m[0][0] * m[1][1] - m[0][1] * m[1][0],
        ],
    ]
}

#[inline]
pub(crate) fn jacobian_at<T: Real>(phi: &[T], ext: [usize; 3], v: usize) -> [[f64; 3]; 3] {
    let mut j = displacement_gradient(phi, ext, v);
    for (a, row) in j.iter_mut().enumerate() {
        row[a] += 1.0;
    }
    j
}

/// Per-voxel `det(I + grad phi)` in 64-bit.
pub(crate) fn determinants<T: Real>(phi: &[T], ext: [usize; 3]) -> Vec<f64> {
    let n = ext[0] * ext[1] * ext[2];
    let mut out = vec![0.0; n];
    par::for_each_chunk_mut(&mut out, par::REDUCE_CHUNK, |ci, chunk| {
        let lo = ci * par::REDUCE_CHUNK;
        for (j, o) in chunk.iter_mut().enumerate() {
            *o = det3(&jacobian_at(phi, ext, lo + j));
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cofactors_give_determinant_derivative() {
        let m = [[1.1, 0.2, -0.3], [0.05, 0.9, 0.1], [0.2, -0.1, 1.3]];
        let c = cofactors(&m);
        let h = 1e-6;
        for a in 0..3 {
            for b in 0..3 {
                let mut p = m;
                p[a][b] += h;
                let mut q = m;
                q[a][b] -= h;
                let fd = (det3(&p) - det3(&q)) / (2.0 * h);
                assert!((fd - c[a][b]).abs() < 1e-8);
            }
        }
    }
}
