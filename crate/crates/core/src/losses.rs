//! Registration objective: windowed NCC plus smoothness and folding penalties.
//!
//! All three terms are tape operators with hand-written adjoints, and all of
//! them reduce in 64-bit.

use crate::autodiff::{Op, Real, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::field::{self, jacobian, FieldRole, VectorField, Volume};
use crate::par;

/// Variance guard added to both local variances of the NCC.
pub const NCC_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_smooth: f64,
    pub lambda_diffeo: f64,
    pub ncc_window: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_smooth: 0.1,
            lambda_diffeo: 1.0,
            ncc_window: 7,
        }
    }
}

impl LossWeights {
    /// Both regularizers switched off.
    pub fn unregularized(ncc_window: usize) -> Self {
        LossWeights {
            lambda_smooth: 0.0,
            lambda_diffeo: 0.0,
            ncc_window,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ncc_window % 2 == 0 {
            return Err(Error::Config(format!(
                "ncc_window must be odd, got {}",
                self.ncc_window
            )));
        }
        for (name, v) in [
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_diffeo", self.lambda_diffeo),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Values of the individual objective terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub ncc: f64,
    pub smooth: f64,
    pub diffeo: f64,
}

// ---------------------------------------------------------------------------
// Windowed statistics

/// Truncated box sum of radius `r` along one axis of a `[z, y, x]` grid.
fn box_axis(src: &[f64], ext: [usize; 3], axis: usize, r: usize) -> Vec<f64> {
    let (n, inner) = match axis {
        0 => (ext[0], ext[1] * ext[2]),
        1 => (ext[1], ext[2]),
        _ => (ext[2], 1),
    };
    let mut out = vec![0.0; src.len()];
    par::for_each_chunk_mut(&mut out, n * inner, |a, dst| {
        let s = &src[a * n * inner..(a + 1) * n * inner];
        for j in 0..=r.min(n - 1) {
            for b in 0..inner {
                dst[b] += s[j * inner + b];
            }
        }
        for i in 1..n {
            let (prev, cur) = dst.split_at_mut(i * inner);
            let prev = &prev[(i - 1) * inner..];
            let cur = &mut cur[..inner];
            cur.copy_from_slice(prev);
            if i + r < n {
                let add = &s[(i + r) * inner..(i + r + 1) * inner];
                cur.iter_mut().zip(add).for_each(|(c, &v)| *c += v);
            }
            if i > r {
                let sub = &s[(i - r - 1) * inner..(i - r) * inner];
                cur.iter_mut().zip(sub).for_each(|(c, &v)| *c -= v);
            }
        }
    });
    out
}

fn box_sum(src: &[f64], ext: [usize; 3], r: usize) -> Vec<f64> {
    let a = box_axis(src, ext, 2, r);
    let b = box_axis(&a, ext, 1, r);
    box_axis(&b, ext, 0, r)
}

fn window_count(i: usize, n: usize, r: usize) -> usize {
    (i + r).min(n - 1) - i.saturating_sub(r) + 1
}

struct NccStats {
    s_i: Vec<f64>,
    s_j: Vec<f64>,
    s_ii: Vec<f64>,
    s_jj: Vec<f64>,
    s_ij: Vec<f64>,
}

impl NccStats {
    fn new<T: Real>(fixed: &[f64], w: &[T], ext: [usize; 3], r: usize) -> Self {
        let j: Vec<f64> = w.iter().map(|v| v.f64()).collect();
        let ii: Vec<f64> = fixed.iter().map(|v| v * v).collect();
        let jj: Vec<f64> = j.iter().map(|v| v * v).collect();
        let ij: Vec<f64> = fixed.iter().zip(&j).map(|(a, b)| a * b).collect();
        NccStats {
            s_i: box_sum(fixed, ext, r),
            s_j: box_sum(&j, ext, r),
            s_ii: box_sum(&ii, ext, r),
            s_jj: box_sum(&jj, ext, r),
            s_ij: box_sum(&ij, ext, r),
        }
    }
}

struct Local {
    cnt: f64,
    m_i: f64,
    m_j: f64,
    v_j: f64,
    denom: f64,
    ncc: f64,
}

#[inline]
fn local(st: &NccStats, ext: [usize; 3], r: usize, v: usize) -> Local {
    let x = v % ext[2];
    let y = (v / ext[2]) % ext[1];
    let z = v / (ext[1] * ext[2]);
    let cnt = (window_count(z, ext[0], r) * window_count(y, ext[1], r) * window_count(x, ext[2], r))
        as f64;
    let m_i = st.s_i[v] / cnt;
    let m_j = st.s_j[v] / cnt;
    let cov = st.s_ij[v] / cnt - m_i * m_j;
    let v_i = (st.s_ii[v] / cnt - m_i * m_i).max(0.0);
    let v_j = (st.s_jj[v] / cnt - m_j * m_j).max(0.0);
    let denom = ((v_i + NCC_EPS) * (v_j + NCC_EPS)).sqrt();
    Local {
        cnt,
        m_i,
        m_j,
        v_j,
        denom,
        ncc: cov / denom,
    }
}

fn check_window(window: usize) -> Result<usize> {
    if window % 2 == 0 {
        return Err(Error::invalid("ncc", format!("window must be odd, got {window}")));
    }
    Ok(window / 2)
}

/// `-mean(local NCC)`.
pub(crate) fn ncc_value<T: Real>(fixed: &[f64], w: &[T], ext: [usize; 3], window: usize) -> f64 {
    let r = window / 2;
    let st = NccStats::new(fixed, w, ext, r);
    let n = w.len();
    -par::sum_f64(n, |v| local(&st, ext, r, v).ncc) / n as f64
}

pub(crate) fn ncc_grad<T: Real>(
    fixed: &[f64],
    w: &[T],
    ext: [usize; 3],
    window: usize,
    g: T,
) -> Vec<T> {
    let r = window / 2;
    let st = NccStats::new(fixed, w, ext, r);
    let n = w.len();
    let a = -g.f64() / n as f64;
    // Per-window sensitivities with respect to the window sums of J, J^2 and IJ.
    let mut coef = vec![0.0f64; 3 * n];
    par::for_each_chunk_mut(&mut coef, 3 * par::REDUCE_CHUNK, |ci, chunk| {
        let lo = ci * par::REDUCE_CHUNK;
        for k in 0..chunk.len() / 3 {
            let l = local(&st, ext, r, lo + k);
            let d_cov = a / l.denom;
            let d_vj = -a * l.ncc / (2.0 * (l.v_j + NCC_EPS));
            chunk[3 * k] = (d_cov * (-l.m_i) + d_vj * (-2.0 * l.m_j)) / l.cnt;
            chunk[3 * k + 1] = d_vj / l.cnt;
            chunk[3 * k + 2] = d_cov / l.cnt;
        }
    });
    let split = |k: usize| -> Vec<f64> { (0..n).map(|v| coef[3 * v + k]).collect() };
    let b_j = box_sum(&split(0), ext, r);
    let b_jj = box_sum(&split(1), ext, r);
    let b_ij = box_sum(&split(2), ext, r);
    (0..n)
        .map(|u| T::of(b_j[u] + 2.0 * w[u].f64() * b_jj[u] + fixed[u] * b_ij[u]))
        .collect()
}

// ---------------------------------------------------------------------------
// Smoothness

pub(crate) fn smoothness_value<T: Real>(phi: &[T], ext: [usize; 3]) -> f64 {
    let n = ext[0] * ext[1] * ext[2];
    let strides = [1, ext[2], ext[1] * ext[2]];
    let lens = [ext[2], ext[1], ext[0]];
    let mut total = 0.0;
    for comp in 0..3 {
        let p = &phi[comp * n..(comp + 1) * n];
        for b in 0..3 {
            let (st, len) = (strides[b], lens[b]);
            let pairs = n / len * (len - 1);
            let s = par::sum_f64(n, |v| {
                let i = (v / st) % len;
                if i + 1 < len {
                    let d = p[v + st].f64() - p[v].f64();
                    d * d
                } else {
                    0.0
                }
            });
            total += s / pairs as f64;
        }
    }
    total / 9.0
}

pub(crate) fn smoothness_grad<T: Real>(phi: &[T], ext: [usize; 3], g: T) -> Vec<T> {
    let n = ext[0] * ext[1] * ext[2];
    let strides = [1, ext[2], ext[1] * ext[2]];
    let lens = [ext[2], ext[1], ext[0]];
    let mut out = vec![T::zero(); 3 * n];
    par::for_each_chunk_mut(&mut out, n, |comp, gp| {
        let p = &phi[comp * n..(comp + 1) * n];
        for b in 0..3 {
            let (st, len) = (strides[b], lens[b]);
            let pairs = n / len * (len - 1);
            let k = 2.0 * g.f64() / (9.0 * pairs as f64);
            for v in 0..n {
                let i = (v / st) % len;
                if i + 1 < len {
                    let d = T::of(k * (p[v + st].f64() - p[v].f64()));
                    gp[v + st] += d;
                    gp[v] -= d;
                }
            }
        }
    });
    out
}

// ---------------------------------------------------------------------------
// Folding penalty

pub(crate) fn neg_jacobian_value<T: Real>(phi: &[T], ext: [usize; 3]) -> f64 {
    let n = ext[0] * ext[1] * ext[2];
    par::sum_f64(n, |v| {
        let d = jacobian::det3(&jacobian::jacobian_at(phi, ext, v));
        let h = (-d).max(0.0);
        h * h
    }) / n as f64
}

pub(crate) fn neg_jacobian_grad<T: Real>(phi: &[T], ext: [usize; 3], g: T) -> Vec<T> {
    let n = ext[0] * ext[1] * ext[2];
    let strides = [1, ext[2], ext[1] * ext[2]];
    let lens = [ext[2], ext[1], ext[0]];
    // dP/d(dphi_a/daxis_b) per voxel; only folded voxels contribute.
    let sens: Vec<Option<[[f64; 3]; 3]>> = par::map_range(n, |v| {
        let j = jacobian::jacobian_at(phi, ext, v);
        let d = jacobian::det3(&j);
        if d >= 0.0 {
            return None;
        }
        let k = g.f64() * 2.0 * d / n as f64; // d/d det of max(0,-det)^2 = 2 det for det < 0
        let c = jacobian::cofactors(&j);
        Some(c.map(|row| row.map(|x| x * k)))
    });
    let mut out = vec![T::zero(); 3 * n];
    par::for_each_chunk_mut(&mut out, n, |a, gp| {
        for (v, s) in sens.iter().enumerate() {
            let Some(s) = s else { continue };
            let pos = [v % ext[2], (v / ext[2]) % ext[1], v / (ext[1] * ext[2])];
            for b in 0..3 {
                let (m, p, sc) = jacobian::stencil(pos[b], lens[b]);
                let base = v - pos[b] * strides[b];
                let val = T::of(sc * s[a][b]);
                gp[base + p * strides[b]] += val;
                gp[base + m * strides[b]] -= val;
            }
        }
    });
    out
}

// ---------------------------------------------------------------------------
// Tape operators

impl<T: Real> Tape<T> {
    /// `-mean(local NCC(fixed, w))` over `window^3` neighbourhoods.
    pub fn ncc(&mut self, fixed: &[f32], w: Var, window: usize) -> Result<Var> {
        self.check(w)?;
        check_window(window)?;
        let (c, ext) = self.shape(w).as_grid("ncc")?;
        if c != 1 {
            return Err(Error::shape("ncc", "channels", 1, c));
        }
        if fixed.len() != self.value(w).len() {
            return Err(Error::shape("ncc", "voxels", fixed.len(), self.value(w).len()));
        }
        let fixed: Vec<f64> = fixed.iter().map(|&v| v as f64).collect();
        let s = ncc_value(&fixed, self.value(w), ext, window);
        let rg = self.rg(&[w]);
        Ok(self.push(Shape::scalar(), vec![T::of(s)], Op::Ncc { w, fixed, window, exact: s }, rg))
    }

    /// Mean squared forward difference over components and axes.
    pub fn smoothness(&mut self, phi: Var) -> Result<Var> {
        self.check(phi)?;
        let (c, ext) = self.shape(phi).as_grid("smoothness")?;
        if c != 3 {
            return Err(Error::shape("smoothness", "channels", 3, c));
        }
        if ext.iter().any(|&e| e < 2) {
            return Err(Error::invalid("smoothness", "extents must be >= 2"));
        }
        let s = smoothness_value(self.value(phi), ext);
        let rg = self.rg(&[phi]);
        Ok(self.push(Shape::scalar(), vec![T::of(s)], Op::Smoothness { phi, exact: s }, rg))
    }

    /// `mean(max(0, -det J)^2)`.
    pub fn neg_jacobian(&mut self, phi: Var) -> Result<Var> {
        self.check(phi)?;
        let (c, ext) = self.shape(phi).as_grid("negative_jacobian")?;
        if c != 3 {
            return Err(Error::shape("negative_jacobian", "channels", 3, c));
        }
        if ext.iter().any(|&e| e < 3) {
            return Err(Error::invalid("negative_jacobian", "extents must be >= 3"));
        }
        let s = neg_jacobian_value(self.value(phi), ext);
        let rg = self.rg(&[phi]);
        Ok(self.push(Shape::scalar(), vec![T::of(s)], Op::NegJacobian { phi, exact: s }, rg))
    }
}

/// Tape handles of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ncc: Var,
    pub smooth: Var,
    pub diffeo: Var,
    pub weights: LossWeights,
}

impl LossVars {
    /// Term values in 64-bit, with the total recombined from them.
    pub fn values<T: Real>(&self, tape: &Tape<T>) -> LossTerms {
        let get = |v: Var| tape.exact_value(v).unwrap_or_else(|| tape.value(v)[0].f64());
        let (ncc, smooth, diffeo) = (get(self.ncc), get(self.smooth), get(self.diffeo));
        LossTerms {
            total: ncc + self.weights.lambda_smooth * smooth + self.weights.lambda_diffeo * diffeo,
            ncc,
            smooth,
            diffeo,
        }
    }
}

/// Records `S(F, M o phi) + ls * R_smooth(phi) + ld * R_diffeo(phi)`.
pub fn objective_on_tape<T: Real>(
    tape: &mut Tape<T>,
    fixed: &[f32],
    moving: Var,
    phi: Var,
    weights: &LossWeights,
) -> Result<LossVars> {
    let warped = tape.warp(moving, phi)?;
    let ncc = tape.ncc(fixed, warped, weights.ncc_window)?;
    let smooth = tape.smoothness(phi)?;
    let diffeo = tape.neg_jacobian(phi)?;
    let s = tape.scale(smooth, T::of(weights.lambda_smooth))?;
    let d = tape.scale(diffeo, T::of(weights.lambda_diffeo))?;
    let reg = tape.add(s, d)?;
    let total = tape.add(ncc, reg)?;
    Ok(LossVars {
        total,
        ncc,
        smooth,
        diffeo,
        weights: *weights,
    })
}

// ---------------------------------------------------------------------------
// Plain evaluation

fn same_extent(op: &'static str, a: [usize; 3], b: [usize; 3]) -> Result<()> {
    for (d, axis) in ["z", "y", "x"].iter().enumerate() {
        if a[d] != b[d] {
            return Err(Error::shape(op, *axis, a[d], b[d]));
        }
    }
    Ok(())
}

pub fn ncc_dissimilarity(f: &Volume, w: &Volume, window: usize) -> Result<f64> {
    same_extent("ncc", f.extent(), w.extent())?;
    check_window(window)?;
    let fixed: Vec<f64> = f.data().iter().map(|&v| v as f64).collect();
    Ok(ncc_value(&fixed, w.data(), w.extent(), window))
}

pub fn smoothness_penalty(phi: &VectorField) -> Result<f64> {
    if phi.extent().iter().any(|&e| e < 2) {
        return Err(Error::invalid("smoothness", "extents must be >= 2"));
    }
    Ok(smoothness_value(phi.data(), phi.extent()))
}

pub fn negative_jacobian_penalty(phi: &VectorField) -> Result<f64> {
    if phi.extent().iter().any(|&e| e < 3) {
        return Err(Error::invalid("negative_jacobian", "extents must be >= 3"));
    }
    Ok(neg_jacobian_value(phi.data(), phi.extent()))
}

/// Full objective for a velocity (exponentiated first) or a displacement.
pub fn total_loss(
    f: &Volume,
    m: &Volume,
    field: &VectorField,
    weights: &LossWeights,
    squaring_steps: usize,
) -> Result<LossTerms> {
    weights.validate()?;
    same_extent("total_loss", f.extent(), m.extent())?;
    let phi = match field.role() {
        FieldRole::Velocity => field::exp_velocity(field, squaring_steps)?,
        FieldRole::Displacement => field.clone(),
    };
    let w = field::warp(m, &phi)?;
    let ncc = ncc_dissimilarity(f, &w, weights.ncc_window)?;
    let smooth = smoothness_penalty(&phi)?;
    let diffeo = negative_jacobian_penalty(&phi)?;
    Ok(LossTerms {
        total: ncc + weights.lambda_smooth * smooth + weights.lambda_diffeo * diffeo,
        ncc,
        smooth,
        diffeo,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(ext: [usize; 3], seed: u64, scale: f32) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = ext.iter().product();
        Volume::new(ext, [1.0; 3], (0..n).map(|_| rng.random::<f32>() * scale).collect()).unwrap()
    }

    /// Direct windowed statistics, one voxel at a time.
    fn ncc_oracle(f: &Volume, w: &Volume, window: usize) -> f64 {
        let r = (window / 2) as isize;
        let e = f.extent();
        let mut acc = 0.0;
        for z in 0..e[0] {
            for y in 0..e[1] {
                for x in 0..e[2] {
                    let (mut si, mut sj, mut sii, mut sjj, mut sij, mut n) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                    for dz in -r..=r {
                        for dy in -r..=r {
                            for dx in -r..=r {
                                let (zz, yy, xx) = (z as isize + dz, y as isize + dy, x as isize + dx);
                                if zz < 0 || yy < 0 || xx < 0 || zz >= e[0] as isize || yy >= e[1] as isize || xx >= e[2] as isize {
                                    continue;
                                }
                                let a = f.get(zz as usize, yy as usize, xx as usize) as f64;
                                let b = w.get(zz as usize, yy as usize, xx as usize) as f64;
                                si += a;
                                sj += b;
                                sii += a * a;
                                sjj += b * b;
                                sij += a * b;
                                n += 1.0;
                            }
                        }
                    }
                    let (mi, mj) = (si / n, sj / n);
                    let cov = sij / n - mi * mj;
                    let vi = (sii / n - mi * mi).max(0.0);
                    let vj = (sjj / n - mj * mj).max(0.0);
                    acc += cov / ((vi + NCC_EPS) * (vj + NCC_EPS)).sqrt();
                }
            }
        }
        -acc / f.len() as f64
    }

    #[test]
    fn self_similarity_is_minus_one() {
        let f = random_volume([8, 7, 9], 1, 10.0);
        let s = ncc_dissimilarity(&f, &f, 7).unwrap();
        assert!((s + 1.0).abs() < 1e-5, "{s}");
    }

    #[test]
    fn affine_rescaling_is_invisible() {
        let f = random_volume([8, 8, 8], 2, 10.0);
        let w = Volume::new(f.extent(), [1.0; 3], f.data().iter().map(|v| 2.0 * v + 3.0).collect()).unwrap();
        let s = ncc_dissimilarity(&f, &w, 5).unwrap();
        assert!((s + 1.0).abs() < 1e-4, "{s}");
    }

    #[test]
    fn constant_warped_image_has_no_correlation() {
        let f = random_volume([8, 8, 8], 3, 1.0);
        let w = Volume::filled([8, 8, 8], 0.7);
        let s = ncc_dissimilarity(&f, &w, 7).unwrap();
        let o = ncc_oracle(&f, &w, 7);
        assert!(s.abs() < 1e-2, "{s}");
        assert!((s - o).abs() < 1e-9);
    }

    #[test]
    fn box_filter_statistics_match_oracle() {
        let f = random_volume([6, 9, 7], 4, 1.0);
        let w = random_volume([6, 9, 7], 5, 1.0);
        for window in [1, 3, 5, 9] {
            let s = ncc_dissimilarity(&f, &w, window).unwrap();
            let o = ncc_oracle(&f, &w, window);
            assert!((s - o).abs() < 1e-9, "window {window}: {s} vs {o}");
        }
        assert!(ncc_dissimilarity(&f, &w, 4).is_err());
    }

    #[test]
    fn smoothness_of_constant_and_zero_fields() {
        let c = VectorField::from_fn([5, 5, 5], FieldRole::Displacement, |_, _, _| [1.0, -2.0, 0.5]);
        assert_eq!(smoothness_penalty(&c).unwrap(), 0.0);
        let z = VectorField::zeros([5, 5, 5], FieldRole::Displacement);
        assert_eq!(smoothness_penalty(&z).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_of_ramp_is_a_squared_over_nine() {
        let a = 0.3f32;
        let phi = VectorField::from_fn([6, 6, 6], FieldRole::Displacement, |_, _, x| [a * x as f32, 0.0, 0.0]);
        let s = smoothness_penalty(&phi).unwrap();
        assert!((s - (a as f64).powi(2) / 9.0).abs() < 1e-8, "{s}");
    }

    #[test]
    fn folding_penalty_cases() {
        let ext = [8, 8, 8];
        let zero = VectorField::zeros(ext, FieldRole::Displacement);
        assert_eq!(negative_jacobian_penalty(&zero).unwrap(), 0.0);
        let dil = VectorField::from_fn(ext, FieldRole::Displacement, |z, y, x| {
            [0.1 * x as f32, 0.1 * y as f32, 0.1 * z as f32]
        });
        assert_eq!(negative_jacobian_penalty(&dil).unwrap(), 0.0);
        // phi_x = -2x gives det = -1 everywhere (one-sided faces see the same slope).
        let fold = VectorField::from_fn(ext, FieldRole::Displacement, |_, _, x| [-2.0 * x as f32, 0.0, 0.0]);
        let det = field::jacobian_determinant_f64(&fold).unwrap();
        let oracle = det.iter().map(|d| (-d).max(0.0).powi(2)).sum::<f64>() / det.len() as f64;
        let interior = det.iter().filter(|&&d| (d + 1.0).abs() < 1e-9).count() as f64 / det.len() as f64;
        let p = negative_jacobian_penalty(&fold).unwrap();
        assert!((p - oracle).abs() < 1e-12);
        assert!((p - interior).abs() < 1e-9);
    }

    #[test]
    fn total_loss_identity_and_ablation() {
        let f = random_volume([8, 8, 8], 6, 10.0);
        let zero = VectorField::zeros([8, 8, 8], FieldRole::Displacement);
        let t = total_loss(&f, &f, &zero, &LossWeights::default(), 7).unwrap();
        assert!((t.total + 1.0).abs() < 1e-5);

        let m = random_volume([8, 8, 8], 7, 1.0);
        let phi = VectorField::from_fn([8, 8, 8], FieldRole::Displacement, |z, y, x| {
            [(z as f32 * 0.4).sin(), (x as f32 * 0.3).cos() * 0.5, (y as f32 * 0.2).sin() * 0.8]
        });
        let bare = total_loss(&f, &m, &phi, &LossWeights::unregularized(7), 7).unwrap();
        let ncc = ncc_dissimilarity(&f, &field::warp(&m, &phi).unwrap(), 7).unwrap();
        assert_eq!(bare.total, ncc);

        let w = LossWeights::default();
        let full = total_loss(&f, &m, &phi, &w, 7).unwrap();
        let recomposed = ncc
            + w.lambda_smooth * smoothness_penalty(&phi).unwrap()
            + w.lambda_diffeo * negative_jacobian_penalty(&phi).unwrap();
        assert!((full.total - recomposed).abs() < 1e-6);
    }

    #[test]
    fn tape_objective_matches_plain_evaluation() {
        let f = random_volume([8, 8, 8], 8, 1.0);
        let m = random_volume([8, 8, 8], 9, 1.0);
        let phi = VectorField::from_fn([8, 8, 8], FieldRole::Displacement, |z, y, x| {
            [(z as f32 * 0.5).sin() * 1.5, (x as f32 * 0.3).cos(), (y as f32 * 0.7).sin()]
        });
        let w = LossWeights::default();
        let plain = total_loss(&f, &m, &phi, &w, 7).unwrap();
        let mut tape = Tape::<f32>::new();
        let mv = tape.constant(Shape::grid(1, [8, 8, 8]), m.data().to_vec()).unwrap();
        let pv = tape.leaf(Shape::grid(3, [8, 8, 8]), phi.data().to_vec(), true).unwrap();
        let lv = objective_on_tape(&mut tape, f.data(), mv, pv, &w).unwrap();
        let got = lv.values(&tape);
        assert!((got.total - plain.total).abs() < 1e-6);
        assert!((got.ncc - plain.ncc).abs() < 1e-9);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights { ncc_window: 4, ..Default::default() }.validate().is_err());
        assert!(LossWeights { lambda_smooth: -1.0, ..Default::default() }.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
