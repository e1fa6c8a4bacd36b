//! Synthetic PET-like image pairs with a known deformation and lesion
//! evolution between the two time points.
//!
//! The anatomy is analytic, so the moving image is evaluated directly at
//! `x + exp(-v)(x)` instead of being resampled. Warping it by
//! `phi_gt = exp(v)` then recovers the fixed anatomy up to the inverse
//! consistency of the two exponentials.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::field::{self, FieldRole, VectorField, Volume};
use crate::metrics::{LabeledMasks, LesionPair, Mask};

/// Ellipsoid with a soft edge, in voxel coordinates `(z, y, x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub name: String,
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub intensity: f64,
}

impl Blob {
    /// Approximate signed distance, positive inside.
    fn depth(&self, p: [f64; 3]) -> f64 {
        let mut s = 0.0;
        for d in 0..3 {
            let t = (p[d] - self.center[d]) / self.radii[d];
            s += t * t;
        }
        let rmin = self.radii.iter().copied().fold(f64::INFINITY, f64::min);
        (1.0 - s.sqrt()) * rmin
    }

    fn inside(&self, p: [f64; 3]) -> bool {
        self.depth(p) >= 0.0
    }

    fn soft(&self, p: [f64; 3]) -> f64 {
        1.0 / (1.0 + (-self.depth(p) / EDGE_WIDTH).exp())
    }

    fn fits(&self, extent: [usize; 3]) -> bool {
        (0..3).all(|d| self.center[d] - self.radii[d] >= 0.0 && self.center[d] + self.radii[d] <= (extent[d] - 1) as f64)
    }
}

const EDGE_WIDTH: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Evolution {
    Stable,
    Shrink(f64),
    Grow(f64),
    Vanish,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionSpec {
    pub id: u32,
    pub center: [f64; 3],
    pub radius: f64,
    pub intensity: f64,
    pub evolution: Evolution,
}

impl LesionSpec {
    fn at_moving(&self) -> Blob {
        Blob {
            name: format!("lesion{}", self.id),
            center: self.center,
            radii: [self.radius; 3],
            intensity: self.intensity,
        }
    }

    fn at_fixed(&self) -> Option<Blob> {
        let r = match self.evolution {
            Evolution::Stable => self.radius,
            Evolution::Shrink(f) | Evolution::Grow(f) => self.radius * f,
            Evolution::Vanish => return None,
        };
        Some(Blob {
            radii: [r; 3],
            ..self.at_moving()
        })
    }
}

/// Gaussian velocity bump `amplitude * exp(-|x - c|^2 / (2 width^2))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bump {
    pub center: [f64; 3],
    pub width: f64,
    /// `(dx, dy, dz)` in voxels.
    pub amplitude: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub extent: [usize; 3],
    pub body: Blob,
    /// Small texture blobs inside the body; intensities are offsets.
    pub texture: Vec<Blob>,
    pub organs: Vec<Blob>,
    pub lesions: Vec<LesionSpec>,
    pub bumps: Vec<Bump>,
    /// Standard deviation of the noise added to the moving image, as a
    /// fraction of the peak intensity.
    pub noise: f64,
    pub squaring_steps: usize,
    pub seed: u64,
}

/// Largest displacement of the default deformation, per 64 voxels of extent.
pub const DEFAULT_MAX_DISPLACEMENT: f64 = 4.0;

impl PhantomSpec {
    /// Body with brain- and bladder-like organs, one lesion per evolution
    /// class and six velocity bumps, all placed from `seed`.
    pub fn standard(extent: [usize; 3], seed: u64) -> Result<Self> {
        if extent.iter().any(|&e| e < 16) {
            return Err(Error::Config(format!("phantom extent must be >= 16 per axis, got {extent:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0F_F1E1D);
        let e = extent.map(|v| v as f64);
        let scale = e.iter().copied().fold(f64::INFINITY, f64::min) / 64.0;
        let c = e.map(|v| (v - 1.0) / 2.0);
        let jit = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(-s..s);
        let body = Blob {
            name: "body".into(),
            center: c,
            radii: [0.44 * e[0], 0.36 * e[1], 0.32 * e[2]],
            intensity: 0.25,
        };
        let texture = (0..24)
            .map(|k| {
                let p = random_inside(&mut rng, &body, 0.85);
                Blob {
                    name: format!("texture{k}"),
                    center: p,
                    radii: [rng.random_range(1.5..3.5) * scale.max(0.5); 3],
                    intensity: rng.random_range(-0.12..0.12),
                }
            })
            .collect();
        let brain = Blob {
            name: "brain".into(),
            center: [c[0] + 0.26 * e[0] + jit(&mut rng, 1.5 * scale), c[1] + jit(&mut rng, 2.0 * scale), c[2] + jit(&mut rng, 2.0 * scale)],
            radii: [6.0 * scale, 6.5 * scale, 6.0 * scale],
            intensity: 1.0,
        };
        let bladder = Blob {
            name: "bladder".into(),
            center: [c[0] - 0.24 * e[0] + jit(&mut rng, 1.5 * scale), c[1] + jit(&mut rng, 2.0 * scale), c[2] + jit(&mut rng, 2.0 * scale)],
            radii: [4.5 * scale, 5.0 * scale, 5.0 * scale],
            intensity: 0.8,
        };
        let evolutions = [Evolution::Stable, Evolution::Shrink(0.6), Evolution::Grow(1.4), Evolution::Vanish];
        let mut lesions: Vec<LesionSpec> = Vec::new();
        let margin = 2.0 * scale.min(1.0);
        for (k, ev) in evolutions.into_iter().enumerate() {
            let radius = (rng.random_range(2.5..4.0) * scale).max(1.5);
            // Keep lesions apart from each other and from the organs.
            let mut center = None;
            // The search region widens slowly so small grids still find room.
            for attempt in 0..10_000 {
                let p = random_inside(&mut rng, &body, 0.7 + 0.2 * attempt as f64 / 10_000.0);
                let clear = |b: &Blob| b.depth(p) < -(radius * 1.4 + margin);
                let far = lesions.iter().all(|l| dist(l.center, p) > l.radius * 1.4 + radius * 1.4 + margin);
                if clear(&brain) && clear(&bladder) && far {
                    center = Some(p);
                    break;
                }
            }
            let center = center.ok_or_else(|| Error::Config(format!("no room for lesion {}", k + 1)))?;
            lesions.push(LesionSpec {
                id: k as u32 + 1,
                center,
                radius,
                intensity: 0.9,
                evolution: ev,
            });
        }
        // Two bumps sit on the organs so that they move; the rest roam the body.
        let width = 0.16 * e.iter().copied().fold(f64::INFINITY, f64::min);
        let mut bumps = Vec::new();
        for k in 0..6 {
            let center = match k {
                0 => brain.center,
                1 => bladder.center,
                _ => random_inside(&mut rng, &body, 0.7),
            };
            let mut a: [f64; 3] = [0.0; 3];
            for v in &mut a {
                *v = rng.random_range(-1.0..1.0);
            }
            // Organ bumps get full strength along a random direction.
            let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-6);
            let gain = if k < 2 { 1.0 / norm } else { 0.5 };
            let a = a.map(|v| v * gain);
            bumps.push(Bump {
                center,
                width: width * rng.random_range(0.85..1.2),
                amplitude: a,
            });
        }
        let mut spec = PhantomSpec {
            extent,
            body,
            texture,
            organs: vec![brain, bladder],
            lesions,
            bumps,
            noise: 0.02,
            squaring_steps: field::DEFAULT_SQUARING_STEPS,
            seed,
        };
        spec.normalize_deformation(DEFAULT_MAX_DISPLACEMENT * scale)?;
        Ok(spec)
    }

    /// Rescales the bump amplitudes so that `max |exp(v)|` is `target` voxels.
    pub fn normalize_deformation(&mut self, target: f64) -> Result<()> {
        for _ in 0..4 {
            let phi = field::exp_velocity(&self.velocity(), self.squaring_steps)?;
            let m = phi.max_magnitude();
            if m == 0.0 {
                return Ok(());
            }
            let k = target / m;
            for b in &mut self.bumps {
                b.amplitude = b.amplitude.map(|a| a * k);
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent.iter().any(|&e| e < 4) {
            return Err(Error::Config("phantom extents must be >= 4".into()));
        }
        for b in std::iter::once(&self.body).chain(&self.organs) {
            if !b.fits(self.extent) {
                return Err(Error::Config(format!("{} does not fit inside the grid", b.name)));
            }
            if b.radii.iter().any(|&r| !(r > 0.0)) {
                return Err(Error::Config(format!("{} has a non-positive radius", b.name)));
            }
        }
        for l in &self.lesions {
            if !(l.radius > 0.0) || !l.at_moving().fits(self.extent) {
                return Err(Error::Config(format!("lesion {} does not fit inside the grid", l.id)));
            }
            if let Evolution::Shrink(f) | Evolution::Grow(f) = l.evolution {
                if !(f > 0.0) {
                    return Err(Error::Config(format!("lesion {} has a non-positive growth factor", l.id)));
                }
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be >= 0".into()));
        }
        if self.bumps.iter().any(|b| !(b.width > 0.0)) {
            return Err(Error::Config("bump widths must be positive".into()));
        }
        if self.squaring_steps == 0 {
            return Err(Error::Config("squaring_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Sum of the velocity bumps on the grid.
    pub fn velocity(&self) -> VectorField {
        VectorField::from_fn(self.extent, FieldRole::Velocity, |z, y, x| {
            let p = [z as f64, y as f64, x as f64];
            let mut v = [0.0f64; 3];
            for b in &self.bumps {
                let d2 = (0..3).map(|d| (p[d] - b.center[d]).powi(2)).sum::<f64>();
                let g = (-d2 / (2.0 * b.width * b.width)).exp();
                for a in 0..3 {
                    v[a] += b.amplitude[a] * g;
                }
            }
            v.map(|c| c as f32)
        })
    }

    fn peak(&self) -> f64 {
        self.organs
            .iter()
            .map(|o| o.intensity)
            .chain(self.lesions.iter().map(|l| l.intensity))
            .chain(std::iter::once(self.body.intensity))
            .fold(0.0, f64::max)
    }

    /// Noise-free intensity at a continuous position.
    fn intensity(&self, p: [f64; 3], lesions: &[Blob]) -> f64 {
        let sb = self.body.soft(p);
        let tex: f64 = self
            .texture
            .iter()
            .map(|t| {
                let d2 = (0..3).map(|d| ((p[d] - t.center[d]) / t.radii[d]).powi(2)).sum::<f64>();
                t.intensity * (-0.5 * d2).exp()
            })
            .sum();
        let mut v = sb * (self.body.intensity + tex);
        for b in self.organs.iter().chain(lesions) {
            let s = b.soft(p);
            v = v * (1.0 - s) + s * b.intensity;
        }
        v
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|d| (a[d] - b[d]).powi(2)).sum::<f64>().sqrt()
}

fn random_inside(rng: &mut ChaCha8Rng, b: &Blob, frac: f64) -> [f64; 3] {
    loop {
        let u = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        if u.iter().map(|v: &f64| v * v).sum::<f64>() <= 1.0 {
            return [0, 1, 2].map(|d| b.center[d] + frac * u[d] * b.radii[d]);
        }
    }
}

#[derive(Clone, Debug)]
pub struct PhantomCase {
    pub fixed: Volume,
    pub moving: Volume,
    pub masks: LabeledMasks,
    /// Body region of the fixed image, for endpoint-error statistics.
    pub body_mask: Mask,
    pub velocity_gt: VectorField,
    /// Displacement that maps the moving anatomy onto the fixed one.
    pub phi_gt: VectorField,
}

pub fn generate(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let ext = spec.extent;
    let v = spec.velocity();
    let phi_gt = field::exp_velocity(&v, spec.squaring_steps)?;
    let inverse = field::exp_velocity(&v.scaled(-1.0), spec.squaring_steps)?;

    let fixed_lesions: Vec<Blob> = spec.lesions.iter().filter_map(LesionSpec::at_fixed).collect();
    let moving_lesions: Vec<Blob> = spec.lesions.iter().map(LesionSpec::at_moving).collect();
    let n: usize = ext.iter().product();
    let grid = |k: usize| [k / (ext[1] * ext[2]), (k / ext[2]) % ext[1], k % ext[2]].map(|c| c as f64);
    let pulled = |k: usize| {
        let g = grid(k);
        let d = [inverse.data()[2 * n + k], inverse.data()[n + k], inverse.data()[k]];
        [g[0] + d[0] as f64, g[1] + d[1] as f64, g[2] + d[2] as f64]
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigma = spec.noise * spec.peak();
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut draw = |v: f64| -> f32 {
        if sigma > 0.0 {
            (v + noise.sample(&mut rng)) as f32
        } else {
            v as f32
        }
    };
    // Only the moving image is noisy; the fixed image is the clean anatomy.
    let f_data: Vec<f32> = (0..n).map(|k| spec.intensity(grid(k), &fixed_lesions) as f32).collect();
    let m_data: Vec<f32> = (0..n).map(|k| spec.intensity(pulled(k), &moving_lesions)).collect::<Vec<_>>().into_iter().map(&mut draw).collect();

    let fixed_mask = |b: &Blob| Mask::new(ext, (0..n).map(|k| b.inside(grid(k))).collect()).expect("sized");
    let moving_mask = |b: &Blob| Mask::new(ext, (0..n).map(|k| b.inside(pulled(k))).collect()).expect("sized");
    let masks = LabeledMasks {
        organ_names: spec.organs.iter().map(|o| o.name.clone()).collect(),
        organs_fixed: spec.organs.iter().map(fixed_mask).collect(),
        organs_moving: spec.organs.iter().map(moving_mask).collect(),
        lesions: spec
            .lesions
            .iter()
            .map(|l| LesionPair {
                id: l.id,
                moving: moving_mask(&l.at_moving()),
                fixed: l.at_fixed().map(|b| fixed_mask(&b)),
            })
            .collect(),
    };
    Ok(PhantomCase {
        fixed: Volume::new(ext, [1.0; 3], f_data)?,
        moving: Volume::new(ext, [1.0; 3], m_data)?,
        body_mask: fixed_mask(&spec.body),
        masks,
        velocity_gt: v,
        phi_gt,
    })
}

/// Mean and 95th-percentile endpoint error inside `mask`; `None` for an empty mask.
pub fn field_error(phi_est: &VectorField, phi_gt: &VectorField, mask: &Mask) -> Result<Option<(f64, f64)>> {
    let ext = phi_gt.extent();
    for (d, axis) in ["z", "y", "x"].iter().enumerate() {
        if phi_est.extent()[d] != ext[d] {
            return Err(Error::shape("field_error", *axis, ext[d], phi_est.extent()[d]));
        }
        if mask.extent()[d] != ext[d] {
            return Err(Error::shape("field_error", *axis, ext[d], mask.extent()[d]));
        }
    }
    let n = phi_gt.voxels();
    let (a, b) = (phi_est.data(), phi_gt.data());
    let mut errs: Vec<f64> = (0..n)
        .filter(|&v| mask.data()[v])
        .map(|v| {
            (0..3)
                .map(|c| (a[c * n + v] as f64 - b[c * n + v] as f64).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    if errs.is_empty() {
        return Ok(None);
    }
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    errs.sort_by(f64::total_cmp);
    let rank = ((0.95 * errs.len() as f64).ceil() as usize).clamp(1, errs.len());
    Ok(Some((mean, errs[rank - 1])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dice;

    #[test]
    fn static_noise_free_case_is_identical() {
        let mut spec = PhantomSpec::standard([32, 32, 32], 1).unwrap();
        for b in &mut spec.bumps {
            b.amplitude = [0.0; 3];
        }
        spec.noise = 0.0;
        for l in &mut spec.lesions {
            l.evolution = Evolution::Stable;
        }
        let c = generate(&spec).unwrap();
        assert_eq!(c.fixed, c.moving);
    }

    #[test]
    fn generation_is_deterministic() {
        let s = PhantomSpec::standard([32, 32, 32], 7).unwrap();
        let a = generate(&s).unwrap();
        let b = generate(&PhantomSpec::standard([32, 32, 32], 7).unwrap()).unwrap();
        assert_eq!(a.fixed, b.fixed);
        assert_eq!(a.moving, b.moving);
        assert_eq!(a.phi_gt, b.phi_gt);
    }

    #[test]
    fn ground_truth_is_folding_free_and_sized() {
        for seed in 0..3 {
            let s = PhantomSpec::standard([32, 32, 32], seed).unwrap();
            let c = generate(&s).unwrap();
            let det = field::jacobian_determinant_f64(&c.phi_gt).unwrap();
            assert!(det.iter().all(|&d| d > 0.0));
            let m = c.phi_gt.max_magnitude();
            assert!((m - 2.0).abs() < 0.1, "{m}");
        }
    }

    #[test]
    fn lesion_masks_follow_evolution_tags() {
        let c = generate(&PhantomSpec::standard([32, 32, 32], 3).unwrap()).unwrap();
        let spec = PhantomSpec::standard([32, 32, 32], 3).unwrap();
        for (l, s) in c.masks.lesions.iter().zip(&spec.lesions) {
            match s.evolution {
                Evolution::Vanish => assert!(l.fixed.is_none()),
                Evolution::Shrink(_) => assert!(l.fixed.as_ref().unwrap().count() < l.moving.count()),
                Evolution::Grow(_) => assert!(l.fixed.as_ref().unwrap().count() > l.moving.count()),
                Evolution::Stable => assert!(l.fixed.as_ref().unwrap().count() > 0),
            }
        }
    }

    #[test]
    fn ground_truth_warp_realigns_organs() {
        let c = generate(&PhantomSpec::standard([32, 32, 32], 2).unwrap()).unwrap();
        for (f, m) in c.masks.organs_fixed.iter().zip(&c.masks.organs_moving) {
            let before = dice(f, m).unwrap();
            let after = dice(f, &crate::metrics::warp_mask(m, &c.phi_gt).unwrap()).unwrap();
            assert!(after > before && after > 0.9, "{before} -> {after}");
        }
    }

    #[test]
    fn field_error_cases() {
        let ext = [6, 6, 6];
        let gt = VectorField::from_fn(ext, FieldRole::Displacement, |z, _, x| [0.1 * z as f32, 0.2, -(x as f32) * 0.05]);
        let all = Mask::from_fn(ext, |_, _, _| true);
        assert_eq!(field_error(&gt, &gt, &all).unwrap(), Some((0.0, 0.0)));
        let shifted = VectorField::from_fn(ext, FieldRole::Displacement, |z, _, x| [0.1 * z as f32 + 1.0, 0.2, -(x as f32) * 0.05]);
        let (mean, _) = field_error(&shifted, &gt, &all).unwrap().unwrap();
        assert!((mean - 1.0).abs() < 1e-6);
        assert_eq!(field_error(&gt, &gt, &Mask::empty(ext)).unwrap(), None);
    }

    #[test]
    fn field_error_matches_folded_normal_mean() {
        let ext = [24, 24, 24];
        let s = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let normal = Normal::new(0.0, s).unwrap();
        let gt = VectorField::zeros(ext, FieldRole::Displacement);
        let n = gt.voxels();
        let mut data = vec![0.0f32; 3 * n];
        for v in data[..n].iter_mut() {
            *v = normal.sample(&mut rng) as f32;
        }
        let est = VectorField::new(ext, FieldRole::Displacement, data).unwrap();
        let (mean, _) = field_error(&est, &gt, &Mask::from_fn(ext, |_, _, _| true)).unwrap().unwrap();
        let expected = s * (2.0 / std::f64::consts::PI).sqrt();
        assert!((mean / expected - 1.0).abs() < 0.05, "{mean} vs {expected}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = PhantomSpec::standard([32, 32, 32], 0).unwrap();
        s.organs[0].radii[0] = 40.0;
        assert!(generate(&s).is_err());
        assert!(PhantomSpec::standard([8, 32, 32], 0).is_err());
    }
}
