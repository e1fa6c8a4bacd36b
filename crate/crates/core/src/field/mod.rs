//! Volumes, displacement/velocity fields and the spatial transforms built on them.
//!
//! Grids are stored x-fastest with extents ordered `[z, y, x]`. Vector fields
//! are channel-planar `[dx, dy, dz]` in voxel units; spacing is carried along
//! for reporting and file output only.

pub(crate) mod jacobian;
pub(crate) mod sample;

use crate::autodiff::{Real, ResizeFactor, Shape, Tape, Var};
use crate::error::{Error, Result};

/// Default number of squaring steps for the velocity exponential.
pub const DEFAULT_SQUARING_STEPS: usize = 7;

fn check_extent(op: &'static str, extent: [usize; 3]) -> Result<()> {
    if extent.iter().any(|&e| e == 0) {
        return Err(Error::invalid(op, format!("extents must be >= 1, got {extent:?}")));
    }
    Ok(())
}

fn check_spacing(op: &'static str, spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(op, format!("spacing must be positive, got {spacing:?}")));
    }
    Ok(())
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(op, format!("non-finite value at element {i}")));
    }
    Ok(())
}

fn check_same_extent(op: &'static str, a: [usize; 3], b: [usize; 3]) -> Result<()> {
    for (d, axis) in ["z", "y", "x"].iter().enumerate() {
        if a[d] != b[d] {
            return Err(Error::shape(op, *axis, a[d], b[d]));
        }
    }
    Ok(())
}

/// A 3D scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    extent: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(extent: [usize; 3], spacing: [f64; 3], data: Vec<f32>) -> Result<Self> {
        check_extent("volume", extent)?;
        check_spacing("volume", spacing)?;
        let n: usize = extent.iter().product();
        if data.len() != n {
            return Err(Error::shape("volume", "payload", n, data.len()));
        }
        check_finite("volume", &data)?;
        Ok(Volume {
            extent,
            spacing,
            data,
        })
    }

    pub fn filled(extent: [usize; 3], value: f32) -> Self {
        Volume {
            extent,
            spacing: [1.0; 3],
            data: vec![value; extent.iter().product()],
        }
    }

    /// Builds a volume by evaluating `f(z, y, x)` at every voxel.
    pub fn from_fn(extent: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(extent.iter().product());
        for z in 0..extent[0] {
            for y in 0..extent[1] {
                for x in 0..extent[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Volume {
            extent,
            spacing: [1.0; 3],
            data,
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_spacing("volume", spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    /// Extents `[z, y, x]`.
    pub fn extent(&self) -> [usize; 3] {
        self.extent
    }

    /// Spacing in mm, `[z, y, x]`.
    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.extent[1] + y) * self.extent[2] + x
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Corner-aligned trilinear downsampling by one half per axis.
    pub fn halve(&self) -> Volume {
        let plan = crate::autodiff::ResizePlan::new(1, self.extent, self.extent.map(|e| ResizeFactor::Half.apply(e)));
        let data = plan.apply(&self.data);
        Volume {
            extent: plan.output(),
            spacing: self.spacing.map(|s| s * 2.0),
            data,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldRole {
    Velocity,
    Displacement,
}

/// A 3-component vector field in voxel units.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    extent: [usize; 3],
    spacing: [f64; 3],
    role: FieldRole,
    data: Vec<f32>,
}

impl VectorField {
    /// `data` holds the x, y and z component planes in that order.
    pub fn new(extent: [usize; 3], role: FieldRole, data: Vec<f32>) -> Result<Self> {
        check_extent("vector_field", extent)?;
        let n: usize = extent.iter().product();
        if data.len() != 3 * n {
            return Err(Error::shape("vector_field", "payload", 3 * n, data.len()));
        }
        check_finite("vector_field", &data)?;
        Ok(VectorField {
            extent,
            spacing: [1.0; 3],
            role,
            data,
        })
    }

    pub fn zeros(extent: [usize; 3], role: FieldRole) -> Self {
        VectorField {
            extent,
            spacing: [1.0; 3],
            role,
            data: vec![0.0; 3 * extent.iter().product::<usize>()],
        }
    }

    /// Builds a field from `f(z, y, x) -> [dx, dy, dz]`.
    pub fn from_fn(extent: [usize; 3], role: FieldRole, f: impl Fn(usize, usize, usize) -> [f32; 3]) -> Self {
        let n: usize = extent.iter().product();
        let mut data = vec![0.0; 3 * n];
        let mut v = 0;
        for z in 0..extent[0] {
            for y in 0..extent[1] {
                for x in 0..extent[2] {
                    let d = f(z, y, x);
                    data[v] = d[0];
                    data[n + v] = d[1];
                    data[2 * n + v] = d[2];
                    v += 1;
                }
            }
        }
        VectorField {
            extent,
            spacing: [1.0; 3],
            role,
            data,
        }
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Result<Self> {
        check_spacing("vector_field", spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn extent(&self) -> [usize; 3] {
        self.extent
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn role(&self) -> FieldRole {
        self.role
    }

    pub fn with_role(mut self, role: FieldRole) -> Self {
        self.role = role;
        self
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn voxels(&self) -> usize {
        self.extent.iter().product()
    }

    /// `[dx, dy, dz]` at a voxel.
    pub fn at(&self, z: usize, y: usize, x: usize) -> [f32; 3] {
        let n = self.voxels();
        let v = (z * self.extent[1] + y) * self.extent[2] + x;
        [self.data[v], self.data[n + v], self.data[2 * n + v]]
    }

    /// Component plane: 0 = x, 1 = y, 2 = z.
    pub fn component(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn scaled(&self, k: f32) -> VectorField {
        VectorField {
            data: self.data.iter().map(|&v| v * k).collect(),
            ..self.clone()
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        let n = self.voxels();
        (0..n)
            .map(|v| {
                let (a, b, c) = (self.data[v] as f64, self.data[n + v] as f64, self.data[2 * n + v] as f64);
                (a * a + b * b + c * c).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// `W(x) = m(x + phi(x))` with trilinear interpolation.
pub fn warp(m: &Volume, phi: &VectorField) -> Result<Volume> {
    check_same_extent("warp", m.extent, phi.extent)?;
    let data = sample::resample_forward(&m.data, 1, m.extent, &phi.data);
    Ok(Volume {
        extent: m.extent,
        spacing: m.spacing,
        data,
    })
}

/// `result(x) = inner(x) + outer(x + inner(x))`, i.e. apply `inner` then `outer`.
pub fn compose(outer: &VectorField, inner: &VectorField) -> Result<VectorField> {
    check_same_extent("compose", outer.extent, inner.extent)?;
    let sampled = sample::resample_forward(&outer.data, 3, outer.extent, &inner.data);
    let data = inner.data.iter().zip(&sampled).map(|(a, b)| a + b).collect();
    Ok(VectorField {
        extent: inner.extent,
        spacing: inner.spacing,
        role: FieldRole::Displacement,
        data,
    })
}

/// Scaling and squaring: `phi = v / 2^s`, then `phi = phi o phi` `s` times.
pub fn exp_velocity(v: &VectorField, squaring_steps: usize) -> Result<VectorField> {
    if squaring_steps == 0 {
        return Err(Error::invalid("exp_velocity", "squaring_steps must be >= 1"));
    }
    let mut phi = v.scaled(0.5f32.powi(squaring_steps as i32));
    for _ in 0..squaring_steps {
        phi = compose(&phi, &phi)?;
    }
    phi.role = FieldRole::Displacement;
    Ok(phi)
}

/// Doubles the grid and the vector magnitudes.
pub fn upsample_field(phi: &VectorField) -> VectorField {
    let to = phi.extent.map(|e| ResizeFactor::Double.apply(e));
    let plan = crate::autodiff::ResizePlan::new(3, phi.extent, to);
    let data = plan.apply(&phi.data).into_iter().map(|v| v * 2.0).collect();
    VectorField {
        extent: to,
        spacing: phi.spacing.map(|s| s / 2.0),
        role: phi.role,
        data,
    }
}

/// Per-voxel Jacobian determinant of `x -> x + phi(x)`, in 64-bit.
pub fn jacobian_determinant_f64(phi: &VectorField) -> Result<Vec<f64>> {
    if phi.extent.iter().any(|&e| e < 3) {
        return Err(Error::invalid(
            "jacobian_determinant",
            format!("extents must be >= 3, got {:?}", phi.extent),
        ));
    }
    Ok(jacobian::determinants(&phi.data, phi.extent))
}

/// Per-voxel Jacobian determinant as a volume.
pub fn jacobian_determinant(phi: &VectorField) -> Result<Volume> {
    let det = jacobian_determinant_f64(phi)?;
    Ok(Volume {
        extent: phi.extent,
        spacing: phi.spacing,
        data: det.into_iter().map(|d| d as f32).collect(),
    })
}

impl<T: Real> Tape<T> {
    /// Samples every channel of `src` at `x + disp(x)`.
    pub fn resample(&mut self, src: Var, disp: Var) -> Result<Var> {
        self.check(src)?;
        self.check(disp)?;
        let (c, ext) = self.shape(src).as_grid("resample")?;
        let (dc, dext) = self.shape(disp).as_grid("resample")?;
        if dc != 3 {
            return Err(Error::shape("resample", "displacement channels", 3, dc));
        }
        check_same_extent("resample", ext, dext)?;
        let value = sample::resample_forward(self.value(src), c, ext, self.value(disp));
        let rg = self.rg(&[src, disp]);
        Ok(self.push(Shape::grid(c, ext), value, crate::autodiff::Op::Resample { src, disp }, rg))
    }

    pub fn warp(&mut self, image: Var, phi: Var) -> Result<Var> {
        self.resample(image, phi)
    }

    /// Tape version of [`compose`].
    pub fn compose(&mut self, outer: Var, inner: Var) -> Result<Var> {
        let s = self.resample(outer, inner)?;
        self.add(inner, s)
    }

    /// Tape version of [`exp_velocity`].
    pub fn exp_velocity(&mut self, v: Var, squaring_steps: usize) -> Result<Var> {
        if squaring_steps == 0 {
            return Err(Error::invalid("exp_velocity", "squaring_steps must be >= 1"));
        }
        let mut phi = self.scale(v, T::of(0.5f64.powi(squaring_steps as i32)))?;
        for _ in 0..squaring_steps {
            phi = self.compose(phi, phi)?;
        }
        Ok(phi)
    }

    /// Tape version of [`upsample_field`].
    pub fn upsample_field(&mut self, phi: Var) -> Result<Var> {
        let r = self.trilinear_resize(phi, ResizeFactor::Double)?;
        self.scale(r, T::of(2.0))
    }
}
