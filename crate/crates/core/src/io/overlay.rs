//! Mid-slice overlays: fixed in green, warped in magenta, written as binary PPM.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::Volume;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Plane {
    /// Constant z, rows along y.
    Axial,
    /// Constant y, rows along z (top is high z).
    Coronal,
    /// Constant x, rows along z (top is high z).
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn as_str(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

/// A packed RGB image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

/// Samples the mid-slice of `v` on `plane` as `(width, height, values)`.
fn slice(v: &Volume, plane: Plane) -> (usize, usize, Vec<f32>) {
    let [nz, ny, nx] = v.extent();
    match plane {
        Plane::Axial => {
            let z = nz / 2;
            (nx, ny, (0..ny).flat_map(|y| (0..nx).map(move |x| (y, x))).map(|(y, x)| v.get(z, y, x)).collect())
        }
        Plane::Coronal => {
            let y = ny / 2;
            (nx, nz, (0..nz).rev().flat_map(|z| (0..nx).map(move |x| (z, x))).map(|(z, x)| v.get(z, y, x)).collect())
        }
        Plane::Sagittal => {
            let x = nx / 2;
            (ny, nz, (0..nz).rev().flat_map(|z| (0..ny).map(move |y| (z, y))).map(|(z, y)| v.get(z, y, x)).collect())
        }
    }
}

fn to_byte(x: f32, lo: f32, hi: f32) -> u8 {
    if hi > lo {
        (((x - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8
    } else {
        0
    }
}

/// Overlays for all three planes. Both volumes share one intensity window so
/// matching structures blend to grey and residual misalignment shows as colour.
pub fn overlay_slices(fixed: &Volume, warped: &Volume) -> Result<Vec<(Plane, Rgb)>> {
    if fixed.extent() != warped.extent() {
        return Err(Error::invalid(
            "overlay",
            format!("extents differ: {:?} vs {:?}", fixed.extent(), warped.extent()),
        ));
    }
    let all = fixed.data().iter().chain(warped.data());
    let lo = all.clone().fold(f32::INFINITY, |a, &b| a.min(b));
    let hi = all.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    Ok(Plane::ALL
        .into_iter()
        .map(|p| {
            let (w, h, f) = slice(fixed, p);
            let (_, _, m) = slice(warped, p);
            let pixels = f
                .iter()
                .zip(&m)
                .map(|(&a, &b)| {
                    let (g, mg) = (to_byte(a, lo, hi), to_byte(b, lo, hi));
                    [mg, g, mg]
                })
                .collect();
            (
                p,
                Rgb {
                    width: w,
                    height: h,
                    pixels,
                },
            )
        })
        .collect())
}

pub fn write_ppm(path: &Path, img: &Rgb) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    for p in &img.pixels {
        w.write_all(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aligned_volumes_give_grey_pixels() {
        let v = Volume::from_fn([4, 5, 6], |z, y, x| (z + y + x) as f32);
        for (_, img) in overlay_slices(&v, &v).unwrap() {
            assert!(img.pixels.iter().all(|p| p[0] == p[1] && p[1] == p[2]));
        }
    }

    #[test]
    fn planes_have_the_expected_shapes_and_orientation() {
        let f = Volume::from_fn([4, 5, 6], |z, _, _| z as f32);
        let w = Volume::filled([4, 5, 6], 0.0);
        let imgs = overlay_slices(&f, &w).unwrap();
        let dims: Vec<(usize, usize)> = imgs.iter().map(|(_, i)| (i.width, i.height)).collect();
        assert_eq!(dims, vec![(6, 5), (6, 4), (5, 4)]);
        // Coronal top row is the highest z: full green, no magenta.
        let cor = &imgs[1].1;
        assert_eq!(cor.pixels[0], [0, 255, 0]);
        assert_eq!(cor.pixels[cor.pixels.len() - 1], [0, 0, 0]);
    }

    #[test]
    fn ppm_has_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let img = Rgb {
            width: 2,
            height: 1,
            pixels: vec![[1, 2, 3], [4, 5, 6]],
        };
        let p = dir.path().join("a.ppm");
        write_ppm(&p, &img).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"P6\n2 1\n255\n\x01\x02\x03\x04\x05\x06");
    }
}
