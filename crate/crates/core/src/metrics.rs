//! Overlap and regularity metrics for a registration result.

use std::io::Write;

use crate::error::{Error, Result};
use crate::field::{self, VectorField, Volume};

/// A binary volume.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    extent: [usize; 3],
    data: Vec<bool>,
}

impl Mask {
    pub fn new(extent: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let n: usize = extent.iter().product();
        if data.len() != n {
            return Err(Error::shape("mask", "voxels", n, data.len()));
        }
        Ok(Mask { extent, data })
    }

    pub fn empty(extent: [usize; 3]) -> Self {
        Mask {
            extent,
            data: vec![false; extent.iter().product()],
        }
    }

    pub fn from_fn(extent: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(extent.iter().product());
        for z in 0..extent[0] {
            for y in 0..extent[1] {
                for x in 0..extent[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Mask { extent, data }
    }

    pub fn extent(&self) -> [usize; 3] {
        self.extent
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    pub fn to_volume(&self) -> Volume {
        Volume::new(self.extent, [1.0; 3], self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
            .expect("sized to extent")
    }

    /// Voxels where `v >= 0.5`.
    pub fn from_volume(v: &Volume) -> Self {
        Mask {
            extent: v.extent(),
            data: v.data().iter().map(|&x| x >= 0.5).collect(),
        }
    }
}

fn same_extent(op: &'static str, a: [usize; 3], b: [usize; 3]) -> Result<()> {
    for (d, axis) in ["z", "y", "x"].iter().enumerate() {
        if a[d] != b[d] {
            return Err(Error::shape(op, *axis, a[d], b[d]));
        }
    }
    Ok(())
}

/// `2|a & b| / (|a| + |b|)`; 1 when both are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    same_extent("dice", a.extent, b.extent)?;
    let (na, nb) = (a.count(), b.count());
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * a.intersection_count(b) as f64 / (na + nb) as f64)
}

/// Trilinear warp of the 0/1 indicator, then threshold at 0.5 (inclusive).
pub fn warp_mask(mask: &Mask, phi: &VectorField) -> Result<Mask> {
    let w = field::warp(&mask.to_volume(), phi)?;
    Ok(Mask::from_volume(&w))
}

/// Denominator used for lesion overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OverlapDenominator {
    #[default]
    Fixed,
    Warped,
    Union,
}

pub fn overlap(fixed: &Mask, warped: &Mask, denom: OverlapDenominator) -> Result<f64> {
    same_extent("overlap", fixed.extent, warped.extent)?;
    let inter = fixed.intersection_count(warped) as f64;
    let d = match denom {
        OverlapDenominator::Fixed => fixed.count(),
        OverlapDenominator::Warped => warped.count(),
        OverlapDenominator::Union => fixed.count() + warped.count() - fixed.intersection_count(warped),
    };
    Ok(if d == 0 { 0.0 } else { inter / d as f64 })
}

/// Percentage of `(fixed, warped)` lesion pairs with overlap above one half.
/// `None` when there are no pairs.
pub fn detection_rate(pairs: &[(&Mask, &Mask)], denom: OverlapDenominator) -> Result<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    let mut hit = 0;
    for (f, w) in pairs {
        if overlap(f, w, denom)? > 0.5 {
            hit += 1;
        }
    }
    Ok(Some(100.0 * hit as f64 / pairs.len() as f64))
}

/// Mean per-lesion shrinkage `max(0, 1 - |warped| / |moving|)` in percent,
/// over `(moving, warped)` pairs of lesions absent at the fixed time point.
pub fn disappearing_rate(vanished: &[(&Mask, &Mask)]) -> Result<Option<f64>> {
    let mut acc = Vec::new();
    for (k, (m, w)) in vanished.iter().enumerate() {
        same_extent("disappearing_rate", m.extent, w.extent)?;
        let nm = m.count();
        if nm == 0 {
            log::warn!("vanished lesion {k} has an empty moving mask; excluded");
            continue;
        }
        acc.push((1.0 - w.count() as f64 / nm as f64).max(0.0));
    }
    if acc.is_empty() {
        return Ok(None);
    }
    Ok(Some(100.0 * acc.iter().sum::<f64>() / acc.len() as f64))
}

/// Population standard deviation of the Jacobian determinant.
pub fn sdjdet(phi: &VectorField) -> Result<f64> {
    let det = field::jacobian_determinant_f64(phi)?;
    Ok(MeanStd::of(&det).std)
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation; zeros for an empty slice.
    pub fn of(v: &[f64]) -> Self {
        if v.is_empty() {
            return MeanStd::default();
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        MeanStd { mean, std: var.sqrt() }
    }
}

/// One lesion across the two time points.
#[derive(Clone, Debug, PartialEq)]
pub struct LesionPair {
    pub id: u32,
    pub moving: Mask,
    /// `None` when the lesion vanished by the fixed time point.
    pub fixed: Option<Mask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledMasks {
    pub organ_names: Vec<String>,
    pub organs_fixed: Vec<Mask>,
    pub organs_moving: Vec<Mask>,
    pub lesions: Vec<LesionPair>,
}

impl LabeledMasks {
    pub fn validate(&self, extent: [usize; 3]) -> Result<()> {
        if self.organs_fixed.len() != self.organ_names.len() || self.organs_moving.len() != self.organ_names.len() {
            return Err(Error::invalid("labeled_masks", "one fixed and one moving mask per organ"));
        }
        let all = self
            .organs_fixed
            .iter()
            .chain(&self.organs_moving)
            .chain(self.lesions.iter().map(|l| &l.moving))
            .chain(self.lesions.iter().filter_map(|l| l.fixed.as_ref()));
        for m in all {
            same_extent("labeled_masks", extent, m.extent)?;
        }
        let mut ids: Vec<u32> = self.lesions.iter().map(|l| l.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("labeled_masks", "lesion ids must be unique"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dice_organs: MeanStd,
    pub dice_lesions: MeanStd,
    pub detection_rate: Option<f64>,
    pub disappearing_rate: Option<f64>,
    pub sdjdet: f64,
}

/// Warps every moving mask by `phi` and scores it against the fixed masks.
pub fn evaluate(masks: &LabeledMasks, phi: &VectorField, denom: OverlapDenominator) -> Result<EvalReport> {
    masks.validate(phi.extent())?;
    let mut organ = Vec::new();
    for (f, m) in masks.organs_fixed.iter().zip(&masks.organs_moving) {
        organ.push(dice(f, &warp_mask(m, phi)?)?);
    }
    let mut present = Vec::new();
    let mut vanished = Vec::new();
    for l in &masks.lesions {
        let w = warp_mask(&l.moving, phi)?;
        match &l.fixed {
            Some(f) => present.push((f, w)),
            None => vanished.push((&l.moving, w)),
        }
    }
    let lesion_dice = present
        .iter()
        .map(|(f, w)| dice(f, w))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<(&Mask, &Mask)> = present.iter().map(|(f, w)| (*f, w)).collect();
    let gone: Vec<(&Mask, &Mask)> = vanished.iter().map(|(m, w)| (*m, w)).collect();
    Ok(EvalReport {
        dice_organs: MeanStd::of(&organ),
        dice_lesions: MeanStd::of(&lesion_dice),
        detection_rate: detection_rate(&pairs, denom)?,
        disappearing_rate: disappearing_rate(&gone)?,
        sdjdet: sdjdet(phi)?,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

pub const REPORT_HEADER: &str =
    "method,dice_organs_mean,dice_organs_std,dice_lesions_mean,dice_lesions_std,detection_rate,disappearing_rate,sdjdet";

/// The seven metric columns of a report row, comma separated.
pub fn report_fields(r: &EvalReport) -> String {
    format!(
        "{:.6},{:.6},{:.6},{:.6},{},{},{:.6}",
        r.dice_organs.mean,
        r.dice_organs.std,
        r.dice_lesions.mean,
        r.dice_lesions.std,
        opt(r.detection_rate),
        opt(r.disappearing_rate),
        r.sdjdet
    )
}

pub fn write_report_csv<W: Write>(mut w: W, rows: &[(String, EvalReport)]) -> Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for (name, r) in rows {
        writeln!(w, "{name},{}", report_fields(r))?;
    }
    Ok(())
}
