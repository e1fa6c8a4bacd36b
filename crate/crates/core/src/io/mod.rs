//! File formats, run configuration and image export.

mod config;
mod overlay;
mod volume;

pub use config::{Method, PhantomOptions, RunConfig};
pub use overlay::{overlay_slices, write_ppm, Plane, Rgb};
pub use volume::{
    field_from_raw, mask_from_raw, read_field, read_mask, read_raw, read_volume, volume_from_raw, write_field,
    write_mask, write_raw, write_volume, Payload, RawVolume, VOLUME_MAGIC,
};

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::field::Volume;
use crate::metrics::{LabeledMasks, LesionPair};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    #[default]
    MinMax,
    ZScore,
    None,
}

impl Normalization {
    pub fn as_str(self) -> &'static str {
        match self {
            Normalization::MinMax => "minmax",
            Normalization::ZScore => "zscore",
            Normalization::None => "none",
        }
    }
}

impl fmt::Display for Normalization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "minmax" => Ok(Normalization::MinMax),
            "zscore" => Ok(Normalization::ZScore),
            "none" => Ok(Normalization::None),
            _ => Err(Error::Config(format!("normalize must be minmax, zscore or none, got {s:?}"))),
        }
    }
}

/// Rescales intensities; constant volumes map to zeros under both rescaling modes.
pub fn normalize_intensity(v: &Volume, mode: Normalization) -> Volume {
    let d = v.data();
    let out: Vec<f32> = match mode {
        Normalization::None => return v.clone(),
        Normalization::MinMax => {
            let lo = d.iter().fold(f32::INFINITY, |a, &b| a.min(b)) as f64;
            let hi = d.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            if hi > lo {
                d.iter().map(|&x| ((x as f64 - lo) / (hi - lo)) as f32).collect()
            } else {
                vec![0.0; d.len()]
            }
        }
        Normalization::ZScore => {
            let n = d.len() as f64;
            let mean = d.iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = d.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            if var > 0.0 {
                let sd = var.sqrt();
                d.iter().map(|&x| ((x as f64 - mean) / sd) as f32).collect()
            } else {
                vec![0.0; d.len()]
            }
        }
    };
    Volume::new(v.extent(), v.spacing(), out).expect("same extent, finite values")
}

/// Name of the index file listing the masks of a case directory.
pub const MASK_INDEX: &str = "masks.txt";

/// Writes one mask file per structure plus an index:
///
/// ```text
/// organ <name> <fixed file> <moving file>
/// lesion <id> <moving file> <fixed file | ->
/// ```
pub fn write_labeled_masks(dir: &Path, masks: &LabeledMasks, spacing: [f64; 3]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (k, name) in masks.organ_names.iter().enumerate() {
        let (ff, mf) = (format!("organ_{name}_fixed.nvol"), format!("organ_{name}_moving.nvol"));
        write_mask(&dir.join(&ff), &masks.organs_fixed[k], spacing)?;
        write_mask(&dir.join(&mf), &masks.organs_moving[k], spacing)?;
        index.push_str(&format!("organ {name} {ff} {mf}\n"));
    }
    for l in &masks.lesions {
        let mf = format!("lesion_{}_moving.nvol", l.id);
        write_mask(&dir.join(&mf), &l.moving, spacing)?;
        let ff = match &l.fixed {
            Some(m) => {
                let ff = format!("lesion_{}_fixed.nvol", l.id);
                write_mask(&dir.join(&ff), m, spacing)?;
                ff
            }
            None => "-".to_string(),
        };
        index.push_str(&format!("lesion {} {mf} {ff}\n", l.id));
    }
    fs::write(dir.join(MASK_INDEX), index)?;
    Ok(())
}

pub fn read_labeled_masks(dir: &Path) -> Result<LabeledMasks> {
    let index_path = dir.join(MASK_INDEX);
    let text = fs::read_to_string(&index_path)?;
    let ctx = index_path.display().to_string();
    let mut out = LabeledMasks {
        organ_names: Vec::new(),
        organs_fixed: Vec::new(),
        organs_moving: Vec::new(),
        lesions: Vec::new(),
    };
    for (i, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| Error::Format {
            context: ctx.clone(),
            location: format!("line {}", i + 1),
            msg: msg.to_string(),
        };
        match parts.as_slice() {
            [] => {}
            ["organ", name, ff, mf] => {
                out.organ_names.push(name.to_string());
                out.organs_fixed.push(read_mask(&dir.join(ff))?);
                out.organs_moving.push(read_mask(&dir.join(mf))?);
            }
            ["lesion", id, mf, ff] => {
                let id = id.parse().map_err(|_| bad("lesion id must be an integer"))?;
                let fixed = if *ff == "-" { None } else { Some(read_mask(&dir.join(ff))?) };
                out.lesions.push(LesionPair {
                    id,
                    moving: read_mask(&dir.join(mf))?,
                    fixed,
                });
            }
            _ => return Err(bad("expected `organ <name> <fixed> <moving>` or `lesion <id> <moving> <fixed|->`")),
        }
    }
    Ok(out)
}
