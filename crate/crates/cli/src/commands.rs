use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use dipreg::autodiff::suite::run_suite;
use dipreg::field::{self, FieldRole, VectorField, Volume};
use dipreg::io::{self, Method, RunConfig};
use dipreg::metrics::{evaluate, write_report_csv, LabeledMasks};
use dipreg::optim::{register_direct, register_net_prior, summarize_trace, write_trace_csv};
use dipreg::phantom::{field_error, generate};

use crate::ablate::{default_lattice, run_lattice, write_ablation_csv, Variant};
use crate::{NumericFailure, UsageError};

pub const CONFIG_ECHO: &str = "config.txt";

/// Sets the global worker count; 0 keeps the default.
pub fn configure_threads(threads: usize) -> anyhow::Result<()> {
    #[cfg(feature = "parallel")]
    if threads > 0 {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> anyhow::Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(&cfg.out_dir)
}

fn echo_config(cfg: &RunConfig) -> anyhow::Result<()> {
    let p = out_dir(cfg)?.join(CONFIG_ECHO);
    fs::write(&p, cfg.to_text()).with_context(|| format!("writing {}", p.display()))?;
    Ok(())
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> anyhow::Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| UsageError(format!("missing `{key}`; pass --set {key}=PATH")).into())
}

fn load_volume(p: &Path, what: &str) -> anyhow::Result<Volume> {
    io::read_volume(p).with_context(|| format!("reading {what} volume {}", p.display()))
}

fn create(p: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?))
}

/// Writes a phantom case: images, ground truth, body mask and labeled masks.
pub fn phantom(cfg: &RunConfig) -> anyhow::Result<()> {
    let spec = cfg.phantom.spec(cfg.schedule.squaring_steps)?;
    let case = generate(&spec)?;
    let dir = out_dir(cfg)?;
    io::write_volume(&dir.join("fixed.nvol"), &case.fixed)?;
    io::write_volume(&dir.join("moving.nvol"), &case.moving)?;
    io::write_field(&dir.join("phi_gt.nvol"), &case.phi_gt)?;
    io::write_field(&dir.join("velocity_gt.nvol"), &case.velocity_gt)?;
    io::write_mask(&dir.join("body_mask.nvol"), &case.body_mask, case.fixed.spacing())?;
    io::write_labeled_masks(&dir.join("masks"), &case.masks, case.fixed.spacing())?;
    echo_config(cfg)?;
    let base = evaluate(
        &case.masks,
        &VectorField::zeros(case.fixed.extent(), FieldRole::Displacement),
        cfg.overlap_denominator,
    )?;
    log::info!(
        "phantom written to {} (unregistered organ Dice {:.3}, max displacement {:.2} voxels)",
        dir.display(),
        base.dice_organs.mean,
        case.phi_gt.max_magnitude()
    );
    Ok(())
}

pub fn register(cfg: &RunConfig) -> anyhow::Result<()> {
    let fixed = load_volume(required(&cfg.fixed, "fixed")?, "fixed")?;
    let moving = load_volume(required(&cfg.moving, "moving")?, "moving")?;
    let init = match &cfg.init_field {
        Some(p) => Some(
            io::read_field(p, FieldRole::Displacement).with_context(|| format!("reading initial field {}", p.display()))?,
        ),
        None => None,
    };
    let masks = match &cfg.masks {
        Some(p) => Some(io::read_labeled_masks(p).with_context(|| format!("reading masks from {}", p.display()))?),
        None => None,
    };
    let f = io::normalize_intensity(&fixed, cfg.normalize);
    let m = io::normalize_intensity(&moving, cfg.normalize);
    let dir = out_dir(cfg)?.to_path_buf();
    echo_config(cfg)?;

    let result = match cfg.method {
        Method::NetPrior => register_net_prior(&f, &m, &cfg.net, &cfg.schedule, init.as_ref())?,
        Method::Direct => {
            if init.is_some() {
                return Err(UsageError("init_field is only supported with method=net_prior".into()).into());
            }
            register_direct(&f, &m, &cfg.schedule)?
        }
    };
    let phi = &result.displacement;
    io::write_field(&dir.join("displacement.nvol"), phi)?;
    io::write_volume(&dir.join("warped.nvol"), &field::warp(&moving, phi)?)?;
    write_trace_csv(create(&dir.join("loss.csv"))?, &result.loss_trace)?;
    let depth = result.level_snapshots.len();
    for (k, snap) in result.level_snapshots.iter().enumerate().take(depth.saturating_sub(1)) {
        io::write_field(&dir.join(format!("displacement_level{}.nvol", k + 1)), snap)?;
    }
    if let Some(net) = &result.network {
        net.save(create(&dir.join("network.nprm"))?)?;
    }
    for s in summarize_trace(&result.loss_trace) {
        log::info!(
            "level {}: loss {:.5} -> {:.5} (best {:.5} at iteration {})",
            s.level,
            s.start_loss,
            s.end_loss,
            s.best_loss,
            s.best_iteration
        );
    }
    if let Some(masks) = &masks {
        let report = evaluate(masks, phi, cfg.overlap_denominator)?;
        write_report_csv(create(&dir.join("report.csv"))?, &[(cfg.method.to_string(), report)])?;
    }
    log::info!("registration finished in {:.1} s", result.wall_time);
    Ok(())
}

pub fn eval(cfg: &RunConfig, label: Option<&str>) -> anyhow::Result<()> {
    let masks_dir = required(&cfg.masks, "masks")?;
    let masks: LabeledMasks =
        io::read_labeled_masks(masks_dir).with_context(|| format!("reading masks from {}", masks_dir.display()))?;
    let extent = masks
        .organs_fixed
        .first()
        .map(|m| m.extent())
        .or_else(|| masks.lesions.first().map(|l| l.moving.extent()))
        .ok_or_else(|| UsageError("mask index lists no structures".into()))?;
    let (phi, default_label) = match &cfg.displacement {
        Some(p) => (
            io::read_field(p, FieldRole::Displacement).with_context(|| format!("reading displacement {}", p.display()))?,
            cfg.method.to_string(),
        ),
        None => (VectorField::zeros(extent, FieldRole::Displacement), "identity".to_string()),
    };
    let report = evaluate(&masks, &phi, cfg.overlap_denominator)?;
    let dir = out_dir(cfg)?;
    let name = label.map(str::to_string).unwrap_or(default_label);
    write_report_csv(create(&dir.join("report.csv"))?, &[(name, report.clone())])?;
    write_report_csv(std::io::stdout().lock(), &[(label.unwrap_or("result").to_string(), report)])?;
    echo_config(cfg)?;
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig, seeds: u64) -> anyhow::Result<()> {
    let start = Instant::now();
    let reports = run_suite(seeds)?;
    let dir = out_dir(cfg)?;
    let mut csv = String::from("case,max_relative_error,tolerance,passed\n");
    let mut failed = Vec::new();
    for r in &reports {
        csv.push_str(&format!("{},{:.3e},{:.0e},{}\n", r.name, r.max_error(), r.tolerance, r.passed()));
        if !r.passed() {
            failed.push(r.name.clone());
        }
    }
    fs::write(dir.join("gradcheck.csv"), csv)?;
    log::info!(
        "{} checks over {seeds} seeds in {:.1} s, {} failed",
        reports.len(),
        start.elapsed().as_secs_f64(),
        failed.len()
    );
    if !failed.is_empty() {
        return Err(NumericFailure(format!("gradient check failed for {}", failed.join(", "))).into());
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig, variants: &[String]) -> anyhow::Result<()> {
    let lattice: Vec<Variant> = if variants.is_empty() {
        default_lattice(cfg.net.depth)
    } else {
        variants
            .iter()
            .map(|v| v.parse().map_err(|e: anyhow::Error| UsageError(e.to_string()).into()))
            .collect::<anyhow::Result<_>>()?
    };
    let (f, m, masks) = match (&cfg.fixed, &cfg.moving, &cfg.masks) {
        (Some(fp), Some(mp), Some(kp)) => (load_volume(fp, "fixed")?, load_volume(mp, "moving")?, io::read_labeled_masks(kp)?),
        (None, None, None) => {
            let case = generate(&cfg.phantom.spec(cfg.schedule.squaring_steps)?)?;
            (case.fixed, case.moving, case.masks)
        }
        _ => {
            return Err(UsageError("ablate needs all of fixed, moving and masks, or none of them for a phantom".into()).into())
        }
    };
    let f = io::normalize_intensity(&f, cfg.normalize);
    let m = io::normalize_intensity(&m, cfg.normalize);
    echo_config(cfg)?;
    let rows = run_lattice(cfg, &f, &m, &masks, &lattice)?;
    write_ablation_csv(create(&out_dir(cfg)?.join("ablation.csv"))?, &rows)?;
    Ok(())
}

pub fn overlay(cfg: &RunConfig) -> anyhow::Result<()> {
    let fixed = load_volume(required(&cfg.fixed, "fixed")?, "fixed")?;
    let warped = match (&cfg.warped, &cfg.moving, &cfg.displacement) {
        (Some(w), _, _) => load_volume(w, "warped")?,
        (None, Some(mp), Some(dp)) => {
            let m = load_volume(mp, "moving")?;
            let phi = io::read_field(dp, FieldRole::Displacement)?;
            field::warp(&m, &phi)?
        }
        (None, Some(mp), None) => load_volume(mp, "moving")?,
        _ => return Err(UsageError("overlay needs `warped`, or `moving` with an optional `displacement`".into()).into()),
    };
    let dir = out_dir(cfg)?;
    for (plane, img) in io::overlay_slices(&fixed, &warped)? {
        io::write_ppm(&dir.join(format!("overlay_{}.ppm", plane.as_str())), &img)?;
    }
    echo_config(cfg)?;
    Ok(())
}

/// Endpoint error of a displacement file against a phantom ground truth, for logs.
pub fn endpoint_error(phi: &VectorField, gt: &VectorField, body: &dipreg::metrics::Mask) -> anyhow::Result<(f64, f64)> {
    field_error(phi, gt, body)?.ok_or_else(|| UsageError("empty body mask".into()).into())
}
