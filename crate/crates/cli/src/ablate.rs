//! The ablation lattice: network depth, level truncation, block and
//! resampling variants, no registration penalties, and no network at all.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use anyhow::{bail, Context};
use dipreg::field::Volume;
use dipreg::io::RunConfig;
use dipreg::losses::LossWeights;
use dipreg::metrics::{evaluate, report_fields, EvalReport, LabeledMasks};
use dipreg::net::{DownMode, NetConfig, UpMode};
use dipreg::optim::{register_direct, register_net_prior, RegistrationResult, ScheduleConfig};

pub const ABLATION_HEADER: &str = "config_id,dice_organs_mean,dice_organs_std,dice_lesions_mean,dice_lesions_std,\
detection_rate,disappearing_rate,sdjdet,iterations,seconds";

/// Largest depth in the depth sweep.
pub const MAX_DEPTH: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Full network of the given depth.
    Depth(usize),
    /// Base-depth network evaluated after its first `k` levels.
    Level(usize),
    /// Residual blocks without their skip connection.
    NoResidual,
    /// Max pooling and trilinear upsampling instead of learned resampling.
    PoolUpsample,
    /// Both registration penalties switched off.
    NoRegularization,
    /// Direct optimization of the velocity field, no network.
    Direct,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Depth(d) => write!(f, "depth_{d}"),
            Variant::Level(k) => write!(f, "level_{k}"),
            Variant::NoResidual => f.write_str("no_residual"),
            Variant::PoolUpsample => f.write_str("pool_upsample"),
            Variant::NoRegularization => f.write_str("no_regularization"),
            Variant::Direct => f.write_str("direct"),
        }
    }
}

impl FromStr for Variant {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> anyhow::Result<Self> {
        let num = |p: &str| -> anyhow::Result<usize> {
            let k: usize = p.parse().with_context(|| format!("bad variant {s:?}"))?;
            if k == 0 {
                bail!("bad variant {s:?}: levels start at 1");
            }
            Ok(k)
        };
        Ok(match s {
            "no_residual" => Variant::NoResidual,
            "pool_upsample" => Variant::PoolUpsample,
            "no_regularization" => Variant::NoRegularization,
            "direct" => Variant::Direct,
            _ => {
                if let Some(d) = s.strip_prefix("depth_") {
                    Variant::Depth(num(d)?)
                } else if let Some(k) = s.strip_prefix("level_") {
                    Variant::Level(num(k)?)
                } else {
                    bail!("unknown variant {s:?}")
                }
            }
        })
    }
}

/// Every variant for a base network of depth `base_depth`.
pub fn default_lattice(base_depth: usize) -> Vec<Variant> {
    let mut v: Vec<Variant> = (1..=MAX_DEPTH.max(base_depth)).map(Variant::Depth).collect();
    v.extend((1..base_depth).map(Variant::Level));
    v.extend([
        Variant::NoResidual,
        Variant::PoolUpsample,
        Variant::NoRegularization,
        Variant::Direct,
    ]);
    v
}

/// Schedule for a network of depth `depth` derived from the base schedule:
/// coarse levels take the base's first entry and the finest its last.
pub fn schedule_for_depth(base: &ScheduleConfig, depth: usize) -> ScheduleConfig {
    let its = &base.iters_per_level;
    let mut iters = vec![its[0]; depth];
    iters[depth - 1] = *its.last().expect("validated non-empty");
    if depth == its.len() {
        iters = its.clone();
    }
    ScheduleConfig {
        iters_per_level: iters,
        ..base.clone()
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub id: String,
    pub report: EvalReport,
    pub iterations: usize,
    pub seconds: f64,
}

fn row(id: String, r: &RegistrationResult, level: usize, iterations: usize, masks: &LabeledMasks, cfg: &RunConfig) -> anyhow::Result<AblationRow> {
    let phi = &r.level_snapshots[level - 1];
    Ok(AblationRow {
        id,
        report: evaluate(masks, phi, cfg.overlap_denominator)?,
        iterations,
        seconds: r.level_seconds[level - 1],
    })
}

/// Runs `variants` in order on one pair. The base-depth network is fitted
/// once and shared by its `depth_` row and every `level_` row.
pub fn run_lattice(
    cfg: &RunConfig,
    f: &Volume,
    m: &Volume,
    masks: &LabeledMasks,
    variants: &[Variant],
) -> anyhow::Result<Vec<AblationRow>> {
    let base_depth = cfg.net.depth;
    let mut base: Option<RegistrationResult> = None;
    let fit = |net: NetConfig, sched: ScheduleConfig| -> anyhow::Result<RegistrationResult> {
        Ok(register_net_prior(f, m, &net, &sched, None)?)
    };
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        log::info!("ablation variant {v}");
        let id = v.to_string();
        let shared_level = match v {
            Variant::Depth(d) if d == base_depth => Some(base_depth),
            Variant::Level(k) if k < base_depth => Some(k),
            Variant::Level(_) => bail!("variant {v} needs a level below the base depth {base_depth}"),
            _ => None,
        };
        if let Some(level) = shared_level {
            if base.is_none() {
                base = Some(fit(cfg.net.clone(), cfg.schedule.clone())?);
            }
            let b = base.as_ref().expect("just fitted");
            let iters = cfg.schedule.iters_per_level[..level].iter().sum();
            rows.push(row(id, b, level, iters, masks, cfg)?);
            continue;
        }
        let r = match v {
            Variant::Depth(d) => {
                let net = NetConfig { depth: d, ..cfg.net.clone() };
                fit(net, schedule_for_depth(&cfg.schedule, d))?
            }
            Variant::Level(_) => unreachable!("handled with the base network"),
            Variant::NoResidual => fit(
                NetConfig {
                    use_residual_connections: false,
                    ..cfg.net.clone()
                },
                cfg.schedule.clone(),
            )?,
            Variant::PoolUpsample => fit(
                NetConfig {
                    down_mode: DownMode::MaxPool,
                    up_mode: UpMode::Trilinear,
                    ..cfg.net.clone()
                },
                cfg.schedule.clone(),
            )?,
            Variant::NoRegularization => fit(
                cfg.net.clone(),
                ScheduleConfig {
                    weights: LossWeights {
                        lambda_smooth: 0.0,
                        lambda_diffeo: 0.0,
                        ..cfg.schedule.weights
                    },
                    ..cfg.schedule.clone()
                },
            )?,
            Variant::Direct => register_direct(f, m, &cfg.schedule)?,
        };
        let last = r.level_snapshots.len();
        let iters = r.loss_trace.len();
        rows.push(row(id, &r, last, iters, masks, cfg)?);
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: Write>(mut w: W, rows: &[AblationRow]) -> anyhow::Result<()> {
    writeln!(w, "{ABLATION_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{:.3}", r.id, report_fields(&r.report), r.iterations, r.seconds)?;
    }
    Ok(())
}
