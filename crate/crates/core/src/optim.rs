//! Registration drivers: coarse-to-fine fitting of the network prior, direct
//! optimization of a velocity field, and warm-started refinement.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Adam, AdamConfig, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::field::{self, FieldRole, VectorField, Volume, DEFAULT_SQUARING_STEPS};
use crate::losses::{objective_on_tape, LossTerms, LossWeights};
use crate::metrics::EvalReport;
use crate::net::{image_pyramid, parse, LevelVars, NetConfig, Network};

/// Variance of the Gaussian initializer of the direct-field baseline.
pub const DIRECT_INIT_VARIANCE: f64 = 0.001;

/// Adam step size paired with the desk budget.
pub const DESK_LR: f64 = 1e-3;
/// Default iterations on each coarse level.
pub const DESK_COARSE_ITERS: usize = 200;
/// Default iterations on the finest level.
pub const DESK_FINE_ITERS: usize = 300;

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleConfig {
    pub iters_per_level: Vec<usize>,
    pub lr: f64,
    /// Fraction of each level's budget during which coarser levels stay frozen.
    pub freeze_fraction: f64,
    pub weights: LossWeights,
    pub squaring_steps: usize,
    pub seed: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            iters_per_level: Self::desk_budget(3),
            lr: DESK_LR,
            freeze_fraction: 0.2,
            weights: LossWeights::default(),
            squaring_steps: DEFAULT_SQUARING_STEPS,
            seed: 0,
        }
    }
}

impl ScheduleConfig {
    /// 1000 iterations per coarse level and 2000 on the finest.
    pub fn full_budget(depth: usize) -> Vec<usize> {
        let mut v = vec![1000; depth];
        if let Some(last) = v.last_mut() {
            *last = 2000;
        }
        v
    }

    /// Budget that fits a 64^3 run on a desktop CPU: coarse levels get
    /// `DESK_COARSE_ITERS`, the finest `DESK_FINE_ITERS`.
    pub fn desk_budget(depth: usize) -> Vec<usize> {
        let mut v = vec![DESK_COARSE_ITERS; depth];
        if let Some(last) = v.last_mut() {
            *last = DESK_FINE_ITERS;
        }
        v
    }

    pub fn total_iterations(&self) -> usize {
        self.iters_per_level.iter().sum()
    }

    pub fn validate(&self, depth: Option<usize>) -> Result<()> {
        if let Some(d) = depth {
            if self.iters_per_level.len() != d {
                return Err(Error::Config(format!(
                    "iters_per_level has {} entries but depth is {d}",
                    self.iters_per_level.len()
                )));
            }
        }
        if self.iters_per_level.is_empty() {
            return Err(Error::Config("iters_per_level must not be empty".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.freeze_fraction) {
            return Err(Error::Config(format!(
                "freeze_fraction must be in [0, 1], got {}",
                self.freeze_fraction
            )));
        }
        if self.squaring_steps == 0 {
            return Err(Error::Config("squaring_steps must be >= 1".into()));
        }
        self.weights.validate()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let iters: Vec<String> = self.iters_per_level.iter().map(|v| v.to_string()).collect();
        vec![
            ("iters_per_level".into(), iters.join(",")),
            ("lr".into(), self.lr.to_string()),
            ("freeze_fraction".into(), self.freeze_fraction.to_string()),
            ("lambda_smooth".into(), self.weights.lambda_smooth.to_string()),
            ("lambda_diffeo".into(), self.weights.lambda_diffeo.to_string()),
            ("ncc_window".into(), self.weights.ncc_window.to_string()),
            ("squaring_steps".into(), self.squaring_steps.to_string()),
            ("schedule_seed".into(), self.seed.to_string()),
        ]
    }

    /// Applies one `key=value` setting. Returns `false` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "iters_per_level" => {
                self.iters_per_level = value
                    .split(',')
                    .map(|s| parse(key, s))
                    .collect::<Result<Vec<usize>>>()?
            }
            "lr" => self.lr = parse(key, value)?,
            "freeze_fraction" => self.freeze_fraction = parse(key, value)?,
            "lambda_smooth" => self.weights.lambda_smooth = parse(key, value)?,
            "lambda_diffeo" => self.weights.lambda_diffeo = parse(key, value)?,
            "ncc_window" => self.weights.ncc_window = parse(key, value)?,
            "squaring_steps" => self.squaring_steps = parse(key, value)?,
            "schedule_seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    /// Global iteration counter across levels.
    pub iteration: usize,
    pub level: usize,
    pub terms: LossTerms,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult {
    pub displacement: VectorField,
    pub warped: Volume,
    pub loss_trace: Vec<TraceEntry>,
    /// Full-resolution displacement using only levels `1..=k`, for each `k`.
    pub level_snapshots: Vec<VectorField>,
    pub metrics: Option<EvalReport>,
    pub wall_time: f64,
    /// Seconds elapsed when each level finished fitting.
    pub level_seconds: Vec<f64>,
    pub network: Option<Network>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelSummary {
    pub level: usize,
    pub start_loss: f64,
    pub end_loss: f64,
    pub best_loss: f64,
    pub best_iteration: usize,
}

/// Per-level start, end and best total loss, recomputed from the trace.
pub fn loss_trace_report(result: &RegistrationResult) -> Vec<LevelSummary> {
    summarize_trace(&result.loss_trace)
}

pub fn summarize_trace(trace: &[TraceEntry]) -> Vec<LevelSummary> {
    let mut out: Vec<LevelSummary> = Vec::new();
    for e in trace {
        match out.last_mut() {
            Some(s) if s.level == e.level => {
                s.end_loss = e.terms.total;
                if e.terms.total < s.best_loss {
                    s.best_loss = e.terms.total;
                    s.best_iteration = e.iteration;
                }
            }
            _ => out.push(LevelSummary {
                level: e.level,
                start_loss: e.terms.total,
                end_loss: e.terms.total,
                best_loss: e.terms.total,
                best_iteration: e.iteration,
            }),
        }
    }
    out
}

pub fn write_trace_csv<W: Write>(mut w: W, trace: &[TraceEntry]) -> Result<()> {
    writeln!(w, "iteration,level,total,ncc,smooth,diffeo")?;
    for e in trace {
        let t = e.terms;
        writeln!(
            w,
            "{},{},{:.9e},{:.9e},{:.9e},{:.9e}",
            e.iteration, e.level, t.total, t.ncc, t.smooth, t.diffeo
        )?;
    }
    Ok(())
}

fn check_pair(f: &Volume, m: &Volume, init: Option<&VectorField>) -> Result<()> {
    let (a, b) = (f.extent(), m.extent());
    for (d, axis) in ["z", "y", "x"].iter().enumerate() {
        if a[d] != b[d] {
            return Err(Error::shape("register", *axis, a[d], b[d]));
        }
        if let Some(i) = init {
            if i.extent()[d] != a[d] {
                return Err(Error::shape("register", *axis, a[d], i.extent()[d]));
            }
        }
    }
    Ok(())
}

fn record(
    trace: &mut Vec<TraceEntry>,
    level: usize,
    iteration: usize,
    terms: LossTerms,
) -> Result<()> {
    if !terms.total.is_finite() {
        return Err(Error::Divergence { level, iteration });
    }
    trace.push(TraceEntry {
        iteration,
        level,
        terms,
    });
    Ok(())
}

fn lift_to(phi: &VectorField, full: [usize; 3]) -> VectorField {
    let mut p = phi.clone();
    while p.extent() != full {
        p = field::upsample_field(&p);
    }
    p
}

/// Fits the network prior to one pair, coarse to fine.
///
/// With `init_field`, the network registers `f` to `m` already warped by it,
/// and the result is the network's transform followed by `init_field`.
pub fn register_net_prior(
    f: &Volume,
    m: &Volume,
    net_cfg: &NetConfig,
    sched: &ScheduleConfig,
    init_field: Option<&VectorField>,
) -> Result<RegistrationResult> {
    let start = Instant::now();
    net_cfg.validate()?;
    sched.validate(Some(net_cfg.depth))?;
    check_pair(f, m, init_field)?;
    let full = f.extent();
    let depth = net_cfg.depth;
    net_cfg.level_extent(full, 1)?;

    let m_eff = match init_field {
        Some(init) => field::warp(m, init)?,
        None => m.clone(),
    };
    let mut net = Network::build(net_cfg.clone())?;
    let fs = image_pyramid(f, net_cfg, depth)?;
    let ms = image_pyramid(&m_eff, net_cfg, depth)?;
    let two = net_cfg.two_channel_input;
    let mut adams: Vec<Adam> = (1..=depth)
        .map(|i| {
            let sizes: Vec<usize> = net.level(i).params.iter().map(|p| p.data.len()).collect();
            Adam::new(
                AdamConfig {
                    lr: sched.lr,
                    ..AdamConfig::default()
                },
                &sizes,
            )
        })
        .collect();

    let mut trace = Vec::with_capacity(sched.total_iterations());
    let mut level_seconds = Vec::with_capacity(depth);
    let mut global = 0;
    for level in 1..=depth {
        let iters = sched.iters_per_level[level - 1];
        let freeze_iters = if level > 1 {
            (sched.freeze_fraction * iters as f64).floor() as usize
        } else {
            0
        };
        // Coarser levels are constant while frozen, so their field is computed once.
        let frozen_prefix = if freeze_iters > 0 {
            let snaps = net.pyramid_levels(&m_eff, two.then_some(f), sched.squaring_steps, level - 1)?;
            Some(snaps.into_iter().last().expect("level > 1"))
        } else {
            None
        };
        log::info!("level {level}: {iters} iterations, coarser levels frozen for {freeze_iters}");
        for it in 0..iters {
            let frozen = it < freeze_iters;
            for k in 1..level {
                net.set_frozen(k, frozen);
            }
            net.set_frozen(level, false);

            let mut tape = Tape::<f32>::new();
            let mut params = Vec::with_capacity(level);
            for k in 1..=level {
                if frozen && k < level {
                    params.push(LevelVars(Vec::new()));
                } else {
                    params.push(net.bind(&mut tape, k)?);
                }
            }
            let mut m_vars = Vec::with_capacity(level);
            let mut f_vars = Vec::with_capacity(level);
            for k in 0..level {
                let ext = ms[k].extent();
                m_vars.push(tape.constant(Shape::grid(1, ext), ms[k].data().to_vec())?);
                if two {
                    f_vars.push(tape.constant(Shape::grid(1, ext), fs[k].data().to_vec())?);
                }
            }
            let prefix = match (&frozen_prefix, frozen) {
                (Some(p), true) => Some((
                    level - 1,
                    tape.constant(Shape::grid(3, p.extent()), p.data().to_vec())?,
                )),
                _ => None,
            };
            let phis = net.pyramid_on_tape(
                &mut tape,
                &params,
                &m_vars,
                two.then_some(&f_vars[..]),
                prefix,
                sched.squaring_steps,
            )?;
            let phi = *phis.last().expect("at least one level recorded");
            let lv = objective_on_tape(&mut tape, fs[level - 1].data(), m_vars[level - 1], phi, &sched.weights)?;
            record(&mut trace, level, global, lv.values(&tape))?;
            tape.backward(lv.total)?;
            for k in 1..=level {
                if net.level(k).frozen {
                    continue;
                }
                let vars: Vec<Var> = params[k - 1].0.clone();
                let lvl = net.level_mut(k);
                for (j, (p, v)) in lvl.params.iter_mut().zip(vars).enumerate() {
                    let g = tape.grad(v).ok_or_else(|| Error::Backward(format!("no gradient for level {k} parameter {j}")))?;
                    adams[k - 1].step(j, &mut p.data, g)?;
                }
            }
            if it % 50 == 0 {
                let t = trace.last().expect("just recorded").terms;
                log::debug!("level {level} iter {it}: total {:.6} ncc {:.6}", t.total, t.ncc);
            }
            global += 1;
        }
        level_seconds.push(start.elapsed().as_secs_f64());
    }
    for k in 1..=depth {
        net.set_frozen(k, false);
    }

    let levels = net.pyramid_levels(&m_eff, two.then_some(f), sched.squaring_steps, depth)?;
    let mut snapshots = Vec::with_capacity(depth);
    for l in &levels {
        let lifted = lift_to(l, full);
        snapshots.push(match init_field {
            Some(init) => field::compose(init, &lifted)?,
            None => lifted,
        });
    }
    let displacement = snapshots.last().expect("depth >= 1").clone().with_spacing(f.spacing())?;
    let warped = field::warp(m, &displacement)?;
    Ok(RegistrationResult {
        displacement,
        warped,
        loss_trace: trace,
        level_snapshots: snapshots,
        metrics: None,
        wall_time: start.elapsed().as_secs_f64(),
        level_seconds,
        network: Some(net),
    })
}

/// Initial velocity of the direct baseline: i.i.d. Gaussian with variance 0.001.
pub fn direct_init(extent: [usize; 3], seed: u64) -> VectorField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, DIRECT_INIT_VARIANCE.sqrt()).expect("finite std");
    let n = 3 * extent.iter().product::<usize>();
    let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
    VectorField::new(extent, FieldRole::Velocity, data).expect("sized to extent")
}

/// Optimizes a full-resolution velocity field directly, with no network.
///
/// The budget is the sum of `iters_per_level`.
pub fn register_direct(f: &Volume, m: &Volume, sched: &ScheduleConfig) -> Result<RegistrationResult> {
    let start = Instant::now();
    sched.validate(None)?;
    check_pair(f, m, None)?;
    let ext = f.extent();
    let mut v = direct_init(ext, sched.seed).into_data();
    let mut adam = Adam::new(
        AdamConfig {
            lr: sched.lr,
            ..AdamConfig::default()
        },
        &[v.len()],
    );
    let mut trace = Vec::with_capacity(sched.total_iterations());
    for it in 0..sched.total_iterations() {
        let mut tape = Tape::<f32>::new();
        let vv = tape.leaf(Shape::grid(3, ext), v.clone(), true)?;
        let mv = tape.constant(Shape::grid(1, ext), m.data().to_vec())?;
        let phi = tape.exp_velocity(vv, sched.squaring_steps)?;
        let lv = objective_on_tape(&mut tape, f.data(), mv, phi, &sched.weights)?;
        record(&mut trace, 1, it, lv.values(&tape))?;
        tape.backward(lv.total)?;
        let g = tape.grad(vv).ok_or_else(|| Error::Backward("no gradient for the velocity".into()))?;
        adam.step(0, &mut v, g)?;
    }
    let vel = VectorField::new(ext, FieldRole::Velocity, v)?;
    let displacement = field::exp_velocity(&vel, sched.squaring_steps)?.with_spacing(f.spacing())?;
    let warped = field::warp(m, &displacement)?;
    Ok(RegistrationResult {
        level_snapshots: vec![displacement.clone()],
        displacement,
        warped,
        loss_trace: trace,
        metrics: None,
        wall_time: start.elapsed().as_secs_f64(),
        level_seconds: vec![start.elapsed().as_secs_f64()],
        network: None,
    })
}
