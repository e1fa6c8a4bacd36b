//! Multi-level convolutional network whose output is a stationary velocity
//! field. It is never trained on a dataset: its weights are fitted to one
//! image pair, and the architecture itself acts as the regularizer.
//!
//! Level `i` (1-based, coarsest first) runs on the full grid scaled by
//! `0.5^(depth - i)`. Each level is: stem conv, one 2x reduction, a stack of
//! residual blocks, one 2x expansion, a skip add from the stem, and a 3-channel
//! head initialized to zero.

use std::io::{BufRead, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Real, ResizeFactor, Shape, Tape, Var};
use crate::error::{Error, Result};
use crate::field::{FieldRole, VectorField, Volume};

pub const CHECKPOINT_MAGIC: &str = "NPRM1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DownMode {
    StridedConv,
    MaxPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpMode {
    TransposeConv,
    Trilinear,
}

impl DownMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DownMode::StridedConv => "strided_conv",
            DownMode::MaxPool => "max_pool",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "strided_conv" => Ok(DownMode::StridedConv),
            "max_pool" => Ok(DownMode::MaxPool),
            _ => Err(Error::Config(format!("down_mode must be strided_conv or max_pool, got {s:?}"))),
        }
    }
}

impl UpMode {
    pub fn as_str(self) -> &'static str {
        match self {
            UpMode::TransposeConv => "transpose_conv",
            UpMode::Trilinear => "trilinear",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "transpose_conv" => Ok(UpMode::TransposeConv),
            "trilinear" => Ok(UpMode::Trilinear),
            _ => Err(Error::Config(format!("up_mode must be transpose_conv or trilinear, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub residual_blocks_per_level: usize,
    pub use_residual_connections: bool,
    pub down_mode: DownMode,
    pub up_mode: UpMode,
    pub activation_slope: f64,
    pub seed: u64,
    /// Feed the fixed image alongside the moving one.
    pub two_channel_input: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            depth: 3,
            base_channels: 8,
            residual_blocks_per_level: 4,
            use_residual_connections: true,
            down_mode: DownMode::StridedConv,
            up_mode: UpMode::TransposeConv,
            activation_slope: 0.2,
            seed: 0,
            two_channel_input: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=4).contains(&self.depth) {
            return Err(Error::Config(format!("depth must be in 1..=4, got {}", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        if self.residual_blocks_per_level == 0 {
            return Err(Error::Config("residual_blocks_per_level must be >= 1".into()));
        }
        if !(self.activation_slope > 0.0 && self.activation_slope < 1.0) {
            return Err(Error::Config(format!(
                "activation_slope must be in (0, 1), got {}",
                self.activation_slope
            )));
        }
        Ok(())
    }

    /// Grid of level `i` (1-based) for a full-resolution extent.
    pub fn level_extent(&self, full: [usize; 3], level: usize) -> Result<[usize; 3]> {
        if level == 0 || level > self.depth {
            return Err(Error::invalid("level_extent", format!("level {level} outside 1..={}", self.depth)));
        }
        let div = 1usize << self.depth;
        for (d, axis) in ["z", "y", "x"].iter().enumerate() {
            if full[d] % div != 0 || full[d] < 2 * div {
                return Err(Error::Config(format!(
                    "extent {} along {axis} must be a multiple of {div} and at least {} for depth {}",
                    full[d],
                    2 * div,
                    self.depth
                )));
            }
        }
        let shift = self.depth - level;
        Ok(full.map(|e| e >> shift))
    }

    /// `key=value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("depth".into(), self.depth.to_string()),
            ("base_channels".into(), self.base_channels.to_string()),
            ("residual_blocks_per_level".into(), self.residual_blocks_per_level.to_string()),
            ("use_residual_connections".into(), self.use_residual_connections.to_string()),
            ("down_mode".into(), self.down_mode.as_str().into()),
            ("up_mode".into(), self.up_mode.as_str().into()),
            ("activation_slope".into(), self.activation_slope.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("two_channel_input".into(), self.two_channel_input.to_string()),
        ]
    }

    /// Applies one `key=value` setting. Returns `false` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "depth" => self.depth = parse(key, value)?,
            "base_channels" => self.base_channels = parse(key, value)?,
            "residual_blocks_per_level" => self.residual_blocks_per_level = parse(key, value)?,
            "use_residual_connections" => self.use_residual_connections = parse(key, value)?,
            "down_mode" => self.down_mode = DownMode::parse(value)?,
            "up_mode" => self.up_mode = UpMode::parse(value)?,
            "activation_slope" => self.activation_slope = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "two_channel_input" => self.two_channel_input = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key}={value:?}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

/// Positions of each parameter inside a level's list.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    stem_w: usize,
    stem_b: usize,
    stem_fixed_w: Option<usize>,
    down: Option<(usize, usize)>,
    blocks: Vec<[usize; 4]>,
    up_w: Option<usize>,
    head_w: usize,
    head_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub params: Vec<Param>,
    pub frozen: bool,
}

impl Level {
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetConfig,
    layout: Layout,
    levels: Vec<Level>,
}

/// Tape handles of one level's parameters, in layout order.
#[derive(Clone, Debug)]
pub struct LevelVars(pub Vec<Var>);

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    params: Vec<Param>,
    gain: f64,
}

impl Builder<'_> {
    fn he(&mut self, name: &str, dims: &[usize], fan_in: usize) -> usize {
        let shape = Shape::new(dims);
        let std = (self.gain / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.numel()).map(|_| normal.sample(self.rng) as f32).collect();
        self.push(name, shape, data)
    }

    fn zeros(&mut self, name: &str, dims: &[usize]) -> usize {
        let shape = Shape::new(dims);
        let data = vec![0.0; shape.numel()];
        self.push(name, shape, data)
    }

    fn push(&mut self, name: &str, shape: Shape, data: Vec<f32>) -> usize {
        self.params.push(Param {
            name: name.to_string(),
            shape,
            data,
        });
        self.params.len() - 1
    }
}

impl Network {
    pub fn build(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let c = config.base_channels;
        let a = config.activation_slope;
        let gain = 2.0 / (1.0 + a * a);
        let mut layout = None;
        let mut levels = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let mut b = Builder {
                rng: &mut rng,
                params: Vec::new(),
                gain,
            };
            let stem_w = b.he("stem.w", &[c, 1, 3, 3, 3], 27 * if config.two_channel_input { 2 } else { 1 });
            let stem_b = b.zeros("stem.b", &[c]);
            let stem_fixed_w = config
                .two_channel_input
                .then(|| b.he("stem.w_fixed", &[c, 1, 3, 3, 3], 54));
            let down = (config.down_mode == DownMode::StridedConv)
                .then(|| (b.he("down.w", &[c, c, 3, 3, 3], 27 * c), b.zeros("down.b", &[c])));
            let blocks = (0..config.residual_blocks_per_level)
                .map(|k| {
                    [
                        b.he(&format!("block{k}.w1"), &[c, c, 3, 3, 3], 27 * c),
                        b.zeros(&format!("block{k}.b1"), &[c]),
                        b.he(&format!("block{k}.w2"), &[c, c, 3, 3, 3], 27 * c),
                        b.zeros(&format!("block{k}.b2"), &[c]),
                    ]
                })
                .collect();
            let up_w = (config.up_mode == UpMode::TransposeConv).then(|| b.he("up.w", &[c, c, 2, 2, 2], c));
            let head_w = b.zeros("head.w", &[3, c, 3, 3, 3]);
            let head_b = b.zeros("head.b", &[3]);
            layout = Some(Layout {
                stem_w,
                stem_b,
                stem_fixed_w,
                down,
                blocks,
                up_w,
                head_w,
                head_b,
            });
            levels.push(Level {
                params: b.params,
                frozen: false,
            });
        }
        Ok(Network {
            config,
            layout: layout.expect("depth >= 1"),
            levels,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Level `i`, 1-based.
    pub fn level(&self, i: usize) -> &Level {
        &self.levels[i - 1]
    }

    pub fn level_mut(&mut self, i: usize) -> &mut Level {
        &mut self.levels[i - 1]
    }

    pub fn set_frozen(&mut self, i: usize, frozen: bool) {
        self.levels[i - 1].frozen = frozen;
    }

    pub fn parameter_count(&self) -> usize {
        self.levels.iter().map(Level::parameter_count).sum()
    }

    /// `(level, parameter name, element count)` for every tensor, in build order.
    pub fn census(&self) -> Vec<(usize, String, usize)> {
        self.levels
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params.iter().map(move |p| (i + 1, p.name.clone(), p.data.len())))
            .collect()
    }

    /// Puts level `i`'s parameters on the tape; frozen levels become constants.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, i: usize) -> Result<LevelVars> {
        let lvl = self.level(i);
        let vars = lvl
            .params
            .iter()
            .map(|p| {
                let v = p.data.iter().map(|&x| T::of(x as f64)).collect();
                tape.leaf(p.shape.clone(), v, !lvl.frozen)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LevelVars(vars))
    }

    /// One level on the tape: `[1, z, y, x]` image(s) to a `[3, z, y, x]` velocity.
    pub fn level_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &LevelVars,
        image: Var,
        fixed: Option<Var>,
    ) -> Result<Var> {
        let l = &self.layout;
        let slope = T::of(self.config.activation_slope);
        let w = |k: usize| p.0[k];
        let mut stem = tape.conv3(image, w(l.stem_w), Some(w(l.stem_b)), 1)?;
        match (l.stem_fixed_w, fixed) {
            (Some(k), Some(f)) => {
                let sf = tape.conv3(f, w(k), None, 1)?;
                stem = tape.add(stem, sf)?;
            }
            (None, None) => {}
            _ => {
                return Err(Error::invalid(
                    "forward_level",
                    "fixed image must be given iff two_channel_input is set",
                ))
            }
        }
        let skip = tape.leaky_relu(stem, slope)?;
        let mut h = match l.down {
            Some((dw, db)) => {
                let d = tape.conv3(skip, w(dw), Some(w(db)), 2)?;
                tape.leaky_relu(d, slope)?
            }
            None => tape.max_pool2(skip)?,
        };
        for blk in &l.blocks {
            let a = tape.conv3(h, w(blk[0]), Some(w(blk[1])), 1)?;
            let a = tape.leaky_relu(a, slope)?;
            let b = tape.conv3(a, w(blk[2]), Some(w(blk[3])), 1)?;
            let s = if self.config.use_residual_connections {
                tape.add(h, b)?
            } else {
                b
            };
            h = tape.leaky_relu(s, slope)?;
        }
        let up = match l.up_w {
            Some(uw) => {
                let u = tape.conv3_transpose(h, w(uw), 2)?;
                tape.leaky_relu(u, slope)?
            }
            None => tape.trilinear_resize(h, ResizeFactor::Double)?,
        };
        let joined = tape.add(up, skip)?;
        tape.conv3(joined, w(l.head_w), Some(w(l.head_b)), 1)
    }

    /// Velocity of level `i` for an input already warped by the coarser field.
    ///
    /// `coarser_field` must be given (on the level-`i` grid) exactly when `i > 1`;
    /// it is used only to check the pyramid contract.
    pub fn forward_level(
        &self,
        i: usize,
        moving_at_level: &Volume,
        fixed_at_level: Option<&Volume>,
        coarser_field: Option<&VectorField>,
    ) -> Result<VectorField> {
        if i == 0 || i > self.depth() {
            return Err(Error::invalid("forward_level", format!("level {i} outside 1..={}", self.depth())));
        }
        if (i == 1) != coarser_field.is_none() {
            return Err(Error::invalid(
                "forward_level",
                "a coarser field is required for every level but the first",
            ));
        }
        let ext = moving_at_level.extent();
        if let Some(c) = coarser_field {
            check_extent("forward_level", ext, c.extent())?;
        }
        if let Some(f) = fixed_at_level {
            check_extent("forward_level", ext, f.extent())?;
        }
        let mut tape = Tape::<f32>::new();
        let p = self.bind_constant(&mut tape, i)?;
        let m = tape.constant(Shape::grid(1, ext), moving_at_level.data().to_vec())?;
        let f = fixed_at_level
            .map(|f| tape.constant(Shape::grid(1, ext), f.data().to_vec()))
            .transpose()?;
        let v = self.level_on_tape(&mut tape, &p, m, f)?;
        VectorField::new(ext, FieldRole::Velocity, tape.value(v).to_vec())
    }

    fn bind_constant(&self, tape: &mut Tape<f32>, i: usize) -> Result<LevelVars> {
        let vars = self
            .level(i)
            .params
            .iter()
            .map(|p| tape.constant(p.shape.clone(), p.data.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(LevelVars(vars))
    }

    /// Full-resolution displacement from the complete pyramid.
    pub fn pyramid_field(&self, moving: &Volume, fixed: Option<&Volume>, squaring_steps: usize) -> Result<VectorField> {
        let snaps = self.pyramid_levels(moving, fixed, squaring_steps, self.depth())?;
        Ok(snaps.into_iter().last().expect("depth >= 1"))
    }

    /// Displacement after each of the first `upto` levels, each on its own grid.
    pub fn pyramid_levels(
        &self,
        moving: &Volume,
        fixed: Option<&Volume>,
        squaring_steps: usize,
        upto: usize,
    ) -> Result<Vec<VectorField>> {
        let full = moving.extent();
        if let Some(f) = fixed {
            check_extent("pyramid_field", full, f.extent())?;
        }
        let mut tape = Tape::<f32>::new();
        let params = (1..=upto)
            .map(|i| self.bind_constant(&mut tape, i))
            .collect::<Result<Vec<_>>>()?;
        let ms = image_pyramid(moving, &self.config, upto)?;
        let fs = fixed
            .map(|f| image_pyramid(f, &self.config, upto))
            .transpose()?;
        let m_vars = ms
            .iter()
            .map(|m| tape.constant(Shape::grid(1, m.extent()), m.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let f_vars = fs
            .map(|fs| {
                fs.iter()
                    .map(|f| tape.constant(Shape::grid(1, f.extent()), f.data().to_vec()))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        let phis = self.pyramid_on_tape(&mut tape, &params, &m_vars, f_vars.as_deref(), None, squaring_steps)?;
        phis.iter()
            .zip(&ms)
            .map(|(&p, m)| VectorField::new(m.extent(), FieldRole::Displacement, tape.value(p).to_vec()))
            .collect()
    }

    /// Records levels `start..` of the pyramid on a tape.
    ///
    /// `params[k]`, `moving[k]` and `fixed[k]` belong to level `k + 1`. When
    /// `prefix` holds the displacement of level `start - 1` (already on the
    /// tape, e.g. as a constant), levels below `start` are skipped.
    /// Returns the displacement after each recorded level.
    pub fn pyramid_on_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        params: &[LevelVars],
        moving: &[Var],
        fixed: Option<&[Var]>,
        prefix: Option<(usize, Var)>,
        squaring_steps: usize,
    ) -> Result<Vec<Var>> {
        let upto = params.len();
        let (start, mut phi) = match prefix {
            Some((level, v)) => (level + 1, Some(v)),
            None => (1, None),
        };
        let mut out = Vec::new();
        for i in start..=upto {
            let m = moving[i - 1];
            let f = fixed.map(|fs| fs[i - 1]);
            let input = match phi {
                None => m,
                Some(p) => {
                    let up = tape.upsample_field(p)?;
                    phi = Some(up);
                    tape.warp(m, up)?
                }
            };
            let v = self.level_on_tape(tape, &params[i - 1], input, f)?;
            let step = tape.exp_velocity(v, squaring_steps)?;
            // Warp-then-refine: the new level's transform acts first.
            let next = match phi {
                None => step,
                Some(p) => tape.compose(p, step)?,
            };
            phi = Some(next);
            out.push(next);
        }
        Ok(out)
    }

    /// Writes the checkpoint: magic, config echo, then raw little-endian parameters.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        for (k, v) in self.config.to_pairs() {
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w, "parameters={}", self.parameter_count())?;
        writeln!(w)?;
        for lvl in &self.levels {
            for p in &lvl.params {
                for x in &p.data {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn load<R: BufRead>(mut r: R) -> Result<Self> {
        let fmt = |line: usize, msg: String| Error::Format {
            context: "checkpoint".into(),
            location: format!("line {line}"),
            msg,
        };
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(fmt(1, format!("expected magic {CHECKPOINT_MAGIC}, found {:?}", line.trim_end())));
        }
        let mut cfg = NetConfig::default();
        let mut declared = None;
        let mut n = 1;
        loop {
            line.clear();
            n += 1;
            if r.read_line(&mut line)? == 0 {
                return Err(fmt(n, "header ended before the blank separator line".into()));
            }
            let t = line.trim_end_matches(['\n', '\r']);
            if t.is_empty() {
                break;
            }
            let (k, v) = t
                .split_once('=')
                .ok_or_else(|| fmt(n, format!("expected key=value, found {t:?}")))?;
            if k == "parameters" {
                declared = Some(parse::<usize>(k, v).map_err(|e| fmt(n, e.to_string()))?);
            } else if !cfg.set(k, v).map_err(|e| fmt(n, e.to_string()))? {
                return Err(fmt(n, format!("unknown key {k:?}")));
            }
        }
        let mut net = Network::build(cfg).map_err(|e| fmt(n, e.to_string()))?;
        let count = net.parameter_count();
        if declared != Some(count) {
            return Err(fmt(n, format!("config implies {count} parameters, header declares {declared:?}")));
        }
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() != 4 * count {
            return Err(Error::Format {
                context: "checkpoint".into(),
                location: "payload".into(),
                msg: format!("expected {} bytes, found {}", 4 * count, buf.len()),
            });
        }
        let mut it = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        for lvl in &mut net.levels {
            for p in &mut lvl.params {
                for x in &mut p.data {
                    *x = it.next().expect("length checked");
                }
            }
        }
        Ok(net)
    }
}

fn check_extent(op: &'static str, a: [usize; 3], b: [usize; 3]) -> Result<()> {
    for (d, axis) in ["z", "y", "x"].iter().enumerate() {
        if a[d] != b[d] {
            return Err(Error::shape(op, *axis, a[d], b[d]));
        }
    }
    Ok(())
}

/// Images for levels `1..=upto`, coarsest first, by repeated halving.
pub fn image_pyramid(v: &Volume, cfg: &NetConfig, upto: usize) -> Result<Vec<Volume>> {
    let full = v.extent();
    cfg.level_extent(full, 1)?;
    let mut out = vec![v.clone()];
    for _ in upto..cfg.depth {
        let h = out[0].halve();
        out[0] = h;
    }
    for _ in 1..upto {
        let h = out[0].halve();
        out.insert(0, h);
    }
    for (k, m) in out.iter().enumerate() {
        debug_assert_eq!(m.extent(), cfg.level_extent(full, k + 1)?);
    }
    Ok(out)
}
