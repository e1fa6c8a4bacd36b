//! Flat `key=value` run configuration shared by every CLI command.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::Normalization;
use crate::error::{Error, Result};
use crate::metrics::OverlapDenominator;
use crate::net::NetConfig;
use crate::optim::ScheduleConfig;
use crate::phantom::{PhantomSpec, DEFAULT_MAX_DISPLACEMENT};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Method {
    /// Coarse-to-fine fitting of the untrained network.
    #[default]
    NetPrior,
    /// Direct optimization of a full-resolution velocity field.
    Direct,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::NetPrior => "net_prior",
            Method::Direct => "direct",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "net_prior" => Ok(Method::NetPrior),
            "direct" => Ok(Method::Direct),
            _ => Err(Error::Config(format!("method must be net_prior or direct, got {s:?}"))),
        }
    }
}

fn overlap_str(d: OverlapDenominator) -> &'static str {
    match d {
        OverlapDenominator::Fixed => "fixed",
        OverlapDenominator::Warped => "warped",
        OverlapDenominator::Union => "union",
    }
}

fn parse_overlap(s: &str) -> Result<OverlapDenominator> {
    match s {
        "fixed" => Ok(OverlapDenominator::Fixed),
        "warped" => Ok(OverlapDenominator::Warped),
        "union" => Ok(OverlapDenominator::Union),
        _ => Err(Error::Config(format!("overlap_denominator must be fixed, warped or union, got {s:?}"))),
    }
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomOptions {
    pub extent: [usize; 3],
    pub seed: u64,
    pub noise: f64,
    /// Largest displacement in voxels; `None` scales the default with the extent.
    pub max_displacement: Option<f64>,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        PhantomOptions {
            extent: [64; 3],
            seed: 0,
            noise: 0.02,
            max_displacement: None,
        }
    }
}

impl PhantomOptions {
    pub fn spec(&self, squaring_steps: usize) -> Result<PhantomSpec> {
        let mut spec = PhantomSpec::standard(self.extent, self.seed)?;
        spec.noise = self.noise;
        spec.squaring_steps = squaring_steps;
        let scale = self.extent.iter().copied().min().unwrap_or(64) as f64 / 64.0;
        spec.normalize_deformation(self.max_displacement.unwrap_or(DEFAULT_MAX_DISPLACEMENT * scale))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Every tunable of a run. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub net: NetConfig,
    pub schedule: ScheduleConfig,
    /// Whether `iters_per_level` was given; if not it follows `depth`.
    pub iters_explicit: bool,
    pub phantom: PhantomOptions,
    pub method: Method,
    pub normalize: Normalization,
    pub overlap_denominator: OverlapDenominator,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    pub fixed: Option<PathBuf>,
    pub moving: Option<PathBuf>,
    pub init_field: Option<PathBuf>,
    pub displacement: Option<PathBuf>,
    pub warped: Option<PathBuf>,
    pub masks: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            net: NetConfig::default(),
            schedule: ScheduleConfig::default(),
            iters_explicit: false,
            phantom: PhantomOptions::default(),
            method: Method::default(),
            normalize: Normalization::default(),
            overlap_denominator: OverlapDenominator::default(),
            threads: 0,
            fixed: None,
            moving: None,
            init_field: None,
            displacement: None,
            warped: None,
            masks: None,
            out_dir: PathBuf::from("run"),
        }
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "-".into())
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (value != "-" && !value.is_empty()).then(|| PathBuf::from(value))
}

fn parse_extent(key: &str, value: &str) -> Result<[usize; 3]> {
    let parts: Vec<usize> = value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect::<Result<_>>()?;
    match parts.as_slice() {
        [n] => Ok([*n; 3]),
        [x, y, z] => Ok([*z, *y, *x]),
        _ => Err(Error::Config(format!("{key} takes N or X,Y,Z, got {value:?}"))),
    }
}

impl RunConfig {
    /// Applies one setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        if self.net.set(key, value)? {
            return Ok(());
        }
        if self.schedule.set(key, value)? {
            if key == "iters_per_level" {
                self.iters_explicit = true;
            }
            return Ok(());
        }
        match key {
            "phantom_extent" => self.phantom.extent = parse_extent(key, value)?,
            "phantom_seed" => self.phantom.seed = parse_value(key, value)?,
            "phantom_noise" => self.phantom.noise = parse_value(key, value)?,
            "phantom_max_displacement" => {
                self.phantom.max_displacement = if value == "auto" { None } else { Some(parse_value(key, value)?) }
            }
            "method" => self.method = value.parse()?,
            "normalize" => self.normalize = value.parse()?,
            "overlap_denominator" => self.overlap_denominator = parse_overlap(value)?,
            "threads" => self.threads = parse_value(key, value)?,
            "fixed" => self.fixed = parse_path(value),
            "moving" => self.moving = parse_path(value),
            "init_field" => self.init_field = parse_path(value),
            "displacement" => self.displacement = parse_path(value),
            "warped" => self.warped = parse_path(value),
            "masks" => self.masks = parse_path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v)
    }

    /// Applies every line of a config file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply(line).map_err(|e| Error::Format {
                context: source.to_string(),
                location: format!("line {}", i + 1),
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let text = std::fs::read_to_string(path)?;
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Fills derived settings and checks consistency.
    pub fn resolve(mut self) -> Result<Self> {
        if !self.iters_explicit && self.schedule.iters_per_level.len() != self.net.depth {
            self.schedule.iters_per_level = ScheduleConfig::desk_budget(self.net.depth);
        }
        self.net.validate()?;
        self.schedule.validate(Some(self.net.depth))?;
        if !(self.phantom.noise >= 0.0) || !self.phantom.noise.is_finite() {
            return Err(Error::Config(format!("phantom_noise must be >= 0, got {}", self.phantom.noise)));
        }
        if let Some(m) = self.phantom.max_displacement {
            if !(m >= 0.0) || !m.is_finite() {
                return Err(Error::Config(format!("phantom_max_displacement must be >= 0, got {m}")));
            }
        }
        Ok(self)
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = self.net.to_pairs();
        out.extend(self.schedule.to_pairs());
        let [z, y, x] = self.phantom.extent;
        out.extend([
            ("phantom_extent".to_string(), format!("{x},{y},{z}")),
            ("phantom_seed".into(), self.phantom.seed.to_string()),
            ("phantom_noise".into(), self.phantom.noise.to_string()),
            (
                "phantom_max_displacement".into(),
                self.phantom.max_displacement.map(|v| v.to_string()).unwrap_or_else(|| "auto".into()),
            ),
            ("method".into(), self.method.to_string()),
            ("normalize".into(), self.normalize.to_string()),
            ("overlap_denominator".into(), overlap_str(self.overlap_denominator).into()),
            ("threads".into(), self.threads.to_string()),
            ("fixed".into(), opt_path(&self.fixed)),
            ("moving".into(), opt_path(&self.moving)),
            ("init_field".into(), opt_path(&self.init_field)),
            ("displacement".into(), opt_path(&self.displacement)),
            ("warped".into(), opt_path(&self.warped)),
            ("masks".into(), opt_path(&self.masks)),
            ("out_dir".into(), self.out_dir.display().to_string()),
        ]);
        out
    }

    /// The resolved configuration as a loadable file.
    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        let err = c.apply("learning_rate=0.1").unwrap_err();
        assert!(err.to_string().contains("unknown key"));
        assert!(c.apply("no_equals_sign").is_err());
    }

    #[test]
    fn echo_reloads_to_the_same_config() {
        let mut c = RunConfig::default();
        for a in [
            "depth=2",
            "lr=0.000317",
            "lambda_smooth=0",
            "phantom_extent=32,40,48",
            "phantom_max_displacement=2.5",
            "method=direct",
            "normalize=zscore",
            "overlap_denominator=union",
            "fixed=a/b.nvol",
            "down_mode=max_pool",
            "threads=3",
        ] {
            c.apply(a).unwrap();
        }
        let c = c.resolve().unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text(), "echo").unwrap();
        let back = back.resolve().unwrap();
        assert_eq!(back, RunConfig { iters_explicit: true, ..c.clone() });
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn schedule_follows_depth_unless_given() {
        let mut c = RunConfig::default();
        c.apply("depth=4").unwrap();
        let c = c.resolve().unwrap();
        assert_eq!(c.schedule.iters_per_level, ScheduleConfig::desk_budget(4));

        let mut c = RunConfig::default();
        c.apply("depth=4").unwrap();
        c.apply("iters_per_level=1,2").unwrap();
        assert!(c.resolve().is_err());
    }

    #[test]
    fn config_file_errors_carry_the_line() {
        let mut c = RunConfig::default();
        let err = c.apply_text("# comment\nlr=1e-3\n\ndepth=x\n", "cfg").unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
    }

    #[test]
    fn phantom_options_build_a_spec() {
        let opts = PhantomOptions {
            extent: [16; 3],
            seed: 2,
            noise: 0.0,
            max_displacement: Some(1.0),
        };
        let spec = opts.spec(7).unwrap();
        assert_eq!(spec.noise, 0.0);
        let phi = crate::field::exp_velocity(&spec.velocity(), 7).unwrap();
        assert!((phi.max_magnitude() - 1.0).abs() < 1e-3);
    }
}
