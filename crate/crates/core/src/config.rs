//! Run configuration: a flat `key = value` text format with dotted section
//! prefixes. Later sources override earlier ones: defaults, then a config
//! file, then individual `key=value` overrides.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};

use crate::coarse::RansacConfig;
use crate::error::{GpoError, Result};
use crate::loss::LossWeights;
use crate::optim::OptimConfig;
use crate::primitives::RadiusConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Nodes seeded from keypoint matches.
    Dcn,
    /// Nodes on a regular lattice.
    Gcn,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Dcn => "dcn",
            Mode::Gcn => "gcn",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = GpoError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dcn" => Ok(Mode::Dcn),
            "gcn" => Ok(Mode::Gcn),
            other => Err(GpoError::Config(format!("mode must be dcn or gcn, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub fixed: Option<PathBuf>,
    pub moving: Option<PathBuf>,
    pub matches: Option<PathBuf>,
    pub landmarks: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// `None`: derived from the resize factor.
    pub blur_sigma: Option<f64>,
    /// Long side of the working frame; `None` keeps native resolution.
    pub size: Option<usize>,
    pub ransac_iters: usize,
    pub ransac_thresh_px: f64,
    pub ransac_min_inliers: Option<usize>,
    pub n_nodes: usize,
    pub grid_n: usize,
    pub r_min: f64,
    pub r_max: f64,
    pub init_radius: Option<f64>,
    pub eta_g: f64,
    pub eta_t: f64,
    pub eta_r: f64,
    pub tau_max: usize,
    pub k: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub snapshot_every: usize,
    /// `None`: 0.4 for dcn, 0 for gcn.
    pub alpha_gcc: Option<f64>,
    pub alpha_ncc: f64,
    pub norm_len: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let o = OptimConfig::default();
        let r = RansacConfig::default();
        let rc = RadiusConfig::default();
        RunConfig {
            mode: Mode::Dcn,
            seed: 0,
            fixed: None,
            moving: None,
            matches: None,
            landmarks: None,
            out: None,
            blur_sigma: None,
            size: Some(1024),
            ransac_iters: r.iters,
            ransac_thresh_px: r.inlier_thresh_px,
            ransac_min_inliers: r.min_inliers,
            n_nodes: 1000,
            grid_n: 20,
            r_min: rc.r_min,
            r_max: rc.r_max,
            init_radius: None,
            eta_g: o.eta_g,
            eta_t: o.eta_t,
            eta_r: o.eta_r,
            tau_max: o.tau_max,
            k: o.k,
            adam_beta1: o.adam_beta1,
            adam_beta2: o.adam_beta2,
            adam_eps: o.adam_eps,
            snapshot_every: o.snapshot_every,
            alpha_gcc: None,
            alpha_ncc: o.loss_weights.alpha_ncc,
            norm_len: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "mode",
    "seed",
    "io.fixed",
    "io.moving",
    "io.matches",
    "io.landmarks",
    "io.out",
    "preproc.blur_sigma",
    "preproc.size",
    "ransac.iters",
    "ransac.thresh_px",
    "ransac.min_inliers",
    "nodes.n",
    "nodes.grid_n",
    "nodes.r_min",
    "nodes.r_max",
    "nodes.init_radius",
    "optim.eta_g",
    "optim.eta_t",
    "optim.eta_r",
    "optim.tau_max",
    "optim.k",
    "optim.adam_beta1",
    "optim.adam_beta2",
    "optim.adam_eps",
    "optim.snapshot_every",
    "loss.alpha_gcc",
    "loss.alpha_ncc",
    "loss.norm_len",
];

const AUTO: &str = "auto";

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| GpoError::Config(format!("{key}: cannot parse {v:?}")))
}

fn auto_or<T: std::str::FromStr>(key: &str, v: &str, none: &str) -> Result<Option<T>> {
    if v.eq_ignore_ascii_case(none) {
        Ok(None)
    } else {
        num(key, v).map(Some)
    }
}

fn path_or_none(v: &str) -> Option<PathBuf> {
    if v.is_empty() || v == "none" {
        None
    } else {
        Some(PathBuf::from(v))
    }
}

fn show<T: fmt::Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), |x| x.to_string())
}

fn show_path(v: &Option<PathBuf>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one key; the value is validated against the whole config later.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "seed" => self.seed = num(key, v)?,
            "io.fixed" => self.fixed = path_or_none(v),
            "io.moving" => self.moving = path_or_none(v),
            "io.matches" => self.matches = path_or_none(v),
            "io.landmarks" => self.landmarks = path_or_none(v),
            "io.out" => self.out = path_or_none(v),
            "preproc.blur_sigma" => self.blur_sigma = auto_or(key, v, AUTO)?,
            "preproc.size" => self.size = auto_or(key, v, "native")?,
            "ransac.iters" => self.ransac_iters = num(key, v)?,
            "ransac.thresh_px" => self.ransac_thresh_px = num(key, v)?,
            "ransac.min_inliers" => self.ransac_min_inliers = auto_or(key, v, AUTO)?,
            "nodes.n" => self.n_nodes = num(key, v)?,
            "nodes.grid_n" => self.grid_n = num(key, v)?,
            "nodes.r_min" => self.r_min = num(key, v)?,
            "nodes.r_max" => self.r_max = num(key, v)?,
            "nodes.init_radius" => self.init_radius = auto_or(key, v, AUTO)?,
            "optim.eta_g" => self.eta_g = num(key, v)?,
            "optim.eta_t" => self.eta_t = num(key, v)?,
            "optim.eta_r" => self.eta_r = num(key, v)?,
            "optim.tau_max" => self.tau_max = num(key, v)?,
            "optim.k" => self.k = num(key, v)?,
            "optim.adam_beta1" => self.adam_beta1 = num(key, v)?,
            "optim.adam_beta2" => self.adam_beta2 = num(key, v)?,
            "optim.adam_eps" => self.adam_eps = num(key, v)?,
            "optim.snapshot_every" => self.snapshot_every = num(key, v)?,
            "loss.alpha_gcc" => self.alpha_gcc = auto_or(key, v, AUTO)?,
            "loss.alpha_ncc" => self.alpha_ncc = num(key, v)?,
            "loss.norm_len" => self.norm_len = auto_or(key, v, AUTO)?,
            other => return Err(GpoError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| GpoError::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k, v)
    }

    /// Applies every line of a config file body.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GpoError::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v)
                .map_err(|e| GpoError::Config(format!("line {}: {}", no + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GpoError::io(path, e))?;
        self.merge_text(&text).map_err(|e| GpoError::format(path, e.to_string()))
    }

    /// Defaults, then `file`, then `overrides`, validated.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(f) = file {
            cfg.merge_file(f)?;
        }
        for kv in overrides {
            cfg.apply_override(kv)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GpoError::Config(m));
        if let Some(s) = self.blur_sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return bad(format!("preproc.blur_sigma must be >= 0, got {s}"));
            }
        }
        if self.size == Some(0) {
            return bad("preproc.size must be >= 1 or native".into());
        }
        if self.ransac_iters == 0 {
            return bad("ransac.iters must be >= 1".into());
        }
        if !(self.ransac_thresh_px > 0.0 && self.ransac_thresh_px.is_finite()) {
            return bad(format!("ransac.thresh_px must be positive, got {}", self.ransac_thresh_px));
        }
        if self.ransac_min_inliers.is_some_and(|m| m < 4) {
            return bad("ransac.min_inliers must be >= 4".into());
        }
        if self.n_nodes == 0 {
            return bad("nodes.n must be >= 1".into());
        }
        if self.grid_n < 2 {
            return bad(format!("nodes.grid_n must be >= 2, got {}", self.grid_n));
        }
        RadiusConfig::new(self.r_min, self.r_max).map_err(|_| {
            GpoError::Config(format!(
                "nodes.r_min/nodes.r_max need 0 <= r_min < r_max, got {} and {}",
                self.r_min, self.r_max
            ))
        })?;
        if let Some(r) = self.init_radius {
            let (lo, hi) = (self.r_min + 0.1, self.r_max + 0.1);
            if !(r > lo && r < hi) {
                return bad(format!("nodes.init_radius must lie in ({lo}, {hi}), got {r}"));
            }
        }
        if let Some(a) = self.alpha_gcc {
            if !(a >= 0.0 && a.is_finite()) {
                return bad(format!("loss.alpha_gcc must be >= 0, got {a}"));
            }
        }
        self.optim_config(self.mode).validate()
    }

    pub fn radius_config(&self) -> RadiusConfig {
        RadiusConfig {
            r_min: self.r_min,
            r_max: self.r_max,
        }
    }

    pub fn ransac_config(&self) -> RansacConfig {
        RansacConfig {
            iters: self.ransac_iters,
            inlier_thresh_px: self.ransac_thresh_px,
            min_inliers: self.ransac_min_inliers,
            seed: self.seed,
        }
    }

    pub fn alpha_gcc_for(&self, mode: Mode) -> f64 {
        self.alpha_gcc.unwrap_or(match mode {
            Mode::Dcn => LossWeights::default().alpha_gcc,
            Mode::Gcn => 0.0,
        })
    }

    pub fn optim_config(&self, mode: Mode) -> OptimConfig {
        OptimConfig {
            eta_g: self.eta_g,
            eta_t: self.eta_t,
            eta_r: self.eta_r,
            tau_max: self.tau_max,
            k: self.k,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            loss_weights: LossWeights {
                alpha_gcc: self.alpha_gcc_for(mode),
                alpha_ncc: self.alpha_ncc,
            },
            seed: self.seed,
            gcc_norm_len: self.norm_len,
            snapshot_every: self.snapshot_every,
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "mode" => self.mode.to_string(),
            "seed" => self.seed.to_string(),
            "io.fixed" => show_path(&self.fixed),
            "io.moving" => show_path(&self.moving),
            "io.matches" => show_path(&self.matches),
            "io.landmarks" => show_path(&self.landmarks),
            "io.out" => show_path(&self.out),
            "preproc.blur_sigma" => show(&self.blur_sigma, AUTO),
            "preproc.size" => show(&self.size, "native"),
            "ransac.iters" => self.ransac_iters.to_string(),
            "ransac.thresh_px" => self.ransac_thresh_px.to_string(),
            "ransac.min_inliers" => show(&self.ransac_min_inliers, AUTO),
            "nodes.n" => self.n_nodes.to_string(),
            "nodes.grid_n" => self.grid_n.to_string(),
            "nodes.r_min" => self.r_min.to_string(),
            "nodes.r_max" => self.r_max.to_string(),
            "nodes.init_radius" => show(&self.init_radius, AUTO),
            "optim.eta_g" => self.eta_g.to_string(),
            "optim.eta_t" => self.eta_t.to_string(),
            "optim.eta_r" => self.eta_r.to_string(),
            "optim.tau_max" => self.tau_max.to_string(),
            "optim.k" => self.k.to_string(),
            "optim.adam_beta1" => self.adam_beta1.to_string(),
            "optim.adam_beta2" => self.adam_beta2.to_string(),
            "optim.adam_eps" => self.adam_eps.to_string(),
            "optim.snapshot_every" => self.snapshot_every.to_string(),
            "loss.alpha_gcc" => show(&self.alpha_gcc, AUTO),
            "loss.alpha_ncc" => self.alpha_ncc.to_string(),
            "loss.norm_len" => show(&self.norm_len, AUTO),
            _ => return None,
        })
    }

    /// Every key in a fixed order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).unwrap_or_default());
        }
        s
    }

    /// FNV-1a over the settings that affect results (paths excluded).
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for k in KEYS.iter().filter(|k| !k.starts_with("io.")) {
            let line = format!("{k}={}\n", self.get(k).unwrap_or_default());
            for b in line.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}
