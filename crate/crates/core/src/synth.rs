//! Synthetic vessel images with an exactly known deformation, for tests,
//! benchmarks and end-to-end checks.
//!
//! The scene is analytic (background plus Gaussian-profile vessels), so the
//! moving image is rendered by evaluating the scene at the inverse of the
//! ground-truth map rather than by resampling a raster.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::coarse::{dlt_homography, GlobalTransform, Match, MatchSet};
use crate::error::{GpoError, Result};
use crate::eval::LandmarkPairs;
use crate::field::{blend, build_knn, DisplacementField};
use crate::geom::{PixelCoord, Vec2};
use crate::imagecore::{save_float_dump, save_png, Image};
use crate::primitives::{beta_for_radius, ControlNode, NodeSet, RadiusConfig};
use crate::table;

/// Peak-to-peak range of the additive pixel noise.
pub const NOISE_RANGE: f64 = 0.01;
/// Largest accepted inversion residual, in pixels.
pub const INVERSION_TOL: f64 = 0.05;
const INVERSION_ITERS: usize = 20;
const CELL: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub size: usize,
    pub n_vessels: usize,
    /// Full width at half depth, drawn uniformly from this range.
    pub vessel_width_px: (f64, f64),
    pub deform_nodes: usize,
    pub deform_max_px: f64,
    pub intensity_jitter: f64,
    pub landmark_count: usize,
    /// Number of keypoint matches; landmarks come first.
    pub match_count: usize,
    pub match_noise_px: f64,
    /// Corner perturbation of the global homography as a fraction of `size`.
    pub transform_perturb: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            size: 256,
            n_vessels: 8,
            vessel_width_px: (2.0, 4.0),
            deform_nodes: 6,
            deform_max_px: 12.0,
            intensity_jitter: 0.05,
            landmark_count: 10,
            match_count: 200,
            match_noise_px: 0.0,
            transform_perturb: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GpoError::Config(m));
        if self.size < 64 {
            return bad(format!("synth size must be >= 64, got {}", self.size));
        }
        let (lo, hi) = self.vessel_width_px;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return bad(format!("vessel width range ({lo}, {hi}) is invalid"));
        }
        if !(self.deform_max_px >= 0.0 && self.deform_max_px.is_finite()) {
            return bad(format!("deform_max_px must be >= 0, got {}", self.deform_max_px));
        }
        if self.deform_nodes == 0 {
            return bad("deform_nodes must be >= 1".into());
        }
        if !(0.0..=0.2).contains(&self.intensity_jitter) {
            return bad(format!("intensity_jitter must lie in [0, 0.2], got {}", self.intensity_jitter));
        }
        if self.landmark_count == 0 {
            return bad("landmark_count must be >= 1".into());
        }
        if !(self.match_noise_px >= 0.0 && self.match_noise_px.is_finite()) {
            return bad("match_noise_px must be >= 0".into());
        }
        if !(0.0..0.25).contains(&self.transform_perturb) {
            return bad(format!("transform_perturb must lie in [0, 0.25), got {}", self.transform_perturb));
        }
        Ok(())
    }

    /// `key = value` lines, one per field.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "size = {}", self.size);
        let _ = writeln!(s, "n_vessels = {}", self.n_vessels);
        let _ = writeln!(s, "vessel_width_min = {}", self.vessel_width_px.0);
        let _ = writeln!(s, "vessel_width_max = {}", self.vessel_width_px.1);
        let _ = writeln!(s, "deform_nodes = {}", self.deform_nodes);
        let _ = writeln!(s, "deform_max_px = {}", self.deform_max_px);
        let _ = writeln!(s, "intensity_jitter = {}", self.intensity_jitter);
        let _ = writeln!(s, "landmark_count = {}", self.landmark_count);
        let _ = writeln!(s, "match_count = {}", self.match_count);
        let _ = writeln!(s, "match_noise_px = {}", self.match_noise_px);
        let _ = writeln!(s, "transform_perturb = {}", self.transform_perturb);
        s
    }

    /// Sets one field by its manifest key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let f = || -> Result<f64> {
            value
                .trim()
                .parse::<f64>()
                .map_err(|_| GpoError::Config(format!("synth.{key}: expected a number, got {value:?}")))
        };
        let u = || -> Result<usize> {
            value
                .trim()
                .parse::<usize>()
                .map_err(|_| GpoError::Config(format!("synth.{key}: expected a non-negative integer, got {value:?}")))
        };
        match key {
            "seed" => self.seed = u()? as u64,
            "size" => self.size = u()?,
            "n_vessels" => self.n_vessels = u()?,
            "vessel_width_min" => self.vessel_width_px.0 = f()?,
            "vessel_width_max" => self.vessel_width_px.1 = f()?,
            "deform_nodes" => self.deform_nodes = u()?,
            "deform_max_px" => self.deform_max_px = f()?,
            "intensity_jitter" => self.intensity_jitter = f()?,
            "landmark_count" => self.landmark_count = u()?,
            "match_count" => self.match_count = u()?,
            "match_noise_px" => self.match_noise_px = f()?,
            "transform_perturb" => self.transform_perturb = f()?,
            _ => return Err(GpoError::Config(format!("unknown synth key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut cfg = SynthConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| GpoError::Config(format!("manifest line without '=': {line:?}")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, Copy)]
struct Segment {
    a: Vec2,
    b: Vec2,
    sigma: f64,
    depth: f64,
}

impl Segment {
    fn dist2(&self, p: Vec2) -> f64 {
        let ab = self.b - self.a;
        let l2 = ab.norm_sq();
        let s = if l2 > 0.0 { ((p - self.a).dot(ab) / l2).clamp(0.0, 1.0) } else { 0.0 };
        (p - (self.a + ab * s)).norm_sq()
    }

    fn reach(&self) -> f64 {
        4.0 * self.sigma
    }
}

/// Analytic intensity model: smooth background minus the darkest vessel
/// contribution at each point.
#[derive(Debug, Clone)]
pub struct Scene {
    size: f64,
    blobs: Vec<(Vec2, f64, f64)>,
    segments: Vec<Segment>,
    centerline: Vec<Vec2>,
    cells: usize,
    grid: Vec<Vec<u32>>,
}

impl Scene {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.size as f64;
        let mut r = rng(cfg.seed, 1);
        // Three broad blobs whose amplitudes sum to at most 0.2 in magnitude,
        // keeping the background inside [0.3, 0.7].
        let blobs = (0..3)
            .map(|_| {
                let c = Vec2::new(r.random_range(0.0..s), r.random_range(0.0..s));
                let amp = r.random_range(-0.2 / 3.0..0.2 / 3.0);
                let width = r.random_range(s / 4.0..s / 2.0);
                (c, amp, width)
            })
            .collect();

        let mut r = rng(cfg.seed, 2);
        let mut segments = Vec::new();
        let mut centerline = Vec::new();
        for _ in 0..cfg.n_vessels {
            let (lo, hi) = cfg.vessel_width_px;
            let width = if hi > lo { r.random_range(lo..hi) } else { lo };
            let depth = r.random_range(0.2..0.35);
            let start = Vec2::new(r.random_range(0.1 * s..0.9 * s), r.random_range(0.1 * s..0.9 * s));
            let heading = r.random_range(0.0..TAU);
            let trunk = walk(&mut r, start, heading, (0.45 * s / 2.0) as usize, s);
            let branches = r.random_range(0..=2usize);
            let mut paths = vec![(trunk.clone(), width)];
            for _ in 0..branches {
                if trunk.len() < 8 {
                    break;
                }
                let at = r.random_range(trunk.len() / 4..3 * trunk.len() / 4);
                let dir = trunk[at + 1] - trunk[at];
                let base = dir.y.atan2(dir.x);
                let turn = r.random_range(0.4..1.0) * if r.random::<bool>() { 1.0 } else { -1.0 };
                let b = walk(&mut r, trunk[at], base + turn, (0.25 * s / 2.0) as usize, s);
                paths.push((b, (0.75 * width).max(lo.min(1.5))));
            }
            for (path, w) in paths {
                let sigma = w / 2.355;
                for pair in path.windows(2) {
                    segments.push(Segment { a: pair[0], b: pair[1], sigma, depth });
                }
                centerline.extend(path);
            }
        }

        let cells = (s / CELL).ceil() as usize;
        let mut grid = vec![Vec::new(); cells * cells];
        for (id, seg) in segments.iter().enumerate() {
            let reach = seg.reach();
            let x0 = ((seg.a.x.min(seg.b.x) - reach) / CELL).floor().max(0.0) as usize;
            let x1 = ((seg.a.x.max(seg.b.x) + reach) / CELL).floor();
            let y0 = ((seg.a.y.min(seg.b.y) - reach) / CELL).floor().max(0.0) as usize;
            let y1 = ((seg.a.y.max(seg.b.y) + reach) / CELL).floor();
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            for cy in y0..=(y1 as usize).min(cells - 1) {
                for cx in x0..=(x1 as usize).min(cells - 1) {
                    grid[cy * cells + cx].push(id as u32);
                }
            }
        }
        Ok(Scene {
            size: s,
            blobs,
            segments,
            centerline,
            cells,
            grid,
        })
    }

    pub fn background(&self, p: Vec2) -> f64 {
        0.5 + self
            .blobs
            .iter()
            .map(|&(c, a, w)| a * (-(p - c).norm_sq() / (2.0 * w * w)).exp())
            .sum::<f64>()
    }

    /// Darkening due to vessels at `p`, in `[0, 0.35]`.
    pub fn vessel_depth(&self, p: Vec2) -> f64 {
        let cx = (p.x / CELL).floor();
        let cy = (p.y / CELL).floor();
        // Points beyond the last cell still see segments registered there.
        let c = self.cells as f64 - 1.0;
        if cx < -1.0 || cy < -1.0 || cx > c + 1.0 || cy > c + 1.0 {
            return 0.0;
        }
        let cell = cy.clamp(0.0, c) as usize * self.cells + cx.clamp(0.0, c) as usize;
        let mut best = 0.0f64;
        for &id in &self.grid[cell] {
            let seg = &self.segments[id as usize];
            let d2 = seg.dist2(p);
            if d2 < seg.reach() * seg.reach() {
                best = best.max(seg.depth * (-d2 / (2.0 * seg.sigma * seg.sigma)).exp());
            }
        }
        best
    }

    /// Noise-free intensity at any continuous point.
    pub fn value(&self, p: Vec2) -> f64 {
        (self.background(p) - self.vessel_depth(p)).clamp(0.0, 1.0)
    }

    /// Vertices of every centerline, in generation order.
    pub fn centerline(&self) -> &[Vec2] {
        &self.centerline
    }

    pub fn size(&self) -> f64 {
        self.size
    }
}

fn walk(r: &mut ChaCha8Rng, start: Vec2, mut heading: f64, steps: usize, s: f64) -> Vec<Vec2> {
    let mut pts = vec![start];
    let mut p = start;
    for _ in 0..steps {
        heading += r.random_range(-0.2..0.2);
        p += Vec2::new(heading.cos(), heading.sin()) * 2.0;
        if p.x < -0.05 * s || p.y < -0.05 * s || p.x > 1.05 * s || p.y > 1.05 * s {
            break;
        }
        pts.push(p);
    }
    pts
}

fn noise(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut r = rng(seed, stream);
    (0..n).map(|_| r.random_range(-0.5..0.5) * NOISE_RANGE).collect()
}

/// Fixed image: the scene sampled at pixel centers plus seeded noise.
pub fn gen_vessel_image(cfg: &SynthConfig) -> Result<Image> {
    let scene = Scene::new(cfg)?;
    Ok(render_fixed(&scene, cfg))
}

fn render_fixed(scene: &Scene, cfg: &SynthConfig) -> Image {
    let n = cfg.size;
    let eps = noise(cfg.seed, 3, n * n);
    let mut data = vec![0.0; n * n];
    data.par_chunks_mut(n).enumerate().for_each(|(y, row)| {
        for (x, v) in row.iter_mut().enumerate() {
            *v = scene.value(Vec2::new(x as f64, y as f64)) + eps[y * n + x];
        }
    });
    Image::from_clamped(n, n, data)
}

/// Ground-truth displacement: a handful of wide Gaussian nodes blended with
/// full support. Displacements are drawn uniformly from the disk of radius
/// `deform_max_px`, so `|u|` never exceeds it.
pub fn gen_deformation(cfg: &SynthConfig) -> Result<DisplacementField> {
    cfg.validate()?;
    let n = cfg.size;
    let s = n as f64;
    let mut r = rng(cfg.seed, 4);
    let rc = RadiusConfig::new(0.0, s)?;
    let d = cfg.deform_max_px;
    let nodes = (0..cfg.deform_nodes)
        .map(|_| {
            let center = Vec2::new(r.random_range(0.0..s), r.random_range(0.0..s));
            let radius = r.random_range(s / 8.0..s / 3.0);
            let t = loop {
                let t = Vec2::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
                if t.norm_sq() <= 1.0 {
                    break t * d;
                }
            };
            Ok(ControlNode {
                center,
                displacement: t,
                beta: beta_for_radius(radius, &rc)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let set = NodeSet::new(nodes, rc, vec![], vec![])?;
    let index = build_knn(&set, n, n, cfg.deform_nodes)?;
    blend(&set, &index)
}

/// Small random homography from perturbed image corners; identity when the
/// perturbation is zero.
pub fn gen_transform(cfg: &SynthConfig) -> Result<GlobalTransform> {
    cfg.validate()?;
    if cfg.transform_perturb == 0.0 {
        return Ok(GlobalTransform::identity());
    }
    let s = cfg.size as f64;
    let mut r = rng(cfg.seed, 5);
    let m = cfg.transform_perturb * s;
    let corners = [Vec2::new(0.0, 0.0), Vec2::new(s, 0.0), Vec2::new(s, s), Vec2::new(0.0, s)];
    let moved: Vec<Vec2> = corners
        .iter()
        .map(|&c| c + Vec2::new(r.random_range(-m..=m), r.random_range(-m..=m)))
        .collect();
    dlt_homography(&corners, &moved)
}

/// `H (x + u(x))`: where a fixed-frame point lands in the moving image.
pub fn forward_map(p: PixelCoord, transform: &GlobalTransform, field: &DisplacementField) -> Result<PixelCoord> {
    transform.apply(p + field.sample(p))
}

/// Solves `H (x + u(x)) = y` for `x` by fixed-point iteration on the
/// displacement. Returns the solution and its residual in pixels.
pub fn invert_map(
    y: PixelCoord,
    h_inv: &GlobalTransform,
    transform: &GlobalTransform,
    field: &DisplacementField,
) -> Result<(PixelCoord, f64)> {
    let z = h_inv.apply(y)?;
    let mut x = z;
    let mut res = f64::INFINITY;
    for _ in 0..INVERSION_ITERS {
        x = z - field.sample(x);
        res = (forward_map(x, transform, field)? - y).norm();
        if res < 1e-3 {
            break;
        }
    }
    Ok((x, res))
}

/// Backward warp through the composed map: `out(x) = img(H (x + u(x)))`.
pub fn warp_composed(img: &Image, transform: &GlobalTransform, field: &DisplacementField) -> Result<Image> {
    let (w, h) = (field.width(), field.height());
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().try_for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let q = forward_map(Vec2::new(x as f64, y as f64), transform, field)?;
            *o = img.sample_unchecked(q.x, q.y).value;
        }
        Ok::<_, GpoError>(())
    })?;
    Ok(Image::from_clamped(w, h, out))
}

#[derive(Debug, Clone)]
pub struct SynthPair {
    pub fixed: Image,
    pub moving: Image,
    pub gt_field: DisplacementField,
    pub landmarks: LandmarkPairs,
    pub matches: MatchSet,
    pub gt_transform: GlobalTransform,
    pub config: SynthConfig,
}

fn pick_points(r: &mut ChaCha8Rng, candidates: &[Vec2], count: usize, min_sep: f64, size: f64) -> Vec<Vec2> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    let mut out: Vec<Vec2> = Vec::with_capacity(count);
    for &i in &order {
        if out.len() == count {
            break;
        }
        let p = candidates[i];
        if out.iter().all(|q| (*q - p).norm() >= min_sep) {
            out.push(p);
        }
    }
    // Too few well-separated vessel points: relax spacing, then fall back to
    // uniform points.
    for &i in &order {
        if out.len() == count {
            break;
        }
        if !out.contains(&candidates[i]) {
            out.push(candidates[i]);
        }
    }
    while out.len() < count {
        out.push(Vec2::new(r.random_range(0.1 * size..0.9 * size), r.random_range(0.1 * size..0.9 * size)));
    }
    out
}

/// A complete synthetic case; see the module docs.
pub fn make_pair(cfg: &SynthConfig) -> Result<SynthPair> {
    cfg.validate()?;
    let n = cfg.size;
    let s = n as f64;
    let scene = Scene::new(cfg)?;
    let fixed = render_fixed(&scene, cfg);
    let gt_field = gen_deformation(cfg)?;
    let gt_transform = gen_transform(cfg)?;
    let h_inv = gt_transform.inverse()?;

    let eps = noise(cfg.seed, 6, n * n);
    let mut jr = rng(cfg.seed, 7);
    let j = cfg.intensity_jitter;
    let (gain, bias) = if j > 0.0 {
        (1.0 + jr.random_range(-j..=j), jr.random_range(-j..=j))
    } else {
        (1.0, 0.0)
    };
    let mut data = vec![0.0; n * n];
    let worst = data
        .par_chunks_mut(n)
        .enumerate()
        .map(|(y, row)| {
            let mut worst = 0.0f64;
            for (x, v) in row.iter_mut().enumerate() {
                let (p, res) = invert_map(Vec2::new(x as f64, y as f64), &h_inv, &gt_transform, &gt_field)?;
                worst = worst.max(res);
                *v = gain * (scene.value(p) + eps[y * n + x]) + bias;
            }
            Ok(worst)
        })
        .try_reduce(|| 0.0, |a, b| Ok(a.max(b)))?;
    if worst.is_nan() || worst >= INVERSION_TOL {
        return Err(GpoError::Generation(format!(
            "inverting the ground-truth map left a {worst:.3} px residual; use a smaller deform_max_px"
        )));
    }
    let moving = Image::from_clamped(n, n, data);

    let margin = 0.1 * s;
    let inside: Vec<Vec2> = scene
        .centerline()
        .iter()
        .copied()
        .filter(|p| p.x >= margin && p.y >= margin && p.x <= s - margin && p.y <= s - margin)
        .collect();
    let mut lr = rng(cfg.seed, 8);
    let marks = pick_points(&mut lr, &inside, cfg.landmark_count, s / 12.0, s);
    let pairs = marks
        .iter()
        .map(|&p| Ok((p, forward_map(p, &gt_transform, &gt_field)?)))
        .collect::<Result<Vec<_>>>()?;
    let landmarks = LandmarkPairs::new(pairs, 1.0, 1.0)?;

    let mut mr = rng(cfg.seed, 9);
    let extra = cfg.match_count.saturating_sub(marks.len());
    let mut points: Vec<Vec2> = marks.iter().copied().take(cfg.match_count).collect();
    points.extend(pick_points(&mut mr, &inside, extra, s / 64.0, s));
    let matches = points
        .iter()
        .map(|&p| {
            let q = forward_map(p, &gt_transform, &gt_field)?;
            let jitter = loop {
                let t = Vec2::new(mr.random_range(-1.0..=1.0), mr.random_range(-1.0..=1.0));
                if t.norm_sq() <= 1.0 {
                    break t * cfg.match_noise_px;
                }
            };
            Ok(Match {
                fixed: p,
                moving: q + jitter,
                confidence: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let matches = MatchSet::new(matches)?;

    Ok(SynthPair {
        fixed,
        moving,
        gt_field,
        landmarks,
        matches,
        gt_transform,
        config: cfg.clone(),
    })
}

/// File names inside a pair bundle.
pub mod bundle {
    pub const FIXED_PNG: &str = "fixed.png";
    pub const MOVING_PNG: &str = "moving.png";
    pub const FIXED: &str = "fixed.gpoi";
    pub const MOVING: &str = "moving.gpoi";
    pub const LANDMARKS: &str = "landmarks.csv";
    pub const MATCHES: &str = "matches.csv";
    pub const GT_FIELD: &str = "gt_field.gpof";
    pub const GT_TRANSFORM: &str = "gt_transform.txt";
    pub const MANIFEST: &str = "manifest.txt";
}

impl SynthPair {
    /// Writes the bundle into `dir`, creating it if needed.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| GpoError::io(dir, e))?;
        save_png(&self.fixed, dir.join(bundle::FIXED_PNG))?;
        save_png(&self.moving, dir.join(bundle::MOVING_PNG))?;
        save_float_dump(&self.fixed, dir.join(bundle::FIXED))?;
        save_float_dump(&self.moving, dir.join(bundle::MOVING))?;
        table::write_text(&dir.join(bundle::LANDMARKS), &self.landmarks.to_table())?;
        table::write_text(&dir.join(bundle::MATCHES), &self.matches.to_table())?;
        self.gt_field.write(dir.join(bundle::GT_FIELD))?;
        self.gt_transform.write(dir.join(bundle::GT_TRANSFORM))?;
        table::write_text(&dir.join(bundle::MANIFEST), &self.config.to_manifest())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest = dir.join(bundle::MANIFEST);
        let text = std::fs::read_to_string(&manifest).map_err(|e| GpoError::io(&manifest, e))?;
        Ok(SynthPair {
            fixed: crate::imagecore::load_image(dir.join(bundle::FIXED))?,
            moving: crate::imagecore::load_image(dir.join(bundle::MOVING))?,
            gt_field: DisplacementField::read(dir.join(bundle::GT_FIELD))?,
            landmarks: LandmarkPairs::read(dir.join(bundle::LANDMARKS), 1.0, 1.0)?,
            matches: MatchSet::read(dir.join(bundle::MATCHES))?,
            gt_transform: GlobalTransform::read(dir.join(bundle::GT_TRANSFORM))?,
            config: SynthConfig::from_manifest(&text)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{map_fixed_to_moving, tre};
    use crate::field::field_stats;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            size: 96,
            n_vessels: 4,
            match_count: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn images_are_deterministic() {
        let a = gen_vessel_image(&small(3)).unwrap();
        let b = gen_vessel_image(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, gen_vessel_image(&small(4)).unwrap());
    }

    #[test]
    fn vessel_coverage_is_sparse() {
        for seed in 0..5 {
            let cfg = SynthConfig { seed, ..SynthConfig::default() };
            let img = gen_vessel_image(&cfg).unwrap();
            let bg = gen_vessel_image(&SynthConfig { n_vessels: 0, ..cfg.clone() }).unwrap();
            let count = img.data().iter().zip(bg.data()).filter(|(v, b)| *b - *v > 0.1).count();
            let frac = count as f64 / img.data().len() as f64;
            assert!(frac < 0.15 && frac > 0.01, "seed {seed}: {frac}");
        }
    }

    #[test]
    fn empty_scene_is_smooth() {
        let cfg = SynthConfig { n_vessels: 0, ..SynthConfig::default() };
        let img = gen_vessel_image(&cfg).unwrap();
        let n = cfg.size;
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                let gx = 0.5 * (img.get(x + 1, y) - img.get(x - 1, y));
                let gy = 0.5 * (img.get(x, y + 1) - img.get(x, y - 1));
                assert!((gx * gx + gy * gy).sqrt() < 0.01);
            }
        }
        assert!(img.data().iter().all(|&v| (0.3 - NOISE_RANGE..=0.7 + NOISE_RANGE).contains(&v)));
    }

    #[test]
    fn deformation_bounds() {
        let zero = gen_deformation(&SynthConfig { deform_max_px: 0.0, ..small(1) }).unwrap();
        assert!(zero.data().iter().all(|u| *u == Vec2::ZERO));
        for seed in 0..4 {
            let f = gen_deformation(&small(seed)).unwrap();
            assert!(field_stats(&f).unwrap().max_mag <= 12.0);
            assert_eq!(f, gen_deformation(&small(seed)).unwrap());
        }
    }

    #[test]
    fn trivial_pair_is_identity() {
        let cfg = SynthConfig {
            deform_max_px: 0.0,
            transform_perturb: 0.0,
            intensity_jitter: 0.0,
            ..small(2)
        };
        let p = make_pair(&cfg).unwrap();
        // Noise streams differ between the two images by design; the scene
        // itself is identical.
        let diff = p.fixed.data().iter().zip(p.moving.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= NOISE_RANGE + 1e-12);
        let s = tre(&p.landmarks, &GlobalTransform::identity(), &DisplacementField::zeros(96, 96)).unwrap();
        assert!(s.max == 0.0);
    }

    #[test]
    fn ground_truth_is_self_consistent() {
        for seed in 0..3 {
            let cfg = SynthConfig { intensity_jitter: 0.0, ..small(seed) };
            let p = make_pair(&cfg).unwrap();
            for &(f, m) in &p.landmarks.pairs {
                let q = map_fixed_to_moving(f, &p.gt_transform, &p.gt_field, 1.0, 1.0).unwrap();
                assert!((q.point - m).norm() < INVERSION_TOL);
            }
            let back = warp_composed(&p.moving, &p.gt_transform, &p.gt_field).unwrap();
            let n = p.fixed.data().len() as f64;
            let mad = back.data().iter().zip(p.fixed.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
            assert!(mad < 0.02, "seed {seed}: {mad}");
        }
    }

    #[test]
    fn matches_start_with_landmarks_and_respect_noise() {
        let cfg = SynthConfig { match_noise_px: 2.0, ..small(5) };
        let p = make_pair(&cfg).unwrap();
        assert_eq!(p.matches.len(), 40);
        for (m, (f, mm)) in p.matches.pairs.iter().zip(&p.landmarks.pairs) {
            assert_eq!(m.fixed, *f);
            assert!((m.moving - *mm).norm() <= 2.0 + 1e-12);
        }
    }

    #[test]
    fn oversized_deformation_is_reported() {
        let cfg = SynthConfig {
            deform_max_px: 100.0,
            ..small(1)
        };
        assert!(matches!(make_pair(&cfg), Err(GpoError::Generation(_))));
    }

    #[test]
    fn bundle_round_trip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let p = make_pair(&small(7)).unwrap();
        p.write(dir.path().join("a")).unwrap();
        make_pair(&small(7)).unwrap().write(dir.path().join("b")).unwrap();
        for f in [bundle::FIXED_PNG, bundle::MOVING, bundle::LANDMARKS, bundle::MATCHES, bundle::GT_FIELD, bundle::MANIFEST] {
            assert_eq!(
                std::fs::read(dir.path().join("a").join(f)).unwrap(),
                std::fs::read(dir.path().join("b").join(f)).unwrap()
            );
        }
        let back = SynthPair::read(dir.path().join("a")).unwrap();
        assert_eq!(back.fixed, p.fixed);
        assert_eq!(back.config, p.config);
        assert_eq!(back.landmarks.pairs.len(), 10);
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig { size: 32, ..Default::default() }.validate().is_err());
        assert!(SynthConfig { intensity_jitter: 0.3, ..Default::default() }.validate().is_err());
        let cfg = SynthConfig::from_manifest(&small(9).to_manifest()).unwrap();
        assert_eq!(cfg, small(9));
    }
}
