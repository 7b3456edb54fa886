//! Gaussian control primitives: the trainable node state, the sigmoid radius
//! parametrization, and descriptor-based (DCN) / grid-based (GCN) node
//! initialization.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::coarse::{to_coarse_frame, GlobalTransform, Match, MatchSet};
use crate::error::{GpoError, Result};
use crate::geom::{PixelCoord, Vec2};
use crate::table;

/// Fixed offset keeping every radius strictly positive.
pub const RADIUS_OFFSET: f64 = 0.1;

/// Side of the stratification grid used by [`subsample_keypoints`].
pub const STRATA: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlNode {
    /// Trainable center in the coarse (fixed) frame.
    pub center: PixelCoord,
    /// Trainable displacement in pixels.
    pub displacement: Vec2,
    /// Raw radius parameter; see [`radius_of`].
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadiusConfig {
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for RadiusConfig {
    fn default() -> Self {
        RadiusConfig {
            r_min: 8.0,
            r_max: 256.0,
        }
    }
}

impl RadiusConfig {
    pub fn new(r_min: f64, r_max: f64) -> Result<Self> {
        if !(r_min >= 0.0 && r_max > r_min && r_max.is_finite()) {
            return Err(GpoError::Argument(format!(
                "radius bounds need 0 <= r_min < r_max, got r_min={r_min} r_max={r_max}"
            )));
        }
        Ok(RadiusConfig { r_min, r_max })
    }

    /// Open interval of attainable radii.
    pub fn bounds(&self) -> (f64, f64) {
        (self.r_min + RADIUS_OFFSET, self.r_max + RADIUS_OFFSET)
    }

    /// Clamps `r` into the attainable interval, a relative hair inside each end.
    pub fn clamp_radius(&self, r: f64) -> f64 {
        let (lo, hi) = self.bounds();
        let pad = 1e-6 * (hi - lo);
        r.clamp(lo + pad, hi - pad)
    }
}

#[inline]
fn sigmoid(b: f64) -> f64 {
    if b >= 0.0 {
        1.0 / (1.0 + (-b).exp())
    } else {
        let e = b.exp();
        e / (1.0 + e)
    }
}

/// `r = r_min + (r_max - r_min) * sigmoid(beta) + 0.1`.
#[inline]
pub fn radius_of(beta: f64, cfg: &RadiusConfig) -> f64 {
    cfg.r_min + (cfg.r_max - cfg.r_min) * sigmoid(beta) + RADIUS_OFFSET
}

/// Radius and `d r / d beta`.
#[inline]
pub fn radius_and_slope(beta: f64, cfg: &RadiusConfig) -> (f64, f64) {
    let s = sigmoid(beta);
    let span = cfg.r_max - cfg.r_min;
    (cfg.r_min + span * s + RADIUS_OFFSET, span * s * (1.0 - s))
}

/// Inverse of [`radius_of`] on the open interval `(r_min + 0.1, r_max + 0.1)`.
pub fn beta_for_radius(r: f64, cfg: &RadiusConfig) -> Result<f64> {
    let (lo, hi) = cfg.bounds();
    if !(r > lo && r < hi) {
        return Err(GpoError::Argument(format!(
            "radius {r} outside the open interval ({lo}, {hi})"
        )));
    }
    let p = (r - lo) / (cfg.r_max - cfg.r_min);
    Ok((p / (1.0 - p)).ln())
}

/// The trainable node population plus the frozen keypoint anchors used by the
/// keypoint-consistency loss (empty for grid nodes).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    nodes: Vec<ControlNode>,
    radius_cfg: RadiusConfig,
    anchors: Vec<PixelCoord>,
    targets: Vec<Vec2>,
    revision: u64,
}

impl NodeSet {
    pub fn new(
        nodes: Vec<ControlNode>,
        radius_cfg: RadiusConfig,
        anchors: Vec<PixelCoord>,
        targets: Vec<Vec2>,
    ) -> Result<Self> {
        if nodes.is_empty() {
            return Err(GpoError::Argument("a node set needs at least one node".into()));
        }
        if anchors.len() != targets.len() || (!anchors.is_empty() && anchors.len() != nodes.len()) {
            return Err(GpoError::Argument(format!(
                "anchors ({}) and targets ({}) must both be empty or match the node count ({})",
                anchors.len(),
                targets.len(),
                nodes.len()
            )));
        }
        let finite = nodes
            .iter()
            .all(|n| n.center.is_finite() && n.displacement.is_finite() && n.beta.is_finite());
        if !finite || !anchors.iter().chain(&targets).all(|p| p.is_finite()) {
            return Err(GpoError::Argument("node set contains non-finite values".into()));
        }
        Ok(NodeSet {
            nodes,
            radius_cfg,
            anchors,
            targets,
            revision: 0,
        })
    }

    #[inline]
    pub fn nodes(&self) -> &[ControlNode] {
        &self.nodes
    }

    /// Mutable access; bumps the revision so stale neighbor indices are caught.
    pub fn nodes_mut(&mut self) -> &mut [ControlNode] {
        self.revision += 1;
        &mut self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn radius_cfg(&self) -> &RadiusConfig {
        &self.radius_cfg
    }

    pub fn anchors(&self) -> &[PixelCoord] {
        &self.anchors
    }

    pub fn targets(&self) -> &[Vec2] {
        &self.targets
    }

    pub fn has_anchors(&self) -> bool {
        !self.anchors.is_empty()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn radius(&self, i: usize) -> f64 {
        radius_of(self.nodes[i].beta, &self.radius_cfg)
    }

    /// Text table `x,y,tx,ty,beta` preceded by `# r_min=..` / `# r_max=..`.
    /// Anchors and targets are not part of the table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# r_min={:e}", self.radius_cfg.r_min);
        let _ = writeln!(s, "# r_max={:e}", self.radius_cfg.r_max);
        s.push_str("x,y,tx,ty,beta\n");
        for n in &self.nodes {
            let _ = writeln!(
                s,
                "{:e},{:e},{:e},{:e},{:e}",
                n.center.x, n.center.y, n.displacement.x, n.displacement.y, n.beta
            );
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        table::write_text(path.as_ref(), &self.to_table())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| GpoError::io(path, e))?;
        let header_value = |key: &str| -> Result<f64> {
            text.lines()
                .filter_map(|l| l.trim().strip_prefix('#'))
                .filter_map(|l| l.trim().strip_prefix(key))
                .find_map(|v| v.trim().strip_prefix('=').and_then(|v| v.trim().parse().ok()))
                .ok_or_else(|| GpoError::format(path, format!("missing `# {key}=` header")))
        };
        let cfg = RadiusConfig::new(header_value("r_min")?, header_value("r_max")?)
            .map_err(|e| GpoError::format(path, e.to_string()))?;
        let (_, rows) =
            table::parse_numeric(&text, 5, 5).map_err(|m| GpoError::format(path, m))?;
        let nodes = rows
            .into_iter()
            .map(|r| ControlNode {
                center: Vec2::new(r[0], r[1]),
                displacement: Vec2::new(r[2], r[3]),
                beta: r[4],
            })
            .collect();
        NodeSet::new(nodes, cfg, vec![], vec![]).map_err(|e| GpoError::format(path, e.to_string()))
    }
}

/// Lattice spacing `W / n`, the default initial radius for grid nodes.
pub fn default_gcn_radius(width: usize, n: usize) -> f64 {
    width as f64 / n as f64
}

/// Twice the median nearest-neighbor distance between points, the default
/// initial radius for descriptor nodes. Falls back to `fallback` when fewer
/// than two distinct points exist.
pub fn default_dcn_radius(points: &[PixelCoord], fallback: f64) -> f64 {
    if points.len() < 2 {
        return fallback;
    }
    let mut nn: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, q)| (*q - *p).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(|a, b| a.total_cmp(b));
    let med = nn[nn.len() / 2];
    if med > 0.0 {
        2.0 * med
    } else {
        fallback
    }
}

/// Descriptor-based nodes: one per retained match, centered on the fixed
/// point with displacement toward the moving point mapped into the coarse
/// frame.
pub fn init_dcn(
    matches: &MatchSet,
    transform: &GlobalTransform,
    n_nodes: usize,
    cfg: &RadiusConfig,
    init_radius: f64,
    seed: u64,
) -> Result<NodeSet> {
    if matches.is_empty() {
        return Err(GpoError::Degenerate("no matches to initialize nodes from".into()));
    }
    if n_nodes == 0 {
        return Err(GpoError::Argument("n_nodes must be at least 1".into()));
    }
    let beta = beta_for_radius(init_radius, cfg)?;
    let inverse = transform.inverse()?;
    let chosen = subsample_keypoints(matches, n_nodes, seed);
    let mut nodes = Vec::with_capacity(chosen.len());
    let mut anchors = Vec::with_capacity(chosen.len());
    let mut targets = Vec::with_capacity(chosen.len());
    for m in &chosen.pairs {
        let moving_coarse = inverse.apply(m.moving)?;
        let t = moving_coarse - m.fixed;
        nodes.push(ControlNode {
            center: m.fixed,
            displacement: t,
            beta,
        });
        anchors.push(m.fixed);
        targets.push(t);
    }
    NodeSet::new(nodes, *cfg, anchors, targets)
}

/// Same as [`init_dcn`] but maps points with [`to_coarse_frame`] one at a
/// time; kept for callers holding a single point.
pub fn node_from_match(m: &Match, transform: &GlobalTransform, beta: f64) -> Result<ControlNode> {
    let moving_coarse = to_coarse_frame(transform, m.moving)?;
    Ok(ControlNode {
        center: m.fixed,
        displacement: moving_coarse - m.fixed,
        beta,
    })
}

/// Grid nodes on an `n x n` lattice of cell centers, zero displacement.
pub fn init_gcn(
    width: usize,
    height: usize,
    n: usize,
    cfg: &RadiusConfig,
    init_radius: f64,
) -> Result<NodeSet> {
    if n < 2 {
        return Err(GpoError::Argument(format!("grid side must be >= 2, got {n}")));
    }
    if width == 0 || height == 0 {
        return Err(GpoError::Argument("grid over an empty image".into()));
    }
    let beta = beta_for_radius(init_radius, cfg)?;
    let (cw, ch) = (width as f64 / n as f64, height as f64 / n as f64);
    let mut nodes = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            nodes.push(ControlNode {
                center: Vec2::new((i as f64 + 0.5) * cw, (j as f64 + 0.5) * ch),
                displacement: Vec2::ZERO,
                beta,
            });
        }
    }
    NodeSet::new(nodes, *cfg, vec![], vec![])
}

/// Bucket index of every match on a `STRATA x STRATA` grid spanning the
/// bounding box of the fixed points.
pub fn stratum_of(matches: &MatchSet) -> Vec<usize> {
    let (mut lo, mut hi) = (Vec2::new(f64::INFINITY, f64::INFINITY), Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
    for m in &matches.pairs {
        lo = Vec2::new(lo.x.min(m.fixed.x), lo.y.min(m.fixed.y));
        hi = Vec2::new(hi.x.max(m.fixed.x), hi.y.max(m.fixed.y));
    }
    let cell = |v: f64, lo: f64, hi: f64| -> usize {
        if hi > lo {
            (((v - lo) / (hi - lo) * STRATA as f64) as usize).min(STRATA - 1)
        } else {
            0
        }
    };
    matches
        .pairs
        .iter()
        .map(|m| cell(m.fixed.y, lo.y, hi.y) * STRATA + cell(m.fixed.x, lo.x, hi.x))
        .collect()
}

/// Spatially stratified selection of at most `n_nodes` matches.
///
/// Matches are bucketed on a 16x16 grid over the fixed frame. Each bucket is
/// ordered by descending confidence, ties in seeded random order, and buckets
/// are drawn round-robin until `n_nodes` matches are taken. The result keeps
/// the input order.
pub fn subsample_keypoints(matches: &MatchSet, n_nodes: usize, seed: u64) -> MatchSet {
    if matches.len() <= n_nodes {
        return matches.clone();
    }
    let strata = stratum_of(matches);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); STRATA * STRATA];
    for (i, &b) in strata.iter().enumerate() {
        buckets[b].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in &mut buckets {
        b.shuffle(&mut rng);
        b.sort_by(|&i, &j| {
            let ci = matches.pairs[i].confidence.unwrap_or(1.0);
            let cj = matches.pairs[j].confidence.unwrap_or(1.0);
            cj.total_cmp(&ci)
        });
    }
    let mut take = vec![false; matches.len()];
    let mut taken = 0;
    let mut round = 0;
    while taken < n_nodes {
        for b in &buckets {
            if taken == n_nodes {
                break;
            }
            if let Some(&i) = b.get(round) {
                take[i] = true;
                taken += 1;
            }
        }
        round += 1;
    }
    MatchSet {
        pairs: matches
            .pairs
            .iter()
            .zip(&take)
            .filter(|(_, &t)| t)
            .map(|(m, _)| *m)
            .collect(),
    }
}
