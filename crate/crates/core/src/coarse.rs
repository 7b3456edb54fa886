//! Global (coarse) alignment: affine and homography fitting from keypoint
//! matches, image warping by a global transform, and point mapping between
//! the moving and coarse frames.
//!
//! A [`GlobalTransform`] maps fixed-frame coordinates to moving-frame
//! coordinates, so the coarse image is produced by a backward warp
//! `coarse(x) = moving(T x)`.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{GpoError, Result};
use crate::geom::{PixelCoord, Vec2};
use crate::imagecore::Image;
use crate::table;

/// One correspondence between the fixed and moving frames.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub fixed: PixelCoord,
    pub moving: PixelCoord,
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<Match>,
}

impl MatchSet {
    pub fn new(pairs: Vec<Match>) -> Result<Self> {
        for (i, m) in pairs.iter().enumerate() {
            if !m.fixed.is_finite() || !m.moving.is_finite() {
                return Err(GpoError::Argument(format!("match {i} has a non-finite coordinate")));
            }
            if let Some(c) = m.confidence {
                if !(0.0..=1.0).contains(&c) {
                    return Err(GpoError::Argument(format!(
                        "match {i} confidence {c} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(MatchSet { pairs })
    }

    pub fn from_points(pairs: impl IntoIterator<Item = (PixelCoord, PixelCoord)>) -> Self {
        MatchSet {
            pairs: pairs
                .into_iter()
                .map(|(fixed, moving)| Match {
                    fixed,
                    moving,
                    confidence: None,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Reads `x_f,y_f,x_m,y_m[,confidence]` rows after a header line.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (_, rows) = table::read_numeric(path, 4, 5)?;
        let pairs = rows
            .into_iter()
            .map(|r| Match {
                fixed: Vec2::new(r[0], r[1]),
                moving: Vec2::new(r[2], r[3]),
                confidence: r.get(4).copied(),
            })
            .collect();
        MatchSet::new(pairs).map_err(|e| GpoError::format(path, e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let with_conf = self.pairs.iter().any(|m| m.confidence.is_some());
        let mut s = String::from(if with_conf {
            "x_f,y_f,x_m,y_m,confidence\n"
        } else {
            "x_f,y_f,x_m,y_m\n"
        });
        for m in &self.pairs {
            s.push_str(&format!(
                "{},{},{},{}",
                m.fixed.x, m.fixed.y, m.moving.x, m.moving.y
            ));
            if with_conf {
                s.push_str(&format!(",{}", m.confidence.unwrap_or(1.0)));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Identity,
    Affine,
    Homography,
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TransformKind::Identity => "identity",
            TransformKind::Affine => "affine",
            TransformKind::Homography => "homography",
        })
    }
}

/// 3x3 projective map from fixed-frame to moving-frame pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlobalTransform {
    matrix: Matrix3<f64>,
    kind: TransformKind,
}

const W_EPS: f64 = 1e-12;

impl GlobalTransform {
    pub fn identity() -> Self {
        GlobalTransform {
            matrix: Matrix3::identity(),
            kind: TransformKind::Identity,
        }
    }

    pub fn translation(b: Vec2) -> Self {
        GlobalTransform::from_matrix(Matrix3::new(1.0, 0.0, b.x, 0.0, 1.0, b.y, 0.0, 0.0, 1.0))
            .expect("translations are invertible")
    }

    /// Validates and normalizes a matrix, classifying it by its structure.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(GpoError::Argument("transform has non-finite entries".into()));
        }
        let affine = m[(2, 0)] == 0.0 && m[(2, 1)] == 0.0;
        let m = if affine {
            if m[(2, 2)] == 0.0 {
                return Err(GpoError::Argument("singular transform".into()));
            }
            let mut a = m / m[(2, 2)];
            a[(2, 2)] = 1.0;
            a
        } else {
            if m[(2, 2)].abs() < W_EPS {
                return Err(GpoError::Argument(
                    "homography with H[2][2] = 0 cannot be normalized".into(),
                ));
            }
            m / m[(2, 2)]
        };
        let upper = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
        if upper.abs() < 1e-14 || m.determinant().abs() < 1e-14 {
            return Err(GpoError::Argument("singular transform".into()));
        }
        let kind = if m == Matrix3::identity() {
            TransformKind::Identity
        } else if affine {
            TransformKind::Affine
        } else {
            TransformKind::Homography
        };
        Ok(GlobalTransform { matrix: m, kind })
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    /// Maps a point with homogeneous division.
    pub fn apply(&self, p: PixelCoord) -> Result<PixelCoord> {
        let v = self.matrix * Vector3::new(p.x, p.y, 1.0);
        if v.z.abs() < W_EPS {
            return Err(GpoError::DegeneratePoint { w: v.z });
        }
        Ok(Vec2::new(v.x / v.z, v.y / v.z))
    }

    pub fn inverse(&self) -> Result<GlobalTransform> {
        let inv = self
            .matrix
            .try_inverse()
            .ok_or_else(|| GpoError::Argument("singular transform".into()))?;
        GlobalTransform::from_matrix(inv)
    }

    /// Three comma-separated rows, as written by [`GlobalTransform::write`].
    pub fn to_table(&self) -> String {
        let mut s = format!("# kind={}\nc0,c1,c2\n", self.kind);
        for r in 0..3 {
            s.push_str(&format!(
                "{:e},{:e},{:e}\n",
                self.matrix[(r, 0)],
                self.matrix[(r, 1)],
                self.matrix[(r, 2)]
            ));
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        table::write_text(path.as_ref(), &self.to_table())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (_, rows) = table::read_numeric(path, 3, 3)?;
        if rows.len() != 3 {
            return Err(GpoError::format(path, format!("expected 3 rows, found {}", rows.len())));
        }
        let m = Matrix3::from_fn(|r, c| rows[r][c]);
        GlobalTransform::from_matrix(m).map_err(|e| GpoError::format(path, e.to_string()))
    }
}

/// Similarity that moves the centroid to the origin and scales the mean
/// distance from it to sqrt(2).
fn normalizer(points: &[Vec2]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let c = points.iter().fold(Vec2::ZERO, |a, &p| a + p) * (1.0 / n);
    let mean_d = points.iter().map(|&p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean_d > 0.0 {
        std::f64::consts::SQRT_2 / mean_d
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

fn transform_points(t: &Matrix3<f64>, pts: &[Vec2]) -> Vec<Vec2> {
    pts.iter()
        .map(|p| {
            let v = t * Vector3::new(p.x, p.y, 1.0);
            Vec2::new(v.x / v.z, v.y / v.z)
        })
        .collect()
}

/// Least-squares affine fit of `A p_f + b ~ p_m`.
pub fn fit_affine(matches: &MatchSet) -> Result<GlobalTransform> {
    let n = matches.len();
    if n < 3 {
        return Err(GpoError::Degenerate(format!(
            "affine fit needs at least 3 pairs, got {n}"
        )));
    }
    let fixed: Vec<Vec2> = matches.pairs.iter().map(|m| m.fixed).collect();
    let tf = normalizer(&fixed);
    let nf = transform_points(&tf, &fixed);

    let design = DMatrix::from_fn(n, 3, |r, c| match c {
        0 => nf[r].x,
        1 => nf[r].y,
        _ => 1.0,
    });
    let rhs = DMatrix::from_fn(n, 2, |r, c| {
        if c == 0 {
            matches.pairs[r].moving.x
        } else {
            matches.pairs[r].moving.y
        }
    });
    let svd = design.svd(true, true);
    let sv = &svd.singular_values;
    if sv.min() <= 1e-10 * sv.max() {
        return Err(GpoError::Degenerate(
            "collinear or coincident points in affine fit".into(),
        ));
    }
    let sol = svd
        .solve(&rhs, 0.0)
        .map_err(|e| GpoError::Degenerate(e.to_string()))?;
    // sol rows: coefficients for (x', y', 1); columns: output x, y.
    let an = Matrix3::new(
        sol[(0, 0)],
        sol[(1, 0)],
        sol[(2, 0)],
        sol[(0, 1)],
        sol[(1, 1)],
        sol[(2, 1)],
        0.0,
        0.0,
        1.0,
    );
    let mut m = an * tf;
    m[(2, 0)] = 0.0;
    m[(2, 1)] = 0.0;
    m[(2, 2)] = 1.0;
    GlobalTransform::from_matrix(m).map_err(|_| GpoError::Degenerate("singular affine fit".into()))
}

/// Normalized DLT over all given pairs (at least 4).
pub fn dlt_homography(fixed: &[Vec2], moving: &[Vec2]) -> Result<GlobalTransform> {
    let n = fixed.len();
    if n < 4 || moving.len() != n {
        return Err(GpoError::Degenerate(format!(
            "homography needs at least 4 pairs, got {n}"
        )));
    }
    let tf = normalizer(fixed);
    let tm = normalizer(moving);
    let nf = transform_points(&tf, fixed);
    let nm = transform_points(&tm, moving);

    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let (x, y) = (nf[i].x, nf[i].y);
        let (u, v) = (nm[i].x, nm[i].y);
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v]);
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    // Rank check: with exactly determined data the null space must be 1-D.
    let mut sorted: Vec<f64> = svd.singular_values.iter().copied().collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if sorted[1] <= 1e-10 * sorted[8] {
        return Err(GpoError::Degenerate("rank-deficient DLT system".into()));
    }
    let h = v_t.row(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let tm_inv = tm.try_inverse().expect("similarity is invertible");
    let m = tm_inv * hn * tf;
    GlobalTransform::from_matrix(m)
        .map(|mut t| {
            if t.kind == TransformKind::Affine || t.kind == TransformKind::Identity {
                t.kind = TransformKind::Homography;
            }
            t
        })
        .map_err(|_| GpoError::Degenerate("singular homography".into()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iters: usize,
    pub inlier_thresh_px: f64,
    /// `None` means `max(10, ceil(0.3 * pairs))`.
    pub min_inliers: Option<usize>,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iters: 2000,
            inlier_thresh_px: 3.0,
            min_inliers: None,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn required_inliers(&self, pairs: usize) -> usize {
        self.min_inliers
            .unwrap_or_else(|| 10.max((0.3 * pairs as f64).ceil() as usize))
    }
}

#[derive(Debug, Clone)]
pub struct HomographyFit {
    pub transform: GlobalTransform,
    pub inliers: Vec<bool>,
}

fn collinear(a: Vec2, b: Vec2, c: Vec2) -> bool {
    let (u, v) = (b - a, c - a);
    let cross = u.x * v.y - u.y * v.x;
    cross.abs() <= 1e-9 * (u.norm_sq() + v.norm_sq()).max(1e-300)
}

fn any_three_collinear(p: &[Vec2; 4]) -> bool {
    collinear(p[0], p[1], p[2])
        || collinear(p[0], p[1], p[3])
        || collinear(p[0], p[2], p[3])
        || collinear(p[1], p[2], p[3])
}

fn count_inliers(t: &GlobalTransform, matches: &MatchSet, thresh: f64) -> Vec<bool> {
    matches
        .pairs
        .iter()
        .map(|m| match t.apply(m.fixed) {
            Ok(q) => (q - m.moving).norm() < thresh,
            Err(_) => false,
        })
        .collect()
}

/// RANSAC over 4-point samples, each solved by normalized DLT, followed by a
/// DLT refit on the largest inlier set.
pub fn fit_homography_ransac(matches: &MatchSet, cfg: &RansacConfig) -> Result<HomographyFit> {
    let n = matches.len();
    if n < 4 {
        return Err(GpoError::Degenerate(format!(
            "homography needs at least 4 pairs, got {n}"
        )));
    }
    let required = cfg.required_inliers(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let samples: Vec<[usize; 4]> = (0..cfg.iters)
        .map(|_| {
            let idx = sample(&mut rng, n, 4);
            [idx.index(0), idx.index(1), idx.index(2), idx.index(3)]
        })
        .collect();

    // Hypotheses are scored in parallel; the winner is the lowest index among
    // those with the most inliers, as a sequential scan would pick.
    let scored: Vec<Option<usize>> = samples
        .par_iter()
        .map(|s| {
            let f = s.map(|i| matches.pairs[i].fixed);
            let m = s.map(|i| matches.pairs[i].moving);
            if any_three_collinear(&f) || any_three_collinear(&m) {
                return None;
            }
            let h = dlt_homography(&f, &m).ok()?;
            Some(
                count_inliers(&h, matches, cfg.inlier_thresh_px)
                    .iter()
                    .filter(|&&b| b)
                    .count(),
            )
        })
        .collect();
    let mut best: Option<(usize, usize)> = None;
    for (i, c) in scored.iter().enumerate() {
        if let Some(c) = *c {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((i, c));
            }
        }
    }
    let Some((best_idx, best_count)) = best else {
        return Err(GpoError::NoConsensus {
            best: 0,
            required,
        });
    };
    if best_count < required {
        return Err(GpoError::NoConsensus {
            best: best_count,
            required,
        });
    }
    let s = samples[best_idx];
    let f = s.map(|i| matches.pairs[i].fixed);
    let m = s.map(|i| matches.pairs[i].moving);
    let seed_h = dlt_homography(&f, &m)?;
    let inliers = count_inliers(&seed_h, matches, cfg.inlier_thresh_px);
    let (fi, mi): (Vec<Vec2>, Vec<Vec2>) = matches
        .pairs
        .iter()
        .zip(&inliers)
        .filter(|(_, &b)| b)
        .map(|(p, _)| (p.fixed, p.moving))
        .unzip();
    let transform = dlt_homography(&fi, &mi)?;
    Ok(HomographyFit {
        transform,
        inliers,
    })
}

pub fn fit_homography(matches: &MatchSet, cfg: &RansacConfig) -> Result<GlobalTransform> {
    fit_homography_ransac(matches, cfg).map(|f| f.transform)
}

/// Homography by RANSAC, falling back to a least-squares affine fit when no
/// hypothesis reaches consensus.
pub fn fit_global(matches: &MatchSet, cfg: &RansacConfig) -> Result<GlobalTransform> {
    match fit_homography(matches, cfg) {
        Err(GpoError::NoConsensus { .. }) => fit_affine(matches),
        other => other,
    }
}

/// Backward warp by a global transform: `out(x) = img(T x)`.
pub fn apply_global(img: &Image, t: &GlobalTransform, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(GpoError::Argument("output dimensions must be positive".into()));
    }
    if t.matrix.determinant().abs() < 1e-14 {
        return Err(GpoError::Argument("singular transform".into()));
    }
    let m = t.matrix;
    let mut out = vec![0.0; out_w * out_h];
    out.par_chunks_mut(out_w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let v = m * Vector3::new(x as f64, y as f64, 1.0);
            *o = img.sample_unchecked(v.x / v.z, v.y / v.z).value;
        }
    });
    Ok(Image::from_clamped(out_w, out_h, out))
}

/// Maps a moving-frame point into the coarse (fixed) frame: `T^-1 p_m`.
pub fn to_coarse_frame(t: &GlobalTransform, p_m: PixelCoord) -> Result<PixelCoord> {
    t.inverse()?.apply(p_m)
}
