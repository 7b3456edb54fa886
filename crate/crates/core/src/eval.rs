//! Landmark-based evaluation: target registration error (TRE) and the area
//! under the success-rate curve (AUC@T).
//!
//! Conventions: a pair succeeds at threshold `e` when its mean TRE is at most
//! `e`; AUC@T averages the success rate over the integer thresholds `1..=T`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::coarse::GlobalTransform;
use crate::error::{GpoError, Result};
use crate::field::DisplacementField;
use crate::geom::{PixelCoord, Vec2};
use crate::table;

pub const DEFAULT_THRESHOLDS: [u32; 3] = [15, 25, 50];

/// Corresponding landmarks at original resolution plus original-to-working
/// scale ratios (`original = scale * working`).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkPairs {
    pub pairs: Vec<(PixelCoord, PixelCoord)>,
    pub scale_fixed: f64,
    pub scale_moving: f64,
}

impl LandmarkPairs {
    pub fn new(pairs: Vec<(PixelCoord, PixelCoord)>, scale_fixed: f64, scale_moving: f64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(GpoError::Argument("at least one landmark pair is required".into()));
        }
        if !(scale_fixed > 0.0 && scale_moving > 0.0) {
            return Err(GpoError::Argument("landmark scales must be positive".into()));
        }
        if pairs.iter().any(|(a, b)| !a.is_finite() || !b.is_finite()) {
            return Err(GpoError::Argument("non-finite landmark coordinate".into()));
        }
        Ok(LandmarkPairs {
            pairs,
            scale_fixed,
            scale_moving,
        })
    }

    /// Reads `x_f,y_f,x_m,y_m` rows after a header.
    pub fn read(path: impl AsRef<Path>, scale_fixed: f64, scale_moving: f64) -> Result<Self> {
        let path = path.as_ref();
        let (_, rows) = table::read_numeric(path, 4, 4)?;
        let pairs = rows
            .into_iter()
            .map(|r| (Vec2::new(r[0], r[1]), Vec2::new(r[2], r[3])))
            .collect();
        LandmarkPairs::new(pairs, scale_fixed, scale_moving).map_err(|e| GpoError::format(path, e.to_string()))
    }

    pub fn to_table(&self) -> String {
        let mut s = String::from("x_f,y_f,x_m,y_m\n");
        for (f, m) in &self.pairs {
            let _ = writeln!(s, "{},{},{},{}", f.x, f.y, m.x, m.y);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mapped {
    pub point: PixelCoord,
    /// The working-frame query fell outside the field and was clamped.
    pub clamped: bool,
}

/// Where the registration samples the moving image for a fixed landmark:
/// `scale_moving * H (x + u(x))` with `x = p_f / scale_fixed`.
pub fn map_fixed_to_moving(
    p_f: PixelCoord,
    transform: &GlobalTransform,
    field: &DisplacementField,
    scale_fixed: f64,
    scale_moving: f64,
) -> Result<Mapped> {
    let x = p_f * (1.0 / scale_fixed);
    let clamped = x.x < 0.0
        || x.y < 0.0
        || x.x > (field.width() - 1) as f64
        || x.y > (field.height() - 1) as f64;
    let warped = x + field.sample(x);
    let q = transform.apply(warped)?;
    Ok(Mapped {
        point: q * scale_moving,
        clamped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreStats {
    pub distances: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub max: f64,
}

impl TreStats {
    pub fn from_distances(distances: Vec<f64>) -> Result<Self> {
        if distances.is_empty() {
            return Err(GpoError::Argument("no distances".into()));
        }
        let mut sorted = distances.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
        };
        let mean = distances.iter().sum::<f64>() / n as f64;
        Ok(TreStats {
            median,
            mean,
            max: sorted[n - 1],
            distances,
        })
    }
}

/// Per-landmark distance between the mapped fixed landmark and its mate, in
/// original-resolution pixels.
pub fn tre(landmarks: &LandmarkPairs, transform: &GlobalTransform, field: &DisplacementField) -> Result<TreStats> {
    let d = landmarks
        .pairs
        .iter()
        .map(|&(pf, pm)| {
            map_fixed_to_moving(pf, transform, field, landmarks.scale_fixed, landmarks.scale_moving)
                .map(|m| (m.point - pm).norm())
        })
        .collect::<Result<Vec<_>>>()?;
    TreStats::from_distances(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucCurve {
    /// `success_rate[e - 1]` for integer thresholds `e = 1..=T_max`.
    pub success_rate: Vec<f64>,
    pub auc_at: BTreeMap<u32, f64>,
}

pub fn auc(per_pair: &[TreStats], thresholds: &[u32]) -> Result<AucCurve> {
    if per_pair.is_empty() {
        return Err(GpoError::Argument("AUC over zero pairs".into()));
    }
    if thresholds.is_empty() || thresholds.contains(&0) {
        return Err(GpoError::Argument("thresholds must be positive integers".into()));
    }
    let t_max = *thresholds.iter().max().unwrap();
    let n = per_pair.len();
    let hits: Vec<usize> = (1..=t_max)
        .map(|e| per_pair.iter().filter(|s| s.mean <= e as f64).count())
        .collect();
    let success_rate = hits.iter().map(|&h| h as f64 / n as f64).collect();
    // Integer numerator and a single division keep the curve exactly monotone.
    let auc_at = thresholds
        .iter()
        .map(|&t| {
            let total: usize = hits[..t as usize].iter().sum();
            (t, total as f64 / (n as f64 * t as f64))
        })
        .collect();
    Ok(AucCurve {
        success_rate,
        auc_at,
    })
}

/// Writes `tre_pairs.csv`, `tre_landmarks.csv` and `auc.csv` into `dir`.
pub fn write_report(stats: &[(String, TreStats)], curve: &AucCurve, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| GpoError::io(dir, e))?;
    let mut pairs = String::from("pair,count,mean,median,max\n");
    let mut marks = String::from("pair,landmark,distance\n");
    for (name, s) in stats {
        let _ = writeln!(pairs, "{},{},{},{},{}", name, s.distances.len(), s.mean, s.median, s.max);
        for (i, d) in s.distances.iter().enumerate() {
            let _ = writeln!(marks, "{name},{i},{d}");
        }
    }
    let mut aucs = String::from("threshold,auc\n");
    for (t, v) in &curve.auc_at {
        let _ = writeln!(aucs, "{t},{v}");
    }
    table::write_text(&dir.join("tre_pairs.csv"), &pairs)?;
    table::write_text(&dir.join("tre_landmarks.csv"), &marks)?;
    table::write_text(&dir.join("auc.csv"), &aucs)
}

/// Reads back an `auc.csv` written by [`write_report`].
pub fn read_auc(path: impl AsRef<Path>) -> Result<BTreeMap<u32, f64>> {
    let path = path.as_ref();
    let (_, rows) = table::read_numeric(path, 2, 2)?;
    Ok(rows.into_iter().map(|r| (r[0] as u32, r[1])).collect())
}
