//! Dense displacement fields: K-nearest-node assignment, softmax-Gaussian
//! blending of node displacements, and backward warping.
//!
//! At pixel `x` with neighbor set `N_K(x)`:
//!
//! ```text
//! s_i  = -|x - g_i|^2 / (2 r_i^2)
//! w_i  = exp(s_i - max s) / sum_j exp(s_j - max s)
//! u(x) = sum_i w_i t_i
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{GpoError, Result};
use crate::geom::{PixelCoord, Vec2};
use crate::imagecore::{bilinear_taps, Image};
use crate::primitives::NodeSet;

const FIELD_MAGIC: &[u8; 4] = b"GPOF";
const FIELD_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    width: usize,
    height: usize,
    data: Vec<Vec2>,
    /// Revision of the node set this field was blended from, if any.
    source_revision: Option<u64>,
}

impl DisplacementField {
    pub fn zeros(width: usize, height: usize) -> Self {
        DisplacementField {
            width,
            height,
            data: vec![Vec2::ZERO; width * height],
            source_revision: None,
        }
    }

    pub fn uniform(width: usize, height: usize, u: Vec2) -> Self {
        DisplacementField {
            width,
            height,
            data: vec![u; width * height],
            source_revision: None,
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> Vec2) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        DisplacementField {
            width,
            height,
            data,
            source_revision: None,
        }
    }

    pub fn new(width: usize, height: usize, data: Vec<Vec2>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(GpoError::Argument(format!(
                "field of {}x{} needs {} vectors, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GpoError::Argument("field contains non-finite values".into()));
        }
        Ok(DisplacementField {
            width,
            height,
            data,
            source_revision: None,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[Vec2] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Vec2 {
        self.data[y * self.width + x]
    }

    pub fn source_revision(&self) -> Option<u64> {
        self.source_revision
    }

    /// Bilinear interpolation with the same clamp-to-edge policy as images.
    pub fn sample(&self, p: PixelCoord) -> Vec2 {
        bilinear_taps(self.width, self.height, p.x, p.y)
            .iter()
            .fold(Vec2::ZERO, |acc, &(i, w)| acc + self.data[i] * w)
    }

    /// Binary dump: `"GPOF"`, version 1, LE u32 width and height, then
    /// row-major `(dx, dy)` pairs as LE f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(13 + self.data.len() * 8);
        buf.extend_from_slice(FIELD_MAGIC);
        buf.push(FIELD_VERSION);
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&(v.x as f32).to_le_bytes());
            buf.extend_from_slice(&(v.y as f32).to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 13 || &bytes[..4] != FIELD_MAGIC {
            return Err("missing GPOF header".into());
        }
        if bytes[4] != FIELD_VERSION {
            return Err(format!("unsupported field version {}", bytes[4]));
        }
        let w = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let payload = &bytes[13..];
        if payload.len() != w * h * 8 {
            return Err(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                w * h * 8
            ));
        }
        let data = payload
            .chunks_exact(8)
            .map(|c| {
                Vec2::new(
                    f32::from_le_bytes(c[..4].try_into().unwrap()) as f64,
                    f32::from_le_bytes(c[4..].try_into().unwrap()) as f64,
                )
            })
            .collect();
        DisplacementField::new(w, h, data).map_err(|e| e.to_string())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| GpoError::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| GpoError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| GpoError::io(path, e))?;
        DisplacementField::from_bytes(&bytes).map_err(|m| GpoError::format(path, m))
    }
}

/// Per-pixel K nearest nodes, sorted by `(distance^2, id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    width: usize,
    height: usize,
    ids: Vec<u32>,
    dist2: Vec<f64>,
    node_count: usize,
    revision: u64,
}

impl NeighborIndex {
    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Neighbor ids of the pixel at linear index `p`.
    #[inline]
    pub fn ids(&self, p: usize) -> &[u32] {
        &self.ids[p * self.k..(p + 1) * self.k]
    }

    #[inline]
    pub fn dist2(&self, p: usize) -> &[f64] {
        &self.dist2[p * self.k..(p + 1) * self.k]
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// Keeps the neighbor sets but accepts `nodes` as the current snapshot.
    ///
    /// This is the frozen-support convention of the gradient: node moves do not
    /// change which nodes a pixel blends. Fails if the node count changed.
    pub fn rebind(&mut self, nodes: &NodeSet) -> Result<()> {
        if nodes.len() != self.node_count {
            return Err(GpoError::Consistency(format!(
                "index built for {} nodes, node set has {}",
                self.node_count,
                nodes.len()
            )));
        }
        self.revision = nodes.revision();
        Ok(())
    }

    pub(crate) fn check(&self, nodes: &NodeSet) -> Result<()> {
        if self.revision != nodes.revision() || self.node_count != nodes.len() {
            return Err(GpoError::Consistency(format!(
                "neighbor index is stale (index revision {}, nodes revision {})",
                self.revision,
                nodes.revision()
            )));
        }
        Ok(())
    }
}

/// Uniform bucket grid over node centers.
struct SpatialHash {
    origin: Vec2,
    cell: f64,
    cols: usize,
    rows: usize,
    starts: Vec<usize>,
    entries: Vec<u32>,
}

impl SpatialHash {
    fn new(centers: &[Vec2], width: usize, height: usize) -> Self {
        let mut lo = Vec2::new(0.0, 0.0);
        let mut hi = Vec2::new((width - 1) as f64, (height - 1) as f64);
        for c in centers {
            lo = Vec2::new(lo.x.min(c.x), lo.y.min(c.y));
            hi = Vec2::new(hi.x.max(c.x), hi.y.max(c.y));
        }
        let span = Vec2::new((hi.x - lo.x).max(1.0), (hi.y - lo.y).max(1.0));
        let cell = ((span.x * span.y) / centers.len() as f64).sqrt().max(1.0);
        let cols = (span.x / cell).floor() as usize + 1;
        let rows = (span.y / cell).floor() as usize + 1;

        let mut counts = vec![0usize; cols * rows + 1];
        let cell_of = |c: &Vec2| -> usize {
            let cx = (((c.x - lo.x) / cell) as usize).min(cols - 1);
            let cy = (((c.y - lo.y) / cell) as usize).min(rows - 1);
            cy * cols + cx
        };
        for c in centers {
            counts[cell_of(c) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut entries = vec![0u32; centers.len()];
        for (id, c) in centers.iter().enumerate() {
            let b = cell_of(c);
            entries[fill[b]] = id as u32;
            fill[b] += 1;
        }
        SpatialHash {
            origin: lo,
            cell,
            cols,
            rows,
            starts,
            entries,
        }
    }

    #[inline]
    fn bucket(&self, cx: usize, cy: usize) -> &[u32] {
        let b = cy * self.cols + cx;
        &self.entries[self.starts[b]..self.starts[b + 1]]
    }
}

impl SpatialHash {
    #[inline]
    fn cell_of(&self, p: Vec2) -> (usize, usize) {
        let fx = ((p.x - self.origin.x) / self.cell).floor().max(0.0) as usize;
        let fy = ((p.y - self.origin.y) / self.cell).floor().max(0.0) as usize;
        (fx.min(self.cols - 1), fy.min(self.rows - 1))
    }

    /// Every node that can be among the `k` nearest of some point in the box
    /// `[x0, x1] x [y0, y1]`: the `k`-th smallest farthest-distance to the
    /// box bounds the answer, and nodes whose nearest distance to the box
    /// exceeds that bound are dropped.
    /// The result is sorted by nearest distance to the box.
    #[allow(clippy::too_many_arguments)]
    fn candidates(&self, centers: &[Vec2], x0: f64, y0: f64, x1: f64, y1: f64, k: usize, out: &mut Vec<(f64, u32)>) {
        let near = |c: Vec2| {
            let dx = (x0 - c.x).max(0.0).max(c.x - x1);
            let dy = (y0 - c.y).max(0.0).max(c.y - y1);
            dx * dx + dy * dy
        };
        let far = |c: Vec2| {
            let dx = (c.x - x0).abs().max((c.x - x1).abs());
            let dy = (c.y - y0).abs().max((c.y - y1).abs());
            dx * dx + dy * dy
        };
        let mut cand: Vec<(f64, u32)> = Vec::new();
        let mut fars: Vec<f64> = Vec::new();
        let (cx, cy) = self.cell_of(Vec2::new(0.5 * (x0 + x1), 0.5 * (y0 + y1)));
        let (cx, cy) = (cx as isize, cy as isize);
        let max_ring = self.cols.max(self.rows) as isize;
        let visit = |x: isize, y: isize, cand: &mut Vec<(f64, u32)>, fars: &mut Vec<f64>| {
            if x < 0 || y < 0 || x >= self.cols as isize || y >= self.rows as isize {
                return;
            }
            for &id in self.bucket(x as usize, y as usize) {
                let c = centers[id as usize];
                cand.push((near(c), id));
                fars.push(far(c));
            }
        };
        let mut bound = f64::INFINITY;
        for r in 0..=max_ring {
            if r == 0 {
                visit(cx, cy, &mut cand, &mut fars);
            } else {
                for x in (cx - r)..=(cx + r) {
                    visit(x, cy - r, &mut cand, &mut fars);
                    visit(x, cy + r, &mut cand, &mut fars);
                }
                for y in (cy - r + 1)..=(cy + r - 1) {
                    visit(cx - r, y, &mut cand, &mut fars);
                    visit(cx + r, y, &mut cand, &mut fars);
                }
            }
            if fars.len() >= k {
                fars.select_nth_unstable_by(k - 1, |a, b| a.total_cmp(b));
                bound = fars[k - 1];
                fars.truncate(k);
                // Distance from the box to anything outside the visited
                // square of cells.
                let c = self.cell;
                let gap = (x0 - (self.origin.x + (cx - r) as f64 * c))
                    .min(self.origin.x + (cx + r + 1) as f64 * c - x1)
                    .min(y0 - (self.origin.y + (cy - r) as f64 * c))
                    .min(self.origin.y + (cy + r + 1) as f64 * c - y1);
                if gap > 0.0 && gap * gap > bound * (1.0 + 1e-9) {
                    break;
                }
            }
        }
        let limit = bound * (1.0 + 1e-9) + 1e-9;
        out.clear();
        out.extend(cand.into_iter().filter(|&(d, _)| d <= limit));
        out.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    }
}

/// Pixel tile sharing one candidate list.
const KNN_BLOCK: usize = 4;

/// K nearest node centers for every pixel center, ties broken by lower id.
pub fn build_knn(nodes: &NodeSet, width: usize, height: usize, k: usize) -> Result<NeighborIndex> {
    if k == 0 {
        return Err(GpoError::Argument("K must be at least 1".into()));
    }
    if width == 0 || height == 0 {
        return Err(GpoError::Argument("empty pixel domain".into()));
    }
    let centers: Vec<Vec2> = nodes.nodes().iter().map(|n| n.center).collect();
    if centers.iter().any(|c| !c.is_finite()) {
        return Err(GpoError::Argument("non-finite node center".into()));
    }
    let k = k.min(centers.len());
    let hash = SpatialHash::new(&centers, width, height);
    let mut ids = vec![0u32; width * height * k];
    let mut dist2 = vec![0.0f64; width * height * k];
    let band = KNN_BLOCK * width * k;
    ids.par_chunks_mut(band)
        .zip(dist2.par_chunks_mut(band))
        .enumerate()
        .for_each_init(
            Vec::new,
            |cand, (by, (id_band, d_band))| {
                let y0 = by * KNN_BLOCK;
                let y1 = (y0 + KNN_BLOCK).min(height) - 1;
                for x0 in (0..width).step_by(KNN_BLOCK) {
                    let x1 = (x0 + KNN_BLOCK).min(width) - 1;
                    hash.candidates(&centers, x0 as f64, y0 as f64, x1 as f64, y1 as f64, k, cand);
                    for y in y0..=y1 {
                        for x in x0..=x1 {
                            let o = ((y - y0) * width + x) * k;
                            let bd = &mut d_band[o..o + k];
                            let bi = &mut id_band[o..o + k];
                            let mut n = 0;
                            for &(near, id) in cand.iter() {
                                if n == k && near > bd[k - 1] {
                                    break;
                                }
                                let c = centers[id as usize];
                                let (dx, dy) = (x as f64 - c.x, y as f64 - c.y);
                                let d = dx * dx + dy * dy;
                                // Sorted insertion keyed on (d2, id).
                                let mut j = if n < k {
                                    n += 1;
                                    n - 1
                                } else if d < bd[k - 1] || (d == bd[k - 1] && id < bi[k - 1]) {
                                    k - 1
                                } else {
                                    continue;
                                };
                                while j > 0 && (bd[j - 1] > d || (bd[j - 1] == d && bi[j - 1] > id)) {
                                    bd[j] = bd[j - 1];
                                    bi[j] = bi[j - 1];
                                    j -= 1;
                                }
                                bd[j] = d;
                                bi[j] = id;
                            }
                        }
                    }
                }
            },
        );
    Ok(NeighborIndex {
        k,
        width,
        height,
        ids,
        dist2,
        node_count: centers.len(),
        revision: nodes.revision(),
    })
}

/// Per-node quantities that blending and its adjoint need.
pub(crate) struct NodeCache {
    pub centers: Vec<Vec2>,
    pub displacements: Vec<Vec2>,
    pub radii: Vec<f64>,
    /// `1 / (2 r^2)`
    pub inv_two_r2: Vec<f64>,
}

impl NodeCache {
    pub fn new(nodes: &NodeSet) -> Self {
        let n = nodes.len();
        let mut c = NodeCache {
            centers: Vec::with_capacity(n),
            displacements: Vec::with_capacity(n),
            radii: Vec::with_capacity(n),
            inv_two_r2: Vec::with_capacity(n),
        };
        for (i, node) in nodes.nodes().iter().enumerate() {
            let r = nodes.radius(i);
            c.centers.push(node.center);
            c.displacements.push(node.displacement);
            c.radii.push(r);
            c.inv_two_r2.push(1.0 / (2.0 * r * r));
        }
        c
    }

    /// Softmax weights for the neighbor ids at `p`, written into `w`; returns
    /// the blended displacement.
    #[inline]
    pub fn weights(&self, ids: &[u32], p: Vec2, w: &mut [f64]) -> Vec2 {
        let mut smax = f64::NEG_INFINITY;
        for (j, &id) in ids.iter().enumerate() {
            let d = p - self.centers[id as usize];
            let s = -d.norm_sq() * self.inv_two_r2[id as usize];
            w[j] = s;
            smax = smax.max(s);
        }
        let mut sum = 0.0;
        for wj in w.iter_mut().take(ids.len()) {
            *wj = (*wj - smax).exp();
            sum += *wj;
        }
        let inv = 1.0 / sum;
        let mut u = Vec2::ZERO;
        for (j, &id) in ids.iter().enumerate() {
            w[j] *= inv;
            u += self.displacements[id as usize] * w[j];
        }
        u
    }
}

/// Softmax-Gaussian blend of node displacements over each pixel's neighbors.
pub fn blend(nodes: &NodeSet, index: &NeighborIndex) -> Result<DisplacementField> {
    blend_keep_weights(nodes, index, None)
}

/// [`blend`] that optionally keeps every pixel's weights (`k` per pixel, in
/// neighbor order) for the reverse pass.
pub(crate) fn blend_keep_weights(
    nodes: &NodeSet,
    index: &NeighborIndex,
    keep: Option<&mut Vec<f64>>,
) -> Result<DisplacementField> {
    index.check(nodes)?;
    let cache = NodeCache::new(nodes);
    let (w, h, k) = (index.width, index.height, index.k);
    let mut data = vec![Vec2::ZERO; w * h];
    match keep {
        Some(all) => {
            all.clear();
            all.resize(w * h * k, 0.0);
            data.par_chunks_mut(w).zip(all.par_chunks_mut(w * k)).enumerate().for_each(|(y, (row, wrow))| {
                for (x, out) in row.iter_mut().enumerate() {
                    let p = y * w + x;
                    *out = cache.weights(index.ids(p), Vec2::new(x as f64, y as f64), &mut wrow[x * k..x * k + k]);
                }
            });
        }
        None => data.par_chunks_mut(w).enumerate().for_each_init(
            || vec![0.0; k],
            |weights, (y, row)| {
                for (x, out) in row.iter_mut().enumerate() {
                    let p = y * w + x;
                    *out = cache.weights(index.ids(p), Vec2::new(x as f64, y as f64), weights);
                }
            },
        ),
    }
    Ok(DisplacementField {
        width: w,
        height: h,
        data,
        source_revision: Some(nodes.revision()),
    })
}

/// Blending weights at one pixel, in neighbor order. Diagnostic helper.
pub fn weights_at(nodes: &NodeSet, index: &NeighborIndex, x: usize, y: usize) -> Result<Vec<(u32, f64)>> {
    index.check(nodes)?;
    let cache = NodeCache::new(nodes);
    let ids = index.ids(y * index.width + x);
    let mut w = vec![0.0; ids.len()];
    cache.weights(ids, Vec2::new(x as f64, y as f64), &mut w);
    Ok(ids.iter().copied().zip(w).collect())
}

fn check_dims(img: &Image, field: &DisplacementField) -> Result<()> {
    if img.width() != field.width || img.height() != field.height {
        return Err(GpoError::Argument(format!(
            "image is {}x{} but field is {}x{}",
            img.width(),
            img.height(),
            field.width,
            field.height
        )));
    }
    Ok(())
}

/// Backward warp: `out(x) = img(x + u(x))`.
pub fn warp(img: &Image, field: &DisplacementField) -> Result<Image> {
    check_dims(img, field)?;
    let w = field.width;
    let mut out = vec![0.0; w * field.height];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, o) in row.iter_mut().enumerate() {
            let u = field.data[y * w + x];
            *o = img.sample_unchecked(x as f64 + u.x, y as f64 + u.y).value;
        }
    });
    Ok(Image::from_clamped(w, field.height, out))
}

/// Backward warp that also returns the image gradient at each sample point.
pub(crate) fn warp_with_gradient(img: &Image, field: &DisplacementField) -> Result<(Image, Vec<Vec2>)> {
    check_dims(img, field)?;
    let w = field.width;
    let n = w * field.height;
    let mut out = vec![0.0; n];
    let mut grad = vec![Vec2::ZERO; n];
    out.par_chunks_mut(w)
        .zip(grad.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, grow))| {
            for x in 0..w {
                let u = field.data[y * w + x];
                let s = img.sample_unchecked(x as f64 + u.x, y as f64 + u.y);
                row[x] = s.value;
                grow[x] = Vec2::new(s.gx, s.gy);
            }
        });
    Ok((Image::from_clamped(w, field.height, out), grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldStats {
    pub max_mag: f64,
    pub mean_mag: f64,
    /// Minimum forward-difference Jacobian determinant of `x -> x + u(x)`.
    pub jacobian_min_det: f64,
}

pub fn field_stats(field: &DisplacementField) -> Result<FieldStats> {
    let (w, h) = (field.width, field.height);
    if w < 2 || h < 2 {
        return Err(GpoError::Argument("field_stats needs at least 2x2".into()));
    }
    let mags = field.data.iter().map(|v| v.norm());
    let max_mag = mags.clone().fold(0.0, f64::max);
    let mean_mag = mags.sum::<f64>() / field.data.len() as f64;
    let mut min_det = f64::INFINITY;
    for y in 0..h - 1 {
        for x in 0..w - 1 {
            let u = field.get(x, y);
            let ux = field.get(x + 1, y) - u;
            let uy = field.get(x, y + 1) - u;
            let det = (1.0 + ux.x) * (1.0 + uy.y) - uy.x * ux.y;
            min_det = min_det.min(det);
        }
    }
    Ok(FieldStats {
        max_mag,
        mean_mag,
        jacobian_min_det: min_det,
    })
}
