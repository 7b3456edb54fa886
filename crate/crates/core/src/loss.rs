//! Two-term registration loss and its analytic reverse pass.
//!
//! `L = alpha_gcc * L_gcc + alpha_ncc * L_ncc`, where `L_ncc = 1 - rho` is the
//! global zero-mean normalized cross-correlation between the fixed and warped
//! images, and `L_gcc` is the mean squared residual between the field sampled
//! at frozen keypoint anchors and the matched displacements, normalized by a
//! length scale.
//!
//! The reverse pass runs pixel adjoint -> displacement adjoint -> node
//! parameters with the K-nearest supports held fixed.

use rayon::prelude::*;

use crate::error::{GpoError, Result};
use crate::field::{warp_with_gradient, DisplacementField, NeighborIndex, NodeCache};
use crate::geom::Vec2;
use crate::imagecore::{bilinear_taps, Image};
use crate::primitives::{radius_and_slope, NodeSet};

/// Stabilizer inside the NCC square root.
pub const NCC_EPS: f64 = 1e-10;
/// Images with variance below this are treated as constant (rho = 0).
pub const MIN_VARIANCE: f64 = 1e-12;

const ROWS_PER_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_gcc: f64,
    pub alpha_ncc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_gcc: 0.4,
            alpha_ncc: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(alpha_gcc: f64, alpha_ncc: f64) -> Result<Self> {
        let ok = alpha_gcc >= 0.0 && alpha_ncc >= 0.0 && alpha_gcc.is_finite() && alpha_ncc.is_finite();
        if !ok || (alpha_gcc == 0.0 && alpha_ncc == 0.0) {
            return Err(GpoError::Argument(format!(
                "loss weights must be >= 0 and not both zero, got gcc={alpha_gcc} ncc={alpha_ncc}"
            )));
        }
        Ok(LossWeights {
            alpha_gcc,
            alpha_ncc,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub l_gcc: f64,
    pub l_ncc: f64,
    pub ncc_value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeGrads {
    pub d_center: Vec<Vec2>,
    pub d_displacement: Vec<Vec2>,
    pub d_beta: Vec<f64>,
}

impl NodeGrads {
    pub fn zeros(n: usize) -> Self {
        NodeGrads {
            d_center: vec![Vec2::ZERO; n],
            d_displacement: vec![Vec2::ZERO; n],
            d_beta: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.d_beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.d_beta.is_empty()
    }

    /// Largest absolute component over all parameters.
    pub fn max_abs(&self) -> f64 {
        let vec_max = |v: &[Vec2]| v.iter().map(|g| g.x.abs().max(g.y.abs())).fold(0.0, f64::max);
        vec_max(&self.d_center)
            .max(vec_max(&self.d_displacement))
            .max(self.d_beta.iter().map(|b| b.abs()).fold(0.0, f64::max))
    }

    /// Ids of nodes with any non-finite gradient component.
    pub fn non_finite_nodes(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| {
                !(self.d_center[i].is_finite()
                    && self.d_displacement[i].is_finite()
                    && self.d_beta[i].is_finite())
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct NccOutput {
    pub loss: f64,
    pub rho: f64,
    /// `d loss / d warped(x)` per pixel.
    pub grad: Vec<f64>,
}

/// `1 - rho` with `rho = S_ab / sqrt(S_aa S_bb + eps)` over zero-mean images.
pub fn ncc_loss(fixed: &Image, warped: &Image) -> Result<NccOutput> {
    if !fixed.same_dims(warped) {
        return Err(GpoError::Argument(format!(
            "ncc over {}x{} and {}x{} images",
            fixed.width(),
            fixed.height(),
            warped.width(),
            warped.height()
        )));
    }
    let a = fixed.data();
    let b = warped.data();
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut s_ab, mut s_aa, mut s_bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (da, db) = (x - mean_a, y - mean_b);
        s_ab += da * db;
        s_aa += da * da;
        s_bb += db * db;
    }
    if s_aa / n < MIN_VARIANCE || s_bb / n < MIN_VARIANCE {
        return Ok(NccOutput {
            loss: 1.0,
            rho: 0.0,
            grad: vec![0.0; a.len()],
        });
    }
    let denom = (s_aa * s_bb + NCC_EPS).sqrt();
    let rho = s_ab / denom;
    // d rho / d b_k = a'_k / D - S_ab S_aa b'_k / D^3  (sum of a' is zero)
    let c1 = 1.0 / denom;
    let c2 = s_ab * s_aa / (denom * denom * denom);
    let grad = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| -((x - mean_a) * c1 - (y - mean_b) * c2))
        .collect();
    Ok(NccOutput {
        loss: 1.0 - rho,
        rho,
        grad,
    })
}

#[derive(Debug, Clone)]
pub struct GccOutput {
    pub loss: f64,
    /// `d loss / d u(p_i)` at each anchor.
    pub grad: Vec<Vec2>,
}

/// `(1/N) sum |u(p_i) - t_i0|^2 / norm_len^2` over frozen anchors; zero when
/// the node set has no anchors.
pub fn gcc_loss(nodes: &NodeSet, field: &DisplacementField, norm_len: f64) -> Result<GccOutput> {
    if !(norm_len > 0.0 && norm_len.is_finite()) {
        return Err(GpoError::Argument(format!("norm_len must be positive, got {norm_len}")));
    }
    let anchors = nodes.anchors();
    if anchors.is_empty() {
        return Ok(GccOutput {
            loss: 0.0,
            grad: vec![],
        });
    }
    let scale = 1.0 / (anchors.len() as f64 * norm_len * norm_len);
    let mut loss = 0.0;
    let grad = anchors
        .iter()
        .zip(nodes.targets())
        .map(|(&p, &t0)| {
            let r = field.sample(p) - t0;
            loss += r.norm_sq() * scale;
            r * (2.0 * scale)
        })
        .collect();
    Ok(GccOutput { loss, grad })
}

pub fn total_loss(
    fixed: &Image,
    warped: &Image,
    nodes: &NodeSet,
    field: &DisplacementField,
    w: &LossWeights,
    norm_len: f64,
) -> Result<LossReport> {
    let ncc = ncc_loss(fixed, warped)?;
    let gcc = gcc_loss(nodes, field, norm_len)?;
    Ok(LossReport {
        total: w.alpha_gcc * gcc.loss + w.alpha_ncc * ncc.loss,
        l_gcc: gcc.loss,
        l_ncc: ncc.loss,
        ncc_value: ncc.rho,
    })
}

/// Propagates per-pixel displacement adjoints `dL/du(x)` to node parameters
/// through the softmax-Gaussian blend, with neighbor sets fixed.
///
/// Node gradients are sums of per-pixel contributions. Pixels are processed
/// in fixed row chunks whose partial sums are merged in chunk order, so the
/// result does not depend on the worker count.
pub fn accumulate_node_grads(
    nodes: &NodeSet,
    index: &NeighborIndex,
    adjoint: &[Vec2],
) -> Result<NodeGrads> {
    accumulate_cached(nodes, index, adjoint, None)
}

/// With `cached = Some((field, weights))` the blend weights and `u` are read
/// from a previous blend instead of being recomputed.
fn accumulate_cached(
    nodes: &NodeSet,
    index: &NeighborIndex,
    adjoint: &[Vec2],
    cached: Option<(&DisplacementField, &[f64])>,
) -> Result<NodeGrads> {
    index.check(nodes)?;
    let (w, h, k) = (index.width(), index.height(), index.k());
    if adjoint.len() != w * h {
        return Err(GpoError::Consistency(format!(
            "adjoint has {} entries for a {}x{} index",
            adjoint.len(),
            w,
            h
        )));
    }
    let n = nodes.len();
    let cache = NodeCache::new(nodes);
    let inv_r2: Vec<f64> = cache.radii.iter().map(|r| 1.0 / (r * r)).collect();
    let inv_r3: Vec<f64> = cache.radii.iter().map(|r| 1.0 / (r * r * r)).collect();

    // Layout per node: [gx, gy, tx, ty, r]
    let partials: Vec<Vec<f64>> = (0..h.div_ceil(ROWS_PER_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![0.0; n * 5];
            let mut scratch = vec![0.0; k];
            let y_end = ((chunk + 1) * ROWS_PER_CHUNK).min(h);
            for y in chunk * ROWS_PER_CHUNK..y_end {
                for x in 0..w {
                    let p = y * w + x;
                    let a = adjoint[p];
                    if a.x == 0.0 && a.y == 0.0 {
                        continue;
                    }
                    let pos = Vec2::new(x as f64, y as f64);
                    let ids = index.ids(p);
                    let (u, weights) = match cached {
                        Some((field, all)) => (field.data()[p], &all[p * k..p * k + k]),
                        None => (cache.weights(ids, pos, &mut scratch), &scratch[..]),
                    };
                    for (j, &id) in ids.iter().enumerate() {
                        let i = id as usize;
                        let wj = weights[j];
                        let slot = &mut acc[i * 5..i * 5 + 5];
                        slot[2] += wj * a.x;
                        slot[3] += wj * a.y;
                        let ds = wj * (cache.displacements[i] - u).dot(a);
                        let d = pos - cache.centers[i];
                        let c = ds * inv_r2[i];
                        slot[0] += c * d.x;
                        slot[1] += c * d.y;
                        slot[4] += ds * d.norm_sq() * inv_r3[i];
                    }
                }
            }
            acc
        })
        .collect();

    let mut total = vec![0.0; n * 5];
    for part in &partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    let mut grads = NodeGrads::zeros(n);
    let cfg = nodes.radius_cfg();
    for (i, node) in nodes.nodes().iter().enumerate() {
        let s = &total[i * 5..i * 5 + 5];
        grads.d_center[i] = Vec2::new(s[0], s[1]);
        grads.d_displacement[i] = Vec2::new(s[2], s[3]);
        grads.d_beta[i] = s[4] * radius_and_slope(node.beta, cfg).1;
    }
    Ok(grads)
}

/// Loss, warped image and node gradients for one evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub warped: Image,
    pub report: LossReport,
    pub grads: NodeGrads,
}

/// Forward loss and full reverse pass for a field blended from `nodes`.
pub fn evaluate(
    fixed: &Image,
    moving_coarse: &Image,
    nodes: &NodeSet,
    index: &NeighborIndex,
    field: &DisplacementField,
    w: &LossWeights,
    norm_len: f64,
) -> Result<Evaluation> {
    evaluate_cached(fixed, moving_coarse, nodes, index, field, None, w, norm_len)
}

/// [`evaluate`] reusing blend weights kept by the blend step.
#[allow(clippy::too_many_arguments)]
pub(crate) fn evaluate_cached(
    fixed: &Image,
    moving_coarse: &Image,
    nodes: &NodeSet,
    index: &NeighborIndex,
    field: &DisplacementField,
    weights: Option<&[f64]>,
    w: &LossWeights,
    norm_len: f64,
) -> Result<Evaluation> {
    if field.source_revision() != Some(nodes.revision()) {
        return Err(GpoError::Consistency(
            "field was not blended from the current node snapshot".into(),
        ));
    }
    index.check(nodes)?;
    if !fixed.same_dims(moving_coarse) {
        return Err(GpoError::Argument("fixed and moving images differ in size".into()));
    }
    let (warped, img_grad) = warp_with_gradient(moving_coarse, field)?;
    let ncc = ncc_loss(fixed, &warped)?;
    let gcc = gcc_loss(nodes, field, norm_len)?;

    let mut adjoint: Vec<Vec2> = ncc
        .grad
        .iter()
        .zip(&img_grad)
        .map(|(&g, &ig)| ig * (w.alpha_ncc * g))
        .collect();
    for (anchor, g) in nodes.anchors().iter().zip(&gcc.grad) {
        for (tap, tw) in bilinear_taps(field.width(), field.height(), anchor.x, anchor.y) {
            adjoint[tap] += *g * (w.alpha_gcc * tw);
        }
    }
    if weights.is_some_and(|all| all.len() != index.width() * index.height() * index.k()) {
        return Err(GpoError::Consistency("cached weights do not match the index".into()));
    }
    let grads = accumulate_cached(nodes, index, &adjoint, weights.map(|all| (field, all)))?;
    Ok(Evaluation {
        warped,
        report: LossReport {
            total: w.alpha_gcc * gcc.loss + w.alpha_ncc * ncc.loss,
            l_gcc: gcc.loss,
            l_ncc: ncc.loss,
            ncc_value: ncc.rho,
        },
        grads,
    })
}

/// `dL/d{g, t, beta}` for every node.
pub fn backward(
    fixed: &Image,
    moving_coarse: &Image,
    nodes: &NodeSet,
    index: &NeighborIndex,
    field: &DisplacementField,
    w: &LossWeights,
    norm_len: f64,
) -> Result<NodeGrads> {
    evaluate(fixed, moving_coarse, nodes, index, field, w, norm_len).map(|e| e.grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{blend, build_knn};
    use crate::imagecore::gaussian_blur;
    use crate::primitives::{beta_for_radius, init_gcn, ControlNode, RadiusConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, w: usize, h: usize, sigma: f64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Image::from_fn(w, h, |_, _| rng.random::<f64>());
        if sigma == 0.0 {
            return raw;
        }
        let img = gaussian_blur(&raw, sigma).unwrap();
        // Stretch contrast back out after blurring.
        let m = img.mean();
        Image::from_clamped(w, h, img.data().iter().map(|v| 0.5 + 6.0 * (v - m)).collect())
    }

    #[test]
    fn ncc_perfect_and_anti_correlation() {
        let a = noise(1, 16, 16, 0.0);
        let out = ncc_loss(&a, &a).unwrap();
        assert!((out.rho - 1.0).abs() < 1e-9 && out.loss.abs() < 1e-9);
        assert!(out.grad.iter().all(|g| g.abs() <= 1e-8));

        let inv = Image::from_clamped(16, 16, a.data().iter().map(|v| 1.0 - v).collect());
        let out = ncc_loss(&a, &inv).unwrap();
        assert!((out.loss - 2.0).abs() < 1e-9);

        assert!(ncc_loss(&a, &Image::constant(15, 16, 0.5)).is_err());
        let flat = ncc_loss(&a, &Image::constant(16, 16, 0.5)).unwrap();
        assert_eq!((flat.rho, flat.loss), (0.0, 1.0));
        assert!(flat.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn ncc_gradient_matches_finite_differences() {
        let a = noise(2, 16, 16, 0.0);
        let b = noise(3, 16, 16, 0.0);
        let out = ncc_loss(&a, &b).unwrap();
        let h = 1e-4;
        for k in 0..256 {
            let bump = |d: f64| {
                let mut v = b.data().to_vec();
                v[k] += d;
                // Bypass the [0,1] clamp: perturbations are tiny and interior.
                Image::new(16, 16, v.iter().map(|x| x.clamp(0.0, 1.0)).collect()).unwrap()
            };
            if b.data()[k] < h || b.data()[k] > 1.0 - h {
                continue;
            }
            let fd = (ncc_loss(&a, &bump(h)).unwrap().loss - ncc_loss(&a, &bump(-h)).unwrap().loss) / (2.0 * h);
            let g = out.grad[k];
            assert!((g - fd).abs() <= 1e-5 * g.abs().max(fd.abs()), "pixel {k}: {g} vs {fd}");
        }
    }

    fn dcn_like(anchors: &[(Vec2, Vec2)]) -> NodeSet {
        let cfg = RadiusConfig::new(1.0, 50.0).unwrap();
        let beta = beta_for_radius(10.0, &cfg).unwrap();
        NodeSet::new(
            anchors
                .iter()
                .map(|&(p, t)| ControlNode {
                    center: p,
                    displacement: t,
                    beta,
                })
                .collect(),
            cfg,
            anchors.iter().map(|a| a.0).collect(),
            anchors.iter().map(|a| a.1).collect(),
        )
        .unwrap()
    }

    #[test]
    fn gcc_examples() {
        let nodes = dcn_like(&[(Vec2::new(3.5, 2.25), Vec2::new(1.0, 1.0))]);
        let field = DisplacementField::uniform(8, 8, Vec2::new(1.0, 1.0));
        let out = gcc_loss(&nodes, &field, 8.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|g| *g == Vec2::ZERO));

        let field = DisplacementField::uniform(8, 8, Vec2::new(4.0, 5.0));
        let out = gcc_loss(&nodes, &field, 8.0).unwrap();
        assert!((out.loss - 25.0 / 64.0).abs() < 1e-15);
        assert!((out.grad[0] - Vec2::new(6.0 / 64.0, 8.0 / 64.0)).norm() < 1e-15);

        let grid = init_gcn(8, 8, 2, &RadiusConfig::default(), 10.0).unwrap();
        assert_eq!(gcc_loss(&grid, &field, 8.0).unwrap().loss, 0.0);
        assert!(gcc_loss(&grid, &field, 0.0).is_err());
    }

    #[test]
    fn total_loss_is_linear_in_weights() {
        let a = noise(4, 12, 12, 1.0);
        let b = noise(5, 12, 12, 1.0);
        let nodes = dcn_like(&[(Vec2::new(3.5, 2.5), Vec2::new(1.0, -1.0))]);
        let field = DisplacementField::uniform(12, 12, Vec2::new(0.5, 0.0));
        let r1 = total_loss(&a, &b, &nodes, &field, &LossWeights::new(0.4, 1.0).unwrap(), 12.0).unwrap();
        let r2 = total_loss(&a, &b, &nodes, &field, &LossWeights::new(0.4, 2.0).unwrap(), 12.0).unwrap();
        assert!((r1.total - (0.4 * r1.l_gcc + r1.l_ncc)).abs() < 1e-12);
        assert!((r2.total - r1.total - r1.l_ncc).abs() < 1e-12);
        let r3 = total_loss(&a, &b, &nodes, &field, &LossWeights::new(1.2, 3.0).unwrap(), 12.0).unwrap();
        assert!((r3.total - 3.0 * r1.total).abs() < 1e-12);
        assert!(LossWeights::new(0.0, 0.0).is_err());
        assert!(LossWeights::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn stationary_at_perfect_alignment() {
        let img = noise(6, 24, 24, 1.5);
        let cfg = RadiusConfig::new(1.0, 40.0).unwrap();
        let nodes = init_gcn(24, 24, 4, &cfg, 6.0).unwrap();
        let idx = build_knn(&nodes, 24, 24, 4).unwrap();
        let field = blend(&nodes, &idx).unwrap();
        let g = backward(&img, &img, &nodes, &idx, &field, &LossWeights::new(0.0, 1.0).unwrap(), 24.0).unwrap();
        assert!(g.max_abs() <= 1e-8, "{}", g.max_abs());
    }

    #[test]
    fn node_outside_every_support_gets_zero_gradient() {
        let cfg = RadiusConfig::new(1.0, 40.0).unwrap();
        let beta = beta_for_radius(5.0, &cfg).unwrap();
        let mut nodes = vec![];
        for i in 0..4 {
            nodes.push(ControlNode {
                center: Vec2::new(4.0 + i as f64 * 0.5, 5.0),
                displacement: Vec2::new(0.3, -0.2),
                beta,
            });
        }
        nodes.push(ControlNode {
            center: Vec2::new(500.0, 500.0),
            displacement: Vec2::new(1.0, 1.0),
            beta,
        });
        let nodes = NodeSet::new(nodes, cfg, vec![], vec![]).unwrap();
        let idx = build_knn(&nodes, 16, 16, 4).unwrap();
        let field = blend(&nodes, &idx).unwrap();
        let a = noise(7, 16, 16, 1.0);
        let b = noise(8, 16, 16, 1.0);
        let g = backward(&a, &b, &nodes, &idx, &field, &LossWeights::default(), 16.0).unwrap();
        assert_eq!(g.d_center[4], Vec2::ZERO);
        assert_eq!(g.d_displacement[4], Vec2::ZERO);
        assert_eq!(g.d_beta[4], 0.0);
        assert!(g.d_displacement[0].norm() > 0.0);
    }

    #[test]
    fn support_locality() {
        let cfg = RadiusConfig::new(1.0, 40.0).unwrap();
        let nodes = init_gcn(20, 20, 4, &cfg, 6.0).unwrap();
        let idx = build_knn(&nodes, 20, 20, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut adjoint: Vec<Vec2> = (0..400)
            .map(|_| Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let target = 5u32;
        for p in 0..400 {
            if idx.ids(p).contains(&target) {
                adjoint[p] = Vec2::ZERO;
            }
        }
        let g = accumulate_node_grads(&nodes, &idx, &adjoint).unwrap();
        let t = target as usize;
        assert_eq!((g.d_center[t], g.d_displacement[t], g.d_beta[t]), (Vec2::ZERO, Vec2::ZERO, 0.0));
    }

    #[test]
    fn stale_field_is_rejected() {
        let img = noise(9, 10, 10, 1.0);
        let cfg = RadiusConfig::new(1.0, 40.0).unwrap();
        let mut nodes = init_gcn(10, 10, 2, &cfg, 5.0).unwrap();
        let idx = build_knn(&nodes, 10, 10, 2).unwrap();
        let field = blend(&nodes, &idx).unwrap();
        nodes.nodes_mut()[0].displacement.x = 1.0;
        assert!(matches!(
            backward(&img, &img, &nodes, &idx, &field, &LossWeights::default(), 10.0),
            Err(GpoError::Consistency(_))
        ));
    }
}
