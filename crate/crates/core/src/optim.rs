//! Adam over node parameters and the registration loop.

use std::time::Instant;

use crate::coarse::GlobalTransform;
use crate::error::{GpoError, Result};
use crate::field::{blend, blend_keep_weights, build_knn, warp, DisplacementField};
use crate::imagecore::Image;
use crate::loss::{evaluate_cached, LossReport, LossWeights, NodeGrads};
use crate::primitives::NodeSet;

/// Scalars per node, laid out as `[gx, gy, tx, ty, beta]`.
pub const PARAMS_PER_NODE: usize = 5;

/// `|beta|` cap applied after each step. Past roughly 37 the sigmoid rounds to
/// exactly 0 or 1 and the radius would sit on the boundary of its interval.
pub const BETA_LIMIT: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub eta_g: f64,
    pub eta_t: f64,
    pub eta_r: f64,
    pub tau_max: usize,
    pub k: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Length normalizing the keypoint term; `None` uses the image width.
    pub gcc_norm_len: Option<f64>,
    /// Copy the node set every this many iterations; 0 disables snapshots.
    pub snapshot_every: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            eta_g: 1.0,
            eta_t: 0.01,
            eta_r: 0.01,
            tau_max: 100,
            k: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss_weights: LossWeights::default(),
            seed: 0,
            gcc_norm_len: None,
            snapshot_every: 10,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(GpoError::Config(msg));
        for (name, v) in [("eta_g", self.eta_g), ("eta_t", self.eta_t), ("eta_r", self.eta_r)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("optim.{name} must be a positive number, got {v}"));
            }
        }
        if self.tau_max == 0 {
            return bad("optim.tau_max must be >= 1".into());
        }
        if self.k == 0 {
            return bad("optim.k must be >= 1".into());
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("optim.{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return bad(format!("optim.adam_eps must be positive, got {}", self.adam_eps));
        }
        if let Some(l) = self.gcc_norm_len {
            if !(l > 0.0 && l.is_finite()) {
                return bad(format!("loss.norm_len must be positive, got {l}"));
            }
        }
        LossWeights::new(self.loss_weights.alpha_gcc, self.loss_weights.alpha_ncc)
            .map_err(|e| GpoError::Config(e.to_string()))?;
        Ok(())
    }
}

/// First and second moments for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn for_nodes(nodes: &NodeSet) -> Self {
        AdamState::new(nodes.len() * PARAMS_PER_NODE)
    }

    /// One bias-corrected Adam step, `params[i] -= lrs[i] * m_hat / (sqrt(v_hat) + eps)`.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lrs: &[f64], beta1: f64, beta2: f64, eps: f64) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || lrs.len() != n || self.v.len() != n {
            return Err(GpoError::Consistency(format!(
                "adam sizes differ: state {n}, params {}, grads {}, rates {}",
                params.len(),
                grads.len(),
                lrs.len()
            )));
        }
        self.step += 1;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for i in 0..n {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lrs[i] * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

fn flatten(nodes: &NodeSet) -> Vec<f64> {
    let mut p = Vec::with_capacity(nodes.len() * PARAMS_PER_NODE);
    for n in nodes.nodes() {
        p.extend_from_slice(&[n.center.x, n.center.y, n.displacement.x, n.displacement.y, n.beta]);
    }
    p
}

fn flatten_grads(g: &NodeGrads) -> Vec<f64> {
    let mut p = Vec::with_capacity(g.len() * PARAMS_PER_NODE);
    for i in 0..g.len() {
        let (c, t) = (g.d_center[i], g.d_displacement[i]);
        p.extend_from_slice(&[c.x, c.y, t.x, t.y, g.d_beta[i]]);
    }
    p
}

/// Applies one Adam step with per-group learning rates to every node.
pub fn adam_step(nodes: &mut NodeSet, grads: &NodeGrads, state: &mut AdamState, cfg: &OptimConfig) -> Result<()> {
    if grads.len() != nodes.len() || state.m.len() != nodes.len() * PARAMS_PER_NODE {
        return Err(GpoError::Consistency(format!(
            "{} nodes but {} gradients and {} optimizer slots",
            nodes.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let mut params = flatten(nodes);
    let lrs: Vec<f64> = (0..params.len())
        .map(|i| match i % PARAMS_PER_NODE {
            0 | 1 => cfg.eta_g,
            2 | 3 => cfg.eta_t,
            _ => cfg.eta_r,
        })
        .collect();
    state.update(&mut params, &flatten_grads(grads), &lrs, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)?;
    for (n, p) in nodes.nodes_mut().iter_mut().zip(params.chunks_exact(PARAMS_PER_NODE)) {
        n.center.x = p[0];
        n.center.y = p[1];
        n.displacement.x = p[2];
        n.displacement.y = p[3];
        n.beta = p[4].clamp(-BETA_LIMIT, BETA_LIMIT);
    }
    Ok(())
}

/// Wall-clock seconds per phase, summed over iterations.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Timing {
    pub knn: f64,
    pub blend: f64,
    pub loss: f64,
    pub update: f64,
    pub finalize: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub final_field: DisplacementField,
    pub warped: Image,
    pub loss_trace: Vec<LossReport>,
    pub node_snapshots: Vec<(usize, NodeSet)>,
    pub final_nodes: NodeSet,
    pub global_transform: GlobalTransform,
    pub timing: Timing,
}

/// Runs `cfg.tau_max` iterations; see [`register_with_observer`].
pub fn register(fixed: &Image, moving_coarse: &Image, nodes: NodeSet, cfg: &OptimConfig) -> Result<RegistrationResult> {
    register_with_observer(fixed, moving_coarse, nodes, cfg, |_, _| {})
}

/// The registration loop. `observer(iter, nodes)` sees the node set after
/// every optimizer step (iterations counted from 1).
pub fn register_with_observer(
    fixed: &Image,
    moving_coarse: &Image,
    mut nodes: NodeSet,
    cfg: &OptimConfig,
    mut observer: impl FnMut(usize, &NodeSet),
) -> Result<RegistrationResult> {
    cfg.validate()?;
    if !fixed.same_dims(moving_coarse) {
        return Err(GpoError::Argument(format!(
            "fixed is {}x{} but moving is {}x{}",
            fixed.width(),
            fixed.height(),
            moving_coarse.width(),
            moving_coarse.height()
        )));
    }
    let (w, h) = (fixed.width(), fixed.height());
    let norm_len = cfg.gcc_norm_len.unwrap_or(w as f64);
    let start = Instant::now();
    let mut timing = Timing::default();
    let mut state = AdamState::for_nodes(&nodes);
    let mut trace = Vec::with_capacity(cfg.tau_max);
    let mut snapshots = Vec::new();
    let mut weights = Vec::new();

    for iter in 1..=cfg.tau_max {
        let t0 = Instant::now();
        let index = build_knn(&nodes, w, h, cfg.k)?;
        let t1 = Instant::now();
        let field = blend_keep_weights(&nodes, &index, Some(&mut weights))?;
        let t2 = Instant::now();
        let ev = evaluate_cached(
            fixed,
            moving_coarse,
            &nodes,
            &index,
            &field,
            Some(&weights),
            &cfg.loss_weights,
            norm_len,
        )?;
        let t3 = Instant::now();
        let mut bad = ev.grads.non_finite_nodes();
        if !ev.report.total.is_finite() && bad.is_empty() {
            bad = (0..nodes.len()).collect();
        }
        if !bad.is_empty() {
            return Err(GpoError::Numerical {
                iteration: iter,
                nodes: bad,
            });
        }
        trace.push(ev.report);
        adam_step(&mut nodes, &ev.grads, &mut state, cfg)?;
        let t4 = Instant::now();
        timing.knn += (t1 - t0).as_secs_f64();
        timing.blend += (t2 - t1).as_secs_f64();
        timing.loss += (t3 - t2).as_secs_f64();
        timing.update += (t4 - t3).as_secs_f64();
        observer(iter, &nodes);
        if cfg.snapshot_every > 0 && iter % cfg.snapshot_every == 0 {
            snapshots.push((iter, nodes.clone()));
        }
    }

    let t0 = Instant::now();
    let index = build_knn(&nodes, w, h, cfg.k)?;
    let final_field = blend(&nodes, &index)?;
    let warped = warp(moving_coarse, &final_field)?;
    timing.finalize = t0.elapsed().as_secs_f64();
    timing.total = start.elapsed().as_secs_f64();
    Ok(RegistrationResult {
        final_field,
        warped,
        loss_trace: trace,
        node_snapshots: snapshots,
        final_nodes: nodes,
        global_transform: GlobalTransform::identity(),
        timing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::field_stats;
    use crate::geom::Vec2;
    use crate::imagecore::gaussian_blur;
    use crate::primitives::{init_gcn, ControlNode, RadiusConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_first_step_equals_lr() {
        let mut s = AdamState::new(1);
        let mut p = [0.0];
        s.update(&mut p, &[1.0], &[0.01], 0.9, 0.999, 1e-8).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!(s.update(&mut p, &[1.0, 2.0], &[0.01], 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut s = AdamState::new(1);
        let mut x = [0.0];
        for _ in 0..500 {
            let g = 2.0 * (x[0] - 3.0);
            s.update(&mut x, &[g], &[0.1], 0.9, 0.999, 1e-8).unwrap();
        }
        assert!((x[0] - 3.0).abs() < 1e-2, "{}", x[0]);
    }

    fn small_nodes() -> NodeSet {
        init_gcn(32, 32, 4, &RadiusConfig::new(2.0, 40.0).unwrap(), 8.0).unwrap()
    }

    #[test]
    fn zero_gradients_leave_nodes_unchanged() {
        let mut nodes = small_nodes();
        let before = nodes.nodes().to_vec();
        let mut st = AdamState::for_nodes(&nodes);
        let zeros = NodeGrads::zeros(nodes.len());
        adam_step(&mut nodes, &zeros, &mut st, &OptimConfig::default()).unwrap();
        assert_eq!(nodes.nodes(), &before[..]);
        assert!(adam_step(&mut nodes, &NodeGrads::zeros(3), &mut st, &OptimConfig::default()).is_err());
    }

    #[test]
    fn group_rates_are_applied_per_component() {
        let mut nodes = small_nodes();
        let before = nodes.nodes().to_vec();
        let mut g = NodeGrads::zeros(nodes.len());
        g.d_center[0] = Vec2::new(1.0, -1.0);
        g.d_displacement[0] = Vec2::new(1.0, 0.0);
        g.d_beta[0] = -1.0;
        let cfg = OptimConfig {
            eta_g: 1.0,
            eta_t: 0.5,
            eta_r: 0.25,
            ..OptimConfig::default()
        };
        let mut st = AdamState::for_nodes(&nodes);
        adam_step(&mut nodes, &g, &mut st, &cfg).unwrap();
        let (a, b) = (&before[0], &nodes.nodes()[0]);
        assert!((b.center.x - a.center.x + 1.0).abs() < 1e-6);
        assert!((b.center.y - a.center.y - 1.0).abs() < 1e-6);
        assert!((b.displacement.x - a.displacement.x + 0.5).abs() < 1e-6);
        assert_eq!(b.displacement.y, a.displacement.y);
        assert!((b.beta - a.beta - 0.25).abs() < 1e-6);
        assert_eq!(&nodes.nodes()[1..], &before[1..]);
    }

    #[test]
    fn beta_stays_capped_under_persistent_push() {
        let mut nodes = small_nodes();
        let mut g = NodeGrads::zeros(nodes.len());
        g.d_beta[0] = -1.0;
        g.d_beta[1] = 1.0;
        let cfg = OptimConfig { eta_r: 10.0, ..OptimConfig::default() };
        let mut st = AdamState::for_nodes(&nodes);
        for _ in 0..20 {
            adam_step(&mut nodes, &g, &mut st, &cfg).unwrap();
        }
        assert_eq!(nodes.nodes()[0].beta, BETA_LIMIT);
        assert_eq!(nodes.nodes()[1].beta, -BETA_LIMIT);
        let (lo, hi) = nodes.radius_cfg().bounds();
        assert!(nodes.radius(0) < hi && nodes.radius(1) > lo);
    }

    #[test]
    fn validate_rejects_bad_values() {
        assert!(OptimConfig::default().validate().is_ok());
        for cfg in [
            OptimConfig { eta_t: 0.0, ..Default::default() },
            OptimConfig { tau_max: 0, ..Default::default() },
            OptimConfig { k: 0, ..Default::default() },
            OptimConfig { adam_beta2: 1.0, ..Default::default() },
        ] {
            assert!(matches!(cfg.validate(), Err(GpoError::Config(_))));
        }
    }

    fn textured(seed: u64, n: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Image::from_fn(n, n, |_, _| rng.random::<f64>());
        let b = gaussian_blur(&raw, 2.0).unwrap();
        let m = b.mean();
        Image::from_clamped(n, n, b.data().iter().map(|v| 0.5 + 5.0 * (v - m)).collect())
    }

    #[test]
    fn identity_registration_stays_put() {
        let img = textured(4, 48);
        let nodes = init_gcn(48, 48, 6, &RadiusConfig::new(2.0, 64.0).unwrap(), 8.0).unwrap();
        let cfg = OptimConfig {
            tau_max: 50,
            loss_weights: LossWeights::new(0.0, 1.0).unwrap(),
            ..Default::default()
        };
        let res = register(&img, &img, nodes, &cfg).unwrap();
        assert_eq!(res.loss_trace.len(), 50);
        assert_eq!(res.node_snapshots.len(), 5);
        let stats = field_stats(&res.final_field).unwrap();
        assert!(stats.max_mag < 0.5, "{}", stats.max_mag);
        let last = crate::loss::ncc_loss(&img, &res.warped).unwrap().loss;
        // At the exact optimum Adam's normalized steps still jiggle the
        // nodes, so the loss may rise at the 1e-8 level.
        assert!(last <= res.loss_trace[0].total + 1e-6, "{last} {}", res.loss_trace[0].total);
    }

    #[test]
    fn registration_is_deterministic_and_recovers_a_shift() {
        let fixed = textured(5, 48);
        // moving(y) = fixed(y - 1.5) so the ideal field is u = +1.5 in x.
        let moving = Image::from_fn(48, 48, |x, y| {
            crate::imagecore::sample_bilinear(&fixed, Vec2::new(x as f64 - 1.5, y as f64)).unwrap().value
        });
        let nodes = init_gcn(48, 48, 4, &RadiusConfig::new(2.0, 64.0).unwrap(), 12.0).unwrap();
        let cfg = OptimConfig {
            tau_max: 60,
            eta_t: 0.1,
            eta_g: 0.1,
            loss_weights: LossWeights::new(0.0, 1.0).unwrap(),
            ..Default::default()
        };
        let a = register(&fixed, &moving, nodes.clone(), &cfg).unwrap();
        let b = register(&fixed, &moving, nodes, &cfg).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.final_field, b.final_field);
        let center = a.final_field.get(24, 24);
        assert!((center.x - 1.5).abs() < 0.3 && center.y.abs() < 0.3, "{center:?}");
        assert!(a.loss_trace.last().unwrap().total < a.loss_trace[0].total);
    }

    #[test]
    fn observer_sees_every_step() {
        let img = textured(6, 24);
        let nodes = NodeSet::new(
            vec![ControlNode { center: Vec2::new(12.0, 12.0), displacement: Vec2::ZERO, beta: 0.0 }],
            RadiusConfig::new(2.0, 30.0).unwrap(),
            vec![],
            vec![],
        )
        .unwrap();
        let mut seen = vec![];
        let cfg = OptimConfig { tau_max: 7, ..Default::default() };
        register_with_observer(&img, &img, nodes, &cfg, |i, _| seen.push(i)).unwrap();
        assert_eq!(seen, (1..=7).collect::<Vec<_>>());
    }
}
