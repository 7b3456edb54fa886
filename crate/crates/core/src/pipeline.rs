//! End-to-end registration: preprocessing, coarse alignment, node
//! initialization, optimization and artifact output.
//!
//! Working-frame coordinates follow the resize convention
//! `x_orig = (x_work + 0.5) * f - 0.5` per axis.

use std::fmt::Write as _;
use std::path::Path;

use crate::coarse::{apply_global, fit_global, GlobalTransform, Match, MatchSet};
use crate::config::{Mode, RunConfig};
use crate::error::{GpoError, Result};
use crate::eval::{LandmarkPairs, TreStats};
use crate::field::{field_stats, DisplacementField, FieldStats};
use crate::geom::Vec2;
use crate::imagecore::{gaussian_blur, load_image, resize_bilinear, save_overlay, save_png, Image};
use crate::optim::{register_with_observer, RegistrationResult};
use crate::primitives::{default_dcn_radius, default_gcn_radius, init_dcn, init_gcn, subsample_keypoints, NodeSet};
use crate::table;

/// Original-to-working scale factors per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameScale {
    pub fx: f64,
    pub fy: f64,
}

impl FrameScale {
    pub const ONE: FrameScale = FrameScale { fx: 1.0, fy: 1.0 };

    pub fn to_working(&self, p: Vec2) -> Vec2 {
        Vec2::new((p.x + 0.5) / self.fx - 0.5, (p.y + 0.5) / self.fy - 0.5)
    }

    pub fn to_original(&self, p: Vec2) -> Vec2 {
        Vec2::new((p.x + 0.5) * self.fx - 0.5, (p.y + 0.5) * self.fy - 0.5)
    }
}

/// Values the config left as `auto`, after resolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolved {
    pub working_width: usize,
    pub working_height: usize,
    pub blur_fixed: f64,
    pub blur_moving: f64,
    pub init_radius: f64,
    pub alpha_gcc: f64,
    pub norm_len: f64,
}

/// Inputs to the optimization loop.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub fixed: Image,
    pub moving_coarse: Image,
    pub nodes: NodeSet,
    pub transform: GlobalTransform,
    pub scale_fixed: FrameScale,
    pub scale_moving: FrameScale,
    pub resolved: Resolved,
}

fn working(img: &Image, size: Option<usize>, sigma: Option<f64>) -> Result<(Image, FrameScale, f64)> {
    let (w, h) = (img.width(), img.height());
    let (nw, nh) = match size {
        Some(s) => {
            let f = w.max(h) as f64 / s as f64;
            (((w as f64 / f).round() as usize).max(1), ((h as f64 / f).round() as usize).max(1))
        }
        None => (w, h),
    };
    let scale = FrameScale {
        fx: w as f64 / nw as f64,
        fy: h as f64 / nh as f64,
    };
    // Anti-alias only when shrinking.
    let sigma = sigma.unwrap_or_else(|| (0.5 * (scale.fx.max(scale.fy) - 1.0)).max(0.0));
    let blurred = gaussian_blur(img, sigma)?;
    let out = if (nw, nh) == (w, h) { blurred } else { resize_bilinear(&blurred, nw, nh)? };
    Ok((out, scale, sigma))
}

/// Preprocesses in-memory images and builds the initial node set.
pub fn prepare(cfg: &RunConfig, fixed: &Image, moving: &Image, matches: Option<&MatchSet>) -> Result<Prepared> {
    cfg.validate()?;
    let matches = match (cfg.mode, matches) {
        (Mode::Dcn, None) => return Err(GpoError::Argument("dcn mode requires keypoint matches".into())),
        (Mode::Dcn, Some(m)) if m.len() < 4 => {
            return Err(GpoError::Argument(format!("dcn mode needs at least 4 matches, got {}", m.len())))
        }
        (_, m) => m,
    };
    let (fixed_w, sf, blur_fixed) = working(fixed, cfg.size, cfg.blur_sigma)?;
    let (moving_w, sm, blur_moving) = working(moving, cfg.size, cfg.blur_sigma)?;
    let (w, h) = (fixed_w.width(), fixed_w.height());
    let rc = cfg.radius_config();
    let (transform, nodes, init_radius) = match cfg.mode {
        Mode::Gcn => {
            let r = rc.clamp_radius(cfg.init_radius.unwrap_or_else(|| default_gcn_radius(w, cfg.grid_n)));
            (GlobalTransform::identity(), init_gcn(w, h, cfg.grid_n, &rc, r)?, r)
        }
        Mode::Dcn => {
            let m = matches.expect("checked above");
            let scaled = MatchSet::new(
                m.pairs
                    .iter()
                    .map(|p| Match {
                        fixed: sf.to_working(p.fixed),
                        moving: sm.to_working(p.moving),
                        confidence: p.confidence,
                    })
                    .collect(),
            )?;
            let t = fit_global(&scaled, &cfg.ransac_config())?;
            let r = match cfg.init_radius {
                Some(r) => r,
                None => {
                    let chosen = subsample_keypoints(&scaled, cfg.n_nodes, cfg.seed);
                    let pts: Vec<Vec2> = chosen.pairs.iter().map(|p| p.fixed).collect();
                    let fallback = w as f64 / (chosen.len() as f64).sqrt();
                    rc.clamp_radius(default_dcn_radius(&pts, fallback))
                }
            };
            let nodes = init_dcn(&scaled, &t, cfg.n_nodes, &rc, r, cfg.seed)?;
            (t, nodes, r)
        }
    };
    let moving_coarse = apply_global(&moving_w, &transform, w, h)?;
    Ok(Prepared {
        fixed: fixed_w,
        moving_coarse,
        nodes,
        transform,
        scale_fixed: sf,
        scale_moving: sm,
        resolved: Resolved {
            working_width: w,
            working_height: h,
            blur_fixed,
            blur_moving,
            init_radius,
            alpha_gcc: cfg.alpha_gcc_for(cfg.mode),
            norm_len: cfg.norm_len.unwrap_or(w as f64),
        },
    })
}

/// TRE at original resolution for a field and transform in the working frame.
pub fn tre_resampled(
    landmarks: &LandmarkPairs,
    transform: &GlobalTransform,
    field: &DisplacementField,
    sf: FrameScale,
    sm: FrameScale,
) -> Result<TreStats> {
    let d = landmarks
        .pairs
        .iter()
        .map(|&(pf, pm)| {
            let x = sf.to_working(pf);
            let q = transform.apply(x + field.sample(x))?;
            Ok((sm.to_original(q) - pm).norm())
        })
        .collect::<Result<Vec<_>>>()?;
    TreStats::from_distances(d)
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub prepared: Prepared,
    pub result: RegistrationResult,
    pub field_stats: FieldStats,
    /// TRE of the coarse transform alone (zero field).
    pub tre_coarse: Option<TreStats>,
    pub tre_final: Option<TreStats>,
}

/// Runs registration on in-memory inputs. `observer` sees the nodes after
/// every optimizer step.
pub fn run(
    cfg: &RunConfig,
    fixed: &Image,
    moving: &Image,
    matches: Option<&MatchSet>,
    landmarks: Option<&LandmarkPairs>,
    observer: impl FnMut(usize, &NodeSet),
) -> Result<PipelineOutput> {
    let prepared = prepare(cfg, fixed, moving, matches)?;
    let mut result = register_with_observer(
        &prepared.fixed,
        &prepared.moving_coarse,
        prepared.nodes.clone(),
        &cfg.optim_config(cfg.mode),
        observer,
    )?;
    result.global_transform = prepared.transform;
    let stats = field_stats(&result.final_field)?;
    let (sf, sm) = (prepared.scale_fixed, prepared.scale_moving);
    let (tre_coarse, tre_final) = match landmarks {
        Some(lm) => {
            let (w, h) = (prepared.fixed.width(), prepared.fixed.height());
            (
                Some(tre_resampled(lm, &prepared.transform, &DisplacementField::zeros(w, h), sf, sm)?),
                Some(tre_resampled(lm, &prepared.transform, &result.final_field, sf, sm)?),
            )
        }
        None => (None, None),
    };
    Ok(PipelineOutput {
        prepared,
        result,
        field_stats: stats,
        tre_coarse,
        tre_final,
    })
}

/// Loads inputs named by `cfg`, registers, and writes artifacts to
/// `cfg.out` when set. Nothing is written unless registration succeeds.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let need = |p: &Option<std::path::PathBuf>, what: &str| {
        p.clone().ok_or_else(|| GpoError::Argument(format!("missing {what} image path")))
    };
    let fixed_path = need(&cfg.fixed, "fixed")?;
    let moving_path = need(&cfg.moving, "moving")?;
    if cfg.mode == Mode::Dcn && cfg.matches.is_none() {
        return Err(GpoError::Argument("dcn mode requires a matches file".into()));
    }
    let matches = match (&cfg.matches, cfg.mode) {
        (Some(p), Mode::Dcn) => Some(MatchSet::read(p)?),
        _ => None,
    };
    if let Some(m) = &matches {
        if m.len() < 4 {
            return Err(GpoError::Argument(format!("dcn mode needs at least 4 matches, got {}", m.len())));
        }
    }
    let landmarks = cfg.landmarks.as_ref().map(|p| LandmarkPairs::read(p, 1.0, 1.0)).transpose()?;
    let fixed = load_image(&fixed_path)?;
    let moving = load_image(&moving_path)?;
    let out = run(cfg, &fixed, &moving, matches.as_ref(), landmarks.as_ref(), |_, _| {})?;
    if let Some(dir) = &cfg.out {
        write_artifacts(cfg, &out, dir)?;
    }
    Ok(out)
}

pub mod artifact {
    pub const WARPED: &str = "warped.png";
    pub const FIELD: &str = "field.gpof";
    pub const LOSS_TRACE: &str = "loss_trace.csv";
    pub const OVERLAY: &str = "overlay.png";
    pub const DIFF: &str = "diff.png";
    pub const TRANSFORM: &str = "transform.txt";
    pub const NODES: &str = "nodes_final.csv";
    pub const META: &str = "run_meta.txt";
}

pub fn loss_trace_table(result: &RegistrationResult) -> String {
    let mut s = String::from("iter,total,l_gcc,l_ncc,ncc\n");
    for (i, r) in result.loss_trace.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{},{}", i + 1, r.total, r.l_gcc, r.l_ncc, r.ncc_value);
    }
    s
}

fn tre_lines(s: &mut String, name: &str, t: &Option<TreStats>) {
    if let Some(t) = t {
        let _ = writeln!(s, "{name}.mean = {}", t.mean);
        let _ = writeln!(s, "{name}.median = {}", t.median);
        let _ = writeln!(s, "{name}.max = {}", t.max);
    }
}

/// The run metadata record: resolved config, derived values, transform and
/// summary metrics.
pub fn run_metadata(cfg: &RunConfig, out: &PipelineOutput) -> String {
    let mut s = String::from("[config]\n");
    s.push_str(&cfg.to_text());
    let r = &out.prepared.resolved;
    let _ = writeln!(s, "\n[resolved]");
    let _ = writeln!(s, "config_hash = {:016x}", cfg.hash());
    let _ = writeln!(s, "working_size = {}x{}", r.working_width, r.working_height);
    let _ = writeln!(s, "scale_fixed = {},{}", out.prepared.scale_fixed.fx, out.prepared.scale_fixed.fy);
    let _ = writeln!(s, "scale_moving = {},{}", out.prepared.scale_moving.fx, out.prepared.scale_moving.fy);
    let _ = writeln!(s, "blur_sigma_fixed = {}", r.blur_fixed);
    let _ = writeln!(s, "blur_sigma_moving = {}", r.blur_moving);
    let _ = writeln!(s, "init_radius = {}", r.init_radius);
    let _ = writeln!(s, "alpha_gcc = {}", r.alpha_gcc);
    let _ = writeln!(s, "norm_len = {}", r.norm_len);
    let _ = writeln!(s, "node_count = {}", out.prepared.nodes.len());
    let _ = writeln!(s, "\n[transform]");
    let _ = writeln!(s, "kind = {}", out.prepared.transform.kind());
    let m = out.prepared.transform.matrix();
    for i in 0..3 {
        let _ = writeln!(s, "row{i} = {},{},{}", m[(i, 0)], m[(i, 1)], m[(i, 2)]);
    }
    let _ = writeln!(s, "\n[metrics]");
    let trace = &out.result.loss_trace;
    if let (Some(a), Some(b)) = (trace.first(), trace.last()) {
        let _ = writeln!(s, "loss_initial = {}", a.total);
        let _ = writeln!(s, "loss_final = {}", b.total);
    }
    let _ = writeln!(s, "mean_abs_u = {}", out.field_stats.mean_mag);
    let _ = writeln!(s, "max_abs_u = {}", out.field_stats.max_mag);
    let _ = writeln!(s, "jacobian_min_det = {}", out.field_stats.jacobian_min_det);
    tre_lines(&mut s, "tre_coarse", &out.tre_coarse);
    tre_lines(&mut s, "tre_final", &out.tre_final);
    let t = &out.result.timing;
    let _ = writeln!(s, "\n[timing_seconds]");
    let _ = writeln!(s, "knn = {:.3}\nblend = {:.3}\nloss = {:.3}\nupdate = {:.3}\nfinalize = {:.3}\ntotal = {:.3}", t.knn, t.blend, t.loss, t.update, t.finalize, t.total);
    s
}

pub fn write_artifacts(cfg: &RunConfig, out: &PipelineOutput, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GpoError::io(dir, e))?;
    let fixed = &out.prepared.fixed;
    let warped = &out.result.warped;
    save_png(warped, dir.join(artifact::WARPED))?;
    out.result.final_field.write(dir.join(artifact::FIELD))?;
    table::write_text(&dir.join(artifact::LOSS_TRACE), &loss_trace_table(&out.result))?;
    save_overlay(fixed, warped, dir.join(artifact::OVERLAY))?;
    let diff = Image::from_clamped(
        fixed.width(),
        fixed.height(),
        fixed.data().iter().zip(warped.data()).map(|(a, b)| (a - b).abs()).collect(),
    );
    save_png(&diff, dir.join(artifact::DIFF))?;
    out.prepared.transform.write(dir.join(artifact::TRANSFORM))?;
    out.result.final_nodes.write(dir.join(artifact::NODES))?;
    table::write_text(&dir.join(artifact::META), &run_metadata(cfg, out))
}
