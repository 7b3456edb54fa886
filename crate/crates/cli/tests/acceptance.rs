//! Acceptance suite. Runs every criterion in order and prints one line each:
//!
//! ```text
//! criterion  5 PASS synthetic recovery: ...
//! ```
//!
//! Positional arguments select criteria by number (`cargo test --test
//! acceptance -- 1 8`). Criterion 10 needs FIRE data and is skipped unless
//! `GPO_FIRE_DIR` and `GPO_FIRE_MATCHES` are set.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use gpo_cli::{cmd_sweep, cmd_synth, SweepArgs, SweepRow, SynthArgs};
use gpo_core::config::{Mode, RunConfig};
use gpo_core::eval::{auc, TreStats};
use gpo_core::field::{build_knn, weights_at};
use gpo_core::imagecore::load_image;
use gpo_core::pipeline::run;
use gpo_core::synth::{make_pair, SynthConfig};
use gpo_core::{ControlNode, LandmarkPairs, MatchSet, NodeSet, RadiusConfig, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Pinned tolerances.
const GRADCHECK_TRIALS: u64 = 10;
const GRADCHECK_BUDGET_S: f64 = 120.0;
const UNITY_TOL: f64 = 1e-6;
const UNITY_CONFIGS: u64 = 100;
const UNITY_BUDGET_S: f64 = 30.0;
const KNN_CONFIGS: u64 = 50;
const KNN_BUDGET_S: f64 = 30.0;
const RADIUS_ITERS: usize = 200;
const SUITE_PAIRS: usize = 20;
const SUITE_SIZE: usize = 256;
const MIN_REDUCTION: f64 = 0.70;
const GOOD_TRE_PX: f64 = 1.5;
const GOOD_FRACTION: f64 = 0.80;
const PAIR_BUDGET_S: f64 = 120.0;
const DCN_MATCH_NOISE_PX: f64 = 2.0;
const DCN_WIN_FRACTION: f64 = 0.95;
const IDENTITY_ITERS: usize = 50;
const IDENTITY_MAX_U: f64 = 0.5;
const FIRE_MIN_IMPROVEMENT: f64 = 0.50;
const FIRE_BUDGET_S: f64 = 60.0;

/// GCN preset for the synthetic suite: the default grid and neighbor count at
/// native resolution, with a displacement rate raised from the default 0.01
/// so 200 steps can cover a 12 px deformation.
const GCN_PRESET: &[&str] = &["mode=gcn", "preproc.size=native", "optim.eta_t=0.2"];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

type Check = fn() -> Result<Outcome, String>;

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(u32, &str, Check); 10] = [
        (1, "gradient correctness", c1_gradients),
        (2, "partition of unity", c2_partition_of_unity),
        (3, "knn exactness", c3_knn_exact),
        (4, "radius bounds", c4_radius_bounds),
        (5, "synthetic recovery", c5_synthetic_recovery),
        (6, "dcn beats coarse-only", c6_dcn_beats_coarse),
        (7, "identity stability", c7_identity),
        (8, "metric oracles", c8_metrics),
        (9, "ablation direction", c9_ablation),
        (10, "FIRE-scale pathway", c10_fire),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        if n == 10 && fire_dirs().is_none() {
            println!("criterion {n:>2} SKIP {name}: set GPO_FIRE_DIR and GPO_FIRE_MATCHES to run");
            continue;
        }
        let t = Instant::now();
        let o = check().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {n:>2} {tag} {name}: {} ({:.1}s)", o.detail, t.elapsed().as_secs_f64());
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn c1_gradients() -> Result<Outcome, String> {
    let t = Instant::now();
    let code = gpo_cli::main_with_args(["gpo", "gradcheck", "--seed", "0", "--trials", &GRADCHECK_TRIALS.to_string()]);
    let secs = t.elapsed().as_secs_f64();
    Ok(Outcome::new(
        code == 0 && secs < GRADCHECK_BUDGET_S,
        format!("{GRADCHECK_TRIALS} seeds, exit {code}, {secs:.1}s of {GRADCHECK_BUDGET_S}s"),
    ))
}

/// Random node set over a `size` square. Every fourth configuration uses a
/// zero lower radius bound and tiny radii so far pixels see weights that
/// would underflow without normalization.
fn random_nodes(rng: &mut ChaCha8Rng, size: f64, n: usize, harsh: bool) -> NodeSet {
    let cfg = if harsh {
        RadiusConfig::new(0.0, 4.0).unwrap()
    } else {
        RadiusConfig::new(rng.random_range(1.0..8.0), rng.random_range(16.0..256.0)).unwrap()
    };
    let nodes = (0..n)
        .map(|_| ControlNode {
            center: Vec2::new(rng.random_range(-0.2 * size..1.2 * size), rng.random_range(-0.2 * size..1.2 * size)),
            displacement: Vec2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)),
            beta: if harsh { rng.random_range(-12.0..-6.0) } else { rng.random_range(-6.0..6.0) },
        })
        .collect();
    NodeSet::new(nodes, cfg, vec![], vec![]).unwrap()
}

fn c2_partition_of_unity() -> Result<Outcome, String> {
    let t = Instant::now();
    let size = 128;
    let mut worst = 0.0f64;
    for seed in 0..UNITY_CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..120);
        let k = rng.random_range(1..=12);
        let nodes = random_nodes(&mut rng, size as f64, n, seed % 4 == 3);
        let idx = build_knn(&nodes, size, size, k).map_err(err)?;
        for y in 0..size {
            for x in 0..size {
                let s: f64 = weights_at(&nodes, &idx, x, y).map_err(err)?.iter().map(|w| w.1).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(Outcome::new(
        worst <= UNITY_TOL && secs < UNITY_BUDGET_S,
        format!("{UNITY_CONFIGS} configs on 128x128, max |sum w - 1| = {worst:.2e}"),
    ))
}

fn brute_knn(nodes: &NodeSet, p: Vec2, k: usize) -> Vec<u32> {
    let mut d: Vec<(f64, u32)> = nodes
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let (dx, dy) = (p.x - n.center.x, p.y - n.center.y);
            (dx * dx + dy * dy, i as u32)
        })
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.into_iter().take(k).map(|e| e.1).collect()
}

/// Nodes on integer lattices and mirrored about pixel centers, so many
/// pixels have several exactly equidistant neighbors.
fn tied_nodes(rng: &mut ChaCha8Rng, size: usize) -> NodeSet {
    let step = rng.random_range(2..9);
    let mut centers = vec![];
    for j in (0..size).step_by(step) {
        for i in (0..size).step_by(step) {
            centers.push(Vec2::new(i as f64, j as f64));
        }
    }
    let c = (size / 2) as f64;
    for _ in 0..8 {
        let (dx, dy) = (rng.random_range(1..20) as f64, rng.random_range(0..20) as f64);
        for (sx, sy) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
            centers.push(Vec2::new(c + sx * dx, c + sy * dy));
            centers.push(Vec2::new(c + sy * dy, c + sx * dx));
        }
    }
    let nodes = centers
        .into_iter()
        .map(|center| ControlNode { center, displacement: Vec2::ZERO, beta: 0.0 })
        .collect();
    NodeSet::new(nodes, RadiusConfig::default(), vec![], vec![]).unwrap()
}

fn c3_knn_exact() -> Result<Outcome, String> {
    let t = Instant::now();
    let size = 64;
    let mut mismatches = 0usize;
    let mut checked = 0usize;
    for seed in 0..KNN_CONFIGS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let nodes = if seed % 2 == 0 {
            tied_nodes(&mut rng, size)
        } else {
            let n = rng.random_range(1..300);
            random_nodes(&mut rng, size as f64, n, false)
        };
        let k = rng.random_range(1..=16).min(nodes.len());
        let idx = build_knn(&nodes, size, size, k).map_err(err)?;
        for y in 0..size {
            for x in 0..size {
                checked += 1;
                if idx.ids(y * size + x) != brute_knn(&nodes, Vec2::new(x as f64, y as f64), k).as_slice() {
                    mismatches += 1;
                }
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(Outcome::new(
        mismatches == 0 && secs < KNN_BUDGET_S,
        format!("{KNN_CONFIGS} configs, {checked} pixels, {mismatches} mismatches"),
    ))
}

fn c4_radius_bounds() -> Result<Outcome, String> {
    let pair = make_pair(&SynthConfig { size: 128, ..SynthConfig::default() }).map_err(err)?;
    // The default rates, then a radius rate large enough to drive many
    // nodes into sigmoid saturation.
    let mut steps = 0usize;
    let mut violations = 0usize;
    let mut max_beta = 0.0f64;
    for (mode, eta_r) in [(Mode::Dcn, 0.01), (Mode::Gcn, 0.01), (Mode::Gcn, 5.0)] {
        let cfg = RunConfig {
            mode,
            size: None,
            tau_max: RADIUS_ITERS,
            eta_r,
            ..RunConfig::default()
        };
        run(&cfg, &pair.fixed, &pair.moving, Some(&pair.matches), None, |_, nodes| {
            steps += 1;
            max_beta = nodes.nodes().iter().fold(max_beta, |m, n| m.max(n.beta.abs()));
            let (lo, hi) = nodes.radius_cfg().bounds();
            violations += (0..nodes.len()).filter(|&i| !(nodes.radius(i) > lo && nodes.radius(i) < hi)).count();
        })
        .map_err(err)?;
    }
    Ok(Outcome::new(
        violations == 0 && steps == 3 * RADIUS_ITERS,
        format!("{steps} optimizer steps over 3 runs, max |beta| {max_beta:.1}, {violations} radii outside the open interval"),
    ))
}

struct Suite {
    _dir: tempfile::TempDir,
    rows: Vec<SweepRow>,
}

static SUITE: OnceLock<Result<Suite, String>> = OnceLock::new();

/// The synthetic suite swept over K = 5, 10 and tau = 50, 200 with the GCN
/// preset. Shared by criteria 5, 6 and 9.
fn suite() -> Result<&'static Suite, String> {
    SUITE
        .get_or_init(|| {
            let dir = tempfile::tempdir().map_err(err)?;
            let pairs = dir.path().join("pairs");
            cmd_synth(&SynthArgs {
                seed: 0,
                size: Some(SUITE_SIZE),
                deform_max: Some(12.0),
                out: pairs.clone(),
                count: SUITE_PAIRS,
                set: vec![],
            })
            .map_err(err)?;
            let rows = cmd_sweep(&SweepArgs {
                grid: vec!["optim.k=5,10".into(), "optim.tau_max=50,200".into()],
                pairs,
                out: dir.path().join("sweep"),
                config: None,
                set: GCN_PRESET.iter().map(|s| s.to_string()).collect(),
            })
            .map_err(err)?;
            Ok(Suite { _dir: dir, rows })
        })
        .as_ref()
        .map_err(Clone::clone)
}

fn cell<'a>(rows: &'a [SweepRow], k: &str, tau: &str) -> Result<&'a SweepRow, String> {
    rows.iter()
        .find(|r| {
            r.overrides.iter().any(|(key, v)| key == "optim.k" && v == k)
                && r.overrides.iter().any(|(key, v)| key == "optim.tau_max" && v == tau)
        })
        .ok_or_else(|| format!("no sweep cell for k={k} tau={tau}"))
}

fn c5_synthetic_recovery() -> Result<Outcome, String> {
    let s = suite()?;
    let row = cell(&s.rows, "10", "200")?;
    let reductions: Vec<f64> = row.pairs.iter().map(|p| 1.0 - p.tre_final.median / p.tre_coarse.median).collect();
    let min_red = reductions.iter().copied().fold(f64::INFINITY, f64::min);
    let good = row.pairs.iter().filter(|p| p.tre_final.median < GOOD_TRE_PX).count();
    let slowest = row.pairs.iter().map(|p| p.seconds).fold(0.0, f64::max);
    let n = row.pairs.len();
    let pass = n == SUITE_PAIRS
        && min_red >= MIN_REDUCTION
        && good as f64 >= GOOD_FRACTION * n as f64
        && slowest < PAIR_BUDGET_S;
    Ok(Outcome::new(
        pass,
        format!(
            "{n} pairs; median TRE reduction min {:.1}% median {:.1}%; final median < {GOOD_TRE_PX}px on {good}/{n}; slowest pair {slowest:.1}s",
            100.0 * min_red,
            100.0 * median(&reductions),
        ),
    ))
}

fn c6_dcn_beats_coarse() -> Result<Outcome, String> {
    let cfg = RunConfig { mode: Mode::Dcn, size: None, ..RunConfig::default() };
    let mut wins = 0;
    let mut margins = vec![];
    for seed in 0..SUITE_PAIRS as u64 {
        let sc = SynthConfig {
            seed,
            size: SUITE_SIZE,
            deform_max_px: 12.0,
            match_noise_px: DCN_MATCH_NOISE_PX,
            ..SynthConfig::default()
        };
        let p = make_pair(&sc).map_err(err)?;
        let out = run(&cfg, &p.fixed, &p.moving, Some(&p.matches), Some(&p.landmarks), |_, _| {}).map_err(err)?;
        let (c, f) = (out.tre_coarse.unwrap().median, out.tre_final.unwrap().median);
        if f < c {
            wins += 1;
        }
        margins.push(c - f);
    }
    let n = SUITE_PAIRS;
    Ok(Outcome::new(
        wins as f64 >= DCN_WIN_FRACTION * n as f64,
        format!(
            "GPO-DCN below homography-only median TRE on {wins}/{n} pairs (median gain {:.3}px)",
            median(&margins)
        ),
    ))
}

fn c7_identity() -> Result<Outcome, String> {
    let p = make_pair(&SynthConfig { size: SUITE_SIZE, ..SynthConfig::default() }).map_err(err)?;
    let cfg = RunConfig { mode: Mode::Gcn, size: None, tau_max: IDENTITY_ITERS, ..RunConfig::default() };
    let out = run(&cfg, &p.fixed, &p.fixed, None, None, |_, _| {}).map_err(err)?;
    let m = out.field_stats.max_mag;
    Ok(Outcome::new(m < IDENTITY_MAX_U, format!("max |u| = {m:.4}px after {IDENTITY_ITERS} steps")))
}

fn c8_metrics() -> Result<Outcome, String> {
    use gpo_core::eval::tre;
    use gpo_core::{DisplacementField, GlobalTransform};
    let lm = LandmarkPairs::new(vec![(Vec2::new(0.0, 0.0), Vec2::new(3.0, 4.0))], 1.0, 1.0).map_err(err)?;
    let t345 = tre(&lm, &GlobalTransform::identity(), &DisplacementField::zeros(8, 8)).map_err(err)?.mean;
    let ten = TreStats::from_distances(vec![10.0]).map_err(err)?;
    let a25 = auc(std::slice::from_ref(&ten), &[25]).map_err(err)?.auc_at[&25];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let stats: Vec<TreStats> = (0..30)
        .map(|_| TreStats::from_distances((0..5).map(|_| rng.random_range(0.0..60.0)).collect()).unwrap())
        .collect();
    let thresholds: Vec<u32> = (1..=80).collect();
    let curve = auc(&stats, &thresholds).map_err(err)?;
    let vals: Vec<f64> = curve.auc_at.values().copied().collect();
    let monotone = vals.windows(2).all(|w| w[0] <= w[1]);
    Ok(Outcome::new(
        t345 == 5.0 && a25 == 0.64 && monotone,
        format!("3-4-5 TRE = {t345}; AUC@25 at mean TRE 10 = {a25}; AUC monotone over 1..80: {monotone}"),
    ))
}

fn c9_ablation() -> Result<Outcome, String> {
    let s = suite()?;
    let m = |k, tau| cell(&s.rows, k, tau).map(|r| r.median_tre);
    let (k5, k10) = (m("5", "200")?, m("10", "200")?);
    let (t50, t200) = (m("10", "50")?, m("10", "200")?);
    let n = cell(&s.rows, "10", "200")?.pairs.len();
    Ok(Outcome::new(
        n >= 20 && k10 <= k5 && t200 <= t50,
        format!(
            "{n} pairs; median TRE K=10 {k10:.3} vs K=5 {k5:.3}; tau=200 {t200:.3} vs tau=50 {t50:.3}"
        ),
    ))
}

fn fire_dirs() -> Option<(PathBuf, PathBuf)> {
    let d = std::env::var_os("GPO_FIRE_DIR")?;
    let m = std::env::var_os("GPO_FIRE_MATCHES")?;
    Some((PathBuf::from(d), PathBuf::from(m)))
}

/// FIRE ground truth: whitespace separated `x1 y1 x2 y2` rows, image 1 fixed.
fn read_fire_points(path: &Path) -> Result<LandmarkPairs, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut pairs = vec![];
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let v: Vec<f64> = line.split_whitespace().map(|t| t.parse::<f64>()).collect::<Result<_, _>>().map_err(err)?;
        if v.len() < 4 {
            return Err(format!("{}: short row {line:?}", path.display()));
        }
        pairs.push((Vec2::new(v[0], v[1]), Vec2::new(v[2], v[3])));
    }
    LandmarkPairs::new(pairs, 1.0, 1.0).map_err(err)
}

/// Layout: `$GPO_FIRE_DIR/Images/<P>_1.jpg`, `<P>_2.jpg`,
/// `$GPO_FIRE_DIR/Ground Truth/control_points_<P>_1_2.txt`, and
/// `$GPO_FIRE_MATCHES/<P>.csv` in the match table format.
fn c10_fire() -> Result<Outcome, String> {
    let (root, match_dir) = fire_dirs().ok_or("FIRE paths not set")?;
    let mut names: Vec<String> = std::fs::read_dir(root.join("Images"))
        .map_err(err)?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter_map(|f| f.strip_suffix("_1.jpg").map(str::to_string))
        .filter(|n| n.starts_with('S') || n.starts_with('P'))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err("no S or P pairs found".into());
    }
    let cfg = RunConfig { mode: Mode::Dcn, ..RunConfig::default() };
    let (mut coarse, mut fine, mut slowest) = (vec![], vec![], 0.0f64);
    for n in &names {
        let fixed = load_image(root.join("Images").join(format!("{n}_1.jpg"))).map_err(err)?;
        let moving = load_image(root.join("Images").join(format!("{n}_2.jpg"))).map_err(err)?;
        let lm = read_fire_points(&root.join("Ground Truth").join(format!("control_points_{n}_1_2.txt")))?;
        let matches = MatchSet::read(match_dir.join(format!("{n}.csv"))).map_err(err)?;
        let t = Instant::now();
        let out = run(&cfg, &fixed, &moving, Some(&matches), Some(&lm), |_, _| {}).map_err(err)?;
        slowest = slowest.max(t.elapsed().as_secs_f64());
        coarse.push(out.tre_coarse.unwrap().mean);
        fine.push(out.tre_final.unwrap().mean);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (c, f) = (mean(&coarse), mean(&fine));
    let improvement = 1.0 - f / c;
    Ok(Outcome::new(
        improvement >= FIRE_MIN_IMPROVEMENT && slowest < FIRE_BUDGET_S,
        format!(
            "{} S+P pairs at 1024; mean TRE {c:.3} -> {f:.3}px ({:.1}% better; reference target 2.352px); slowest {slowest:.1}s",
            names.len(),
            100.0 * improvement
        ),
    ))
}
