//! The `gpo` command line: register, eval, synth, gradcheck and sweep.
//!
//! Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or parse
//! error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use gpo_core::config::RunConfig;
use gpo_core::eval::{auc, tre, write_report, AucCurve, LandmarkPairs, TreStats, DEFAULT_THRESHOLDS};
use gpo_core::gradcheck::{gradcheck, GradcheckConfig};
use gpo_core::imagecore::load_image;
use gpo_core::pipeline::{run, run_pipeline};
use gpo_core::synth::{bundle, make_pair, SynthConfig};
use gpo_core::{DisplacementField, GlobalTransform, GpoError, MatchSet};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gpo", version, about = "Deformable image registration with Gaussian control nodes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Landmark TRE and AUC for a field and transform.
    Eval(EvalArgs),
    /// Write synthetic image pairs with ground truth.
    Synth(SynthArgs),
    /// Compare analytic node gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Run a grid of config overrides over a directory of pairs.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub fixed: Option<PathBuf>,
    #[arg(long)]
    pub moving: Option<PathBuf>,
    #[arg(long)]
    pub matches: Option<PathBuf>,
    /// dcn or gcn
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Landmark table; TRE is reported when given.
    #[arg(long)]
    pub landmarks: Option<PathBuf>,
    /// `key=value` override, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Resolve and print the configuration without running.
    #[arg(long)]
    pub dry_run: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub landmarks: PathBuf,
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub transform: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_THRESHOLDS.to_vec())]
    pub thresholds: Vec<u32>,
    #[arg(long, default_value_t = 1.0)]
    pub scale_fixed: f64,
    #[arg(long, default_value_t = 1.0)]
    pub scale_moving: f64,
    /// Report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long = "deform-max")]
    pub deform_max: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of pairs; more than one writes `pair_NNNN` subdirectories with
    /// consecutive seeds.
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Any other synth field as `key=value` (see manifest.txt for keys).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub trials: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// `key=v1,v2,...`; repeat for a Cartesian product.
    #[arg(long = "grid", value_name = "KEY=V1,V2")]
    pub grid: Vec<String>,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &GpoError) -> i32 {
    if e.is_usage() {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

fn dispatch(cmd: Command) -> gpo_core::Result<i32> {
    match cmd {
        Command::Register(a) => cmd_register(&a).map(|_| EXIT_OK),
        Command::Eval(a) => cmd_eval(&a).map(|_| EXIT_OK),
        Command::Synth(a) => cmd_synth(&a).map(|_| EXIT_OK),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| EXIT_OK),
    }
}

/// Defaults, then the config file, then explicit flags, then `--set`.
pub fn resolve_register_config(a: &RegisterArgs) -> gpo_core::Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(p) = &a.config {
        cfg.merge_file(p)?;
    }
    if let Some(m) = &a.mode {
        cfg.mode = m.parse()?;
    }
    let paths = [
        (&a.fixed, &mut cfg.fixed),
        (&a.moving, &mut cfg.moving),
        (&a.matches, &mut cfg.matches),
        (&a.landmarks, &mut cfg.landmarks),
        (&a.out, &mut cfg.out),
    ];
    for (flag, slot) in paths {
        if flag.is_some() {
            *slot = flag.clone();
        }
    }
    for kv in &a.set {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One-line echo of the settings that define a run.
pub fn config_summary(cfg: &RunConfig) -> String {
    let o = cfg.optim_config(cfg.mode);
    format!(
        "mode={} N={} grid_n={} K={} tau={} eta_g={} eta_t={} eta_r={} alpha_gcc={} alpha_ncc={} seed={}",
        cfg.mode,
        cfg.n_nodes,
        cfg.grid_n,
        o.k,
        o.tau_max,
        o.eta_g,
        o.eta_t,
        o.eta_r,
        o.loss_weights.alpha_gcc,
        o.loss_weights.alpha_ncc,
        cfg.seed
    )
}

pub fn cmd_register(a: &RegisterArgs) -> gpo_core::Result<()> {
    let mut cfg = resolve_register_config(a)?;
    println!("config: {}", config_summary(&cfg));
    if a.dry_run {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    if cfg.out.is_none() {
        cfg.out = Some(PathBuf::from("gpo_out"));
    }
    let out = run_pipeline(&cfg)?;
    let trace = &out.result.loss_trace;
    if let (Some(a), Some(b)) = (trace.first(), trace.last()) {
        println!("loss: {:.6} -> {:.6}", a.total, b.total);
    }
    println!("transform: {}", out.prepared.transform.kind());
    println!("mean |u|: {:.4} px", out.field_stats.mean_mag);
    println!("max |u|: {:.4} px", out.field_stats.max_mag);
    if let (Some(c), Some(f)) = (&out.tre_coarse, &out.tre_final) {
        println!("tre coarse: mean {:.3} median {:.3} px", c.mean, c.median);
        println!("tre final: mean {:.3} median {:.3} px", f.mean, f.median);
    }
    println!("artifacts: {}", cfg.out.as_ref().unwrap().display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> gpo_core::Result<(TreStats, AucCurve)> {
    let lm = LandmarkPairs::read(&a.landmarks, a.scale_fixed, a.scale_moving)?;
    let field = DisplacementField::read(&a.field)?;
    let t = GlobalTransform::read(&a.transform)?;
    let stats = tre(&lm, &t, &field)?;
    let curve = auc(std::slice::from_ref(&stats), &a.thresholds)?;
    println!("tre: mean {} median {} max {}", stats.mean, stats.median, stats.max);
    for (t, v) in &curve.auc_at {
        println!("auc@{t}: {v}");
    }
    if let Some(dir) = &a.out {
        write_report(&[("pair".to_string(), stats.clone())], &curve, dir)?;
    }
    Ok((stats, curve))
}

pub fn synth_config(a: &SynthArgs) -> gpo_core::Result<SynthConfig> {
    let mut cfg = SynthConfig {
        seed: a.seed,
        ..SynthConfig::default()
    };
    if let Some(s) = a.size {
        cfg.size = s;
    }
    if let Some(d) = a.deform_max {
        cfg.deform_max_px = d;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| GpoError::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_synth(a: &SynthArgs) -> gpo_core::Result<Vec<PathBuf>> {
    let base = synth_config(a)?;
    if a.count == 0 {
        return Err(GpoError::Argument("--count must be >= 1".into()));
    }
    let mut dirs = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let cfg = SynthConfig {
            seed: base.seed + i as u64,
            ..base.clone()
        };
        let dir = if a.count == 1 {
            a.out.clone()
        } else {
            a.out.join(format!("pair_{i:04}"))
        };
        make_pair(&cfg)?.write(&dir)?;
        println!("wrote {} (seed {})", dir.display(), cfg.seed);
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> gpo_core::Result<i32> {
    if a.trials == 0 {
        return Err(GpoError::Argument("--trials must be >= 1".into()));
    }
    let cfg = GradcheckConfig::default();
    let mut worst: Option<gpo_core::gradcheck::GradcheckReport> = None;
    let mut failed = 0;
    for seed in a.seed..a.seed + a.trials {
        let r = gradcheck(seed, &cfg)?;
        println!("{}", r.to_line());
        if !r.pass {
            failed += 1;
        }
        let score = |r: &gpo_core::gradcheck::GradcheckReport| r.max_rel_err_t.max(r.max_rel_err_g).max(r.max_rel_err_beta);
        if worst.as_ref().is_none_or(|w| score(&r) > score(w)) {
            worst = Some(r);
        }
    }
    if failed > 0 {
        eprintln!("{failed} of {} trials failed; worst: {}", a.trials, worst.unwrap().to_line());
        Ok(EXIT_RUNTIME)
    } else {
        println!("all {} trials passed", a.trials);
        Ok(EXIT_OK)
    }
}

/// One grid axis: a config key and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<String>,
}

pub fn parse_grid(specs: &[String]) -> gpo_core::Result<Vec<GridAxis>> {
    if specs.is_empty() {
        return Err(GpoError::Argument("sweep needs at least one --grid key=v1,v2".into()));
    }
    specs
        .iter()
        .map(|s| {
            let (k, vs) = s
                .split_once('=')
                .ok_or_else(|| GpoError::Argument(format!("grid spec {s:?} is not key=v1,v2")))?;
            let values: Vec<String> = vs.split(',').map(|v| v.trim().to_string()).filter(|v| !v.is_empty()).collect();
            if values.is_empty() {
                return Err(GpoError::Argument(format!("grid key {k:?} has no values")));
            }
            let mut probe = RunConfig::default();
            for v in &values {
                probe.set(k.trim(), v)?;
            }
            Ok(GridAxis {
                key: k.trim().to_string(),
                values,
            })
        })
        .collect()
}

/// Cartesian product with the first axis varying slowest.
pub fn grid_cells(axes: &[GridAxis]) -> Vec<Vec<(String, String)>> {
    let mut cells = vec![vec![]];
    for axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|c: Vec<(String, String)>| {
                axis.values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

/// Sorted subdirectories of `dir` holding a pair bundle.
pub fn list_pairs(dir: &Path) -> gpo_core::Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| GpoError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(bundle::FIXED).exists() && p.join(bundle::LANDMARKS).exists())
        .collect();
    out.sort();
    if dir.join(bundle::FIXED).exists() {
        out.insert(0, dir.to_path_buf());
    }
    if out.is_empty() {
        return Err(GpoError::Argument(format!("no pair bundles under {}", dir.display())));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairOutcome {
    pub pair: String,
    pub tre_coarse: TreStats,
    pub tre_final: TreStats,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: usize,
    pub overrides: Vec<(String, String)>,
    pub config_hash: u64,
    /// Median over pairs of each pair's median landmark TRE.
    pub median_tre: f64,
    pub mean_tre: f64,
    pub wall_seconds: f64,
    pub pairs: Vec<PairOutcome>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct LoadedPair {
    name: String,
    fixed: gpo_core::Image,
    moving: gpo_core::Image,
    matches: Option<MatchSet>,
    landmarks: LandmarkPairs,
}

fn load_pair(dir: &Path) -> gpo_core::Result<LoadedPair> {
    let m = dir.join(bundle::MATCHES);
    Ok(LoadedPair {
        name: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        fixed: load_image(dir.join(bundle::FIXED))?,
        moving: load_image(dir.join(bundle::MOVING))?,
        matches: if m.exists() { Some(MatchSet::read(&m)?) } else { None },
        landmarks: LandmarkPairs::read(dir.join(bundle::LANDMARKS), 1.0, 1.0)?,
    })
}

/// Runs every grid cell over every pair. Cell directories hold the resolved
/// config and per-pair results; `summary.csv` has one row per cell.
pub fn cmd_sweep(a: &SweepArgs) -> gpo_core::Result<Vec<SweepRow>> {
    let axes = parse_grid(&a.grid)?;
    let mut base = RunConfig::default();
    if let Some(p) = &a.config {
        base.merge_file(p)?;
    }
    for kv in &a.set {
        base.apply_override(kv)?;
    }
    let cells = grid_cells(&axes);
    let cell_cfgs = cells
        .iter()
        .map(|c| {
            let mut cfg = base.clone();
            for (k, v) in c {
                cfg.set(k, v)?;
            }
            cfg.validate()?;
            Ok(cfg)
        })
        .collect::<gpo_core::Result<Vec<_>>>()?;
    let pairs = list_pairs(&a.pairs)?
        .iter()
        .map(|d| load_pair(d))
        .collect::<gpo_core::Result<Vec<_>>>()?;
    std::fs::create_dir_all(&a.out).map_err(|e| GpoError::Io {
        path: a.out.clone(),
        source: e,
    })?;

    let mut rows = Vec::with_capacity(cells.len());
    for (i, (overrides, cfg)) in cells.into_iter().zip(cell_cfgs).enumerate() {
        let start = Instant::now();
        let mut outcomes = Vec::with_capacity(pairs.len());
        for p in &pairs {
            let t = Instant::now();
            let out = run(&cfg, &p.fixed, &p.moving, p.matches.as_ref(), Some(&p.landmarks), |_, _| {})?;
            outcomes.push(PairOutcome {
                pair: p.name.clone(),
                tre_coarse: out.tre_coarse.expect("landmarks given"),
                tre_final: out.tre_final.expect("landmarks given"),
                seconds: t.elapsed().as_secs_f64(),
            });
        }
        let mut medians: Vec<f64> = outcomes.iter().map(|o| o.tre_final.median).collect();
        let mean_tre = outcomes.iter().map(|o| o.tre_final.mean).sum::<f64>() / outcomes.len() as f64;
        let row = SweepRow {
            cell: i,
            overrides,
            config_hash: cfg.hash(),
            median_tre: median(&mut medians),
            mean_tre,
            wall_seconds: start.elapsed().as_secs_f64(),
            pairs: outcomes,
        };
        write_cell(&a.out.join(format!("cell_{i:03}")), &cfg, &row)?;
        println!("{}", summary_line(&row));
        rows.push(row);
    }
    let mut s = String::from("cell,config_hash");
    for axis in &axes {
        let _ = write!(s, ",{}", axis.key);
    }
    s.push_str(",median_tre,mean_tre,wall_seconds\n");
    for r in &rows {
        s.push_str(&summary_line(r));
        s.push('\n');
    }
    write_file(&a.out.join("summary.csv"), &s)?;
    Ok(rows)
}

fn summary_line(r: &SweepRow) -> String {
    let mut s = format!("{},{:016x}", r.cell, r.config_hash);
    for (_, v) in &r.overrides {
        let _ = write!(s, ",{v}");
    }
    let _ = write!(s, ",{},{},{:.3}", r.median_tre, r.mean_tre, r.wall_seconds);
    s
}

fn write_file(path: &Path, text: &str) -> gpo_core::Result<()> {
    std::fs::write(path, text).map_err(|e| GpoError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_cell(dir: &Path, cfg: &RunConfig, row: &SweepRow) -> gpo_core::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| GpoError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    let mut s = String::from("pair,tre_coarse_median,tre_final_median,tre_final_mean,seconds\n");
    for p in &row.pairs {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.3}",
            p.pair, p.tre_coarse.median, p.tre_final.median, p.tre_final.mean, p.seconds
        );
    }
    write_file(&dir.join("pairs.csv"), &s)
}

/// Applies `GPO_THREADS` to the global worker pool.
pub fn init_threads() -> Result<(), String> {
    match std::env::var("GPO_THREADS") {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| format!("GPO_THREADS must be a positive integer, got {v:?}"))?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| e.to_string())
        }
        Err(_) => Ok(()),
    }
}
