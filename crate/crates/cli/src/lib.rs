//! Command implementations behind the `hvx` binary.

pub mod checks;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use hvx_core::objective::{combine_losses, Config, LossBundle};
use hvx_core::pipeline::{Evaluation, Pipeline, StageCounts, Timings};
use hvx_core::scenegen::{generate_scene, SceneSpec, SyntheticScene};
use hvx_core::voxgrid::{io::write_ply, partition_fg_bg, sparsify_background, voxelize, VoxelParams};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(anyhow::Error),
    Verify(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Verify(_) => EXIT_VERIFY,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "error: {e:#}"),
            CliError::Verify(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Data(e)
    }
}

impl From<hvx_core::Error> for CliError {
    fn from(e: hvx_core::Error) -> Self {
        CliError::Data(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "hvx", version, about = "Sparse voxel optimization and auxiliary losses for 2D-guided 3D detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic scene file.
    GenScene(GenSceneArgs),
    /// Run the full pipeline on a scene and write a report.
    Run(RunArgs),
    /// Finite-difference check of every differentiable loss.
    GradCheck(GradCheckArgs),
    /// Throughput of background pooling across pooling factors.
    BenchSigma(BenchArgs),
    /// Total loss as one auxiliary weight varies.
    SweepEta(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenSceneArgs {
    #[arg(long, default_value_t = 3)]
    pub boxes: usize,
    #[arg(long, default_value_t = 400)]
    pub points_per_box: usize,
    #[arg(long, default_value_t = 2000)]
    pub clutter: usize,
    #[arg(long, default_value_t = 320)]
    pub width: u32,
    #[arg(long, default_value_t = 240)]
    pub height: u32,
    #[arg(long, default_value_t = 8)]
    pub d_img: usize,
    #[arg(long, default_value_t = 0.0)]
    pub mask_noise: f64,
    /// Full scene spec as JSON; flags given explicitly are ignored.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Report path; stdout when omitted.
    #[arg(long)]
    pub out_report: Option<PathBuf>,
    /// PLY of the filtered voxels at the first stride, scored by importance.
    #[arg(long)]
    pub emit_ply: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pooling factors, e.g. `1..7` or `1,2,4`.
    #[arg(long, default_value = "1..7")]
    pub s_values: String,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    /// CSV path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Which weight to vary, 1 through 4.
    #[arg(long)]
    pub eta_index: usize,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    pub values: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub scene_seed: u64,
    pub config: Config,
    pub counts: Vec<StageCounts>,
    pub losses: LossBundle,
    pub timing_ms: Timings,
}

impl RunReport {
    /// The report as JSON with the timing fields removed.
    pub fn without_timing(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("serializable");
        v.as_object_mut().expect("object").remove("timing_ms");
        v
    }
}

pub fn load_config(path: Option<&Path>) -> CliResult<Config> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Config::from_json(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))
        }
    }
}

pub fn load_scene(path: &Path) -> CliResult<SyntheticScene> {
    Ok(SyntheticScene::load(path).with_context(|| format!("loading scene {}", path.display()))?)
}

fn write_text(out: Option<&Path>, text: &str) -> CliResult<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

pub fn cmd_gen_scene(args: &GenSceneArgs) -> CliResult<SyntheticScene> {
    let spec = match &args.spec {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading spec {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("scene spec: {e}")))?
        }
        None => SceneSpec {
            n_boxes: args.boxes,
            points_per_box: args.points_per_box,
            clutter_points: args.clutter,
            image_width: args.width,
            image_height: args.height,
            d_img: args.d_img,
            mask_noise: args.mask_noise,
            ..SceneSpec::default()
        },
    };
    let scene = generate_scene(&spec, args.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    scene
        .save(&args.out)
        .with_context(|| format!("writing scene {}", args.out.display()))?;
    Ok(scene)
}

/// Runs the pipeline with a freshly initialized model.
pub fn run_pipeline(scene: &SyntheticScene, config: &Config) -> hvx_core::Result<(RunReport, Evaluation)> {
    let pipeline = Pipeline::prepare(scene, config)?;
    let model = pipeline.init_model()?;
    let eval = pipeline.evaluate(&model, false)?;
    let mut timing = pipeline.prepare_timings().clone();
    timing.merge(&eval.timings);
    let report = RunReport {
        seed: config.seed,
        scene_seed: scene.seed,
        config: config.clone(),
        counts: pipeline.counts(&eval),
        losses: eval.bundle,
        timing_ms: timing,
    };
    Ok((report, eval))
}

pub fn cmd_run(args: &RunArgs) -> CliResult<RunReport> {
    let scene = load_scene(&args.scene)?;
    let config = load_config(args.config.as_deref())?;
    let (report, eval) = run_pipeline(&scene, &config).context("pipeline")?;
    let text = serde_json::to_string_pretty(&report).context("serializing report")? + "\n";
    write_text(args.out_report.as_deref(), &text)?;
    if let Some(p) = &args.emit_ply {
        if let Some(first) = eval.strides.first() {
            let f = fs::File::create(p).with_context(|| format!("writing {}", p.display()))?;
            write_ply(&first.topk.grid, &first.topk.scores, BufWriter::new(f)).context("writing PLY")?;
        }
    }
    Ok(report)
}

pub fn cmd_grad_check(args: &GradCheckArgs) -> CliResult<(String, Vec<checks::OpSummary>)> {
    if args.trials == 0 {
        return Err(CliError::Usage("--trials must be >= 1".into()));
    }
    let config = load_config(args.config.as_deref())?;
    let mut table = String::from("op,trials,passed,worst_rel_err,worst_seed,status\n");
    let mut summaries = Vec::new();
    for op in checks::Op::ALL {
        let seeds = (0..args.trials as u64).map(|i| args.seed + i);
        let s = checks::summarize(op, seeds, &config).with_context(|| format!("grad check {}", op.name()))?;
        let _ = writeln!(
            table,
            "{},{},{},{:.3e},{},{}",
            op.name(),
            s.trials,
            s.passed,
            s.worst_rel_err,
            s.worst_seed,
            if s.ok() { "PASS" } else { "FAIL" }
        );
        summaries.push(s);
    }
    Ok((table, summaries))
}

/// Parses `a..b` (inclusive) or a comma-separated list.
pub fn parse_s_values(text: &str) -> CliResult<Vec<u32>> {
    let bad = || CliError::Usage(format!("bad --s-values '{text}'"));
    let values: Vec<u32> = if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u32, u32) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        (a..=b).collect()
    } else {
        text.split(',')
            .map(|v| v.trim().parse().map_err(|_| bad()))
            .collect::<CliResult<_>>()?
    };
    if values.is_empty() || values.contains(&0) {
        return Err(bad());
    }
    Ok(values)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub s: u32,
    pub sigma: f64,
    pub background: usize,
    pub out_voxels: usize,
    pub ns_per_voxel: f64,
    pub pipeline_ms: f64,
}

pub const BENCH_HEADER: &str = "# desk-scale stand-in: throughput vs background pooling factor, not detection accuracy";

pub fn bench_sigma(scene: &SyntheticScene, config: &Config, s_values: &[u32], repeats: usize) -> CliResult<Vec<BenchRow>> {
    if repeats < 3 {
        return Err(CliError::Usage("--repeats must be >= 3".into()));
    }
    config.validate()?;
    let params = VoxelParams::new(config.voxel_size, [0.0; 3], 1);
    let grid = voxelize(&scene.points, Some(&scene.point_features), &params)?;
    let (_, background) = partition_fg_bg(&grid, &scene.mask, &scene.camera)?;
    let mut rows = Vec::with_capacity(s_values.len());
    for &s in s_values {
        let mut pool_ns = Vec::with_capacity(repeats);
        let mut pipe_ms = Vec::with_capacity(repeats);
        let mut out_voxels = 0;
        let cfg = Config {
            sigma_s: s,
            ..config.clone()
        };
        for _ in 0..repeats {
            let t = Instant::now();
            let pooled = sparsify_background(&background, s)?;
            pool_ns.push(t.elapsed().as_nanos() as f64);
            out_voxels = pooled.len();

            let t = Instant::now();
            run_pipeline(scene, &cfg).context("pipeline")?;
            pipe_ms.push(t.elapsed().as_secs_f64() * 1e3);
        }
        rows.push(BenchRow {
            s,
            sigma: 1.0 / s as f64,
            background: background.len(),
            out_voxels,
            ns_per_voxel: median(pool_ns) / background.len().max(1) as f64,
            pipeline_ms: median(pipe_ms),
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\ns,sigma,out_voxels,ns_per_voxel,pipeline_ms\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6},{},{:.3},{:.3}", r.s, r.sigma, r.out_voxels, r.ns_per_voxel, r.pipeline_ms);
    }
    out
}

pub fn cmd_bench_sigma(args: &BenchArgs) -> CliResult<Vec<BenchRow>> {
    let s_values = parse_s_values(&args.s_values)?;
    let scene = load_scene(&args.scene)?;
    let config = load_config(args.config.as_deref())?;
    let rows = bench_sigma(&scene, &config, &s_values, args.repeats)?;
    write_text(args.out.as_deref(), &bench_csv(&rows))?;
    Ok(rows)
}

pub const SWEEP_HEADER: &str = "# desk-scale stand-in: loss surface on a fixed forward pass, not detection accuracy";

pub fn sweep_eta(bundle: &LossBundle, index: usize, values: &[f64]) -> CliResult<Vec<LossBundle>> {
    if !(1..=4).contains(&index) {
        return Err(CliError::Usage(format!("--eta-index must be 1..4, got {index}")));
    }
    values
        .iter()
        .map(|&v| Ok(combine_losses(&bundle.parts, bundle.eta.with(index - 1, v))?))
        .collect()
}

pub fn sweep_csv(index: usize, values: &[f64], bundles: &[LossBundle]) -> String {
    let mut out = format!("{SWEEP_HEADER}\neta_index,value,l_h,l_s,l_ctr,l_cluster,total\n");
    for (v, b) in values.iter().zip(bundles) {
        let p = &b.parts;
        let _ = writeln!(out, "{index},{v},{},{},{},{},{}", p.l_h, p.l_s, p.l_ctr, p.l_cluster, b.total);
    }
    out
}

pub fn cmd_sweep_eta(args: &SweepArgs) -> CliResult<Vec<LossBundle>> {
    if !(1..=4).contains(&args.eta_index) {
        return Err(CliError::Usage(format!("--eta-index must be 1..4, got {}", args.eta_index)));
    }
    let scene = load_scene(&args.scene)?;
    let config = load_config(args.config.as_deref())?;
    let (report, _) = run_pipeline(&scene, &config).context("pipeline")?;
    let bundles = sweep_eta(&report.losses, args.eta_index, &args.values)?;
    write_text(args.out.as_deref(), &sweep_csv(args.eta_index, &args.values, &bundles))?;
    Ok(bundles)
}

/// Caps rayon's global pool from `HVX_THREADS` (unset or 0 = automatic).
pub fn configure_threads() -> CliResult<()> {
    let n = match std::env::var("HVX_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| CliError::Usage(format!("HVX_THREADS must be a non-negative integer, got '{v}'")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Data(anyhow!("thread pool: {e}")))
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
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = configure_threads().and_then(|_| dispatch(&cli.command));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}

fn dispatch(command: &Command) -> CliResult<()> {
    match command {
        Command::GenScene(a) => cmd_gen_scene(a).map(|_| ()),
        Command::Run(a) => cmd_run(a).map(|_| ()),
        Command::GradCheck(a) => {
            let (table, summaries) = cmd_grad_check(a)?;
            print!("{table}");
            let failed: Vec<String> = summaries
                .iter()
                .filter(|s| !s.ok())
                .map(|s| format!("{} (worst rel err {:.3e}, seed {})", s.op.name(), s.worst_rel_err, s.worst_seed))
                .collect();
            if failed.is_empty() {
                Ok(())
            } else {
                Err(CliError::Verify(failed.join("; ")))
            }
        }
        Command::BenchSigma(a) => cmd_bench_sigma(a).map(|_| ()),
        Command::SweepEta(a) => cmd_sweep_eta(a).map(|_| ()),
    }
}
