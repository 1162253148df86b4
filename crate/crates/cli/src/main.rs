//! `regcma`: phantoms, DRR rendering, single registrations and benchmarks.
//!
//! Exit codes: 0 success, 2 bad arguments or config, 3 I/O failure,
//! 4 numerical failure.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use regcma::drr::{load_image, save_image, write_pgm16};
use regcma::evaluation::case_difference_map;
use regcma::{
    load_volume, make_phantom, project, register, run_benchmark, save_volume, CameraGeometry,
    MetricKind, OptimizerKind, PhantomKind, Pose6,
};

use config::CliConfig;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn usage(msg: impl Into<String>) -> Self {
        CliError {
            code: 2,
            msg: msg.into(),
        }
    }

    fn io(msg: impl Into<String>) -> Self {
        CliError {
            code: 3,
            msg: msg.into(),
        }
    }
}

impl From<regcma::Error> for CliError {
    fn from(e: regcma::Error) -> Self {
        let code = match e {
            regcma::Error::InvalidArgument(_) | regcma::Error::DimensionMismatch(_) => 2,
            regcma::Error::Io { .. } | regcma::Error::Format { .. } => 3,
            regcma::Error::Numerical(_) => 4,
        };
        CliError {
            code,
            msg: e.to_string(),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "regcma",
    version,
    about = "Rigid 2D/3D registration with DRRs and LRA-CMA-ES"
)]
struct Cli {
    /// Worker threads; results do not depend on it. Defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic volume as <out>.raw + <out>.json.
    Phantom(PhantomArgs),
    /// Render a DRR of a volume at a pose.
    Render(RenderArgs),
    /// Register a volume to a fixed image starting from an initial pose.
    Register(RegisterArgs),
    /// Run the LRA-CMA vs. CMA-ES comparison on sampled cases.
    Benchmark(BenchmarkArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// sphere, box or spine.
    #[arg(long, default_value = "spine")]
    kind: PhantomKind,
    /// One size for a cube or three as NX,NY,NZ.
    #[arg(long, default_value = "64", value_delimiter = ',')]
    dims: Vec<usize>,
    /// Voxel spacing in mm.
    #[arg(long, default_value_t = 1.5)]
    spacing: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Settings shared by every command that renders.
#[derive(Args)]
struct SetupArgs {
    /// JSON config with camera, similarity, optimizer, registration and
    /// benchmark sections. Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Detector size N×N, keeping the configured field of view.
    #[arg(long)]
    detector: Option<usize>,
    /// Ray-marching step in mm.
    #[arg(long)]
    step: Option<f64>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    volume: PathBuf,
    /// rx,ry,rz (degrees),tx,ty,tz (mm). Identity by default.
    #[arg(long, allow_hyphen_values = true)]
    pose: Option<Pose6>,
    /// Writes <out>.raw + <out>.json.
    #[arg(long)]
    out: PathBuf,
    /// Also write a 16-bit PGM preview.
    #[arg(long)]
    pgm: Option<PathBuf>,
    #[command(flatten)]
    setup: SetupArgs,
}

#[derive(Args)]
#[group(id = "fixed_source", required = true, multiple = false, args = ["fixed", "fixed_pose"])]
struct RegisterArgs {
    #[arg(long)]
    volume: PathBuf,
    /// Fixed image written by `render`.
    #[arg(long)]
    fixed: Option<PathBuf>,
    /// Render the fixed image from the volume at this pose instead.
    #[arg(long, allow_hyphen_values = true)]
    fixed_pose: Option<Pose6>,
    /// Start pose. Identity by default.
    #[arg(long, allow_hyphen_values = true)]
    initial: Option<Pose6>,
    /// Result JSON with the resolved config, final pose and trace.
    #[arg(long)]
    out: PathBuf,
    /// Per-generation trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    setup: SetupArgs,
    #[command(flatten)]
    opt: OptimizerArgs,
}

#[derive(Args)]
struct OptimizerArgs {
    /// lra-cma or cma-es.
    #[arg(long)]
    optimizer: Option<OptimizerKind>,
    /// Population size λ.
    #[arg(long)]
    lambda: Option<usize>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    generations: Option<usize>,
    /// ncc, lncc, mncc or gc.
    #[arg(long)]
    metric: Option<MetricKind>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long)]
    volume: PathBuf,
    /// Directory for report.json, table.txt and difference maps.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Population of the classic CMA-ES baseline.
    #[arg(long)]
    classic_lambda: Option<usize>,
    #[arg(long)]
    generations: Option<usize>,
    #[arg(long)]
    sigma0: Option<f64>,
    #[arg(long)]
    metric: Option<MetricKind>,
    /// Bound the initial offset per component: ROT_DEG,TRANS_MM.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    truncate: Option<Vec<f64>>,
    /// Write one PGM difference map per case for the first method.
    #[arg(long)]
    emit_diff_maps: bool,
    #[command(flatten)]
    setup: SetupArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(format!("cannot set up {n} threads: {e}")))?;
    }
    match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Render(a) => cmd_render(a),
        Command::Register(a) => cmd_register(a),
        Command::Benchmark(a) => cmd_benchmark(a),
    }
}

fn cmd_phantom(a: PhantomArgs) -> CliResult<()> {
    let dims = match a.dims[..] {
        [n] => [n; 3],
        [x, y, z] => [x, y, z],
        _ => {
            return Err(CliError::usage(format!(
                "--dims takes one size or three, got {:?}",
                a.dims
            )))
        }
    };
    let vol = make_phantom(a.kind, dims, a.spacing, a.seed)?;
    save_volume(&vol, &a.out)?;
    echo(&serde_json::json!({
        "kind": a.kind,
        "dims": dims,
        "spacing_mm": a.spacing,
        "seed": a.seed,
    }));
    Ok(())
}

fn resolve(setup: &SetupArgs) -> CliResult<CliConfig> {
    let mut cfg = CliConfig::load(setup.config.as_deref())?;
    if let Some(n) = setup.detector {
        cfg.camera = cfg.camera.with_resolution(n, n)?;
    }
    if let Some(s) = setup.step {
        cfg.registration.step_mm = s;
    }
    Ok(cfg)
}

fn cmd_render(a: RenderArgs) -> CliResult<()> {
    let cfg = resolve(&a.setup)?;
    let vol = load_volume(&a.volume)?;
    let pose = a.pose.unwrap_or(Pose6::IDENTITY);
    let img = project(&vol, &cfg.camera, &pose, cfg.registration.step_mm)?;
    save_image(&img, &a.out)?;
    if let Some(p) = &a.pgm {
        write_pgm16(&img, p)?;
    }
    echo(&serde_json::json!({
        "camera": cfg.camera,
        "step_mm": cfg.registration.step_mm,
        "pose": pose,
    }));
    Ok(())
}

#[derive(Serialize)]
struct RegisterOutput<'a> {
    config: &'a CliConfig,
    volume: &'a Path,
    initial_pose: Pose6,
    fixed_pose: Option<Pose6>,
    result: regcma::RegistrationResult,
}

fn cmd_register(a: RegisterArgs) -> CliResult<()> {
    let mut cfg = resolve(&a.setup)?;
    let o = &a.opt;
    if let Some(k) = o.optimizer {
        cfg.optimizer.kind = k;
    }
    if let Some(l) = o.lambda {
        cfg.optimizer.population = Some(l);
    }
    if let Some(s) = o.sigma0 {
        cfg.optimizer.sigma0 = s;
    }
    if let Some(g) = o.generations {
        cfg.registration.generations = g;
    }
    if let Some(m) = o.metric {
        cfg.similarity.metric = m;
    }
    if let Some(s) = o.seed {
        cfg.registration.seed = s;
    }
    let reg = cfg.registration();
    reg.validate()?;

    let vol = Arc::new(load_volume(&a.volume)?);
    let fixed = match (&a.fixed, a.fixed_pose) {
        (Some(path), _) => load_image(path)?,
        (None, Some(p)) => project(&vol, &cfg.camera, &p, reg.step_mm)?,
        (None, None) => unreachable!("clap requires one fixed source"),
    };
    let camera = matching_camera(&cfg.camera, fixed.width(), fixed.height())?;
    let initial = a.initial.unwrap_or(Pose6::IDENTITY);
    echo(&cfg);
    let result = register(vol, camera, Arc::new(fixed), &initial, &reg)?;

    if let Some(path) = &a.trace {
        let mut text = String::new();
        for g in &result.trace {
            text.push_str(&serde_json::to_string(g).expect("trace serializes"));
            text.push('\n');
        }
        write_file(path, text.as_bytes())?;
    }
    println!(
        "final pose {} cost {:.6} (initial {:.6}) after {} evaluations",
        result.pose, result.cost, result.initial_cost, result.evaluations
    );
    let out = RegisterOutput {
        config: &cfg,
        volume: &a.volume,
        initial_pose: initial,
        fixed_pose: a.fixed_pose,
        result,
    };
    let json = serde_json::to_string_pretty(&out).expect("result serializes");
    write_file(&a.out, json.as_bytes())
}

/// The configured camera, checked against a loaded fixed image.
fn matching_camera(cam: &CameraGeometry, width: usize, height: usize) -> CliResult<CameraGeometry> {
    if cam.width() != width || cam.height() != height {
        return Err(CliError::usage(format!(
            "fixed image is {width}×{height} but the camera detector is {}×{}; pass --detector",
            cam.width(),
            cam.height()
        )));
    }
    Ok(*cam)
}

#[derive(Serialize)]
struct BenchmarkOutput<'a> {
    config: &'a CliConfig,
    volume: &'a Path,
    report: &'a regcma::BenchmarkReport,
}

fn cmd_benchmark(a: BenchmarkArgs) -> CliResult<()> {
    let mut cfg = resolve(&a.setup)?;
    if let Some(c) = a.cases {
        cfg.benchmark.cases = c;
    }
    if let Some(s) = a.seed {
        cfg.benchmark.seed = s;
    }
    if let Some(l) = a.classic_lambda {
        cfg.benchmark.classic_population = l;
    }
    if let Some(g) = a.generations {
        cfg.registration.generations = g;
    }
    if let Some(s) = a.sigma0 {
        cfg.optimizer.sigma0 = s;
    }
    if let Some(m) = a.metric {
        cfg.similarity.metric = m;
    }
    if let Some(t) = &a.truncate {
        cfg.benchmark.truncate_offset = Some([t[0], t[1]]);
    }
    let bench = cfg.benchmark();
    bench.validate()?;

    let vol = Arc::new(load_volume(&a.volume)?);
    echo(&cfg);
    let report = run_benchmark(vol.clone(), cfg.camera, &bench)?;
    let table = report.table();
    print!("{table}");

    fs::create_dir_all(&a.out)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", a.out.display())))?;
    let out = BenchmarkOutput {
        config: &cfg,
        volume: &a.volume,
        report: &report,
    };
    let json = serde_json::to_string_pretty(&out).expect("report serializes");
    write_file(&a.out.join("report.json"), json.as_bytes())?;
    write_file(&a.out.join("table.txt"), table.as_bytes())?;
    if a.emit_diff_maps {
        let method = &bench.methods[0].name;
        for rec in report.records_for(method) {
            let diff = case_difference_map(&vol, &cfg.camera, rec, cfg.registration.step_mm)?;
            let name = format!("diff_case{:03}_{}.pgm", rec.case, method);
            write_pgm16(&diff, a.out.join(name))?;
        }
    }
    Ok(())
}

/// Prints the resolved settings as one JSON line.
fn echo(value: &impl Serialize) {
    let line = serde_json::to_string(value).expect("config serializes");
    println!("config {line}");
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut f = fs::File::create(path)
        .map_err(|e| CliError::io(format!("cannot create {}: {e}", path.display())))?;
    f.write_all(bytes)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}
