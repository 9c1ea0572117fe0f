//! The `linear-slam` command line.
//!
//! Exit codes: 0 success, 2 usage, 3 unreadable or malformed input,
//! 4 numeric failure, 5 maps that cannot be joined.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::error::{Error, Result};
use crate::eval::{self, MetricReport};
use crate::io;
use crate::localmap::{GaussNewtonConfig, LocalMap, RawLocalData};
use crate::oracle;
use crate::sim::{self, ScenarioConfig, Trajectory};
use crate::state::{Dim, FramedState, HeadingMode};
use crate::strategy::{build_for_plan, complexity_model, join_pair, run_plan, ComplexityParams, JoinMode, JoinPlan};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_NOT_JOINABLE: i32 = 5;

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::InvalidInput(_) => EXIT_USAGE,
        Error::Parse { .. } | Error::InvalidRecord { .. } | Error::Io(_) => EXIT_PARSE,
        Error::NotJoinable(_) | Error::FrameMismatch(..) | Error::MissingEntity(_) => EXIT_NOT_JOINABLE,
        _ => EXIT_NUMERIC,
    }
}

#[derive(Parser, Debug)]
#[command(name = "linear-slam", version, about = "Build, join and evaluate SLAM local maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: truth.state and chunk_NNN.raw files.
    Simulate(SimulateArgs),
    /// Build one local map per raw chunk.
    BuildMaps(BuildArgs),
    /// Join local maps into one global map.
    Join(JoinArgs),
    /// Compute chi-square, RMSE and NEES of a solution.
    Eval(EvalArgs),
    /// Solve the joint nonlinear least-squares problem for reference.
    Oracle(OracleArgs),
    /// Operation-count ratios of the joining strategies.
    Complexity(ComplexityArgs),
    /// Split a pose graph file into raw chunks and optionally local maps.
    Convert(ConvertArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Strategy {
    Seq,
    Dc,
}

impl From<Strategy> for JoinMode {
    fn from(s: Strategy) -> JoinMode {
        match s {
            Strategy::Seq => JoinMode::Sequential,
            Strategy::Dc => JoinMode::DivideConquer,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DimArg {
    #[value(name = "2d")]
    D2,
    #[value(name = "3d")]
    D3,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum HeadingArg {
    Estimated,
    Fixed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TrajectoryArg {
    Loop,
    Grid,
    Sphere,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OracleMode {
    Join,
    Full,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// TOML scenario file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    dim: Option<DimArg>,
    #[arg(long, value_enum)]
    headings: Option<HeadingArg>,
    #[arg(long, value_enum)]
    trajectory: Option<TrajectoryArg>,
    #[arg(long)]
    poses: Option<usize>,
    /// Odometry steps per chunk.
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noiseless: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildArgs {
    /// Join strategy the maps will be used with; it decides each map's frame.
    #[arg(long, value_enum, default_value = "seq")]
    strategy: Strategy,
    /// Output directory for map_NNN.lmap files.
    #[arg(long)]
    out: PathBuf,
    /// Raw chunk files in trajectory order.
    #[arg(required = true)]
    chunks: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct JoinArgs {
    #[arg(long, value_enum, default_value = "seq")]
    strategy: Strategy,
    /// Worker threads for divide and conquer.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Where to write the global map.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    /// Local map files in trajectory order.
    #[arg(required = true)]
    maps: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Solution as a local map or a state file.
    #[arg(long)]
    solution: PathBuf,
    /// Local maps the solution is scored against (for --chi2).
    #[arg(long, num_args = 1..)]
    maps: Vec<PathBuf>,
    /// Ground truth state (for --rmse and --nees).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    chi2: bool,
    #[arg(long)]
    rmse: bool,
    #[arg(long)]
    nees: bool,
    #[arg(long)]
    json: bool,
    /// Also write the metrics as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OracleArgs {
    #[arg(long, value_enum, default_value = "full")]
    mode: OracleMode,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
    #[arg(required = true)]
    maps: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct ComplexityArgs {
    /// Total number of observations.
    #[arg(long)]
    og: f64,
    /// Total number of state entities.
    #[arg(long)]
    sg: f64,
    /// Nonlinear iterations.
    #[arg(long)]
    m: f64,
    /// Number of local maps.
    #[arg(long)]
    n: u64,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    /// Pose graph file.
    input: PathBuf,
    /// Odometry steps per chunk.
    #[arg(long, default_value_t = 10)]
    chunk_steps: usize,
    #[arg(long)]
    out: PathBuf,
    /// Also build map_NNN.lmap files for this strategy.
    #[arg(long, value_enum)]
    maps: Option<Strategy>,
}

pub fn run<I: IntoIterator<Item = OsString>>(argv: I) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::BuildMaps(a) => build_maps(a),
        Command::Join(a) => join(a),
        Command::Eval(a) => evaluate(a),
        Command::Oracle(a) => run_oracle(a),
        Command::Complexity(a) => complexity(a),
        Command::Convert(a) => convert(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn numbered(dir: &Path, stem: &str, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{i:03}.{ext}"))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str::<ScenarioConfig>(&text).map_err(|e| Error::Parse {
                line: e.span().map_or(1, |s| text[..s.start].matches('\n').count() + 1),
                msg: e.message().to_string(),
            })?
        }
        None => ScenarioConfig::default(),
    };
    if let Some(d) = a.dim {
        cfg.dim = match d {
            DimArg::D2 => Dim::D2,
            DimArg::D3 => Dim::D3,
        };
    }
    if let Some(h) = a.headings {
        cfg.headings = match h {
            HeadingArg::Estimated => HeadingMode::Estimated,
            HeadingArg::Fixed => HeadingMode::Fixed,
        };
    }
    if let Some(t) = a.trajectory {
        cfg.trajectory = match t {
            TrajectoryArg::Loop => Trajectory::Loop,
            TrajectoryArg::Grid => Trajectory::Grid,
            TrajectoryArg::Sphere => Trajectory::Sphere,
        };
    }
    if let Some(n) = a.poses {
        cfg.poses = n;
    }
    if let Some(k) = a.chunk_size {
        cfg.chunk_size = k;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.noiseless |= a.noiseless;

    let sc = sim::generate(&cfg)?;
    for w in &sc.warnings {
        log::warn!("{w}");
    }
    std::fs::create_dir_all(&a.out)?;
    io::write_state_file(&sc.truth, &a.out.join("truth.state"))?;
    for (i, c) in sc.chunks.iter().enumerate() {
        io::write_raw_file(c, &numbered(&a.out, "chunk", i, "raw"))?;
    }
    let effective = toml::to_string(&cfg).map_err(|e| Error::InvalidInput(e.to_string()))?;
    std::fs::write(a.out.join("scenario.toml"), effective)?;
    let features = sc.truth.state.keys().iter().filter(|k| k.is_feature()).count();
    println!(
        "wrote {} chunks, {} poses, {} features to {}",
        sc.chunks.len(),
        cfg.poses,
        features,
        a.out.display()
    );
    Ok(())
}

fn build_and_write(chunks: &[RawLocalData], strategy: Strategy, out: &Path) -> Result<Vec<LocalMap>> {
    let plan = JoinPlan::new(strategy.into(), chunks.len());
    let maps = build_for_plan(&plan, chunks, &GaussNewtonConfig::default())?;
    std::fs::create_dir_all(out)?;
    for (i, m) in maps.iter().enumerate() {
        io::write_map_file(m, &numbered(out, "map", i, "lmap"))?;
    }
    Ok(maps)
}

fn build_maps(a: BuildArgs) -> Result<()> {
    let chunks = a.chunks.iter().map(|p| io::read_raw_file(p)).collect::<Result<Vec<_>>>()?;
    let start = Instant::now();
    let maps = build_and_write(&chunks, a.strategy, &a.out)?;
    println!("built {} local maps in {:.6} s", maps.len(), start.elapsed().as_secs_f64());
    Ok(())
}

fn read_maps(paths: &[PathBuf]) -> Result<Vec<LocalMap>> {
    paths.iter().map(|p| io::read_map_file(p)).collect()
}

fn join(a: JoinArgs) -> Result<()> {
    if a.threads == 0 {
        return Err(Error::InvalidInput("--threads must be at least 1".into()));
    }
    let overall = Instant::now();
    let maps = read_maps(&a.maps)?;
    let joining = Instant::now();
    let plan = JoinPlan::new(a.strategy.into(), maps.len());
    let outcome = run_plan(&plan, &maps, a.threads)?;
    let join_s = joining.elapsed().as_secs_f64();
    let chi2 = eval::chi2(&outcome.map.framed_state(), &maps)?;
    if let Some(out) = &a.out {
        io::write_map_file(&outcome.map, out)?;
    }
    let overall_s = overall.elapsed().as_secs_f64();
    if a.json {
        let v = json!({
            "maps": maps.len(),
            "joins": outcome.joins,
            "entries": outcome.map.estimate().len(),
            "chi2": chi2,
            "joining_s": join_s,
            "overall_s": overall_s,
        });
        println!("{v:#}");
    } else {
        println!("maps {}", maps.len());
        println!("joins {}", outcome.joins);
        println!("entries {}", outcome.map.estimate().len());
        println!("chi2 {chi2}");
        println!("joining_s {join_s:.6}");
        println!("overall_s {overall_s:.6}");
    }
    Ok(())
}

enum Solution {
    Map(LocalMap),
    State(FramedState),
}

impl Solution {
    fn state(&self) -> FramedState {
        match self {
            Solution::Map(m) => m.framed_state(),
            Solution::State(s) => s.clone(),
        }
    }
}

fn read_solution(path: &Path) -> Result<Solution> {
    let bytes = std::fs::read(path)?;
    let is_state = String::from_utf8_lossy(&bytes)
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#'))
        .is_some_and(|l| l.starts_with("STATE"));
    if is_state {
        Ok(Solution::State(io::parse_state_bytes(&bytes)?))
    } else {
        Ok(Solution::Map(io::parse_map_bytes(&bytes)?))
    }
}

fn evaluate(a: EvalArgs) -> Result<()> {
    let solution = read_solution(&a.solution)?;
    let truth = a.truth.as_deref().map(io::read_state_file).transpose()?;
    let maps = read_maps(&a.maps)?;
    let all = !(a.chi2 || a.rmse || a.nees);
    let mut report = MetricReport::default();

    if a.chi2 || (all && !maps.is_empty()) {
        if maps.is_empty() {
            return Err(Error::InvalidInput("--chi2 needs --maps".into()));
        }
        report.chi2 = Some(eval::chi2(&solution.state(), &maps)?);
    }
    if a.rmse || (all && truth.is_some()) {
        let t = truth.as_ref().ok_or_else(|| Error::InvalidInput("--rmse needs --truth".into()))?;
        report.set_rmse(&eval::rmse(&solution.state(), t, None)?);
    }
    let can_nees = matches!(solution, Solution::Map(_)) && truth.is_some();
    if a.nees || (all && can_nees) {
        let t = truth.as_ref().ok_or_else(|| Error::InvalidInput("--nees needs --truth".into()))?;
        let Solution::Map(m) = &solution else {
            return Err(Error::InvalidInput("--nees needs a solution with an information matrix".into()));
        };
        let (v, dims) = eval::nees(m, t)?;
        report.set_nees(v, dims)?;
    }
    if let Some(p) = &a.csv {
        io::write_metrics_csv(&report, p)?;
    }
    if a.json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.to_key_value());
    }
    Ok(())
}

fn run_oracle(a: OracleArgs) -> Result<()> {
    let maps = read_maps(&a.maps)?;
    let start = Instant::now();
    let (linear, report) = match a.mode {
        OracleMode::Join => {
            let [m1, m2] = maps.as_slice() else {
                return Err(Error::InvalidInput("--mode join takes exactly two maps".into()));
            };
            let linear = join_pair(m1, m2)?;
            let r = oracle::nonlinear_join(m1, m2, linear.estimate(), linear.frame())?;
            (linear, r)
        }
        OracleMode::Full => {
            let linear = run_plan(&JoinPlan::new(JoinMode::Sequential, maps.len()), &maps, 1)?.map;
            let r = oracle::full_nonlinear_ls(&maps, linear.estimate(), linear.frame())?;
            (linear, r)
        }
    };
    let elapsed = start.elapsed().as_secs_f64();
    let report = report.require_converged()?;
    let linear_chi2 = eval::chi2(&linear.framed_state(), &maps)?;
    if let Some(out) = &a.out {
        io::write_map_file(&report.solution, out)?;
    }
    let gap = if report.final_objective > 0.0 {
        (linear_chi2 - report.final_objective) / report.final_objective
    } else {
        0.0
    };
    if a.json {
        let v = json!({
            "oracle_chi2": report.final_objective,
            "linear_chi2": linear_chi2,
            "relative_gap": gap,
            "iterations": report.iterations,
            "elapsed_s": elapsed,
        });
        println!("{v:#}");
    } else {
        println!("oracle_chi2 {}", report.final_objective);
        println!("linear_chi2 {linear_chi2}");
        println!("relative_gap {gap}");
        println!("iterations {}", report.iterations);
        println!("elapsed_s {elapsed:.6}");
    }
    Ok(())
}

/// `x` rounded to four significant digits, keeping trailing zeros.
fn sig4(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let decimals = 3 - x.abs().log10().floor() as i32;
    if decimals >= 0 {
        format!("{x:.*}", decimals as usize)
    } else {
        let scale = 10f64.powi(-decimals);
        format!("{}", (x / scale).round() * scale)
    }
}

fn complexity(a: ComplexityArgs) -> Result<()> {
    let r = complexity_model(&ComplexityParams {
        og: a.og,
        sg: a.sg,
        m: a.m,
        n: a.n,
    })?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        return Ok(());
    }
    let rows = [
        ("local_build", r.local_build),
        ("seq_join", r.seq_join),
        ("seq_total", r.seq_total),
        ("dc_join", r.dc_join),
        ("dc_total", r.dc_total),
        ("nonlinear_seq_join", r.nonlinear_seq_join),
        ("nonlinear_seq_total", r.nonlinear_seq_total),
        ("nonlinear_dc_join", r.nonlinear_dc_join),
        ("nonlinear_dc_total", r.nonlinear_dc_total),
    ];
    for (k, v) in rows {
        println!("{k} {}", sig4(v));
    }
    Ok(())
}

fn convert(a: ConvertArgs) -> Result<()> {
    let graph = io::read_pose_graph(&a.input)?;
    for w in &graph.warnings {
        log::warn!("{}: {w}", a.input.display());
    }
    let chunks = io::partition_pose_graph(&graph, a.chunk_steps)?;
    std::fs::create_dir_all(&a.out)?;
    for (i, c) in chunks.iter().enumerate() {
        io::write_raw_file(c, &numbered(&a.out, "chunk", i, "raw"))?;
    }
    if let Some(s) = a.maps {
        build_and_write(&chunks, s, &a.out)?;
    }
    println!(
        "{} vertices, {} edges -> {} chunks in {}",
        graph.vertices.len(),
        graph.edges.len(),
        chunks.len(),
        a.out.display()
    );
    Ok(())
}
