//! `linf-slam` command-line driver.
//!
//! Exit status: 0 on success, 2 when a solver reported infeasibility (all
//! outputs that could be produced are still written), 1 on usage or I/O
//! errors.

use std::collections::{BTreeMap, BTreeSet};
use std::error::Error;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use linf_slam::ba::{run_ba_slam, BaSlamConfig, SlamStatus};
use linf_slam::io::{create, open, read_loops, read_poses, read_tracks, write_loops, write_metrics, write_points, write_poses, write_tracks};
use linf_slam::krot::{triangulate_track, KRotConfig};
use linf_slam::metrics::evaluate;
use linf_slam::pipeline::{compare_runtime, detect_loops_proximity, run_linf_slam, KRotMode, LogEntry, LoopEvent, Outcome, PipelineConfig};
use linf_slam::synth::{generate, NoiseModel, SceneParams, TrajectoryKind};
use linf_slam::{FrameId, MapPoint, TrackSet};

type Res<T> = Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(name = "linf-slam", version, about = "L-infinity SLAM: rotation averaging plus known-rotation position solves")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic scene: tracks, ground-truth poses and points, loop pairs.
    Generate(GenerateArgs),
    /// Estimate poses and map from tracks.
    Run(RunArgs),
    /// Compare an estimated trajectory to ground truth.
    Eval(EvalArgs),
    /// Per-keyframe runtime of rotation averaging against windowed BA.
    Bench(BenchArgs),
    /// Triangulate every track against fixed poses.
    Triangulate(TriangulateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value = "circle")]
    kind: TrajectoryKind,
    #[arg(long, default_value_t = 40)]
    frames: usize,
    #[arg(long, default_value_t = 300)]
    points: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-axis image noise in normalized units; 0 disables noise.
    #[arg(long, default_value_t = 1.0 / 500.0)]
    sigma: f64,
    /// Hard noise bound; defaults to three sigma.
    #[arg(long)]
    bound: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    outlier_rate: f64,
    /// Yaw sweep of the pure-rotation kind, degrees.
    #[arg(long, default_value_t = 90.0)]
    sweep: f64,
    /// Loop pairs are centres closer than this; defaults to a tenth of the
    /// trajectory extent.
    #[arg(long)]
    loop_radius: Option<f64>,
    /// Minimum frame gap of a loop pair.
    #[arg(long, default_value_t = 10)]
    window: usize,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Linf,
    Ba,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, default_value_t = 10)]
    window: usize,
    /// Direction cone half-angle, degrees.
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 300)]
    loop_sample: usize,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value = "inline")]
    krot_mode: KRotMode,
    /// Seed for track sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SolverArgs {
    fn pipeline(&self) -> PipelineConfig {
        let mut cfg = PipelineConfig {
            window: self.window,
            alpha_deg: self.alpha,
            loop_sample: self.loop_sample,
            krot_mode: self.krot_mode,
            sample_seed: self.seed,
            ..Default::default()
        };
        cfg.krot.tol = self.tol;
        cfg
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum, default_value = "linf")]
    mode: Mode,
    #[arg(long)]
    tracks: PathBuf,
    /// Loop pairs `at_frame,matched_frame`.
    #[arg(long)]
    loops: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Metrics CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Tracks to time; a circle scene is generated when absent.
    #[arg(long)]
    tracks: Option<PathBuf>,
    #[arg(long, default_value_t = 60)]
    frames: usize,
    #[arg(long, default_value_t = 300)]
    points: usize,
    #[arg(long, default_value = "runtime.csv")]
    out: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
}

#[derive(Args)]
struct TriangulateArgs {
    #[arg(long)]
    poses: PathBuf,
    #[arg(long)]
    tracks: PathBuf,
    #[arg(long, default_value = "points.csv")]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
}

enum Status {
    Done,
    Infeasible,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let res = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Run(a) => cmd_run(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Triangulate(a) => cmd_triangulate(&a),
    };
    match res {
        Ok(Status::Done) => ExitCode::SUCCESS,
        Ok(Status::Infeasible) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_tracks(path: &Path) -> Res<TrackSet> {
    Ok(read_tracks(open(path)?)?)
}

fn keyframes(tracks: &TrackSet) -> Vec<FrameId> {
    let set: BTreeSet<FrameId> = tracks.observations().map(|o| o.frame_id).collect();
    set.into_iter().collect()
}

fn cmd_generate(a: &GenerateArgs) -> Res<Status> {
    let noise = NoiseModel { sigma: a.sigma, bound: a.bound.unwrap_or(3.0 * a.sigma), outlier_rate: a.outlier_rate, direction_noise_deg: 0.0 };
    let params = SceneParams { n_frames: a.frames, n_points: a.points, noise, sweep_deg: a.sweep, ..Default::default() };
    let scene = generate(a.kind, &params, a.seed)?;
    let radius = a.loop_radius.unwrap_or(0.1 * scene.trajectory_extent());
    let loops = LoopEvent::to_pairs(&detect_loops_proximity(&scene.gt_poses, radius, a.window));
    write_tracks(create(&a.out.join("tracks.csv"))?, &scene.tracks)?;
    write_poses(create(&a.out.join("gt_poses.txt"))?, &scene.gt_poses)?;
    write_points(create(&a.out.join("gt_points.csv"))?, &scene.gt_points)?;
    write_loops(create(&a.out.join("loops.csv"))?, &loops)?;
    log::info!("{} frames, {} tracks, {} loop pairs", scene.gt_poses.len(), scene.tracks.len(), loops.len());
    Ok(Status::Done)
}

fn outcome_fields(o: &Outcome) -> (&'static str, String) {
    match o {
        Outcome::Edges(n) => ("edges", n.to_string()),
        Outcome::Averaged { cost, iterations } => ("averaged", format!("{cost:e};{iterations}")),
        Outcome::Solved { gamma } => ("solved", format!("{gamma:e}")),
        Outcome::Queued => ("queued", String::new()),
        Outcome::Unobservable => ("unobservable", String::new()),
        Outcome::Infeasible(msg) => ("infeasible", msg.replace([',', '\n'], ";")),
        Outcome::Triangulated { points, failed } => ("triangulated", format!("{points};{failed}")),
    }
}

fn write_log(path: &Path, log: &[LogEntry]) -> Res<()> {
    let mut w = create(path)?;
    writeln!(w, "frame_id,stage,outcome,detail")?;
    for e in log {
        let (kind, detail) = outcome_fields(&e.outcome);
        writeln!(w, "{},{:?},{kind},{detail}", e.frame, e.stage)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_run(a: &RunArgs) -> Res<Status> {
    let tracks = load_tracks(&a.tracks)?;
    let frames = keyframes(&tracks);
    let pairs = match &a.loops {
        Some(p) => read_loops(open(p)?)?,
        None => Vec::new(),
    };
    let cfg = a.solver.pipeline();
    match a.mode {
        Mode::Linf => {
            let r = run_linf_slam(&frames, &tracks, &LoopEvent::from_pairs(&pairs), &cfg)?;
            write_poses(create(&a.out.join("poses.txt"))?, &r.poses)?;
            write_points(create(&a.out.join("points.csv"))?, &r.points)?;
            write_log(&a.out.join("log.csv"), &r.log)?;
            if !r.positions_observable {
                log::warn!("no window carried translation information; positions are not observable");
            }
            if r.any_infeasible() {
                eprintln!("some position solves were infeasible; see log.csv");
                return Ok(Status::Infeasible);
            }
        }
        Mode::Ba => {
            let loop_frames: BTreeSet<FrameId> = pairs.iter().map(|p| p.0).collect();
            let ba_cfg = BaSlamConfig { window: cfg.window, ..Default::default() };
            let r = run_ba_slam(&frames, &tracks, &loop_frames, &ba_cfg)?;
            let points: Vec<MapPoint> = r.points.iter().map(|(id, x)| MapPoint { track_id: *id, x: *x }).collect();
            write_poses(create(&a.out.join("poses.txt"))?, &r.poses)?;
            write_points(create(&a.out.join("points.csv"))?, &points)?;
            let mut w = create(&a.out.join("log.csv"))?;
            writeln!(w, "frame_id,ba_secs")?;
            for (f, s) in &r.step_times {
                writeln!(w, "{f},{s:e}")?;
            }
            w.flush()?;
            if r.status != SlamStatus::Completed {
                eprintln!("bundle adjustment stopped: {:?}", r.status);
                return Ok(Status::Infeasible);
            }
        }
    }
    Ok(Status::Done)
}

fn cmd_eval(a: &EvalArgs) -> Res<Status> {
    let est = read_poses(open(&a.est)?)?;
    let gt = read_poses(open(&a.gt)?)?;
    let (m, al) = evaluate(&est, &gt)?;
    if al.length_fallback {
        log::warn!("centres are collinear; scale fixed by trajectory length");
    }
    match &a.out {
        Some(p) => write_metrics(create(p)?, &m)?,
        None => write_metrics(std::io::stdout().lock(), &m)?,
    }
    Ok(Status::Done)
}

fn cmd_bench(a: &BenchArgs) -> Res<Status> {
    let tracks = match &a.tracks {
        Some(p) => load_tracks(p)?,
        None => {
            let params = SceneParams { n_frames: a.frames, n_points: a.points, ..Default::default() };
            generate(TrajectoryKind::Circle, &params, a.solver.seed)?.tracks
        }
    };
    let series = compare_runtime(&keyframes(&tracks), &tracks, &a.solver.pipeline(), &BaSlamConfig::default())?;
    series.write_csv(create(&a.out)?)?;
    println!("median rotation averaging {:e} s, median BA {:e} s, ratio {:.2}", series.median_rotavg(), series.median_ba(), series.median_ratio());
    Ok(Status::Done)
}

fn cmd_triangulate(a: &TriangulateArgs) -> Res<Status> {
    let poses = read_poses(open(&a.poses)?)?;
    let tracks = load_tracks(&a.tracks)?;
    let cfg = KRotConfig { tol: a.tol, ..Default::default() };
    let mut points = Vec::new();
    let mut failed = BTreeMap::new();
    for t in tracks.iter() {
        let seen = t.filtered(|f| poses.contains_key(&f));
        if seen.len() < 2 {
            continue;
        }
        match triangulate_track(&seen, &poses, &cfg) {
            Ok((p, _)) => points.push(p),
            Err(e) => {
                failed.insert(t.track_id, e.to_string());
            }
        }
    }
    write_points(create(&a.out)?, &points)?;
    if !failed.is_empty() {
        eprintln!("{} of {} tracks could not be triangulated", failed.len(), failed.len() + points.len());
        return Ok(Status::Infeasible);
    }
    Ok(Status::Done)
}
