//! End-to-end L-infinity SLAM driver.
//!
//! Per keyframe: relative motions to the previous `window` frames,
//! incremental rotation averaging over the window, then a known-rotation
//! solve over the window (inline, or queued on a worker pool since its output
//! never feeds back into the rotations). Window solutions are chained into a
//! trajectory by scale-and-shift fits on their overlap. At loop events the
//! matched frames are linked, rotations are re-averaged over the whole graph,
//! and at the last event (by default) the loop-closure program with direction
//! constraints is solved on a sample of tracks. All scene points are finally
//! triangulated against the fixed poses.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::sync::mpsc;
use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::ba::{run_ba_slam, BaError, BaSlamConfig};
use crate::geometry::{KeyframePose, Rotation};
use crate::graph::{CovisibilityGraph, Edge, GraphError};
use crate::io::{write_table, IoError};
use crate::krot::{build_krot, solve_krot, triangulate_track, GaugeConfig, KRotConfig, KRotError, KRotSolution};
use crate::relmotion::{correspondences, estimate_relative, MotionMethod, RelMotionConfig};
use crate::rotavg::{incremental_update, irls_rotation_average, Loss, RotAvgConfig, RotAvgError, RotationEstimate};
use crate::synth::perturb_direction;
use crate::tdc::{build_tdc, direction_constraints, sample_tracks, solve_tdc};
use crate::tracks::{FrameId, MapPoint, TrackSet};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("keyframe {0} shares no usable relative motion with its window")]
    DisconnectedGraph(FrameId),
    #[error("loop event at frame {0} references a frame that is not earlier")]
    BadLoopEvent(FrameId),
    #[error(transparent)]
    RotAvg(#[from] RotAvgError),
    #[error(transparent)]
    Ba(#[from] BaError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoopEvent {
    pub at_frame: FrameId,
    pub matched_frames: Vec<FrameId>,
}

impl LoopEvent {
    /// Groups `(at_frame, matched_frame)` pairs by `at_frame`.
    pub fn from_pairs(pairs: &[(FrameId, FrameId)]) -> Vec<LoopEvent> {
        let mut by: BTreeMap<FrameId, BTreeSet<FrameId>> = BTreeMap::new();
        for (a, m) in pairs {
            by.entry(*a).or_default().insert(*m);
        }
        by.into_iter().map(|(at_frame, m)| LoopEvent { at_frame, matched_frames: m.into_iter().collect() }).collect()
    }

    pub fn to_pairs(events: &[LoopEvent]) -> Vec<(FrameId, FrameId)> {
        events.iter().flat_map(|e| e.matched_frames.iter().map(move |m| (e.at_frame, *m))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KRotMode {
    #[default]
    Inline,
    Deferred,
}

impl std::str::FromStr for KRotMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inline" => Ok(Self::Inline),
            "deferred" => Ok(Self::Deferred),
            _ => Err(format!("unknown krot mode {s:?} (expected inline or deferred)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Keyframes per window; relative motions also reach one frame further back.
    pub window: usize,
    /// Tracks sampled for the loop-closure program.
    pub loop_sample: usize,
    /// Half-angle of the direction cones, degrees.
    pub alpha_deg: f64,
    pub krot_mode: KRotMode,
    /// Worker threads for deferred window solves; 0 picks the default.
    pub workers: usize,
    /// Solve the loop-closure program at every loop event, not only the last.
    pub tdc_every_event: bool,
    /// Tracks sampled per window solve.
    pub window_track_cap: usize,
    pub sample_seed: u64,
    /// Shared tracks needed before a pair's relative motion is estimated.
    pub min_shared: usize,
    pub relmotion: RelMotionConfig,
    pub rotavg: RotAvgConfig,
    /// Settings for the whole-graph averaging at loop events.
    pub closure_rotavg: RotAvgConfig,
    pub krot: KRotConfig,
    pub triangulate: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: 10,
            loop_sample: 300,
            alpha_deg: 2.0,
            krot_mode: KRotMode::Inline,
            workers: 0,
            tdc_every_event: false,
            window_track_cap: 60,
            sample_seed: 0,
            min_shared: 8,
            relmotion: RelMotionConfig::default(),
            rotavg: RotAvgConfig::default(),
            closure_rotavg: RotAvgConfig { loss: Loss::Chordal, weight_cap: usize::MAX, ..Default::default() },
            krot: KRotConfig::default(),
            triangulate: true,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::BadConfig(m.into()));
        if self.window < 2 {
            return bad("window must be at least 2");
        }
        if self.loop_sample < 2 || self.window_track_cap < 2 {
            return bad("track samples need at least 2 tracks");
        }
        if !(self.alpha_deg > 0.0 && self.alpha_deg < 90.0) {
            return bad("alpha must lie in (0, 90) degrees");
        }
        if !(self.krot.tol > 0.0) {
            return bad("tolerance must be positive");
        }
        Ok(())
    }
}

/// Supplies relative motions for keyframe pairs `j < k`.
pub trait MotionSource: Sync {
    fn relative(&self, j: FrameId, k: FrameId) -> Option<Edge>;
}

/// Relative motions estimated from the shared feature tracks.
#[derive(Debug, Clone)]
pub struct TrackMotionSource<'a> {
    pub tracks: &'a TrackSet,
    pub cfg: RelMotionConfig,
    pub min_shared: usize,
}

impl MotionSource for TrackMotionSource<'_> {
    fn relative(&self, j: FrameId, k: FrameId) -> Option<Edge> {
        let corrs = correspondences(self.tracks, j, k);
        if corrs.len() < self.min_shared.max(5) {
            return None;
        }
        let m = estimate_relative(&corrs, &self.cfg).ok()?;
        let weight = m.inlier_count();
        let t_e = if m.method == MotionMethod::Essential { m.t_e } else { None };
        Some(Edge { j, k, r_jk: m.r_jk, t_e, weight })
    }
}

/// Relative motions from known poses with a controlled rotation drift and
/// direction noise. Frame `f` is seen through `exp(f * drift * axis) R_f`;
/// pairs at least `loop_gap` apart are measured without drift, like a
/// place-recognition match, and reported with `loop_weight` when it is
/// non-zero. Pairs need `min_shared` common tracks.
#[derive(Debug, Clone)]
pub struct SyntheticMotionSource<'a> {
    pub poses: &'a BTreeMap<FrameId, KeyframePose>,
    pub tracks: &'a TrackSet,
    pub drift_deg_per_step: f64,
    pub drift_axis: Vector3<f64>,
    pub direction_noise_deg: f64,
    pub loop_gap: usize,
    pub loop_weight: usize,
    pub min_shared: usize,
    pub seed: u64,
}

impl SyntheticMotionSource<'_> {
    fn drifted(&self, f: FrameId) -> Rotation {
        let w = self.drift_axis.normalize() * (self.drift_deg_per_step.to_radians() * f as f64);
        Rotation::exp(&w) * self.poses[&f].r
    }
}

impl MotionSource for SyntheticMotionSource<'_> {
    fn relative(&self, j: FrameId, k: FrameId) -> Option<Edge> {
        let (pj, pk) = (self.poses.get(&j)?, self.poses.get(&k)?);
        let mut weight = self.tracks.shared_count(j, k);
        if weight < self.min_shared {
            return None;
        }
        let is_loop = k.abs_diff(j) >= self.loop_gap;
        if is_loop && self.loop_weight > 0 {
            weight = self.loop_weight;
        }
        let r_jk = if is_loop { pk.r * pj.r.transpose() } else { self.drifted(k) * self.drifted(j).transpose() };
        let d = pk.centre() - pj.centre();
        let t_e = (d.norm() > 1e-12).then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((j as u64) << 32) ^ k as u64);
            perturb_direction(&(pj.r * d.normalize()), self.direction_noise_deg, &mut rng)
        });
        Some(Edge { j, k, r_jk, t_e, weight })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    RelativeMotion,
    RotationAveraging,
    WindowSolve,
    LoopClosure,
    Triangulation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Edges(usize),
    Averaged { cost: f64, iterations: usize },
    Solved { gamma: f64 },
    Queued,
    /// No translation information in the window (zero baseline).
    Unobservable,
    Infeasible(String),
    Triangulated { points: usize, failed: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub frame: FrameId,
    pub stage: Stage,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepTiming {
    pub frame: FrameId,
    pub rotavg_secs: f64,
    pub krot_secs: Option<f64>,
}

/// One window solve: the frames it covered and its optimal level.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSolve {
    pub frame: FrameId,
    pub frames: Vec<FrameId>,
    pub gamma_star: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopClosure {
    pub at_frame: FrameId,
    pub gamma_star: f64,
    pub n_tracks: usize,
    pub n_directions: usize,
    pub centres: BTreeMap<FrameId, Vector3<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    pub rotations: BTreeMap<FrameId, Rotation>,
    pub poses: BTreeMap<FrameId, KeyframePose>,
    /// Chained window solutions with the rotations known when each frame
    /// was added.
    pub pre_closure: BTreeMap<FrameId, KeyframePose>,
    pub points: Vec<MapPoint>,
    pub graph: CovisibilityGraph,
    pub windows: Vec<WindowSolve>,
    pub closure: Option<LoopClosure>,
    pub timings: Vec<StepTiming>,
    pub log: Vec<LogEntry>,
    /// False when no window carried translation information.
    pub positions_observable: bool,
}

impl PipelineResult {
    /// Whether some position stage was infeasible.
    pub fn any_infeasible(&self) -> bool {
        self.log.iter().any(|e| matches!(e.outcome, Outcome::Infeasible(_)))
    }
}

/// Known-rotation solve over `frames`, on at most `cap` tracks seen at
/// least twice inside them.
pub fn krot_window(
    rotations: &BTreeMap<FrameId, Rotation>,
    tracks: &TrackSet,
    frames: &[FrameId],
    cap: usize,
    seed: u64,
    cfg: &KRotConfig,
) -> Result<KRotSolution, KRotError> {
    let set: BTreeSet<FrameId> = frames.iter().copied().collect();
    let local = sample_tracks(&tracks.restricted(|f| set.contains(&f), 2), cap, seed);
    let rot: BTreeMap<FrameId, Rotation> = frames.iter().filter_map(|f| rotations.get(f).map(|r| (*f, *r))).collect();
    let problem = build_krot(&rot, &local, &GaugeConfig::default())?;
    solve_krot(&problem, cfg)
}

struct WindowJob {
    frame: FrameId,
    frames: Vec<FrameId>,
    rotations: BTreeMap<FrameId, Rotation>,
}

struct WindowOutcome {
    frame: FrameId,
    result: Result<(BTreeMap<FrameId, Vector3<f64>>, f64), String>,
    secs: f64,
}

fn run_window(job: &WindowJob, tracks: &TrackSet, cfg: &PipelineConfig) -> WindowOutcome {
    let start = Instant::now();
    let result = krot_window(&job.rotations, tracks, &job.frames, cfg.window_track_cap, cfg.sample_seed ^ job.frame as u64, &cfg.krot)
        .map(|s| (s.centres(&job.rotations), s.gamma_star))
        .map_err(|e| e.to_string());
    WindowOutcome { frame: job.frame, result, secs: start.elapsed().as_secs_f64() }
}

/// Least-squares `s, d` with `s c + d ~ C` over the pairs; `s = 1` when the
/// source points coincide.
fn fit_scale_shift(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> (f64, Vector3<f64>) {
    let n = pairs.len().max(1) as f64;
    let cm = pairs.iter().map(|p| p.0).sum::<Vector3<f64>>() / n;
    let tm = pairs.iter().map(|p| p.1).sum::<Vector3<f64>>() / n;
    let den: f64 = pairs.iter().map(|p| (p.0 - cm).norm_squared()).sum();
    let num: f64 = pairs.iter().map(|p| (p.0 - cm).dot(&(p.1 - tm))).sum();
    let s = if den > 1e-24 && num > 0.0 { num / den } else { 1.0 };
    (s, tm - cm * s)
}

/// Relative motions from `t` back to the `window` previous keyframes;
/// returns the number of edges added.
fn link_keyframe(graph: &mut CovisibilityGraph, source: &dyn MotionSource, earlier: &[FrameId], t: FrameId, window: usize) -> usize {
    graph.add_node(t);
    let from = earlier.len().saturating_sub(window);
    let mut n = 0;
    for &j in &earlier[from..] {
        if let Some(e) = source.relative(j, t) {
            if graph.add_edge(e).is_ok() {
                n += 1;
            }
        }
    }
    n
}

/// Window re-averaging after adding `t`; `earlier` holds the processed frames.
fn average_window(
    graph: &CovisibilityGraph,
    est: &RotationEstimate,
    earlier: &[FrameId],
    t: FrameId,
    cfg: &PipelineConfig,
) -> Result<RotationEstimate, PipelineError> {
    let from = earlier.len().saturating_sub(cfg.window);
    let keep: BTreeSet<FrameId> = earlier[from..].iter().copied().chain([t]).collect();
    let wg = graph.induced(|f| keep.contains(&f)).map_err(|e| match e {
        GraphError::DisconnectedGraph => PipelineError::DisconnectedGraph(t),
        other => PipelineError::BadConfig(other.to_string()),
    })?;
    incremental_update(est, &wg, t, &cfg.rotavg).map_err(|e| match e {
        RotAvgError::NoEdgeToNewFrame(_) | RotAvgError::DisconnectedGraph => PipelineError::DisconnectedGraph(t),
        other => other.into(),
    })
}

fn initial_estimate(first: FrameId) -> RotationEstimate {
    RotationEstimate { rotations: BTreeMap::from([(first, Rotation::identity())]), cost: 0.0, iterations: 0, converged: true, history: Vec::new() }
}

fn check_events(keyframes: &[FrameId], events: &[LoopEvent]) -> Result<BTreeMap<FrameId, Vec<FrameId>>, PipelineError> {
    let known: BTreeSet<FrameId> = keyframes.iter().copied().collect();
    let mut by = BTreeMap::new();
    for e in events {
        if !known.contains(&e.at_frame) || e.matched_frames.iter().any(|m| *m >= e.at_frame || !known.contains(m)) {
            return Err(PipelineError::BadLoopEvent(e.at_frame));
        }
        by.entry(e.at_frame).or_insert_with(Vec::new).extend(e.matched_frames.iter().copied());
    }
    Ok(by)
}

/// Runs the full pipeline with relative motions taken from `tracks`.
pub fn run_linf_slam(keyframes: &[FrameId], tracks: &TrackSet, events: &[LoopEvent], cfg: &PipelineConfig) -> Result<PipelineResult, PipelineError> {
    let source = TrackMotionSource { tracks, cfg: cfg.relmotion.clone(), min_shared: cfg.min_shared };
    run_linf_slam_with(keyframes, tracks, events, &source, cfg)
}

/// Runs the full pipeline with relative motions from `source`.
pub fn run_linf_slam_with(
    keyframes: &[FrameId],
    tracks: &TrackSet,
    events: &[LoopEvent],
    source: &dyn MotionSource,
    cfg: &PipelineConfig,
) -> Result<PipelineResult, PipelineError> {
    cfg.validate()?;
    if keyframes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(PipelineError::BadConfig("keyframes must be strictly increasing".into()));
    }
    let loops = check_events(keyframes, events)?;
    let mut out = PipelineResult {
        rotations: BTreeMap::new(),
        poses: BTreeMap::new(),
        pre_closure: BTreeMap::new(),
        points: Vec::new(),
        graph: CovisibilityGraph::new(),
        windows: Vec::new(),
        closure: None,
        timings: Vec::new(),
        log: Vec::new(),
        positions_observable: false,
    };
    let Some(&first) = keyframes.first() else { return Ok(out) };
    let last_event = loops.keys().next_back().copied();
    out.graph.add_node(first);
    let mut est = initial_estimate(first);
    let mut snapshot_rot: BTreeMap<FrameId, Rotation> = BTreeMap::from([(first, Rotation::identity())]);
    let mut solves: BTreeMap<FrameId, WindowOutcome> = BTreeMap::new();
    let mut window_frames: BTreeMap<FrameId, Vec<FrameId>> = BTreeMap::new();
    let mut rotavg_secs: BTreeMap<FrameId, f64> = BTreeMap::new();

    let pool = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build().map_err(|e| PipelineError::Pool(e.to_string()))?;
    let (tx, rx) = mpsc::channel::<WindowOutcome>();

    pool.scope(|scope| -> Result<(), PipelineError> {
        for (i, &t) in keyframes.iter().enumerate().skip(1) {
            let earlier = &keyframes[..i];
            let n_edges = link_keyframe(&mut out.graph, source, earlier, t, cfg.window);
            out.log.push(LogEntry { frame: t, stage: Stage::RelativeMotion, outcome: Outcome::Edges(n_edges) });

            let start = Instant::now();
            est = average_window(&out.graph, &est, earlier, t, cfg)?;
            rotavg_secs.insert(t, start.elapsed().as_secs_f64());
            out.log.push(LogEntry { frame: t, stage: Stage::RotationAveraging, outcome: Outcome::Averaged { cost: est.cost, iterations: est.iterations } });
            snapshot_rot.insert(t, est.rotations[&t]);

            // window solve over the last `window` frames
            let frames: Vec<FrameId> = keyframes[(i + 1).saturating_sub(cfg.window)..=i].to_vec();
            let set: BTreeSet<FrameId> = frames.iter().copied().collect();
            let observable = out.graph.edges().any(|e| e.t_e.is_some() && set.contains(&e.j) && set.contains(&e.k));
            window_frames.insert(t, frames.clone());
            if !observable {
                log::info!("frame {t}: window has no baseline; positions skipped");
                out.log.push(LogEntry { frame: t, stage: Stage::WindowSolve, outcome: Outcome::Unobservable });
            } else {
                let job = WindowJob { frame: t, rotations: frames.iter().map(|f| (*f, est.rotations[f])).collect(), frames };
                match cfg.krot_mode {
                    KRotMode::Inline => {
                        let o = run_window(&job, tracks, cfg);
                        out.log.push(LogEntry { frame: t, stage: Stage::WindowSolve, outcome: window_outcome(&o) });
                        solves.insert(t, o);
                    }
                    KRotMode::Deferred => {
                        let tx = tx.clone();
                        scope.spawn(move |_| {
                            let _ = tx.send(run_window(&job, tracks, cfg));
                        });
                        out.log.push(LogEntry { frame: t, stage: Stage::WindowSolve, outcome: Outcome::Queued });
                    }
                }
            }

            if let Some(matched) = loops.get(&t) {
                let mut added = 0;
                for &m in matched {
                    if let Some(e) = source.relative(m, t) {
                        if out.graph.add_edge(e).is_ok() {
                            added += 1;
                        }
                    }
                }
                let processed: BTreeSet<FrameId> = keyframes[..=i].iter().copied().collect();
                let g = out.graph.induced(|f| processed.contains(&f)).map_err(|_| PipelineError::DisconnectedGraph(t))?;
                let full = irls_rotation_average(&g, &est.rotations, &cfg.closure_rotavg)?;
                est.rotations.extend(full.rotations);
                out.log.push(LogEntry { frame: t, stage: Stage::RelativeMotion, outcome: Outcome::Edges(added) });
                out.log.push(LogEntry { frame: t, stage: Stage::RotationAveraging, outcome: Outcome::Averaged { cost: full.cost, iterations: full.iterations } });
                if cfg.tdc_every_event || Some(t) == last_event {
                    let (entry, closure) = close_loop(t, &g, &est.rotations, tracks, &processed, cfg);
                    out.log.push(entry);
                    if closure.is_some() {
                        out.closure = closure;
                    }
                }
            }
        }
        Ok(())
    })?;
    drop(tx);
    if cfg.krot_mode == KRotMode::Deferred {
        for o in rx.try_iter() {
            solves.insert(o.frame, o);
        }
        for o in solves.values() {
            out.log.push(LogEntry { frame: o.frame, stage: Stage::WindowSolve, outcome: window_outcome(o) });
        }
    }

    out.rotations = est.rotations.clone();
    for &t in &keyframes[1..] {
        out.timings.push(StepTiming { frame: t, rotavg_secs: rotavg_secs[&t], krot_secs: solves.get(&t).map(|o| o.secs) });
        out.windows.push(WindowSolve {
            frame: t,
            frames: window_frames[&t].clone(),
            gamma_star: solves.get(&t).and_then(|o| o.result.as_ref().ok().map(|r| r.1)),
        });
    }

    // chain window solutions in frame order
    let mut chain: BTreeMap<FrameId, Vector3<f64>> = BTreeMap::from([(first, Vector3::zeros())]);
    for &t in &keyframes[1..] {
        match solves.get(&t).map(|o| &o.result) {
            Some(Ok((centres, _))) => {
                out.positions_observable = true;
                let pairs: Vec<_> = centres.iter().filter(|(f, _)| **f != t).filter_map(|(f, c)| chain.get(f).map(|k| (*c, *k))).collect();
                let (s, d) = if pairs.len() >= 2 { fit_scale_shift(&pairs) } else { (1.0, Vector3::zeros()) };
                let prev = *chain.values().next_back().expect("chain starts non-empty");
                let c = centres.get(&t).map(|c| c * s + d).unwrap_or(prev);
                chain.insert(t, c);
            }
            _ => {
                let prev = *chain.values().next_back().expect("chain starts non-empty");
                chain.insert(t, prev);
            }
        }
    }
    out.pre_closure = chain.iter().map(|(f, c)| (*f, KeyframePose::from_centre(snapshot_rot[f], c))).collect();

    let mut centres = chain.clone();
    if let Some(cl) = &out.closure {
        let pairs: Vec<_> = cl.centres.iter().filter_map(|(f, c)| chain.get(f).map(|k| (*k, *c))).collect();
        let (s, d) = fit_scale_shift(&pairs);
        for (f, c) in centres.iter_mut() {
            *c = cl.centres.get(f).copied().unwrap_or(*c * s + d);
        }
    }
    out.poses = centres.iter().map(|(f, c)| (*f, KeyframePose::from_centre(out.rotations[f], c))).collect();

    if cfg.triangulate && out.positions_observable {
        let last = *keyframes.last().expect("non-empty");
        let usable = tracks.restricted(|f| out.poses.contains_key(&f), 2);
        let results: Vec<Option<MapPoint>> = usable.iter().collect::<Vec<_>>().par_iter().map(|t| triangulate_track(t, &out.poses, &cfg.krot).ok().map(|r| r.0)).collect();
        let failed = results.iter().filter(|r| r.is_none()).count();
        out.points = results.into_iter().flatten().collect();
        out.log.push(LogEntry { frame: last, stage: Stage::Triangulation, outcome: Outcome::Triangulated { points: out.points.len(), failed } });
    }
    Ok(out)
}

fn window_outcome(o: &WindowOutcome) -> Outcome {
    match &o.result {
        Ok((_, g)) => Outcome::Solved { gamma: *g },
        Err(e) => {
            log::warn!("frame {}: window solve failed: {e}", o.frame);
            Outcome::Infeasible(e.clone())
        }
    }
}

fn close_loop(
    t: FrameId,
    graph: &CovisibilityGraph,
    rotations: &BTreeMap<FrameId, Rotation>,
    tracks: &TrackSet,
    processed: &BTreeSet<FrameId>,
    cfg: &PipelineConfig,
) -> (LogEntry, Option<LoopClosure>) {
    let entry = |outcome| LogEntry { frame: t, stage: Stage::LoopClosure, outcome };
    let directions = match direction_constraints(graph, rotations, cfg.alpha_deg.to_radians()) {
        Ok(d) if !d.is_empty() => d,
        Ok(_) => return (entry(Outcome::Unobservable), None),
        Err(e) => return (entry(Outcome::Infeasible(e.to_string())), None),
    };
    let sampled = sample_tracks(&tracks.restricted(|f| processed.contains(&f), 2), cfg.loop_sample, cfg.sample_seed);
    let solved = build_tdc(rotations, &sampled, &directions, &GaugeConfig::default()).and_then(|p| {
        let s = solve_tdc(&p, &cfg.krot)?;
        Ok((s.centres(&p.rotations), s.gamma_star))
    });
    match solved {
        Ok((centres, gamma_star)) => (
            entry(Outcome::Solved { gamma: gamma_star }),
            Some(LoopClosure { at_frame: t, gamma_star, n_tracks: sampled.len(), n_directions: directions.len(), centres }),
        ),
        Err(e) => {
            log::warn!("frame {t}: loop closure failed: {e}");
            (entry(Outcome::Infeasible(e.to_string())), None)
        }
    }
}

/// Loop events from camera proximity: frame `k` matches every frame at
/// least `min_gap` keyframes older whose centre lies closer than `radius`.
pub fn detect_loops_proximity(poses: &BTreeMap<FrameId, KeyframePose>, radius: f64, min_gap: usize) -> Vec<LoopEvent> {
    let frames: Vec<(FrameId, Vector3<f64>)> = poses.iter().map(|(f, p)| (*f, p.centre())).collect();
    let mut events = Vec::new();
    for (i, (f, c)) in frames.iter().enumerate() {
        let older = &frames[..i.saturating_sub(min_gap.max(1) - 1)];
        let matched: Vec<FrameId> = older.iter().filter(|(_, cj)| (cj - c).norm() < radius).map(|(j, _)| *j).collect();
        if !matched.is_empty() {
            events.push(LoopEvent { at_frame: *f, matched_frames: matched });
        }
    }
    events
}

/// Per-keyframe solve times of incremental rotation averaging and of
/// windowed bundle adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct RuntimeSeries {
    pub rows: Vec<(FrameId, f64, f64)>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

impl RuntimeSeries {
    pub fn median_rotavg(&self) -> f64 {
        median(self.rows.iter().map(|r| r.1).collect())
    }

    pub fn median_ba(&self) -> f64 {
        median(self.rows.iter().map(|r| r.2).collect())
    }

    /// Median BA time over median rotation-averaging time.
    pub fn median_ratio(&self) -> f64 {
        self.median_ba() / self.median_rotavg()
    }

    /// `frame_id,rotavg_secs,ba_secs,ratio` rows and a `median` footer.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), IoError> {
        let rows = self.rows.iter().map(|(f, r, b)| (f.to_string(), vec![*r, *b, b / r]));
        let footer = std::iter::once(("median".to_string(), vec![self.median_rotavg(), self.median_ba(), self.median_ratio()]));
        write_table(w, &["frame_id", "rotavg_secs", "ba_secs", "ratio"], rows.chain(footer))
    }
}

/// Times both incremental back ends on the same keyframes. The first
/// `window` keyframes are warm-up and not reported.
pub fn compare_runtime(keyframes: &[FrameId], tracks: &TrackSet, cfg: &PipelineConfig, ba: &BaSlamConfig) -> Result<RuntimeSeries, PipelineError> {
    cfg.validate()?;
    let source = TrackMotionSource { tracks, cfg: cfg.relmotion.clone(), min_shared: cfg.min_shared };
    let mut rot_times = BTreeMap::new();
    if let Some(&first) = keyframes.first() {
        let mut graph = CovisibilityGraph::new();
        graph.add_node(first);
        let mut est = initial_estimate(first);
        for (i, &t) in keyframes.iter().enumerate().skip(1) {
            link_keyframe(&mut graph, &source, &keyframes[..i], t, cfg.window);
            let start = Instant::now();
            est = average_window(&graph, &est, &keyframes[..i], t, cfg)?;
            rot_times.insert(t, start.elapsed().as_secs_f64());
        }
    }
    let ba_cfg = BaSlamConfig { window: cfg.window, ..ba.clone() };
    let ba_run = run_ba_slam(keyframes, tracks, &BTreeSet::new(), &ba_cfg)?;
    let ba_times: BTreeMap<FrameId, f64> = ba_run.step_times.into_iter().collect();
    let rows = keyframes
        .iter()
        .skip(cfg.window)
        .filter_map(|f| Some((*f, *rot_times.get(f)?, *ba_times.get(f)?)))
        .collect();
    Ok(RuntimeSeries { rows })
}
