//! Continuous-run and single-trial evaluation.
//!
//! Time is kept on an integer nanosecond clock so that the budget identity
//! (ticks + inference + resets = elapsed) holds exactly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill;
use crate::error::{Error, Result};
use crate::flowmatch::{self, standard_normal_chunk};
use crate::guidance::{GuidanceConfig, Guided};
use crate::model::{VelocityField, VelocityModel};
use crate::simenv::{ExpertConfig, ExpertController, ResetKind, SimEnv, StateView, TaskSpec, WorldConfig};
use crate::traj::{ActionChunk, InstructionTag, Observation};

const NS_PER_S: f64 = 1e9;

fn to_ns(seconds: f64) -> u64 {
    (seconds * NS_PER_S).round() as u64
}

fn to_s(ns: u64) -> f64 {
    ns as f64 / NS_PER_S
}

/// Something that turns observations into action chunks.
pub trait Policy {
    /// Rows per sampled chunk.
    fn horizon(&self) -> usize;

    fn sample(&mut self, obs: &Observation) -> Result<ActionChunk>;

    /// Called at the start of every cycle.
    fn begin_cycle(&mut self) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum RunMode {
    Continuous,
    SingleTrial { episodes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Run length in simulated seconds.
    pub duration: f64,
    /// Chunk rows executed per inference; `None` executes the whole chunk.
    pub exec_horizon: Option<usize>,
    /// Simulated seconds charged per sampler call.
    pub inference_cost: f64,
    pub curated_reset_cost: f64,
    pub maintenance_reset_cost: f64,
    /// Consecutive interventions that trigger a maintenance reset instead of a curated one.
    pub maintenance_after: usize,
    pub mode: RunMode,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            duration: 3600.0,
            exec_horizon: None,
            inference_cost: TEACHER_INFERENCE_COST,
            curated_reset_cost: 2.0,
            maintenance_reset_cost: 10.0,
            maintenance_after: 5,
            mode: RunMode::Continuous,
            seed: 0,
        }
    }
}

pub const TEACHER_INFERENCE_COST: f64 = 0.25;
pub const STUDENT_INFERENCE_COST: f64 = 0.05;

impl RunConfig {
    pub fn validate(&self, chunk_horizon: usize) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::Config("run duration must be positive".into()));
        }
        if let Some(k) = self.exec_horizon {
            if k == 0 || k > chunk_horizon {
                return Err(Error::Config(format!(
                    "execution horizon {k} must be in 1..={chunk_horizon}"
                )));
            }
        }
        if self.inference_cost < 0.0 || self.curated_reset_cost < 0.0 || self.maintenance_reset_cost < 0.0 {
            return Err(Error::Config("costs must be non-negative".into()));
        }
        if self.maintenance_after == 0 {
            return Err(Error::Config("maintenance_after must be >= 1".into()));
        }
        if let RunMode::SingleTrial { episodes: 0 } = self.mode {
            return Err(Error::Config("single-trial mode needs at least one episode".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionKind {
    Timeout,
    Abort,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EventKind {
    CycleStart,
    Success,
    Intervention { cause: InterventionKind },
    MaintenanceReset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunEvent {
    #[serde(flatten)]
    pub kind: EventKind,
    pub time: f64,
    pub cycle: usize,
}

/// Labels identifying what was evaluated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLabel {
    pub method: String,
    pub regime: String,
    pub task: String,
    pub seed: u64,
}

impl RunLabel {
    pub fn file_stem(&self) -> String {
        format!("{}__{}__{}__seed{}", self.method, self.regime, self.task, self.seed)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub n_succ: usize,
    pub k_timeout: usize,
    pub k_abort: usize,
    pub maintenance: usize,
    /// The normalizing duration `T`.
    pub elapsed: f64,
    pub ticks: u64,
    pub inference_calls: u64,
    pub reset_time: f64,
    /// Clock reading when the run stopped (may exceed `T` by the discarded tail).
    pub clock_end: f64,
}

impl RunTotals {
    pub fn interventions(&self) -> usize {
        self.k_timeout + self.k_abort
    }
}

/// Event counts folded from a log's events.
pub fn count_events(events: &[RunEvent]) -> (usize, usize, usize, usize) {
    let mut out = (0, 0, 0, 0);
    for e in events {
        match e.kind {
            EventKind::Success => out.0 += 1,
            EventKind::Intervention {
                cause: InterventionKind::Timeout,
            } => out.1 += 1,
            EventKind::Intervention {
                cause: InterventionKind::Abort,
            } => out.2 += 1,
            EventKind::MaintenanceReset => out.3 += 1,
            EventKind::CycleStart => {}
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub label: RunLabel,
    pub config: RunConfig,
    pub time_limit: f64,
    pub totals: RunTotals,
    #[serde(skip)]
    pub events: Vec<RunEvent>,
}

impl RunLog {
    /// Checks the totals against the events.
    pub fn verify(&self) -> Result<()> {
        let (s, t, a, m) = count_events(&self.events);
        let tot = &self.totals;
        if (s, t, a, m) != (tot.n_succ, tot.k_timeout, tot.k_abort, tot.maintenance) {
            return Err(Error::Aggregation(format!(
                "run {}: totals disagree with events",
                self.label.file_stem()
            )));
        }
        let mut last = f64::NEG_INFINITY;
        let mut open_cycle: Option<usize> = None;
        for e in &self.events {
            if e.time < last {
                return Err(Error::Aggregation("events out of order".into()));
            }
            last = e.time;
            match e.kind {
                EventKind::CycleStart => open_cycle = Some(e.cycle),
                EventKind::Success | EventKind::Intervention { .. } => {
                    if open_cycle != Some(e.cycle) {
                        return Err(Error::Aggregation(format!("cycle {} ends without a start", e.cycle)));
                    }
                    open_cycle = None;
                }
                EventKind::MaintenanceReset => {}
            }
        }
        Ok(())
    }

    pub fn summary_path(dir: &Path, label: &RunLabel) -> PathBuf {
        dir.join(format!("{}.summary.json", label.file_stem()))
    }

    pub fn events_path(dir: &Path, label: &RunLabel) -> PathBuf {
        dir.join(format!("{}.events.jsonl", label.file_stem()))
    }

    pub fn save(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let summary = Self::summary_path(dir, &self.label);
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&summary, text + "\n").map_err(|e| Error::io(&summary, e))?;
        let events = Self::events_path(dir, &self.label);
        let file = fs::File::create(&events).map_err(|e| Error::io(&events, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.events {
            let line = serde_json::to_string(e).map_err(|e| Error::Config(e.to_string()))?;
            writeln!(w, "{line}").map_err(|err| Error::io(&events, err))?;
        }
        w.flush().map_err(|e| Error::io(&events, e))?;
        Ok((summary, events))
    }

    /// Loads a run from its summary file; the events file is found next to it.
    pub fn load(summary: &Path) -> Result<Self> {
        let text = fs::read_to_string(summary).map_err(|e| Error::io(summary, e))?;
        let mut log: RunLog = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: summary.to_path_buf(),
            record: 0,
            reason: e.to_string(),
        })?;
        let dir = summary.parent().unwrap_or(Path::new("."));
        let events = Self::events_path(dir, &log.label);
        let file = fs::File::open(&events).map_err(|e| Error::io(&events, e))?;
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&events, e))?;
            if line.trim().is_empty() {
                continue;
            }
            log.events.push(serde_json::from_str(&line).map_err(|e| Error::Format {
                path: events.clone(),
                record: i,
                reason: e.to_string(),
            })?);
        }
        log.verify()?;
        Ok(log)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkExecution {
    pub ticks: usize,
    pub success: bool,
    /// Simulated seconds spent executing (inference excluded).
    pub elapsed: f64,
}

/// Executes rows `0..k` of `chunk`, stopping right after the first tick
/// at which the task succeeds.
pub fn execute_chunk(env: &mut SimEnv, chunk: &ActionChunk, k: usize, task: &TaskSpec) -> ChunkExecution {
    let k = k.min(chunk.horizon);
    let mut ticks = 0;
    let mut success = false;
    for row in chunk.rows().take(k) {
        env.step(row);
        ticks += 1;
        if env.success(task) {
            success = true;
            break;
        }
    }
    ChunkExecution {
        ticks,
        success,
        elapsed: ticks as f64 / env.cfg.control_hz,
    }
}

enum CycleEnd {
    Success(u64),
    Intervention(u64, InterventionKind),
    /// The run ended mid-cycle.
    Truncated,
}

struct Clock {
    now: u64,
    end: u64,
    tick: u64,
    inference: u64,
    ticks: u64,
    inference_calls: u64,
    reset: u64,
}

fn run_cycle(
    policy: &mut dyn Policy,
    env: &mut SimEnv,
    task: &TaskSpec,
    k: usize,
    clock: &mut Clock,
    respect_end: bool,
) -> CycleEnd {
    let start = clock.now;
    let deadline = start + to_ns(task.time_limit);
    let tag = InstructionTag::Task(task.id);
    loop {
        if respect_end && clock.now >= clock.end {
            return CycleEnd::Truncated;
        }
        if clock.now + clock.inference >= deadline {
            return CycleEnd::Intervention(clock.now, InterventionKind::Timeout);
        }
        let mut obs = env.observe(tag);
        obs.sim_time = to_s(clock.now);
        clock.now += clock.inference;
        clock.inference_calls += 1;
        let chunk = match policy.sample(&obs) {
            Ok(c) if c.is_finite() => c,
            _ => return CycleEnd::Intervention(clock.now, InterventionKind::Abort),
        };
        let mut limit = k.min(chunk.horizon);
        limit = limit.min(((deadline - clock.now).div_ceil(clock.tick)) as usize);
        if respect_end {
            limit = limit.min((clock.end.saturating_sub(clock.now)).div_ceil(clock.tick) as usize);
        }
        let exec = execute_chunk(env, &chunk, limit, task);
        clock.now += exec.ticks as u64 * clock.tick;
        clock.ticks += exec.ticks as u64;
        if exec.success {
            return CycleEnd::Success(clock.now);
        }
        if clock.now >= deadline {
            return CycleEnd::Intervention(clock.now, InterventionKind::Timeout);
        }
    }
}

/// Runs the continuous protocol for `cfg.duration` simulated seconds.
pub fn run_continuous(
    policy: &mut dyn Policy,
    world: &WorldConfig,
    tasks: &[TaskSpec],
    task: &TaskSpec,
    cfg: &RunConfig,
    label: RunLabel,
) -> Result<RunLog> {
    cfg.validate(policy.horizon())?;
    let mut env = SimEnv::new(world.clone(), tasks.to_vec(), cfg.seed)?;
    let k = cfg.exec_horizon.unwrap_or(policy.horizon());
    let mut clock = Clock {
        now: 0,
        end: to_ns(cfg.duration),
        tick: to_ns(world.dt()),
        inference: to_ns(cfg.inference_cost),
        ticks: 0,
        inference_calls: 0,
        reset: 0,
    };
    let mut events = Vec::new();
    let mut totals = RunTotals::default();
    let mut consecutive = 0usize;
    let mut cycle = 0usize;
    while clock.now < clock.end {
        events.push(RunEvent {
            kind: EventKind::CycleStart,
            time: to_s(clock.now),
            cycle,
        });
        policy.begin_cycle();
        match run_cycle(policy, &mut env, task, k, &mut clock, true) {
            CycleEnd::Truncated => {
                events.pop_if(|e| e.kind == EventKind::CycleStart && e.cycle == cycle);
                break;
            }
            CycleEnd::Success(t) if t <= clock.end => {
                events.push(RunEvent {
                    kind: EventKind::Success,
                    time: to_s(t),
                    cycle,
                });
                totals.n_succ += 1;
                consecutive = 0;
                env.reset(task, ResetKind::Success);
            }
            CycleEnd::Intervention(t, cause) if t <= clock.end => {
                events.push(RunEvent {
                    kind: EventKind::Intervention { cause },
                    time: to_s(t),
                    cycle,
                });
                match cause {
                    InterventionKind::Timeout => totals.k_timeout += 1,
                    InterventionKind::Abort => totals.k_abort += 1,
                }
                consecutive += 1;
                if consecutive >= cfg.maintenance_after {
                    events.push(RunEvent {
                        kind: EventKind::MaintenanceReset,
                        time: to_s(t),
                        cycle,
                    });
                    totals.maintenance += 1;
                    consecutive = 0;
                    env.reset(task, ResetKind::Maintenance);
                    clock.now += to_ns(cfg.maintenance_reset_cost);
                    clock.reset += to_ns(cfg.maintenance_reset_cost);
                } else {
                    env.reset(task, ResetKind::Curated);
                    clock.now += to_ns(cfg.curated_reset_cost);
                    clock.reset += to_ns(cfg.curated_reset_cost);
                }
            }
            // Ended past T: an unfinished cycle.
            _ => {
                events.pop_if(|e| e.kind == EventKind::CycleStart && e.cycle == cycle);
                break;
            }
        }
        cycle += 1;
    }
    totals.elapsed = cfg.duration;
    totals.ticks = clock.ticks;
    totals.inference_calls = clock.inference_calls;
    totals.reset_time = to_s(clock.reset);
    totals.clock_end = to_s(clock.now);
    let log = RunLog {
        label,
        config: cfg.clone(),
        time_limit: task.time_limit,
        totals,
        events,
    };
    log.verify()?;
    Ok(log)
}

/// Budget identity: the stopping clock equals executed ticks plus
/// inference and reset charges, computed in integer nanoseconds.
pub fn budget_identity_holds(log: &RunLog, world: &WorldConfig) -> bool {
    let t = &log.totals;
    let lhs = to_ns(t.clock_end);
    let rhs = t.ticks * to_ns(world.dt()) + t.inference_calls * to_ns(log.config.inference_cost) + to_ns(t.reset_time);
    lhs == rhs
}

/// Independent episodes from curated resets; an episode succeeds iff the
/// predicate holds within the task's time limit.
pub fn run_single_trial(
    policy: &mut dyn Policy,
    world: &WorldConfig,
    tasks: &[TaskSpec],
    task: &TaskSpec,
    episodes: usize,
    cfg: &RunConfig,
) -> Result<Vec<bool>> {
    cfg.validate(policy.horizon())?;
    let k = cfg.exec_horizon.unwrap_or(policy.horizon());
    let mut out = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(ep as u64);
        let mut env = SimEnv::new(world.clone(), tasks.to_vec(), seed)?;
        let mut clock = Clock {
            now: 0,
            end: u64::MAX,
            tick: to_ns(world.dt()),
            inference: to_ns(cfg.inference_cost),
            ticks: 0,
            inference_calls: 0,
            reset: 0,
        };
        policy.begin_cycle();
        let end = run_cycle(policy, &mut env, task, k, &mut clock, false);
        out.push(matches!(end, CycleEnd::Success(_)));
    }
    Ok(out)
}

/// The scripted expert as a one-row policy.
pub struct ExpertPolicy {
    world: WorldConfig,
    task: TaskSpec,
    ctl: ExpertController,
}

impl ExpertPolicy {
    pub fn new(world: WorldConfig, task: TaskSpec, cfg: ExpertConfig, seed: u64) -> Self {
        Self {
            world,
            task,
            ctl: ExpertController::new(cfg, 0.0, seed),
        }
    }
}

impl Policy for ExpertPolicy {
    fn horizon(&self) -> usize {
        1
    }

    fn sample(&mut self, obs: &Observation) -> Result<ActionChunk> {
        let view = StateView::parse(&obs.state).map_err(|e| Error::Sampling(e.to_string()))?;
        let a = self.ctl.act(&self.world, &view, &self.task);
        ActionChunk::from_rows(&[a.to_vec()])
    }

    fn begin_cycle(&mut self) {
        self.ctl.begin_cycle();
    }
}

/// Emits zero chunks: never moves.
pub struct ZeroPolicy {
    pub horizon: usize,
    pub dim: usize,
}

impl Policy for ZeroPolicy {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn sample(&mut self, _: &Observation) -> Result<ActionChunk> {
        Ok(ActionChunk::zeros(self.horizon, self.dim))
    }
}

/// Which sampler a learned policy uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Multi-step Euler in denoising time.
    Teacher { steps: usize },
    /// Two-step (or `steps`-step) Euler in progress.
    Student { steps: usize },
}

/// A trained velocity model driven by one of the samplers.
pub struct FlowPolicy {
    pub model: VelocityModel,
    pub sampler: Sampler,
    pub guidance: GuidanceConfig,
    pub tau_min: f64,
    rng: ChaCha8Rng,
}

impl FlowPolicy {
    pub fn new(model: VelocityModel, sampler: Sampler, guidance: GuidanceConfig, seed: u64) -> Self {
        Self {
            model,
            sampler,
            guidance,
            tau_min: 0.001,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Policy for FlowPolicy {
    fn horizon(&self) -> usize {
        self.model.horizon()
    }

    fn sample(&mut self, obs: &Observation) -> Result<ActionChunk> {
        let (h, d) = self.model.chunk_shape();
        let noise = standard_normal_chunk(h, d, &mut self.rng);
        let field = Guided {
            field: &self.model,
            cfg: self.guidance,
        };
        let x = match self.sampler {
            Sampler::Teacher { steps } => flowmatch::sample_chunk_from_noise(&field, obs, noise, steps, self.tau_min)?,
            Sampler::Student { steps } => distill::student_sample_from_noise(&field, obs, noise, steps, self.tau_min)?,
        };
        Ok(x.clipped(self.model.action_clip()))
    }
}
