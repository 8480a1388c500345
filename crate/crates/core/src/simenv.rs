//! Deterministic 2D kinematic pick-and-place world.
//!
//! A single gripper moves in the unit square and carries one object at a
//! time to one of the registered target regions. Actions are per-tick
//! commands `[dx, dy, g]`: the translational part is scaled by
//! `action_scale` world units per tick, and `g in [-1, 1]` commands the
//! gripper aperture `(g + 1) / 2` (so `-1` closes and `+1` opens).

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traj::{Dataset, DatasetMeta, Frame, InstructionTag, Observation, Regime, Trajectory};

pub const ACTION_DIM: usize = 3;

/// Recorded on success frames: stand still with the gripper open.
pub const IDLE_ACTION: [f64; 3] = [0.0, 0.0, 1.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn contains(&self, p: [f64; 2]) -> bool {
        (0..2).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: [f64; 2]) -> [f64; 2] {
        [
            p[0].clamp(self.min[0], self.max[0]),
            p[1].clamp(self.min[1], self.max[1]),
        ]
    }

    pub fn sample(&self, rng: &mut impl Rng) -> [f64; 2] {
        [
            self.min[0] + (self.max[0] - self.min[0]) * rng.random::<f64>(),
            self.min[1] + (self.max[1] - self.min[1]) * rng.random::<f64>(),
        ]
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * (self.min[0] + self.max[0]), 0.5 * (self.min[1] + self.max[1])]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub control_hz: f64,
    /// World units moved per tick for a unit translational command.
    pub action_scale: f64,
    pub action_clip: f64,
    pub workspace: Rect,
    pub object_radius: f64,
    /// Extra reach beyond the object surface within which a closing gripper grasps.
    pub grasp_dist: f64,
    /// Aperture below which a closing gripper grasps.
    pub grasp_threshold: f64,
    /// Aperture above which a held object is released.
    pub release_threshold: f64,
    /// Maximum aperture change per tick.
    pub aperture_rate: f64,
    pub home: [f64; 2],
    /// Region a curated reset draws the object from.
    pub spawn_region: Rect,
    /// Region drift respawns are confined to.
    pub drift_region: Rect,
    /// Conveyor period in ticks.
    pub conveyor_period_ticks: u64,
    pub conveyor_open_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            control_hz: 20.0,
            action_scale: 0.1,
            action_clip: 1.0,
            workspace: Rect {
                min: [0.0, 0.0],
                max: [1.0, 1.0],
            },
            object_radius: 0.03,
            grasp_dist: 0.02,
            grasp_threshold: 0.3,
            release_threshold: 0.5,
            aperture_rate: 0.25,
            home: [0.5, 0.9],
            spawn_region: Rect {
                min: [0.15, 0.3],
                max: [0.35, 0.7],
            },
            drift_region: Rect {
                min: [0.05, 0.08],
                max: [0.45, 0.92],
            },
            conveyor_period_ticks: 80,
            conveyor_open_fraction: 0.5,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.control_hz > 0.0) || !(self.action_scale > 0.0) || !(self.action_clip > 0.0) {
            return Err(Error::Config(
                "control_hz, action_scale and action_clip must be positive".into(),
            ));
        }
        if !(self.object_radius > 0.0) || !(self.grasp_dist >= 0.0) || !(self.aperture_rate > 0.0) {
            return Err(Error::Config("invalid object or gripper geometry".into()));
        }
        if self.conveyor_period_ticks == 0 {
            return Err(Error::Config("conveyor period must be at least one tick".into()));
        }
        for r in [&self.spawn_region, &self.drift_region] {
            if !self.workspace.contains(r.min) || !self.workspace.contains(r.max) {
                return Err(Error::Config(
                    "spawn and drift regions must lie in the workspace".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.control_hz
    }

    /// Default precision distance for segmentation: 1.5 object radii plus
    /// the gripper reach margin used by the scripted expert.
    pub fn default_precision_distance(&self) -> f64 {
        1.5 * self.object_radius + 0.055
    }
}

/// Declarative success rule: the object rests (not held) inside a circular
/// target region, optionally only while the conveyor window is open.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessRule {
    pub center: [f64; 2],
    pub radius: f64,
    pub require_conveyor_open: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: u32,
    pub name: String,
    pub success: SuccessRule,
    /// Seconds allowed per cycle before a timeout intervention.
    pub time_limit: f64,
    /// Half-width of the uniform drift applied to the spawn anchor after a success.
    pub sigma_drift: f64,
}

/// The two registered tasks: `pick-place` (id 0) and `conveyor-pack` (id 1).
pub fn default_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            id: 0,
            name: "pick-place".into(),
            success: SuccessRule {
                center: [0.8, 0.3],
                radius: 0.06,
                require_conveyor_open: false,
            },
            time_limit: 15.0,
            sigma_drift: 0.05,
        },
        TaskSpec {
            id: 1,
            name: "conveyor-pack".into(),
            success: SuccessRule {
                center: [0.8, 0.72],
                radius: 0.06,
                require_conveyor_open: true,
            },
            time_limit: 30.0,
            sigma_drift: 0.05,
        },
    ]
}

pub fn find_task<'a>(tasks: &'a [TaskSpec], name_or_id: &str) -> Result<&'a TaskSpec> {
    tasks
        .iter()
        .find(|t| t.name == name_or_id || t.id.to_string() == name_or_id)
        .ok_or_else(|| Error::Argument(format!("unknown task '{name_or_id}'")))
}

pub fn task_by_id(tasks: &[TaskSpec], id: u32) -> Result<&TaskSpec> {
    tasks
        .iter()
        .find(|t| t.id == id)
        .ok_or_else(|| Error::Argument(format!("unknown task id {id}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper: [f64; 2],
    pub aperture: f64,
    pub object: [f64; 2],
    pub held: bool,
    /// Target centers in task-table order.
    pub targets: Vec<[f64; 2]>,
    pub tick: u64,
    pub conveyor_tick: u64,
    /// Point drift respawns perturb.
    pub anchor: [f64; 2],
}

impl WorldState {
    /// Gripper home and open, object at the canonical spawn point.
    pub fn initial(cfg: &WorldConfig, tasks: &[TaskSpec]) -> Self {
        let anchor = cfg.spawn_region.center();
        Self {
            gripper: cfg.home,
            aperture: 1.0,
            object: anchor,
            held: false,
            targets: tasks.iter().map(|t| t.success.center).collect(),
            tick: 0,
            conveyor_tick: 0,
            anchor,
        }
    }

    pub fn sim_time(&self, cfg: &WorldConfig) -> f64 {
        self.tick as f64 / cfg.control_hz
    }

    pub fn conveyor_phase(&self, cfg: &WorldConfig) -> f64 {
        (self.conveyor_tick % cfg.conveyor_period_ticks) as f64 / cfg.conveyor_period_ticks as f64
    }

    pub fn conveyor_open(&self, cfg: &WorldConfig) -> bool {
        self.conveyor_phase(cfg) < cfg.conveyor_open_fraction
    }

    /// Observation vector layout: gripper (2), aperture, held, object (2),
    /// object - gripper (2), tanh(20 (object - gripper)) (2), then for each
    /// target: target - gripper (2) and its tanh (2), then conveyor
    /// sin, cos and open flag.
    pub fn observe(&self, cfg: &WorldConfig, instruction: InstructionTag) -> Observation {
        let mut s = Vec::with_capacity(state_dim(self.targets.len()));
        let g = self.gripper;
        s.extend_from_slice(&g);
        s.push(self.aperture);
        s.push(if self.held { 1.0 } else { 0.0 });
        s.extend_from_slice(&self.object);
        let push_rel = |s: &mut Vec<f64>, p: [f64; 2]| {
            let r = [p[0] - g[0], p[1] - g[1]];
            s.extend_from_slice(&r);
            s.push((20.0 * r[0]).tanh());
            s.push((20.0 * r[1]).tanh());
        };
        push_rel(&mut s, self.object);
        for &t in &self.targets {
            push_rel(&mut s, t);
        }
        let angle = TAU * self.conveyor_phase(cfg);
        s.push(angle.sin());
        s.push(angle.cos());
        s.push(if self.conveyor_open(cfg) { 1.0 } else { 0.0 });
        Observation {
            state: s,
            instruction,
            sim_time: self.sim_time(cfg),
        }
    }
}

pub fn state_dim(num_targets: usize) -> usize {
    13 + 4 * num_targets
}

/// Typed view over an observation state vector.
#[derive(Clone, Debug, PartialEq)]
pub struct StateView {
    pub gripper: [f64; 2],
    pub aperture: f64,
    pub held: bool,
    pub object: [f64; 2],
    pub targets: Vec<[f64; 2]>,
    pub conveyor_open: bool,
}

impl StateView {
    pub fn parse(state: &[f64]) -> Result<Self> {
        if state.len() < 13 || !(state.len() - 13).is_multiple_of(4) {
            return Err(Error::Segmentation(format!(
                "state of length {} does not expose gripper, object and target positions",
                state.len()
            )));
        }
        let n = (state.len() - 13) / 4;
        let g = [state[0], state[1]];
        let targets = (0..n)
            .map(|k| {
                let base = 10 + 4 * k;
                [g[0] + state[base], g[1] + state[base + 1]]
            })
            .collect();
        Ok(Self {
            gripper: g,
            aperture: state[2],
            held: state[3] > 0.5,
            object: [state[4], state[5]],
            targets,
            conveyor_open: state[state.len() - 1] > 0.5,
        })
    }
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Advances the world by one control tick.
pub fn step(cfg: &WorldConfig, state: &WorldState, action: &[f64]) -> WorldState {
    let mut next = state.clone();
    let a = |i: usize| {
        action
            .get(i)
            .copied()
            .filter(|v| v.is_finite())
            .unwrap_or(0.0)
            .clamp(-cfg.action_clip, cfg.action_clip)
    };
    next.gripper = cfg.workspace.clamp([
        state.gripper[0] + a(0) * cfg.action_scale,
        state.gripper[1] + a(1) * cfg.action_scale,
    ]);
    let goal = ((a(2).clamp(-1.0, 1.0) + 1.0) / 2.0).clamp(0.0, 1.0);
    let delta = (goal - state.aperture).clamp(-cfg.aperture_rate, cfg.aperture_rate);
    next.aperture = (state.aperture + delta).clamp(0.0, 1.0);

    if state.held {
        if next.aperture > cfg.release_threshold {
            next.held = false;
        }
        next.object = next.gripper;
    } else if state.aperture >= cfg.grasp_threshold
        && next.aperture < cfg.grasp_threshold
        && dist(next.gripper, state.object) <= cfg.object_radius + cfg.grasp_dist
    {
        next.held = true;
        next.object = next.gripper;
    }
    next.tick += 1;
    next.conveyor_tick += 1;
    next
}

pub fn check_success(cfg: &WorldConfig, state: &WorldState, task: &TaskSpec) -> bool {
    rule_holds(&task.success, state.object, state.held, state.conveyor_open(cfg))
}

fn rule_holds(rule: &SuccessRule, object: [f64; 2], held: bool, open: bool) -> bool {
    !held && dist(object, rule.center) <= rule.radius && (!rule.require_conveyor_open || open)
}

/// Success predicate evaluated on a recorded observation.
pub fn check_success_view(view: &StateView, task: &TaskSpec) -> bool {
    rule_holds(&task.success, view.object, view.held, view.conveyor_open)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResetKind {
    /// Cycle continuity after a success: the spawn anchor drifts.
    Success,
    /// Operator reset: scene re-randomized, gripper home.
    Curated,
    /// Curated reset that also restarts the conveyor.
    Maintenance,
}

pub fn respawn(
    cfg: &WorldConfig,
    state: &WorldState,
    task: &TaskSpec,
    kind: ResetKind,
    rng: &mut impl Rng,
) -> WorldState {
    let mut next = state.clone();
    match kind {
        ResetKind::Success => {
            let s = task.sigma_drift;
            let jitter = [
                s * (2.0 * rng.random::<f64>() - 1.0),
                s * (2.0 * rng.random::<f64>() - 1.0),
            ];
            next.anchor = cfg
                .drift_region
                .clamp([state.anchor[0] + jitter[0], state.anchor[1] + jitter[1]]);
            next.object = next.anchor;
            next.held = false;
        }
        ResetKind::Curated | ResetKind::Maintenance => {
            next.object = cfg.spawn_region.sample(rng);
            next.anchor = next.object;
            next.held = false;
            next.gripper = cfg.home;
            next.aperture = 1.0;
            if kind == ResetKind::Maintenance {
                next.conveyor_tick = 0;
            }
        }
    }
    next
}

/// World plus its random stream.
#[derive(Clone, Debug)]
pub struct SimEnv {
    pub cfg: WorldConfig,
    pub tasks: Vec<TaskSpec>,
    pub state: WorldState,
    pub rng: ChaCha8Rng,
}

impl SimEnv {
    /// Fresh environment after an initial curated reset.
    pub fn new(cfg: WorldConfig, tasks: Vec<TaskSpec>, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if tasks.is_empty() {
            return Err(Error::Config("no tasks registered".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let initial = WorldState::initial(&cfg, &tasks);
        let state = respawn(&cfg, &initial, &tasks[0], ResetKind::Curated, &mut rng);
        Ok(Self { cfg, tasks, state, rng })
    }

    pub fn observe(&self, instruction: InstructionTag) -> Observation {
        self.state.observe(&self.cfg, instruction)
    }

    pub fn step(&mut self, action: &[f64]) {
        self.state = step(&self.cfg, &self.state, action);
    }

    pub fn success(&self, task: &TaskSpec) -> bool {
        check_success(&self.cfg, &self.state, task)
    }

    pub fn reset(&mut self, task: &TaskSpec, kind: ResetKind) {
        self.state = respawn(&self.cfg, &self.state, task, kind, &mut self.rng);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    /// Transit speed, world units per second.
    pub v_fast: f64,
    /// Speed inside `approach_dist` of the current goal.
    pub v_slow: f64,
    pub approach_dist: f64,
    /// Uniform per-channel noise, world units per second.
    pub noise_scale: f64,
    pub grasp_tol: f64,
    pub release_tol: f64,
    /// Probability a cycle starts with a mis-aimed grasp (cyclic streams only).
    pub p_fail: f64,
    /// How far short of the object a mis-aimed grasp closes.
    pub fail_offset: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            v_fast: 0.2,
            v_slow: 0.1,
            approach_dist: 0.08,
            noise_scale: 0.02,
            grasp_tol: 0.006,
            release_tol: 0.01,
            p_fail: 0.1,
            fail_offset: 0.07,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_fast > self.v_slow && self.v_slow > 0.0) {
            return Err(Error::Config("expert speeds need v_fast > v_slow > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.p_fail) || !(self.noise_scale >= 0.0) {
            return Err(Error::Config("expert p_fail must be in [0, 1] and noise >= 0".into()));
        }
        Ok(())
    }
}

/// Scripted task expert with the small amount of memory needed for
/// injected grasp failures and recovery.
#[derive(Clone, Debug)]
pub struct ExpertController {
    pub cfg: ExpertConfig,
    pub p_fail: f64,
    misaim: bool,
    recovering: bool,
    rng: ChaCha8Rng,
}

impl ExpertController {
    pub fn new(cfg: ExpertConfig, p_fail: f64, seed: u64) -> Self {
        Self {
            cfg,
            p_fail,
            misaim: false,
            recovering: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Called whenever a new cycle starts; may schedule a failed grasp.
    pub fn begin_cycle(&mut self) {
        self.recovering = false;
        self.misaim = self.p_fail > 0.0 && self.rng.random::<f64>() < self.p_fail;
    }

    pub fn act(&mut self, world: &WorldConfig, view: &StateView, task: &TaskSpec) -> [f64; 3] {
        let open = 1.0;
        let close = -1.0;
        let g = view.gripper;
        if view.held {
            let goal = task.success.center;
            let d = dist(goal, g);
            if d <= self.cfg.release_tol {
                return [0.0, 0.0, open];
            }
            return self.move_toward(world, g, goal, d, close);
        }
        if self.recovering {
            if view.aperture >= 0.95 {
                self.recovering = false;
            } else {
                return [0.0, 0.0, open];
            }
        }
        if view.aperture < world.grasp_threshold {
            // Closed on nothing: back off the failed grasp.
            self.recovering = true;
            self.misaim = false;
            return [0.0, 0.0, open];
        }
        if dist(view.object, task.success.center) <= task.success.radius {
            return [0.0, 0.0, open];
        }
        let aim = if self.misaim {
            let d = dist(g, view.object).max(1e-12);
            [
                view.object[0] + self.cfg.fail_offset * (g[0] - view.object[0]) / d,
                view.object[1] + self.cfg.fail_offset * (g[1] - view.object[1]) / d,
            ]
        } else {
            view.object
        };
        let d = dist(aim, g);
        if d <= self.cfg.grasp_tol || (self.misaim && d <= self.cfg.grasp_tol + 1e-9) {
            return [0.0, 0.0, close];
        }
        if view.aperture < 0.95 {
            // Finish opening before moving in.
            return [0.0, 0.0, open];
        }
        self.move_toward(world, g, aim, d, open)
    }

    fn move_toward(&mut self, world: &WorldConfig, from: [f64; 2], to: [f64; 2], d: f64, grip: f64) -> [f64; 3] {
        let dt = world.dt();
        let speed = if d > self.cfg.approach_dist {
            self.cfg.v_fast
        } else {
            self.cfg.v_slow
        };
        let len = (speed * dt).min(d);
        let mut out = [0.0, 0.0, grip];
        for i in 0..2 {
            let unit = (to[i] - from[i]) / d;
            let noise = if self.cfg.noise_scale > 0.0 {
                self.cfg.noise_scale * dt * (2.0 * self.rng.random::<f64>() - 1.0)
            } else {
                0.0
            };
            out[i] = ((unit * len + noise) / world.action_scale).clamp(-world.action_clip, world.action_clip);
        }
        out
    }
}

#[derive(Clone, Debug)]
enum PlayMode {
    Wander { goal: [f64; 2], speed: f64 },
    Fetch,
    Carry { goal: [f64; 2], speed: f64 },
}

/// Undirected play: wanders between random waypoints and now and then picks
/// the object up, carries it somewhere random, and puts it down.
#[derive(Clone, Debug)]
pub struct PlayController {
    cfg: ExpertConfig,
    mode: PlayMode,
    rng: ChaCha8Rng,
}

impl PlayController {
    pub fn new(cfg: ExpertConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mode = PlayMode::Wander {
            goal: [rng.random(), rng.random()],
            speed: cfg.v_fast,
        };
        Self { cfg, mode, rng }
    }

    fn pick_mode(&mut self, world: &WorldConfig, view: &StateView) {
        let speed = self.cfg.v_slow + (self.cfg.v_fast - self.cfg.v_slow) * self.rng.random::<f64>();
        let goal = world.workspace.clamp([
            0.05 + 0.9 * self.rng.random::<f64>(),
            0.05 + 0.9 * self.rng.random::<f64>(),
        ]);
        self.mode = if view.held {
            PlayMode::Carry { goal, speed }
        } else if self.rng.random::<f64>() < 0.5 {
            PlayMode::Fetch
        } else {
            PlayMode::Wander { goal, speed }
        };
    }

    pub fn act(&mut self, world: &WorldConfig, view: &StateView) -> [f64; 3] {
        let dt = world.dt();
        let g = view.gripper;
        let mv = |to: [f64; 2], speed: f64, rng: &mut ChaCha8Rng, noise_scale: f64, grip: f64| {
            let d = dist(to, g).max(1e-12);
            let len = (speed * dt).min(d);
            let mut out = [0.0, 0.0, grip];
            for i in 0..2 {
                let noise = noise_scale * dt * (2.0 * rng.random::<f64>() - 1.0);
                out[i] = (((to[i] - g[i]) / d * len + noise) / world.action_scale)
                    .clamp(-world.action_clip, world.action_clip);
            }
            out
        };
        match self.mode.clone() {
            PlayMode::Wander { goal, speed } => {
                if dist(goal, g) <= self.cfg.release_tol {
                    self.pick_mode(world, view);
                    return [0.0, 0.0, 1.0];
                }
                if view.aperture < 0.95 && !view.held {
                    return [0.0, 0.0, 1.0];
                }
                mv(goal, speed, &mut self.rng, self.cfg.noise_scale, 1.0)
            }
            PlayMode::Fetch => {
                if view.held {
                    self.pick_mode(world, view);
                    return [0.0, 0.0, -1.0];
                }
                if view.aperture < world.grasp_threshold {
                    self.pick_mode(world, view);
                    return [0.0, 0.0, 1.0];
                }
                let d = dist(view.object, g);
                if d <= self.cfg.grasp_tol {
                    return [0.0, 0.0, -1.0];
                }
                if view.aperture < 0.95 {
                    return [0.0, 0.0, 1.0];
                }
                let speed = if d > self.cfg.approach_dist {
                    self.cfg.v_fast
                } else {
                    self.cfg.v_slow
                };
                mv(view.object, speed, &mut self.rng, self.cfg.noise_scale, 1.0)
            }
            PlayMode::Carry { goal, speed } => {
                if !view.held {
                    self.pick_mode(world, view);
                    return [0.0, 0.0, 1.0];
                }
                if dist(goal, g) <= self.cfg.release_tol {
                    return [0.0, 0.0, 1.0];
                }
                mv(goal, speed, &mut self.rng, self.cfg.noise_scale, -1.0)
            }
        }
    }
}

/// How much data to generate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Amount {
    Episodes(usize),
    Seconds(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub world: WorldConfig,
    pub expert: ExpertConfig,
    /// Longest single stream for play and cyclic data.
    pub max_stream_seconds: f64,
    /// Chunk horizon recorded in the dataset metadata.
    pub horizon: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            expert: ExpertConfig::default(),
            max_stream_seconds: 300.0,
            horizon: 16,
        }
    }
}

/// Generates a dataset. `task` is ignored for play data.
pub fn generate_demos(
    cfg: &GenConfig,
    tasks: &[TaskSpec],
    task: Option<&TaskSpec>,
    regime: Regime,
    amount: Amount,
    seed: u64,
) -> Result<Dataset> {
    cfg.world.validate()?;
    cfg.expert.validate()?;
    let world = &cfg.world;
    let total_ticks = |secs: f64| -> Result<u64> {
        if !(secs > 0.0) {
            return Err(Error::Argument(format!("duration must be positive, got {secs}")));
        }
        Ok((secs * world.control_hz).round() as u64)
    };
    let task_required = || task.ok_or_else(|| Error::Argument(format!("{} data needs a task", regime.as_str())));
    let mut trajectories = Vec::new();
    match regime {
        Regime::Play => {
            let secs = match amount {
                Amount::Seconds(s) => s,
                Amount::Episodes(n) => n as f64 * cfg.max_stream_seconds,
            };
            for (k, ticks) in split_streams(total_ticks(secs)?, cfg, world).into_iter().enumerate() {
                trajectories.push(play_stream(world, tasks, &cfg.expert, ticks, stream_seed(seed, k))?);
            }
        }
        Regime::Noncyclic => {
            let task = task_required()?;
            let mut env_rng = ChaCha8Rng::seed_from_u64(seed);
            let mut frames_so_far = 0u64;
            let mut k = 0usize;
            loop {
                let done = match amount {
                    Amount::Episodes(n) => k >= n,
                    Amount::Seconds(s) => frames_so_far >= total_ticks(s)?,
                };
                if done {
                    break;
                }
                let ep_seed = env_rng.random::<u64>();
                let traj = noncyclic_episode(world, tasks, task, &cfg.expert, ep_seed)
                    .map_err(|reason| Error::Generation { seed, reason })?;
                frames_so_far += traj.len() as u64;
                trajectories.push(traj);
                k += 1;
            }
        }
        Regime::Cyclic => {
            let task = task_required()?;
            let secs = match amount {
                Amount::Seconds(s) => s,
                Amount::Episodes(n) => n as f64 * cfg.max_stream_seconds,
            };
            for (k, ticks) in split_streams(total_ticks(secs)?, cfg, world).into_iter().enumerate() {
                let traj = cyclic_stream(world, tasks, task, &cfg.expert, ticks, stream_seed(seed, k))
                    .map_err(|reason| Error::Generation { seed, reason })?;
                trajectories.push(traj);
            }
        }
    }
    let ds = Dataset {
        meta: DatasetMeta {
            regime,
            tasks: tasks.to_vec(),
            horizon: cfg.horizon,
            action_dim: ACTION_DIM,
            state_dim: state_dim(tasks.len()),
            control_hz: world.control_hz,
        },
        trajectories,
    };
    ds.validate()?;
    Ok(ds)
}

fn stream_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1)
}

fn split_streams(total: u64, cfg: &GenConfig, world: &WorldConfig) -> Vec<u64> {
    let max = ((cfg.max_stream_seconds * world.control_hz).round() as u64).max(1);
    let mut out = Vec::new();
    let mut left = total;
    while left > 0 {
        let n = left.min(max);
        out.push(n);
        left -= n;
    }
    out
}

fn play_stream(
    world: &WorldConfig,
    tasks: &[TaskSpec],
    expert: &ExpertConfig,
    ticks: u64,
    seed: u64,
) -> Result<Trajectory> {
    let mut env = SimEnv::new(world.clone(), tasks.to_vec(), seed)?;
    let mut ctl = PlayController::new(expert.clone(), seed ^ 0x5bd1_e995);
    let mut frames = Vec::with_capacity(ticks as usize);
    for _ in 0..ticks {
        let obs = env.observe(InstructionTag::NullToken);
        let view = StateView::parse(&obs.state)?;
        let action = ctl.act(world, &view).to_vec();
        env.step(&action);
        frames.push(Frame { obs, action });
    }
    Ok(Trajectory {
        frames,
        phase_labels: None,
        control_hz: world.control_hz,
        success_frames: Vec::new(),
    })
}

/// Ticks the expert may spend on one cycle before generation gives up.
fn cycle_budget(world: &WorldConfig, task: &TaskSpec) -> u64 {
    (3.0 * task.time_limit * world.control_hz).ceil() as u64
}

fn noncyclic_episode(
    world: &WorldConfig,
    tasks: &[TaskSpec],
    task: &TaskSpec,
    expert: &ExpertConfig,
    seed: u64,
) -> std::result::Result<Trajectory, String> {
    let mut env = SimEnv::new(world.clone(), tasks.to_vec(), seed).map_err(|e| e.to_string())?;
    let mut ctl = ExpertController::new(expert.clone(), 0.0, seed ^ 0x2545_f491);
    ctl.begin_cycle();
    let tag = InstructionTag::Task(task.id);
    let mut frames = Vec::new();
    for _ in 0..cycle_budget(world, task) {
        let obs = env.observe(tag);
        if env.success(task) {
            let idx = frames.len();
            frames.push(Frame {
                obs,
                action: IDLE_ACTION.to_vec(),
            });
            return Ok(Trajectory {
                frames,
                phase_labels: None,
                control_hz: world.control_hz,
                success_frames: vec![idx],
            });
        }
        let view = StateView::parse(&obs.state).map_err(|e| e.to_string())?;
        let action = ctl.act(world, &view, task).to_vec();
        env.step(&action);
        frames.push(Frame { obs, action });
    }
    Err(format!(
        "expert did not complete '{}' within its step budget",
        task.name
    ))
}

fn cyclic_stream(
    world: &WorldConfig,
    tasks: &[TaskSpec],
    task: &TaskSpec,
    expert: &ExpertConfig,
    ticks: u64,
    seed: u64,
) -> std::result::Result<Trajectory, String> {
    let mut env = SimEnv::new(world.clone(), tasks.to_vec(), seed).map_err(|e| e.to_string())?;
    let mut ctl = ExpertController::new(expert.clone(), expert.p_fail, seed ^ 0x2545_f491);
    ctl.begin_cycle();
    let tag = InstructionTag::Task(task.id);
    let budget = cycle_budget(world, task);
    let mut frames = Vec::with_capacity(ticks as usize);
    let mut success_frames = Vec::new();
    let mut cycle_ticks = 0u64;
    while (frames.len() as u64) < ticks {
        let obs = env.observe(tag);
        if env.success(task) {
            success_frames.push(frames.len());
            frames.push(Frame {
                obs,
                action: IDLE_ACTION.to_vec(),
            });
            env.reset(task, ResetKind::Success);
            ctl.begin_cycle();
            cycle_ticks = 0;
            continue;
        }
        if cycle_ticks >= budget {
            return Err(format!("expert stalled on '{}' in a cyclic stream", task.name));
        }
        let view = StateView::parse(&obs.state).map_err(|e| e.to_string())?;
        let action = ctl.act(world, &view, task).to_vec();
        env.step(&action);
        frames.push(Frame { obs, action });
        cycle_ticks += 1;
    }
    Ok(Trajectory {
        frames,
        phase_labels: None,
        control_hz: world.control_hz,
        success_frames,
    })
}

/// Frames at which the instructed task's success predicate becomes true.
pub fn replay_successes(traj: &Trajectory, tasks: &[TaskSpec]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    let mut prev = false;
    for (i, frame) in traj.frames.iter().enumerate() {
        let now = match frame.obs.instruction {
            InstructionTag::NullToken => false,
            InstructionTag::Task(id) => {
                let task = task_by_id(tasks, id)?;
                check_success_view(&StateView::parse(&frame.obs.state)?, task)
            }
        };
        if now && !prev {
            out.push(i);
        }
        prev = now;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (WorldConfig, Vec<TaskSpec>) {
        (WorldConfig::default(), default_tasks())
    }

    #[test]
    fn zero_action_only_advances_time() {
        let (cfg, tasks) = setup();
        let s0 = WorldState::initial(&cfg, &tasks);
        let s1 = step(&cfg, &s0, &[0.0, 0.0, 1.0]);
        assert_eq!(s1.gripper, s0.gripper);
        assert_eq!(s1.aperture, s0.aperture);
        assert_eq!(s1.object, s0.object);
        assert_eq!(s1.tick, 1);
        assert_eq!(s1.conveyor_tick, 1);
    }

    #[test]
    fn displacement_clamps_at_workspace_edge() {
        let (cfg, tasks) = setup();
        let mut s = WorldState::initial(&cfg, &tasks);
        s.gripper = [0.97, 0.02];
        let s1 = step(&cfg, &s, &[1.0, -1.0, 1.0]);
        assert_eq!(s1.gripper, [1.0, 0.0]);
    }

    #[test]
    fn hand_simulated_grasp_sequence() {
        let (cfg, tasks) = setup();
        let mut s = WorldState::initial(&cfg, &tasks);
        s.gripper = [0.5, 0.5];
        s.object = [0.54, 0.5];
        // Move 0.01 right while closing: aperture 1 -> 0.75.
        let s1 = step(&cfg, &s, &[0.1, 0.0, -1.0]);
        assert!((s1.gripper[0] - 0.51).abs() < 1e-15);
        assert_eq!(s1.aperture, 0.75);
        assert!(!s1.held);
        let s2 = step(&cfg, &s1, &[0.0, 0.0, -1.0]);
        assert_eq!(s2.aperture, 0.5);
        // Crossing 0.3 with the object 0.03 away (< 0.05 reach) grasps.
        let s3 = step(&cfg, &s2, &[0.0, 0.0, -1.0]);
        assert_eq!(s3.aperture, 0.25);
        assert!(s3.held);
        assert_eq!(s3.object, s3.gripper);
    }

    #[test]
    fn predicate_table() {
        let (cfg, tasks) = setup();
        let mut s = WorldState::initial(&cfg, &tasks);
        s.object = tasks[0].success.center;
        assert!(check_success(&cfg, &s, &tasks[0]));
        s.held = true;
        assert!(!check_success(&cfg, &s, &tasks[0]));
        s.held = false;
        s.object = tasks[1].success.center;
        for (tick, open) in [(0, true), (39, true), (40, false), (79, false), (80, true)] {
            s.conveyor_tick = tick;
            assert_eq!(check_success(&cfg, &s, &tasks[1]), open, "tick {tick}");
        }
    }

    #[test]
    fn zero_drift_respawns_at_canonical_point() {
        let (cfg, mut tasks) = setup();
        tasks[0].sigma_drift = 0.0;
        let s = WorldState::initial(&cfg, &tasks);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s1 = respawn(&cfg, &s, &tasks[0], ResetKind::Success, &mut rng);
        assert_eq!(s1.object, cfg.spawn_region.center());
    }

    #[test]
    fn state_view_round_trips_observation() {
        let (cfg, tasks) = setup();
        let mut s = WorldState::initial(&cfg, &tasks);
        s.gripper = [0.3, 0.6];
        s.aperture = 0.4;
        let view = StateView::parse(&s.observe(&cfg, InstructionTag::NullToken).state).unwrap();
        assert_eq!(view.gripper, s.gripper);
        assert_eq!(view.aperture, 0.4);
        for (a, b) in view.targets.iter().zip(&s.targets) {
            assert!(dist(*a, *b) < 1e-12);
        }
        assert!(StateView::parse(&[0.0; 5]).is_err());
    }
}
