//! Observations, action chunks, demonstrations and the `.cfds` dataset format.
//!
//! A `.cfds` file is JSON lines: a header line carrying the format version
//! and dataset metadata, then one trajectory per line. Floats are written
//! with shortest round-trip formatting, so `load(save(d)) == d` exactly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simenv::{self, TaskSpec};

pub const CFDS_FORMAT: &str = "cfds";
pub const CFDS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionTag {
    Task(u32),
    /// The instruction-free token used for play data and masked training.
    NullToken,
}

impl InstructionTag {
    pub fn is_null(self) -> bool {
        matches!(self, InstructionTag::NullToken)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub state: Vec<f64>,
    pub instruction: InstructionTag,
    pub sim_time: f64,
}

impl Observation {
    pub fn with_instruction(&self, instruction: InstructionTag) -> Observation {
        Observation {
            instruction,
            ..self.clone()
        }
    }
}

/// Row-major `H x d` matrix of per-tick actions.
///
/// The same type carries noise samples, interpolants and velocity fields,
/// which all live in action-chunk space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionChunk {
    pub horizon: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl ActionChunk {
    pub fn zeros(horizon: usize, dim: usize) -> Self {
        Self {
            horizon,
            dim,
            data: vec![0.0; horizon * dim],
        }
    }

    pub fn filled(horizon: usize, dim: usize, value: f64) -> Self {
        Self {
            horizon,
            dim,
            data: vec![value; horizon * dim],
        }
    }

    pub fn from_data(horizon: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != horizon * dim {
            return Err(Error::Argument(format!(
                "chunk data has {} entries, expected {horizon}x{dim}",
                data.len()
            )));
        }
        Ok(Self { horizon, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Argument("ragged chunk rows".into()));
        }
        Ok(Self {
            horizon: rows.len(),
            dim,
            data: rows.concat(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn same_shape(&self, other: &ActionChunk) -> bool {
        self.horizon == other.horizon && self.dim == other.dim
    }

    pub fn ensure_same_shape(&self, other: &ActionChunk) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Argument(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.horizon, self.dim, other.horizon, other.dim
            )))
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ActionChunk) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clipped(mut self, clip: f64) -> Self {
        self.data.iter_mut().for_each(|v| *v = v.clamp(-clip, clip));
        self
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            horizon: self.horizon,
            dim: self.dim,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &ActionChunk, factor: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Casual,
    Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub obs: Observation,
    pub action: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub frames: Vec<Frame>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_labels: Option<Vec<Phase>>,
    pub control_hz: f64,
    /// Frame indices whose state satisfies the task's success predicate.
    #[serde(default)]
    pub success_frames: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Recorded actions `t..t+horizon` as a chunk, if they are all in range.
    pub fn chunk_at(&self, t: usize, horizon: usize) -> Option<ActionChunk> {
        if horizon == 0 || t + horizon > self.frames.len() {
            return None;
        }
        let dim = self.frames[t].action.len();
        let mut data = Vec::with_capacity(horizon * dim);
        for frame in &self.frames[t..t + horizon] {
            data.extend_from_slice(&frame.action);
        }
        Some(ActionChunk { horizon, dim, data })
    }
}

/// All `(observation, chunk)` training pairs with stride one. A trajectory
/// shorter than `horizon` yields nothing.
pub fn window_chunks(traj: &Trajectory, horizon: usize) -> Result<Vec<(Observation, ActionChunk)>> {
    if horizon == 0 {
        return Err(Error::Argument("chunk horizon must be >= 1".into()));
    }
    let count = (traj.frames.len() + 1).saturating_sub(horizon);
    Ok((0..count)
        .map(|t| {
            let chunk = traj.chunk_at(t, horizon).expect("index in range");
            (traj.frames[t].obs.clone(), chunk)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Play,
    Noncyclic,
    Cyclic,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Play => "play",
            Regime::Noncyclic => "noncyclic",
            Regime::Cyclic => "cyclic",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "play" => Ok(Regime::Play),
            "noncyclic" | "non-cyclic" => Ok(Regime::Noncyclic),
            "cyclic" => Ok(Regime::Cyclic),
            other => Err(Error::Argument(format!(
                "unknown regime `{other}` (expected play, noncyclic or cyclic)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub regime: Regime,
    pub tasks: Vec<TaskSpec>,
    pub horizon: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub control_hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: DatasetMeta,
    trajectories: usize,
}

impl Dataset {
    /// Structural and regime invariants. Cyclic streams are checked by
    /// replaying the success predicate on every annotated frame.
    pub fn validate(&self) -> Result<()> {
        let meta = &self.meta;
        for (ti, traj) in self.trajectories.iter().enumerate() {
            let bad = |reason: String| Error::Config(format!("trajectory {ti}: {reason}"));
            if traj.frames.is_empty() {
                return Err(bad("no frames".into()));
            }
            if let Some(labels) = &traj.phase_labels {
                if labels.len() != traj.frames.len() {
                    return Err(bad(format!(
                        "{} phase labels for {} frames",
                        labels.len(),
                        traj.frames.len()
                    )));
                }
            }
            let mut last_time = f64::NEG_INFINITY;
            for (fi, frame) in traj.frames.iter().enumerate() {
                if frame.obs.state.len() != meta.state_dim {
                    return Err(bad(format!(
                        "frame {fi} has state dimension {}, dataset declares {}",
                        frame.obs.state.len(),
                        meta.state_dim
                    )));
                }
                if frame.action.len() != meta.action_dim {
                    return Err(bad(format!("frame {fi} has wrong action dimension")));
                }
                if !frame.action.iter().chain(&frame.obs.state).all(|v| v.is_finite()) {
                    return Err(bad(format!("frame {fi} has non-finite values")));
                }
                if frame.obs.sim_time < last_time {
                    return Err(bad(format!("sim_time decreases at frame {fi}")));
                }
                last_time = frame.obs.sim_time;
                match frame.obs.instruction {
                    InstructionTag::NullToken => {}
                    InstructionTag::Task(id) => {
                        if meta.regime == Regime::Play {
                            return Err(bad(format!(
                                "play data must be instruction-free (frame {fi} has task {id})"
                            )));
                        }
                        if !meta.tasks.iter().any(|t| t.id == id) {
                            return Err(bad(format!("frame {fi} names unregistered task {id}")));
                        }
                    }
                }
            }
            if meta.regime == Regime::Cyclic {
                let replayed = simenv::replay_successes(traj, &meta.tasks)?;
                if replayed.len() < 2 {
                    return Err(bad(format!(
                        "cyclic stream has {} completed cycles, need at least 2",
                        replayed.len()
                    )));
                }
                if traj.success_frames.iter().any(|f| !replayed.contains(f)) {
                    return Err(bad("success annotation not confirmed by the task predicate".into()));
                }
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = Header {
            format: CFDS_FORMAT.into(),
            version: CFDS_VERSION,
            meta: self.meta.clone(),
            trajectories: self.trajectories.len(),
        };
        write_json_line(&mut w, &header).map_err(|e| Error::io(path, e))?;
        for traj in &self.trajectories {
            write_json_line(&mut w, traj).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let format_err = |record: usize, reason: String| Error::Format {
            path: path.to_path_buf(),
            record,
            reason,
        };

        let header_line = lines
            .next()
            .ok_or_else(|| format_err(0, "empty file, missing header".into()))?
            .map_err(|e| Error::io(path, e))?;
        let header: Header =
            serde_json::from_str(&header_line).map_err(|e| format_err(0, format!("malformed header: {e}")))?;
        if header.format != CFDS_FORMAT {
            return Err(format_err(0, format!("not a cfds file (format `{}`)", header.format)));
        }
        if header.version != CFDS_VERSION {
            return Err(format_err(
                0,
                format!("unsupported version {} (expected {CFDS_VERSION})", header.version),
            ));
        }

        let mut trajectories = Vec::with_capacity(header.trajectories);
        for record in 1..=header.trajectories {
            let line = match lines.next() {
                Some(line) => line.map_err(|e| Error::io(path, e))?,
                None => {
                    return Err(format_err(
                        record,
                        format!(
                            "missing (file truncated after {} of {} trajectories)",
                            record - 1,
                            header.trajectories
                        ),
                    ))
                }
            };
            let traj: Trajectory =
                serde_json::from_str(&line).map_err(|e| format_err(record, format!("malformed trajectory: {e}")))?;
            trajectories.push(traj);
        }
        for (offset, extra) in lines.enumerate() {
            let extra = extra.map_err(|e| Error::io(path, e))?;
            if !extra.trim().is_empty() {
                return Err(format_err(
                    header.trajectories + 1 + offset,
                    "unexpected trailing record".into(),
                ));
            }
        }

        let ds = Dataset {
            meta: header.meta,
            trajectories,
        };
        ds.validate()?;
        Ok(ds)
    }
}

fn write_json_line<W: Write, T: Serialize>(w: &mut W, value: &T) -> std::io::Result<()> {
    serde_json::to_writer(&mut *w, value).map_err(std::io::Error::other)?;
    w.write_all(b"\n")
}
