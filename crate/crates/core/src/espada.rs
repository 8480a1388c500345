//! Phase-adaptive downsampling of demonstrations.
//!
//! Frames are labeled casual (transit) or precision (near an interaction
//! site, or while the gripper is opening or closing). Casual stretches are
//! compressed by a factor `N`; precision stretches keep their density.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simenv::{dist, StateView};
use crate::traj::{ActionChunk, Frame, Phase, Trajectory};

/// Number of leading action channels that are translational.
pub const TRANSLATION_DIMS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownsampleMode {
    /// Kept casual frames carry the summed displacement of the frames they replace.
    Sum,
    /// Ablation: kept frames keep their own action, intervening motion is lost.
    Drop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EspadaConfig {
    pub n: usize,
    pub d_prec: f64,
    pub min_run: usize,
    pub disp_tol: f64,
    pub mode: DownsampleMode,
}

impl Default for EspadaConfig {
    fn default() -> Self {
        Self {
            n: 4,
            d_prec: 0.1,
            min_run: 3,
            disp_tol: 0.10,
            mode: DownsampleMode::Sum,
        }
    }
}

impl EspadaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.min_run == 0 || !(self.d_prec > 0.0) {
            return Err(Error::Config("espada needs n >= 1, min_run >= 1, d_prec > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub phase: Phase,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSegmentation {
    pub labels: Vec<Phase>,
    pub segments: Vec<Segment>,
}

impl PhaseSegmentation {
    pub fn from_labels(labels: Vec<Phase>) -> Self {
        let segments = runs(&labels);
        Self { labels, segments }
    }

    pub fn casual_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            return 0.0;
        }
        self.labels.iter().filter(|&&p| p == Phase::Casual).count() as f64 / self.labels.len() as f64
    }
}

fn runs(labels: &[Phase]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (i, &p) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(seg) if seg.phase == p => seg.end = i + 1,
            _ => out.push(Segment {
                phase: p,
                start: i,
                end: i + 1,
            }),
        }
    }
    out
}

/// Raw labels from per-frame site distances and aperture-change flags.
pub fn threshold_labels(distances: &[f64], aperture_changing: &[bool], d_prec: f64) -> Vec<Phase> {
    distances
        .iter()
        .zip(aperture_changing)
        .map(|(&d, &c)| {
            if d < d_prec || c {
                Phase::Precision
            } else {
                Phase::Casual
            }
        })
        .collect()
}

/// Absorbs interior runs shorter than `min_run` into their surroundings.
/// Runs touching either end of the trajectory are left alone.
pub fn smooth_labels(labels: &[Phase], min_run: usize) -> Vec<Phase> {
    let mut out = labels.to_vec();
    if min_run <= 1 {
        return out;
    }
    loop {
        let segs = runs(&out);
        // Shortest interior run below min_run; ties go to the earliest.
        let victim = segs
            .iter()
            .enumerate()
            .filter(|(k, s)| *k > 0 && *k + 1 < segs.len() && s.len() < min_run)
            .min_by_key(|(_, s)| s.len())
            .map(|(_, s)| s.clone());
        let Some(seg) = victim else { break };
        let flipped = match seg.phase {
            Phase::Casual => Phase::Precision,
            Phase::Precision => Phase::Casual,
        };
        for l in &mut out[seg.start..seg.end] {
            *l = flipped;
        }
    }
    out
}

/// Distance from the gripper to the nearest interaction site: the object
/// when it is not held, and every target while it is.
pub fn site_distance(view: &StateView) -> f64 {
    if view.held {
        view.targets
            .iter()
            .map(|&t| dist(view.gripper, t))
            .fold(f64::INFINITY, f64::min)
    } else {
        dist(view.gripper, view.object)
    }
}

pub fn segment_phases(traj: &Trajectory, cfg: &EspadaConfig) -> Result<PhaseSegmentation> {
    cfg.validate()?;
    let views = traj
        .frames
        .iter()
        .map(|f| StateView::parse(&f.obs.state))
        .collect::<Result<Vec<_>>>()?;
    let distances: Vec<f64> = views.iter().map(site_distance).collect();
    let n = views.len();
    let changing: Vec<bool> = (0..n)
        .map(|i| {
            let a = views[i].aperture;
            (i > 0 && views[i - 1].aperture != a) || (i + 1 < n && views[i + 1].aperture != a)
        })
        .collect();
    let raw = threshold_labels(&distances, &changing, cfg.d_prec);
    Ok(PhaseSegmentation::from_labels(smooth_labels(&raw, cfg.min_run)))
}

/// `ceil(h / n)`.
pub fn rescale_horizon(h: usize, n: usize) -> usize {
    h.div_ceil(n)
}

/// Indices of the frames kept by the weighted expansion: precision frames
/// are replicated `n` times, casual frames once, and every `n`-th entry of
/// the expanded sequence is kept.
pub fn kept_indices(labels: &[Phase], n: usize) -> Vec<usize> {
    let mut kept = Vec::new();
    let mut pos = 0usize;
    for (i, &p) in labels.iter().enumerate() {
        let w = if p == Phase::Precision { n } else { 1 };
        // Is there a multiple of n in [pos, pos + w)?
        let next_multiple = pos.div_ceil(n) * n;
        if next_multiple < pos + w {
            kept.push(i);
        }
        pos += w;
    }
    kept
}

#[derive(Clone, Debug, PartialEq)]
pub struct Downsampled {
    pub trajectory: Trajectory,
    /// Original frame index of every output frame.
    pub source: Vec<usize>,
}

pub fn downsample(traj: &Trajectory, seg: &PhaseSegmentation, cfg: &EspadaConfig) -> Result<Trajectory> {
    Ok(downsample_with_map(traj, seg, cfg)?.trajectory)
}

pub fn downsample_with_map(traj: &Trajectory, seg: &PhaseSegmentation, cfg: &EspadaConfig) -> Result<Downsampled> {
    cfg.validate()?;
    if seg.labels.len() != traj.frames.len() {
        return Err(Error::Segmentation(format!(
            "{} labels for {} frames",
            seg.labels.len(),
            traj.frames.len()
        )));
    }
    let kept = kept_indices(&seg.labels, cfg.n);
    let mut frames = Vec::with_capacity(kept.len());
    for (k, &i) in kept.iter().enumerate() {
        let end = kept.get(k + 1).copied().unwrap_or(traj.frames.len());
        let action = match cfg.mode {
            DownsampleMode::Drop => traj.frames[i].action.clone(),
            DownsampleMode::Sum => merge_actions(&traj.frames[i..end]),
        };
        frames.push(Frame {
            obs: traj.frames[i].obs.clone(),
            action,
        });
    }
    let success_frames = traj
        .success_frames
        .iter()
        .filter_map(|s| kept.binary_search(s).ok())
        .collect();
    Ok(Downsampled {
        trajectory: Trajectory {
            frames,
            phase_labels: Some(kept.iter().map(|&i| seg.labels[i]).collect()),
            control_hz: traj.control_hz,
            success_frames,
        },
        source: kept,
    })
}

/// Sums translational channels and averages the rest.
fn merge_actions(frames: &[Frame]) -> Vec<f64> {
    let d = frames[0].action.len();
    let mut out = vec![0.0; d];
    for f in frames {
        for (o, a) in out.iter_mut().zip(&f.action) {
            *o += a;
        }
    }
    let count = frames.len() as f64;
    for o in out.iter_mut().skip(TRANSLATION_DIMS) {
        *o /= count;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplacementReport {
    pub orig_sum: f64,
    pub ds_sum: f64,
    pub rel_err: f64,
    pub pass: bool,
}

pub fn translational_path_length(chunk: &ActionChunk) -> f64 {
    chunk
        .rows()
        .map(|r| r.iter().take(TRANSLATION_DIMS).map(|v| v * v).sum::<f64>().sqrt())
        .sum()
}

pub fn displacement_check(orig: &ActionChunk, ds: &ActionChunk, tol: f64) -> DisplacementReport {
    let orig_sum = translational_path_length(orig);
    let ds_sum = translational_path_length(ds);
    let diff = (ds_sum - orig_sum).abs();
    let rel_err = if orig_sum > 0.0 { diff / orig_sum } else { diff };
    DisplacementReport {
        orig_sum,
        ds_sum,
        rel_err,
        pass: diff <= tol * orig_sum,
    }
}

/// Segments and downsamples a trajectory; `N = 1` returns it unchanged
/// apart from attached labels.
pub fn apply(traj: &Trajectory, cfg: &EspadaConfig) -> Result<(PhaseSegmentation, Downsampled)> {
    let seg = segment_phases(traj, cfg)?;
    let ds = downsample_with_map(traj, &seg, cfg)?;
    Ok((seg, ds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use Phase::{Casual as C, Precision as P};

    #[test]
    fn threshold_oracle() {
        let labels = threshold_labels(&[0.5, 0.3, 0.05, 0.02, 0.3], &[false; 5], 0.1);
        assert_eq!(labels, vec![C, C, P, P, C]);
        assert_eq!(smooth_labels(&labels, 1), labels);
    }

    #[test]
    fn blip_absorbed() {
        assert_eq!(smooth_labels(&[C, C, P, C, C], 2), vec![C; 5]);
        assert_eq!(smooth_labels(&[P, P, P, C, P, P], 2), vec![P; 6]);
        // Boundary runs survive.
        assert_eq!(smooth_labels(&[P, C, C, C], 3), vec![P, C, C, C]);
    }

    #[test]
    fn horizon_examples() {
        assert_eq!(rescale_horizon(50, 4), 13);
        assert_eq!(rescale_horizon(9, 1), 9);
        assert_eq!(rescale_horizon(7, 7), 1);
    }

    #[test]
    fn kept_indices_cases() {
        assert_eq!(kept_indices(&[C; 12], 4), vec![0, 4, 8]);
        assert_eq!(kept_indices(&[P; 5], 4), vec![0, 1, 2, 3, 4]);
        assert_eq!(kept_indices(&[C, C, P, C, C, C, C], 4), vec![0, 2, 5]);
    }
}
