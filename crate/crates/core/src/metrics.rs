//! Throughput (TPH), reliability (MTBI), success rate, and the
//! productivity-reliability report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runner::{EventKind, RunConfig, RunLog};

/// Successful completions per hour.
pub fn tph(n_succ: usize, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Argument(format!("run duration must be positive, got {t}")));
    }
    Ok(n_succ as f64 / (t / 3600.0))
}

/// Mean time between interventions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "seconds")]
pub enum Mtbi {
    Value(f64),
    /// No intervention during a run of this many seconds: MTBI is at least this.
    Censored(f64),
}

impl Mtbi {
    /// The number used in averages: the value, or the censoring bound.
    pub fn bound(self) -> f64 {
        match self {
            Mtbi::Value(v) | Mtbi::Censored(v) => v,
        }
    }

    pub fn is_censored(self) -> bool {
        matches!(self, Mtbi::Censored(_))
    }
}

pub fn mtbi(k: usize, t: f64) -> Result<Mtbi> {
    if !(t > 0.0) {
        return Err(Error::Argument(format!("run duration must be positive, got {t}")));
    }
    Ok(if k == 0 {
        Mtbi::Censored(t)
    } else {
        Mtbi::Value(t / k as f64)
    })
}

/// Successes over attempted cycles; `None` when no cycle finished.
pub fn success_rate(n_succ: usize, interventions: usize) -> Option<f64> {
    let attempts = n_succ + interventions;
    (attempts > 0).then(|| n_succ as f64 / attempts as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub tph: f64,
    pub mtbi: Mtbi,
    pub success_rate: Option<f64>,
}

pub fn run_metrics(log: &RunLog) -> Result<RunMetrics> {
    let t = log.totals.elapsed;
    Ok(RunMetrics {
        tph: tph(log.totals.n_succ, t)?,
        mtbi: mtbi(log.totals.interventions(), t)?,
        success_rate: success_rate(log.totals.n_succ, log.totals.interventions()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrpPoint {
    pub method: String,
    pub regime: String,
    pub task: String,
    pub seeds: usize,
    pub tph: f64,
    /// Mean of per-seed MTBI, censored seeds contributing their bound.
    pub mtbi: f64,
    pub mtbi_censored: bool,
    /// Mean over seeds with a defined rate.
    pub success_rate: Option<f64>,
    /// Another point in the report has at least this TPH and MTBI, and more of one.
    pub dominated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimelineRow {
    pub method: String,
    pub regime: String,
    pub task: String,
    pub seed: u64,
    pub t_start: f64,
    pub t_end: f64,
    pub outcome: String,
    pub intervention_kind: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrpReport {
    pub points: Vec<PrpPoint>,
    pub timeline: Vec<TimelineRow>,
}

fn comparable(cfg: &RunConfig) -> RunConfig {
    RunConfig { seed: 0, ..cfg.clone() }
}

/// Groups logs by (method, regime, task) and averages per-seed metrics.
pub fn prp_report(logs: &[RunLog]) -> Result<PrpReport> {
    if logs.is_empty() {
        return Err(Error::Aggregation("no run logs".into()));
    }
    let mut groups: BTreeMap<(String, String, String), Vec<&RunLog>> = BTreeMap::new();
    for log in logs {
        log.verify()?;
        let l = &log.label;
        groups
            .entry((l.method.clone(), l.regime.clone(), l.task.clone()))
            .or_default()
            .push(log);
    }
    let mut points = Vec::new();
    for ((method, regime, task), mut members) in groups {
        members.sort_by_key(|l| l.label.seed);
        let first = members[0];
        for m in &members[1..] {
            if comparable(&m.config) != comparable(&first.config) || m.time_limit != first.time_limit {
                return Err(Error::Aggregation(format!(
                    "runs of {method}/{regime}/{task} use different configurations"
                )));
            }
            if m.label.seed == members[0].label.seed {
                return Err(Error::Aggregation(format!(
                    "duplicate seed {} in {method}/{regime}/{task}",
                    m.label.seed
                )));
            }
        }
        let per: Vec<RunMetrics> = members.iter().map(|l| run_metrics(l)).collect::<Result<_>>()?;
        let n = per.len() as f64;
        let rates: Vec<f64> = per.iter().filter_map(|m| m.success_rate).collect();
        points.push(PrpPoint {
            method,
            regime,
            task,
            seeds: per.len(),
            tph: per.iter().map(|m| m.tph).sum::<f64>() / n,
            mtbi: per.iter().map(|m| m.mtbi.bound()).sum::<f64>() / n,
            mtbi_censored: per.iter().any(|m| m.mtbi.is_censored()),
            success_rate: (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64),
            dominated: false,
        });
    }
    let dominated = pareto_dominated(&points.iter().map(|p| (p.tph, p.mtbi)).collect::<Vec<_>>());
    for (p, d) in points.iter_mut().zip(dominated) {
        p.dominated = d;
    }

    let mut timeline = Vec::new();
    let mut sorted: Vec<&RunLog> = logs.iter().collect();
    sorted.sort_by(|a, b| {
        let key = |l: &RunLog| {
            (
                l.label.method.clone(),
                l.label.regime.clone(),
                l.label.task.clone(),
                l.label.seed,
            )
        };
        key(a).cmp(&key(b))
    });
    for log in sorted {
        let mut start = None;
        for e in &log.events {
            let (outcome, kind) = match e.kind {
                EventKind::CycleStart => {
                    start = Some(e.time);
                    continue;
                }
                EventKind::MaintenanceReset => continue,
                EventKind::Success => ("success", ""),
                EventKind::Intervention { cause } => (
                    "intervention",
                    match cause {
                        crate::runner::InterventionKind::Timeout => "timeout",
                        crate::runner::InterventionKind::Abort => "abort",
                    },
                ),
            };
            let l = &log.label;
            timeline.push(TimelineRow {
                method: l.method.clone(),
                regime: l.regime.clone(),
                task: l.task.clone(),
                seed: l.seed,
                t_start: start.take().unwrap_or(e.time),
                t_end: e.time,
                outcome: outcome.into(),
                intervention_kind: kind.into(),
            });
        }
    }
    Ok(PrpReport { points, timeline })
}

/// For each point, whether some other point is at least as good on both
/// axes and strictly better on one.
pub fn pareto_dominated(points: &[(f64, f64)]) -> Vec<bool> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            points
                .iter()
                .enumerate()
                .any(|(j, &(a, b))| j != i && a >= x && b >= y && (a > x || b > y))
        })
        .collect()
}

pub const PRP_CSV_HEADER: &str = "method,regime,task,seeds,tph,mtbi,mtbi_censored,success_rate";
pub const TIMELINE_CSV_HEADER: &str = "method,regime,task,seed,t_start,t_end,outcome,intervention_kind";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn prp_csv(points: &[PrpPoint]) -> String {
    let mut out = String::from(PRP_CSV_HEADER);
    out.push('\n');
    for p in points {
        let rate = p.success_rate.map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&p.method),
            csv_field(&p.regime),
            csv_field(&p.task),
            p.seeds,
            p.tph,
            p.mtbi,
            p.mtbi_censored,
            rate
        );
    }
    out
}

pub fn timeline_csv(rows: &[TimelineRow]) -> String {
    let mut out = String::from(TIMELINE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&r.method),
            csv_field(&r.regime),
            csv_field(&r.task),
            r.seed,
            r.t_start,
            r.t_end,
            r.outcome,
            r.intervention_kind
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tph_examples() {
        assert_eq!(tph(124, 3600.0).unwrap(), 124.0);
        assert_eq!(tph(0, 3600.0).unwrap(), 0.0);
        assert_eq!(tph(30, 1800.0).unwrap(), 60.0);
        assert!(tph(1, 0.0).is_err());
    }

    #[test]
    fn mtbi_examples() {
        assert_eq!(mtbi(2, 3600.0).unwrap(), Mtbi::Value(1800.0));
        let m = mtbi(118, 3600.0).unwrap().bound();
        assert_eq!(format!("{m:.1}"), "30.5");
        assert_eq!(mtbi(0, 3600.0).unwrap(), Mtbi::Censored(3600.0));
    }

    #[test]
    fn success_rate_examples() {
        assert_eq!(success_rate(3, 1), Some(0.75));
        assert_eq!(success_rate(0, 4), Some(0.0));
        assert_eq!(success_rate(0, 0), None);
        let r = success_rate(82, 17).unwrap();
        assert!((r - 82.0 / 99.0).abs() < 1e-15);
    }

    #[test]
    fn dominance() {
        let d = pareto_dominated(&[(1.0, 1.0), (2.0, 2.0), (3.0, 0.5), (2.0, 2.0)]);
        assert_eq!(d, vec![true, false, false, false]);
    }
}
