//! Per-episode tracker and the SR / AATS / NSI / ED report.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vehicle::VehicleState;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("episode already closed")]
    Closed,
    #[error("time went backwards: {t} after {prev}")]
    NonMonotonicTime { prev: f64, t: f64 },
    #[error("total_segments is zero")]
    ZeroSegments,
    #[error("total_time is zero")]
    ZeroTime,
    #[error("no results to aggregate")]
    Empty,
    #[error("mismatched total_segments: {expected} vs {found}")]
    MismatchedSegments { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfractionKind {
    OffTrack,
    Collision,
    NoProgress,
}

impl InfractionKind {
    pub fn name(self) -> &'static str {
        match self {
            InfractionKind::OffTrack => "off_track",
            InfractionKind::Collision => "collision",
            InfractionKind::NoProgress => "no_progress",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Infraction {
    pub kind: InfractionKind,
    pub s: f64,
    pub t: f64,
    pub segment: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepEvent {
    SegmentCompleted(usize),
    Infraction(Infraction),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub completed_segments: usize,
    pub total_segments: usize,
    pub infractions: Vec<Infraction>,
    pub total_distance: f64,
    pub total_time: f64,
    /// (t, v) samples, including the initial state and a zero-speed sample
    /// at every respawn.
    pub speed_trace: Vec<(f64, f64)>,
}

impl EpisodeResult {
    pub fn report(&self) -> Result<MetricsReport, MetricsError> {
        Ok(MetricsReport {
            sr: success_rate(self)?,
            aats_kph: aats(self)?,
            nsi: nsi(self) as f64,
            ed_s: ed(self),
            runs: 1,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sr: f64,
    pub aats_kph: f64,
    pub nsi: f64,
    pub ed_s: f64,
    pub runs: usize,
}

pub fn success_rate(r: &EpisodeResult) -> Result<f64, MetricsError> {
    if r.total_segments == 0 {
        return Err(MetricsError::ZeroSegments);
    }
    Ok(r.completed_segments as f64 / r.total_segments as f64)
}

/// Average speed over the episode in km/h.
pub fn aats(r: &EpisodeResult) -> Result<f64, MetricsError> {
    if !(r.total_time > 0.0) {
        return Err(MetricsError::ZeroTime);
    }
    Ok(r.total_distance / r.total_time * 3.6)
}

pub fn nsi(r: &EpisodeResult) -> usize {
    r.infractions.len()
}

pub fn ed(r: &EpisodeResult) -> f64 {
    r.total_time
}

/// Arithmetic mean of each metric across runs.
pub fn aggregate(results: &[EpisodeResult]) -> Result<MetricsReport, MetricsError> {
    let first = results.first().ok_or(MetricsError::Empty)?;
    let mut sum = MetricsReport {
        sr: 0.0,
        aats_kph: 0.0,
        nsi: 0.0,
        ed_s: 0.0,
        runs: results.len(),
    };
    for r in results {
        if r.total_segments != first.total_segments {
            return Err(MetricsError::MismatchedSegments {
                expected: first.total_segments,
                found: r.total_segments,
            });
        }
        let one = r.report()?;
        sum.sr += one.sr;
        sum.aats_kph += one.aats_kph;
        sum.nsi += one.nsi;
        sum.ed_s += one.ed_s;
    }
    let n = results.len() as f64;
    sum.sr /= n;
    sum.aats_kph /= n;
    sum.nsi /= n;
    sum.ed_s /= n;
    Ok(sum)
}

/// Accumulates one episode.
#[derive(Debug, Clone)]
pub struct Tracker {
    result: EpisodeResult,
    t0: f64,
    last_t: f64,
    closed: bool,
}

impl Tracker {
    pub fn new(total_segments: usize, initial: &VehicleState) -> Self {
        Tracker {
            result: EpisodeResult {
                completed_segments: 0,
                total_segments,
                infractions: Vec::new(),
                total_distance: 0.0,
                total_time: 0.0,
                speed_trace: vec![(initial.t, initial.speed)],
            },
            t0: initial.t,
            last_t: initial.t,
            closed: false,
        }
    }

    /// Record the state after a step of length `dt` that covered `ds` metres.
    pub fn record_step(
        &mut self,
        state: &VehicleState,
        ds: f64,
        dt: f64,
        events: &[StepEvent],
    ) -> Result<(), MetricsError> {
        if self.closed {
            return Err(MetricsError::Closed);
        }
        if !(state.t > self.last_t) {
            return Err(MetricsError::NonMonotonicTime {
                prev: self.last_t,
                t: state.t,
            });
        }
        self.last_t = state.t;
        self.result.total_distance += ds;
        self.result.total_time += dt;
        self.result.speed_trace.push((state.t, state.speed));
        for e in events {
            match *e {
                StepEvent::SegmentCompleted(_) => self.result.completed_segments += 1,
                StepEvent::Infraction(i) => self.result.infractions.push(i),
            }
        }
        Ok(())
    }

    /// Mark an instantaneous stop (respawn) at the current time.
    pub fn record_respawn(&mut self) -> Result<(), MetricsError> {
        if self.closed {
            return Err(MetricsError::Closed);
        }
        self.result.speed_trace.push((self.last_t, 0.0));
        Ok(())
    }

    /// Charge extra infractions without advancing time (episode timeout).
    pub fn record_infractions(&mut self, infractions: &[Infraction]) -> Result<(), MetricsError> {
        if self.closed {
            return Err(MetricsError::Closed);
        }
        self.result.infractions.extend_from_slice(infractions);
        Ok(())
    }

    pub fn elapsed(&self) -> f64 {
        self.last_t - self.t0
    }

    pub fn current(&self) -> &EpisodeResult {
        &self.result
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn close(&mut self) -> Result<EpisodeResult, MetricsError> {
        if self.closed {
            return Err(MetricsError::Closed);
        }
        self.closed = true;
        Ok(self.result.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec2;

    fn result(completed: usize, nsi: usize, dist: f64, time: f64) -> EpisodeResult {
        EpisodeResult {
            completed_segments: completed,
            total_segments: 10,
            infractions: (0..nsi)
                .map(|i| Infraction {
                    kind: InfractionKind::OffTrack,
                    s: 0.0,
                    t: i as f64,
                    segment: i,
                })
                .collect(),
            total_distance: dist,
            total_time: time,
            speed_trace: Vec::new(),
        }
    }

    fn state_at(t: f64) -> VehicleState {
        VehicleState {
            position: Vec2::new(0.0, 0.0),
            t,
            ..VehicleState::default()
        }
    }

    #[test]
    fn distance_is_additive() {
        let mut tr = Tracker::new(10, &state_at(0.0));
        for i in 1..=100 {
            tr.record_step(&state_at(i as f64 * 0.05), 1.0, 0.05, &[]).unwrap();
        }
        let r = tr.close().unwrap();
        assert_eq!(r.total_distance, 100.0);
        assert!(r.infractions.is_empty());
        assert_eq!(r.speed_trace.len(), 101);
    }

    #[test]
    fn time_must_increase() {
        let mut tr = Tracker::new(10, &state_at(1.0));
        tr.record_step(&state_at(1.05), 0.0, 0.05, &[]).unwrap();
        assert_eq!(
            tr.record_step(&state_at(1.0), 0.0, 0.05, &[]),
            Err(MetricsError::NonMonotonicTime { prev: 1.05, t: 1.0 })
        );
    }

    #[test]
    fn closed_tracker_rejects_steps() {
        let mut tr = Tracker::new(10, &state_at(0.0));
        tr.close().unwrap();
        assert_eq!(tr.record_step(&state_at(1.0), 0.0, 1.0, &[]), Err(MetricsError::Closed));
        assert_eq!(tr.close(), Err(MetricsError::Closed));
    }

    #[test]
    fn success_rate_examples() {
        assert_eq!(success_rate(&result(7, 3, 1.0, 1.0)).unwrap(), 0.7);
        assert_eq!(success_rate(&result(10, 0, 1.0, 1.0)).unwrap(), 1.0);
        assert_eq!(success_rate(&result(0, 10, 1.0, 1.0)).unwrap(), 0.0);
        let mut r = result(0, 0, 1.0, 1.0);
        r.total_segments = 0;
        assert_eq!(success_rate(&r), Err(MetricsError::ZeroSegments));
    }

    #[test]
    fn aats_examples() {
        assert!((aats(&result(10, 0, 3800.0, 120.0)).unwrap() - 114.0).abs() < 1e-12);
        assert_eq!(aats(&result(10, 0, 0.0, 120.0)).unwrap(), 0.0);
        assert_eq!(aats(&result(10, 0, 1.0, 0.0)), Err(MetricsError::ZeroTime));
    }

    #[test]
    fn nsi_examples() {
        assert_eq!(nsi(&result(10, 0, 1.0, 1.0)), 0);
        let r = result(8, 2, 1.0, 1.0);
        assert_eq!(nsi(&r), 2);
        assert_eq!(success_rate(&r).unwrap() + nsi(&r) as f64 / 10.0, 1.0);
        let mut r = result(7, 2, 1.0, 1.0);
        r.infractions.push(Infraction {
            kind: InfractionKind::NoProgress,
            s: 0.0,
            t: 0.0,
            segment: 9,
        });
        assert_eq!(nsi(&r), 3);
    }

    #[test]
    fn aggregate_examples() {
        let runs = [result(10, 0, 1.0, 1.0), result(0, 10, 1.0, 1.0), result(10, 0, 1.0, 1.0)];
        let rep = aggregate(&runs).unwrap();
        assert_eq!(format!("{:.3}", rep.sr), "0.667");
        assert_eq!(rep.runs, 3);

        let nsis = |v: [usize; 3]| aggregate(&v.map(|n| result(10 - n.min(10), n, 1.0, 1.0))).unwrap().nsi;
        assert_eq!(nsis([10, 11, 12]), 11.0);
        assert_eq!(format!("{:.3}", nsis([10, 11, 10])), "10.333");

        let one = result(6, 4, 500.0, 50.0);
        assert_eq!(aggregate(std::slice::from_ref(&one)).unwrap(), one.report().unwrap());
    }

    #[test]
    fn aggregate_errors() {
        assert_eq!(aggregate(&[]), Err(MetricsError::Empty));
        let mut b = result(5, 5, 1.0, 1.0);
        b.total_segments = 12;
        b.completed_segments = 7;
        assert_eq!(
            aggregate(&[result(5, 5, 1.0, 1.0), b]),
            Err(MetricsError::MismatchedSegments { expected: 10, found: 12 })
        );
    }

    #[test]
    fn aggregate_of_copies_is_identity() {
        let one = result(3, 7, 812.5, 91.25);
        let rep = aggregate(&vec![one.clone(); 4]).unwrap();
        let single = one.report().unwrap();
        assert_eq!(rep.sr, single.sr);
        assert!((rep.aats_kph - single.aats_kph).abs() < 1e-12);
        assert_eq!(rep.nsi, single.nsi);
        assert_eq!(rep.ed_s, single.ed_s);
    }

    #[test]
    fn report_keys() {
        let v = serde_json::to_value(result(10, 0, 10.0, 1.0).report().unwrap()).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(keys, ["aats_kph", "ed_s", "nsi", "runs", "sr"]);
    }
}
