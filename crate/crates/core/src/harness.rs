//! Stage runners, scoring, leaderboards, and the results store.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Mode;
use crate::env::{CameraView, Env, EnvConfig, ObservationMode, TrajectoryRecord};
use crate::metrics::{self, EpisodeResult, MetricsReport};
use crate::protocol::{run_phase, AgentLink, Budget, LinkError, LinkStats, RunLength};

pub const DEFAULT_RUNS: usize = 3;
/// Simulated seconds.
pub const DEFAULT_PRACTICE_BUDGET: f64 = 3600.0;
/// Stage-1 places that advance.
pub const ADVANCING: usize = 10;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("expected stage {expected} entries, found stage {found}")]
    MixedStages { expected: u8, found: u8 },
    #[error("entries from the {0} and {1} camera boards")]
    MixedBoards(CameraConfig, CameraConfig),
    #[error("empty cohort")]
    EmptyCohort,
    #[error("entry is not part of the cohort")]
    NotInCohort,
    #[error("every AATS in the cohort is zero")]
    ZeroMaxAats,
    #[error("track {0} is a training track")]
    TrainingTrack(String),
    #[error("stage must be 1 or 2, got {0}")]
    BadStage(u8),
    #[error("store: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CameraConfig {
    Single,
    Multi,
}

impl CameraConfig {
    pub fn from_cameras(cameras: &[CameraView]) -> Self {
        if cameras == [CameraView::Front] {
            CameraConfig::Single
        } else {
            CameraConfig::Multi
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraConfig::Single => "single",
            CameraConfig::Multi => "multi",
        }
    }
}

impl fmt::Display for CameraConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CameraConfig {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "single" => Ok(CameraConfig::Single),
            "multi" => Ok(CameraConfig::Multi),
            _ => Err(format!("unknown camera config {s:?} (single or multi)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionResult {
    pub participant: String,
    pub stage: u8,
    pub camera_config: CameraConfig,
    pub track: String,
    pub runs: Vec<EpisodeResult>,
    pub report: MetricsReport,
    /// Stage 2 only.
    pub practice_nsi: Option<usize>,
    pub entries: usize,
    pub valid: bool,
    pub error: Option<String>,
    pub warnings: u32,
    pub stalls: u32,
}

impl SubmissionResult {
    /// A result known only by its aggregate numbers.
    pub fn from_report(participant: &str, stage: u8, camera_config: CameraConfig, report: MetricsReport) -> Self {
        SubmissionResult {
            participant: participant.to_string(),
            stage,
            camera_config,
            track: String::new(),
            runs: Vec::new(),
            report,
            practice_nsi: (stage == 2).then_some(report.nsi as usize),
            entries: 1,
            valid: true,
            error: None,
            warnings: 0,
            stalls: 0,
        }
    }
}

fn empty_report() -> MetricsReport {
    MetricsReport {
        sr: 0.0,
        aats_kph: 0.0,
        nsi: 0.0,
        ed_s: 0.0,
        runs: 0,
    }
}

/// A finished submission plus per-episode trajectories when logging is on.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRun {
    pub result: SubmissionResult,
    pub trajectories: Vec<Vec<TrajectoryRecord>>,
}

fn env_factory(template: &EnvConfig, mode: ObservationMode) -> impl FnMut(&[CameraView]) -> Result<Env, crate::env::EnvError> + '_ {
    move |cams| {
        let mut cfg = template.clone();
        cfg.cameras = cams.to_vec();
        cfg.mode = mode;
        Env::make(cfg)
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    participant: &str,
    stage: u8,
    template: &EnvConfig,
    cameras: &[CameraView],
    runs: Vec<EpisodeResult>,
    practice_nsi: Option<usize>,
    stats: LinkStats,
    err: Option<LinkError>,
) -> SubmissionResult {
    let mut report = metrics::aggregate(&runs).unwrap_or_else(|_| empty_report());
    if let Some(n) = practice_nsi {
        report.nsi = n as f64;
    }
    if let Some(e) = &err {
        log::warn!("{participant}: submission aborted: {e}");
    }
    SubmissionResult {
        participant: participant.to_string(),
        stage,
        camera_config: CameraConfig::from_cameras(cameras),
        track: template.track.id().to_string(),
        runs,
        report,
        practice_nsi,
        entries: 1,
        valid: err.is_none(),
        error: err.map(|e| e.to_string()),
        warnings: stats.warnings,
        stalls: stats.stalls,
    }
}

/// `runs` evaluation episodes in evaluate mode. A protocol abort gives an
/// invalid result carrying whatever finished.
pub fn run_stage1(link: &mut dyn AgentLink, participant: &str, template: &EnvConfig, runs: usize) -> StageRun {
    let mut make = env_factory(template, ObservationMode::CameraOnly);
    let outcome = run_phase(link, Mode::Evaluate, template.track.id(), RunLength::Episodes(runs), &mut make);
    link.shutdown();
    let stats = link.stats();
    match outcome {
        Ok(o) => StageRun {
            result: finish(participant, 1, template, &o.cameras, o.episodes, None, stats, None),
            trajectories: o.trajectories,
        },
        Err(e) => StageRun {
            result: finish(participant, 1, template, &template.cameras, Vec::new(), None, stats, Some(e)),
            trajectories: Vec::new(),
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Config {
    pub practice_budget: Budget,
    pub runs: usize,
    /// Track ids the agent may have trained on.
    pub training_tracks: Vec<String>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            practice_budget: Budget::Simulated(DEFAULT_PRACTICE_BUDGET),
            runs: DEFAULT_RUNS,
            training_tracks: vec!["thruxton_standin".into()],
        }
    }
}

/// Practice with privileged observations until the budget is spent, then
/// camera-only evaluation, all on one connection. The report's NSI is the
/// practice count.
pub fn run_stage2(
    link: &mut dyn AgentLink,
    participant: &str,
    template: &EnvConfig,
    cfg: &Stage2Config,
) -> Result<StageRun, HarnessError> {
    let id = template.track.id();
    if cfg.training_tracks.iter().any(|t| t == id) {
        return Err(HarnessError::TrainingTrack(id.to_string()));
    }
    let practice = run_phase(
        link,
        Mode::Practice,
        id,
        RunLength::Budget(cfg.practice_budget),
        &mut env_factory(template, ObservationMode::Privileged),
    );
    let practice = match practice {
        Ok(p) => p,
        Err(e) => {
            link.shutdown();
            let r = finish(participant, 2, template, &template.cameras, Vec::new(), Some(0), link.stats(), Some(e));
            return Ok(StageRun {
                result: r,
                trajectories: Vec::new(),
            });
        }
    };
    let eval = run_phase(
        link,
        Mode::Evaluate,
        id,
        RunLength::Episodes(cfg.runs),
        &mut env_factory(template, ObservationMode::CameraOnly),
    );
    link.shutdown();
    let stats = link.stats();
    Ok(match eval {
        Ok(o) => StageRun {
            result: finish(participant, 2, template, &o.cameras, o.episodes, Some(practice.infractions), stats, None),
            trajectories: o.trajectories,
        },
        Err(e) => StageRun {
            result: finish(
                participant,
                2,
                template,
                &practice.cameras,
                Vec::new(),
                Some(practice.infractions),
                stats,
                Some(e),
            ),
            trajectories: Vec::new(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardEntry {
    pub rank: usize,
    pub participant: String,
    pub sr: f64,
    pub aats_kph: f64,
    pub nsi: f64,
    /// Stage 2 only.
    pub score: Option<f64>,
    pub entries: usize,
    /// Stage-1 places inside the cut.
    pub advancing: bool,
}

fn check_board(entries: &[SubmissionResult], stage: u8) -> Result<(), HarnessError> {
    let Some(first) = entries.first() else {
        return Ok(());
    };
    for e in entries {
        if e.stage != stage {
            return Err(HarnessError::MixedStages {
                expected: stage,
                found: e.stage,
            });
        }
        if e.camera_config != first.camera_config {
            return Err(HarnessError::MixedBoards(first.camera_config, e.camera_config));
        }
    }
    Ok(())
}

fn desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

fn board(entries: &[SubmissionResult], scores: Option<&[f64]>, key: impl Fn(usize) -> (f64, f64)) -> Vec<LeaderboardEntry> {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    // stable: residual ties keep input order
    order.sort_by(|&i, &j| {
        let (a0, a1) = key(i);
        let (b0, b1) = key(j);
        desc(a0, b0).then(desc(a1, b1))
    });
    let stage1 = scores.is_none();
    order
        .into_iter()
        .enumerate()
        .map(|(k, i)| {
            let e = &entries[i];
            LeaderboardEntry {
                rank: k + 1,
                participant: e.participant.clone(),
                sr: e.report.sr,
                aats_kph: e.report.aats_kph,
                nsi: e.report.nsi,
                score: scores.map(|s| s[i]),
                entries: e.entries,
                advancing: stage1 && k < ADVANCING,
            }
        })
        .collect()
}

/// Descending SR, then descending AATS.
pub fn rank_stage1(entries: &[SubmissionResult]) -> Result<Vec<LeaderboardEntry>, HarnessError> {
    check_board(entries, 1)?;
    Ok(board(entries, None, |i| (entries[i].report.sr, entries[i].report.aats_kph)))
}

/// Score from cohort statistics. A median of zero scores +1 for a clean
/// entry and −1 otherwise.
pub fn weighted_score(aats: f64, nsi: f64, max_aats: f64, median_nsi: f64) -> f64 {
    let speed = aats / max_aats;
    let safety = if median_nsi == 0.0 {
        if nsi == 0.0 {
            1.0
        } else {
            -1.0
        }
    } else {
        (1.0 - nsi / median_nsi).max(-1.0)
    };
    speed + safety
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn cohort_stats(cohort: &[SubmissionResult]) -> Result<(f64, f64), HarnessError> {
    let nsi: Vec<f64> = cohort.iter().map(|e| e.report.nsi).collect();
    let med = median(&nsi).ok_or(HarnessError::EmptyCohort)?;
    let max = cohort.iter().map(|e| e.report.aats_kph).fold(0.0, f64::max);
    if max <= 0.0 {
        return Err(HarnessError::ZeroMaxAats);
    }
    Ok((max, med))
}

pub fn stage2_score(entry: &SubmissionResult, cohort: &[SubmissionResult]) -> Result<f64, HarnessError> {
    if !cohort.contains(entry) {
        return Err(HarnessError::NotInCohort);
    }
    let (max, med) = cohort_stats(cohort)?;
    Ok(weighted_score(entry.report.aats_kph, entry.report.nsi, max, med))
}

/// Descending SR, then descending weighted score.
pub fn rank_stage2(entries: &[SubmissionResult]) -> Result<Vec<LeaderboardEntry>, HarnessError> {
    check_board(entries, 2)?;
    if entries.is_empty() {
        return Ok(Vec::new());
    }
    let (max, med) = cohort_stats(entries)?;
    let scores: Vec<f64> = entries
        .iter()
        .map(|e| weighted_score(e.report.aats_kph, e.report.nsi, max, med))
        .collect();
    Ok(board(entries, Some(&scores), |i| (entries[i].report.sr, scores[i])))
}

pub fn rank(stage: u8, entries: &[SubmissionResult]) -> Result<Vec<LeaderboardEntry>, HarnessError> {
    match stage {
        1 => rank_stage1(entries),
        2 => rank_stage2(entries),
        s => Err(HarnessError::BadStage(s)),
    }
}

/// One submission per participant and board: the best valid one by SR, then
/// AATS, then fewer infractions. `entries` counts every attempt, valid or not.
pub fn best_per_participant(results: &[SubmissionResult]) -> Vec<SubmissionResult> {
    let mut best: Vec<SubmissionResult> = Vec::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in results {
        *counts.entry(&r.participant).or_default() += 1;
        if !r.valid {
            continue;
        }
        match best.iter_mut().find(|b| b.participant == r.participant) {
            None => best.push(r.clone()),
            Some(b) => {
                let better = desc(r.report.sr, b.report.sr)
                    .then(desc(r.report.aats_kph, b.report.aats_kph))
                    .then(b.report.nsi.partial_cmp(&r.report.nsi).unwrap_or(Ordering::Equal).reverse())
                    == Ordering::Less;
                if better {
                    *b = r.clone();
                }
            }
        }
    }
    for b in &mut best {
        b.entries = counts[b.participant.as_str()];
    }
    best
}

/// Ranked boards keyed by (stage, camera config).
pub fn leaderboards(results: &[SubmissionResult]) -> Result<BTreeMap<(u8, CameraConfig), Vec<LeaderboardEntry>>, HarnessError> {
    let mut groups: BTreeMap<(u8, CameraConfig), Vec<SubmissionResult>> = BTreeMap::new();
    for r in results {
        groups.entry((r.stage, r.camera_config)).or_default().push(r.clone());
    }
    let mut out = BTreeMap::new();
    for (key, group) in groups {
        let entries = best_per_participant(&group);
        out.insert(key, rank(key.0, &entries)?);
    }
    Ok(out)
}

/// Append-only results file, one JSON object per line.
#[derive(Debug)]
pub struct ResultStore {
    path: PathBuf,
    lock: Mutex<()>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Loaded {
    pub results: Vec<SubmissionResult>,
    /// Lines that did not parse.
    pub skipped: usize,
}

impl ResultStore {
    pub fn new(path: impl AsRef<Path>) -> Self {
        ResultStore {
            path: path.as_ref().to_path_buf(),
            lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, r: &SubmissionResult) -> Result<(), HarnessError> {
        let mut line = serde_json::to_string(r).map_err(io::Error::other)?;
        line.push('\n');
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        Ok(())
    }

    /// A missing file is an empty store.
    pub fn load(&self) -> Result<Loaded, HarnessError> {
        let f = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Loaded::default()),
            Err(e) => return Err(e.into()),
        };
        let mut out = Loaded::default();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<SubmissionResult>(&line) {
                Ok(r) => out.results.push(r),
                Err(e) => {
                    log::warn!("{}:{}: skipping corrupt record: {e}", self.path.display(), n + 1);
                    out.skipped += 1;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
