mod plot;

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use race_core::agents::{Agent, FullThrottleAgent, IdleAgent, Mode, MpcAgent, PurePursuitAgent, RandomAgent};
use race_core::env::write_trajectory_csv;
use race_core::harness::{self, ResultStore, Stage2Config, StageRun};
use race_core::protocol::{self, AgentLink, Budget, InProcessLink, RemoteLink, RunLength};
use race_core::{CameraConfig, EnvConfig, Track, TrackKind, TrackSpec};

#[derive(Parser)]
#[command(name = "race", version, about = "Desk-scale autonomous racing benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Practice,
    Evaluate,
}

#[derive(Clone, Copy, ValueEnum)]
enum CamerasArg {
    Single,
    Multi,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a track and write it as JSON.
    GenTrack {
        /// circle, stadium, thruxton_standin, anglesey_standin, vegas_standin
        #[arg(long)]
        spec: String,
        #[arg(long, env = "RACE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        segments: Option<usize>,
    },
    /// Host one agent session and print the run report.
    Serve {
        #[arg(long)]
        track: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        listen: String,
        /// Evaluate-mode episodes.
        #[arg(long, default_value_t = harness::DEFAULT_RUNS)]
        runs: usize,
        /// Practice-mode budget in simulated seconds.
        #[arg(long, default_value_t = harness::DEFAULT_PRACTICE_BUDGET)]
        practice_budget: f64,
        #[arg(long, default_value_t = 1000)]
        timeout_ms: u64,
    },
    /// Connect a built-in agent to a server.
    Agent {
        #[arg(long)]
        connect: String,
        /// mpc, pure_pursuit, random, idle, full_throttle
        #[arg(long, default_value = "mpc")]
        policy: String,
        #[arg(long, env = "RACE_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Run a stage and append the result to the store.
    Eval {
        #[arg(long)]
        stage: u8,
        /// `builtin:<policy>` runs in-process; anything else is an address to
        /// listen on for the agent's connection.
        #[arg(long)]
        agent: String,
        #[arg(long)]
        track: PathBuf,
        #[arg(long, default_value_t = harness::DEFAULT_PRACTICE_BUDGET)]
        practice_budget: f64,
        /// Read the practice budget as wall-clock seconds.
        #[arg(long)]
        wall_clock: bool,
        #[arg(long, default_value_t = harness::DEFAULT_RUNS)]
        runs: usize,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        participant: Option<String>,
        /// Directory for per-episode trajectory CSVs.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        timeout_ms: u64,
        #[arg(long, env = "RACE_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Print a ranked board from the store.
    Leaderboard {
        #[arg(long)]
        stage: u8,
        #[arg(long, value_enum)]
        cameras: CamerasArg,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Render a trajectory CSV as an SVG lap trace and speed profile.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn builtin(name: &str, seed: u64) -> Result<Box<dyn Agent>> {
    Ok(match name {
        "mpc" => Box::new(MpcAgent::default()),
        "pure_pursuit" => Box::new(PurePursuitAgent::default()),
        "random" => Box::new(RandomAgent::new(seed)),
        "idle" => Box::new(IdleAgent),
        "full_throttle" => Box::new(FullThrottleAgent),
        other => bail!("unknown policy {other:?} (mpc, pure_pursuit, random, idle, full_throttle)"),
    })
}

fn load_track(path: &Path) -> Result<Arc<Track>> {
    Ok(Arc::new(
        Track::load(path).with_context(|| format!("loading track {}", path.display()))?,
    ))
}

fn write_logs(dir: &Path, run: &StageRun) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (k, traj) in run.trajectories.iter().enumerate() {
        let path = dir.join(format!("episode_{k}.csv"));
        let f = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        write_trajectory_csv(std::io::BufWriter::new(f), traj)?;
    }
    Ok(())
}

fn run_eval(
    stage: u8,
    link: &mut dyn AgentLink,
    participant: &str,
    template: &EnvConfig,
    runs: usize,
    budget: Budget,
) -> Result<StageRun> {
    Ok(match stage {
        1 => harness::run_stage1(link, participant, template, runs),
        2 => {
            let cfg = Stage2Config {
                practice_budget: budget,
                runs,
                ..Stage2Config::default()
            };
            harness::run_stage2(link, participant, template, &cfg)?
        }
        s => bail!("stage must be 1 or 2, got {s}"),
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenTrack {
            spec,
            seed,
            out,
            segments,
        } => {
            let kind: TrackKind = spec.parse()?;
            let mut spec = TrackSpec::new(kind);
            if let Some(n) = segments {
                spec.n_segments = n;
            }
            let track = race_core::generate_track(&spec, seed)?;
            track.save(&out)?;
            println!(
                "{}: {:.1} m, {} segments -> {}",
                track.id(),
                track.total_length(),
                track.n_segments(),
                out.display()
            );
        }
        Command::Serve {
            track,
            mode,
            listen,
            runs,
            practice_budget,
            timeout_ms,
        } => {
            let track = load_track(&track)?;
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            log::info!("listening on {}", listener.local_addr()?);
            let (mode, length, obs_mode) = match mode {
                ModeArg::Practice => (
                    Mode::Practice,
                    RunLength::Budget(Budget::Simulated(practice_budget)),
                    race_core::ObservationMode::Privileged,
                ),
                ModeArg::Evaluate => (
                    Mode::Evaluate,
                    RunLength::Episodes(runs),
                    race_core::ObservationMode::CameraOnly,
                ),
            };
            let template = EnvConfig::new(track.clone());
            let mut make = |cams: &[race_core::CameraView]| {
                let mut cfg = template.clone();
                cfg.cameras = cams.to_vec();
                cfg.mode = obs_mode;
                race_core::Env::make(cfg)
            };
            let out = protocol::serve(
                &listener,
                mode,
                track.id(),
                length,
                Duration::from_millis(timeout_ms),
                &mut make,
            )?;
            let report = race_core::aggregate(&out.episodes).ok();
            println!(
                "{}",
                serde_json::json!({
                    "episodes": out.episodes.len(),
                    "steps": out.steps,
                    "infractions": out.infractions,
                    "report": report,
                })
            );
        }
        Command::Agent { connect, policy, seed } => {
            let mut agent = builtin(&policy, seed)?;
            let report = protocol::run_agent(&connect, agent.as_mut())?;
            for (k, e) in report.episodes.iter().enumerate() {
                println!(
                    "episode {k}: sr {:.3} aats {:.3} km/h nsi {} ed {:.2} s",
                    e.sr, e.aats_kph, e.nsi, e.ed_s
                );
            }
        }
        Command::Eval {
            stage,
            agent,
            track,
            practice_budget,
            wall_clock,
            runs,
            store,
            participant,
            log,
            timeout_ms,
            seed,
        } => {
            let track = load_track(&track)?;
            let mut template = EnvConfig::new(track);
            template.log_trajectory = log.is_some();
            let budget = if wall_clock {
                Budget::WallClock(Duration::from_secs_f64(practice_budget))
            } else {
                Budget::Simulated(practice_budget)
            };
            let run = if let Some(name) = agent.strip_prefix("builtin:") {
                let mut a = builtin(name, seed)?;
                let who = participant.unwrap_or_else(|| name.to_string());
                let mut link = InProcessLink::new(a.as_mut());
                run_eval(stage, &mut link, &who, &template, runs, budget)?
            } else {
                let listener = TcpListener::bind(&agent).with_context(|| format!("binding {agent}"))?;
                log::info!("waiting for the agent on {}", listener.local_addr()?);
                let (stream, peer) = listener.accept()?;
                let mut link = RemoteLink::from_tcp(stream)?;
                link.action_timeout = Duration::from_millis(timeout_ms);
                let who = participant.unwrap_or_else(|| peer.to_string());
                run_eval(stage, &mut link, &who, &template, runs, budget)?
            };
            if let Some(dir) = &log {
                write_logs(dir, &run)?;
            }
            let r = &run.result;
            ResultStore::new(&store).append(r)?;
            println!(
                "{} stage {} ({}): valid {} sr {:.3} aats {:.3} km/h nsi {:.3}{}",
                r.participant,
                r.stage,
                r.camera_config,
                r.valid,
                r.report.sr,
                r.report.aats_kph,
                r.report.nsi,
                r.error.as_deref().map(|e| format!(" error: {e}")).unwrap_or_default()
            );
        }
        Command::Leaderboard {
            stage,
            cameras,
            store,
            json,
        } => {
            let loaded = ResultStore::new(&store).load()?;
            if loaded.skipped > 0 {
                log::warn!("skipped {} corrupt records", loaded.skipped);
            }
            let config = match cameras {
                CamerasArg::Single => CameraConfig::Single,
                CamerasArg::Multi => CameraConfig::Multi,
            };
            if stage != 1 && stage != 2 {
                bail!("stage must be 1 or 2, got {stage}");
            }
            let boards = harness::leaderboards(&loaded.results)?;
            let board = boards.get(&(stage, config)).cloned().unwrap_or_default();
            if json {
                println!("{}", serde_json::to_string_pretty(&board)?);
                return Ok(());
            }
            println!("stage {stage}, {config} camera");
            println!(
                "{:>4}  {:<24} {:>6} {:>10} {:>8} {:>8} {:>7}",
                "rank", "participant", "SR", "AATS km/h", "NSI", "score", "entries"
            );
            for e in &board {
                println!(
                    "{:>4}  {:<24} {:>6.3} {:>10.3} {:>8.3} {:>8} {:>7}{}",
                    e.rank,
                    e.participant,
                    e.sr,
                    e.aats_kph,
                    e.nsi,
                    e.score.map(|s| format!("{s:.4}")).unwrap_or_else(|| "-".into()),
                    e.entries,
                    if e.advancing { "  *" } else { "" }
                );
            }
        }
        Command::Plot { log, out } => {
            let text = fs::read_to_string(&log).with_context(|| format!("reading {}", log.display()))?;
            let svg = plot::render(&plot::parse(&text)?);
            fs::write(&out, svg)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
