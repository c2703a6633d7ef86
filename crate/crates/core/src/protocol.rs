//! Line-delimited agent wire protocol: codec, session state machine, and
//! the server and client loops.
//!
//! Every message is one JSON object on one line. Floats are written in the
//! shortest form that parses back to the same value.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::agents::{Agent, Mode};
use crate::env::{CameraView, Env, EnvError, Observation, Privileged, Raster, TrajectoryRecord};
use crate::geom::Vec2;
use crate::metrics::{self, EpisodeResult, MetricsReport};
use crate::track::TrackFrame;
use crate::vehicle::Action;

pub const PROTOCOL_VERSION: u64 = 1;
pub const DEFAULT_ACTION_TIMEOUT: Duration = Duration::from_secs(1);
pub const MAX_CONSECUTIVE_STALLS: u32 = 10;

#[derive(Debug, Error, PartialEq)]
pub enum CodecError {
    #[error("malformed line: {0}")]
    Malformed(String),
    #[error("missing field {0}")]
    MissingField(String),
    #[error("field {field} should be {expected}")]
    WrongType { field: String, expected: &'static str },
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("invalid value for {field}: {detail}")]
    InvalidValue { field: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeSummary {
    pub sr: f64,
    pub aats_kph: f64,
    pub nsi: u64,
    pub ed_s: f64,
}

impl EpisodeSummary {
    pub fn from_result(r: &EpisodeResult) -> Self {
        EpisodeSummary {
            sr: metrics::success_rate(r).unwrap_or(0.0),
            aats_kph: metrics::aats(r).unwrap_or(0.0),
            nsi: metrics::nsi(r) as u64,
            ed_s: metrics::ed(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsMessage {
    pub episode: u64,
    pub step: u64,
    pub speed: f64,
    pub cameras: BTreeMap<CameraView, Raster>,
    pub privileged: Option<Privileged>,
}

impl ObsMessage {
    pub fn observation(&self) -> Observation {
        Observation {
            speed: self.speed,
            cameras: self.cameras.clone(),
            privileged: self.privileged.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello { protocol: u64, mode: Mode, track: String },
    Declare { cameras: Vec<CameraView> },
    Obs(ObsMessage),
    Action(Action),
    EpisodeEnd(EpisodeSummary),
    RunEnd { report: Map<String, Value> },
    Shutdown,
    Error { code: String, detail: String },
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::Declare { .. } => "declare",
            Message::Obs(_) => "obs",
            Message::Action(_) => "action",
            Message::EpisodeEnd(_) => "episode_end",
            Message::RunEnd { .. } => "run_end",
            Message::Shutdown => "shutdown",
            Message::Error { .. } => "error",
        }
    }

    pub fn error(code: &str, detail: impl Into<String>) -> Message {
        Message::Error {
            code: code.into(),
            detail: detail.into(),
        }
    }
}

fn raster_json(r: &Raster) -> Value {
    Value::Array(
        (0..r.height)
            .map(|i| Value::Array(r.row(i).iter().map(|&c| Value::from(c)).collect()))
            .collect(),
    )
}

/// One line, without the trailing newline.
pub fn encode_message(m: &Message) -> String {
    let v = match m {
        Message::Hello { protocol, mode, track } => {
            json!({"type": "hello", "protocol": protocol, "mode": mode.name(), "track": track})
        }
        Message::Declare { cameras } => {
            json!({"type": "declare", "cameras": cameras.iter().map(|c| c.name()).collect::<Vec<_>>()})
        }
        Message::Obs(o) => {
            let cams: Map<String, Value> = o
                .cameras
                .iter()
                .map(|(k, r)| (k.name().to_string(), raster_json(r)))
                .collect();
            let privileged = match &o.privileged {
                None => Value::Null,
                Some(p) => json!({
                    "x": p.position.x,
                    "y": p.position.y,
                    "heading": p.heading,
                    "frame": p.frame.map(|f| json!({"s": f.s, "d": f.d})),
                    "mask": p.mask.as_ref().map(raster_json),
                }),
            };
            json!({
                "type": "obs",
                "episode": o.episode,
                "step": o.step,
                "speed": o.speed,
                "cameras": cams,
                "privileged": privileged,
            })
        }
        Message::Action(a) => {
            json!({"type": "action", "steering": a.steering, "acceleration": a.acceleration})
        }
        Message::EpisodeEnd(s) => json!({
            "type": "episode_end",
            "result": {"sr": s.sr, "aats_kph": s.aats_kph, "nsi": s.nsi, "ed_s": s.ed_s},
        }),
        Message::RunEnd { report } => json!({"type": "run_end", "report": report}),
        Message::Shutdown => json!({"type": "shutdown"}),
        Message::Error { code, detail } => json!({"type": "error", "code": code, "detail": detail}),
    };
    v.to_string()
}

struct Fields<'a> {
    obj: &'a Map<String, Value>,
    prefix: &'a str,
}

impl<'a> Fields<'a> {
    fn path(&self, key: &str) -> String {
        if self.prefix.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.prefix)
        }
    }

    fn get(&self, key: &str) -> Result<&'a Value, CodecError> {
        self.obj.get(key).ok_or_else(|| CodecError::MissingField(self.path(key)))
    }

    fn wrong(&self, key: &str, expected: &'static str) -> CodecError {
        CodecError::WrongType {
            field: self.path(key),
            expected,
        }
    }

    fn str(&self, key: &str) -> Result<&'a str, CodecError> {
        self.get(key)?.as_str().ok_or_else(|| self.wrong(key, "a string"))
    }

    fn f64(&self, key: &str) -> Result<f64, CodecError> {
        self.get(key)?.as_f64().ok_or_else(|| self.wrong(key, "a number"))
    }

    fn u64(&self, key: &str) -> Result<u64, CodecError> {
        self.get(key)?.as_u64().ok_or_else(|| self.wrong(key, "a non-negative integer"))
    }

    fn object(&self, key: &str) -> Result<&'a Map<String, Value>, CodecError> {
        self.get(key)?.as_object().ok_or_else(|| self.wrong(key, "an object"))
    }
}

fn decode_raster(v: &Value, field: &str) -> Result<Raster, CodecError> {
    let wrong = || CodecError::WrongType {
        field: field.to_string(),
        expected: "an array of equal-length rows of 0/1",
    };
    let rows = v.as_array().ok_or_else(wrong)?;
    let height = rows.len();
    let width = rows.first().and_then(|r| r.as_array()).map_or(0, |r| r.len());
    let mut raster = Raster::new(width, height);
    for (i, row) in rows.iter().enumerate() {
        let row = row.as_array().filter(|r| r.len() == width).ok_or_else(wrong)?;
        for (j, c) in row.iter().enumerate() {
            match c.as_u64() {
                Some(b @ (0 | 1)) => raster.set(i, j, b as u8),
                _ => return Err(wrong()),
            }
        }
    }
    Ok(raster)
}

fn decode_mode(f: &Fields, key: &str) -> Result<Mode, CodecError> {
    match f.str(key)? {
        "practice" => Ok(Mode::Practice),
        "evaluate" => Ok(Mode::Evaluate),
        other => Err(CodecError::InvalidValue {
            field: f.path(key),
            detail: format!("{other:?} is not practice or evaluate"),
        }),
    }
}

fn decode_privileged(v: &Value) -> Result<Option<Privileged>, CodecError> {
    if v.is_null() {
        return Ok(None);
    }
    let obj = v.as_object().ok_or_else(|| CodecError::WrongType {
        field: "privileged".into(),
        expected: "an object or null",
    })?;
    let f = Fields {
        obj,
        prefix: "privileged",
    };
    let frame = match f.get("frame")? {
        Value::Null => None,
        Value::Object(o) => {
            let ff = Fields {
                obj: o,
                prefix: "privileged.frame",
            };
            Some(TrackFrame {
                s: ff.f64("s")?,
                d: ff.f64("d")?,
            })
        }
        _ => return Err(f.wrong("frame", "an object or null")),
    };
    let mask = match f.get("mask")? {
        Value::Null => None,
        m => Some(decode_raster(m, "privileged.mask")?),
    };
    Ok(Some(Privileged {
        position: Vec2::new(f.f64("x")?, f.f64("y")?),
        heading: f.f64("heading")?,
        frame,
        mask,
    }))
}

pub fn decode_message(line: &str) -> Result<Message, CodecError> {
    let v: Value = serde_json::from_str(line.trim_end()).map_err(|e| CodecError::Malformed(e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| CodecError::Malformed("not a JSON object".into()))?;
    let f = Fields { obj, prefix: "" };
    let ty = f.str("type")?;
    Ok(match ty {
        "hello" => Message::Hello {
            protocol: f.u64("protocol")?,
            mode: decode_mode(&f, "mode")?,
            track: f.str("track")?.to_string(),
        },
        "declare" => {
            let arr = f.get("cameras")?.as_array().ok_or_else(|| f.wrong("cameras", "an array"))?;
            let cameras = arr
                .iter()
                .map(|c| {
                    let name = c.as_str().ok_or_else(|| f.wrong("cameras", "an array of view names"))?;
                    name.parse::<CameraView>().map_err(|detail| CodecError::InvalidValue {
                        field: "cameras".into(),
                        detail,
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            Message::Declare { cameras }
        }
        "obs" => {
            let cams = f.object("cameras")?;
            let mut cameras = BTreeMap::new();
            for (k, r) in cams {
                let view = k.parse::<CameraView>().map_err(|detail| CodecError::InvalidValue {
                    field: "cameras".into(),
                    detail,
                })?;
                cameras.insert(view, decode_raster(r, &format!("cameras.{k}"))?);
            }
            Message::Obs(ObsMessage {
                episode: f.u64("episode")?,
                step: f.u64("step")?,
                speed: f.f64("speed")?,
                cameras,
                privileged: decode_privileged(f.get("privileged")?)?,
            })
        }
        "action" => Message::Action(Action::new(f.f64("steering")?, f.f64("acceleration")?)),
        "episode_end" => {
            let r = Fields {
                obj: f.object("result")?,
                prefix: "result",
            };
            Message::EpisodeEnd(EpisodeSummary {
                sr: r.f64("sr")?,
                aats_kph: r.f64("aats_kph")?,
                nsi: r.u64("nsi")?,
                ed_s: r.f64("ed_s")?,
            })
        }
        "run_end" => Message::RunEnd {
            report: f.object("report")?.clone(),
        },
        "shutdown" => Message::Shutdown,
        "error" => Message::Error {
            code: f.str("code")?.to_string(),
            detail: f.str("detail")?.to_string(),
        },
        other => return Err(CodecError::UnknownType(other.to_string())),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    AwaitingDeclare,
    Idle,
    AwaitingAction,
    Closed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub phase: Phase,
    pub cameras: Vec<CameraView>,
    pub mode: Mode,
    /// Actions clamped into range so far.
    pub warnings: u32,
}

impl SessionState {
    /// State right after the server's hello.
    pub fn new(mode: Mode) -> Self {
        SessionState {
            phase: Phase::AwaitingDeclare,
            cameras: Vec::new(),
            mode,
            warnings: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("protocol violation: expected {expected}, got {got}")]
pub struct Violation {
    pub expected: &'static str,
    pub got: String,
}

/// Apply one message to the session. Returns the next state and the message
/// as it should be acted on (actions are clamped into range).
pub fn validate_transition(s: &SessionState, m: &Message) -> Result<(SessionState, Message), Violation> {
    let mut next = s.clone();
    let violation = |expected: &'static str| Violation {
        expected,
        got: m.type_name().to_string(),
    };
    if s.phase == Phase::Closed {
        return Err(violation("nothing (session closed)"));
    }
    let out = match (s.phase, m) {
        (_, Message::Shutdown) | (_, Message::Error { .. }) => {
            next.phase = Phase::Closed;
            m.clone()
        }
        (Phase::AwaitingDeclare | Phase::Idle, Message::Hello { mode, .. }) => {
            next.phase = Phase::AwaitingDeclare;
            next.mode = *mode;
            m.clone()
        }
        (Phase::AwaitingDeclare, Message::Declare { cameras }) => {
            let mut seen: Vec<CameraView> = Vec::new();
            for c in cameras {
                if seen.contains(c) {
                    return Err(Violation {
                        expected: "declare with distinct cameras",
                        got: format!("duplicate {c}"),
                    });
                }
                seen.push(*c);
            }
            if cameras.is_empty() {
                return Err(Violation {
                    expected: "declare with at least one camera",
                    got: "empty camera set".into(),
                });
            }
            next.cameras = cameras.clone();
            next.phase = Phase::Idle;
            m.clone()
        }
        (Phase::AwaitingDeclare, _) => return Err(violation("declare")),
        (Phase::Idle, Message::Obs(o)) => {
            if s.mode == Mode::Evaluate && o.privileged.is_some() {
                return Err(Violation {
                    expected: "obs without privileged data in evaluate mode",
                    got: "privileged obs".into(),
                });
            }
            next.phase = Phase::AwaitingAction;
            m.clone()
        }
        (Phase::Idle, Message::EpisodeEnd(_) | Message::RunEnd { .. }) => m.clone(),
        (Phase::Idle, _) => return Err(violation("obs, episode_end, run_end or shutdown")),
        (Phase::AwaitingAction, Message::Action(a)) => {
            next.phase = Phase::Idle;
            if !(a.steering.is_finite() && a.acceleration.is_finite()) {
                return Err(Violation {
                    expected: "finite action channels",
                    got: format!("{a:?}"),
                });
            }
            if !a.is_valid() {
                next.warnings += 1;
            }
            Message::Action(Action::clamped(a.steering, a.acceleration))
        }
        (Phase::AwaitingAction, _) => return Err(violation("action")),
        (Phase::Closed, _) => unreachable!(),
    };
    Ok((next, out))
}

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("transport: {0}")]
    Transport(#[from] io::Error),
    #[error("agent sent a bad line: {0}")]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Violation(#[from] Violation),
    #[error("agent stalled {0} consecutive steps")]
    Stalled(u32),
    #[error("agent closed the connection")]
    Closed,
    #[error("agent reported error {code}: {detail}")]
    Remote { code: String, detail: String },
    #[error(transparent)]
    Env(#[from] EnvError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LinkStats {
    pub warnings: u32,
    pub stalls: u32,
    pub stale: u32,
}

/// The server's handle on one agent.
pub trait AgentLink {
    /// Announce the run and collect the camera declaration.
    fn hello(&mut self, mode: Mode, track: &str) -> Result<Vec<CameraView>, LinkError>;
    fn act(&mut self, obs: &ObsMessage) -> Result<Action, LinkError>;
    fn episode_end(&mut self, result: &EpisodeResult) -> Result<(), LinkError>;
    fn run_end(&mut self, report: Option<&MetricsReport>) -> Result<(), LinkError>;
    fn shutdown(&mut self);
    fn stats(&self) -> LinkStats;
}

fn report_object(report: Option<&MetricsReport>) -> Map<String, Value> {
    match report.map(serde_json::to_value) {
        Some(Ok(Value::Object(m))) => m,
        _ => Map::new(),
    }
}

/// An agent running in the server's thread. Goes through the same state
/// machine as a remote one.
pub struct InProcessLink<'a> {
    agent: &'a mut dyn Agent,
    session: SessionState,
    stats: LinkStats,
}

impl<'a> InProcessLink<'a> {
    pub fn new(agent: &'a mut dyn Agent) -> Self {
        InProcessLink {
            agent,
            session: SessionState::new(Mode::Evaluate),
            stats: LinkStats::default(),
        }
    }

    fn apply(&mut self, m: &Message) -> Result<Message, LinkError> {
        let (next, out) = validate_transition(&self.session, m)?;
        self.session = next;
        self.stats.warnings = self.session.warnings;
        Ok(out)
    }
}

impl AgentLink for InProcessLink<'_> {
    fn hello(&mut self, mode: Mode, track: &str) -> Result<Vec<CameraView>, LinkError> {
        self.apply(&Message::Hello {
            protocol: PROTOCOL_VERSION,
            mode,
            track: track.to_string(),
        })?;
        self.agent.begin_run(mode);
        let cameras = self.agent.cameras();
        self.apply(&Message::Declare {
            cameras: cameras.clone(),
        })?;
        Ok(cameras)
    }

    fn act(&mut self, obs: &ObsMessage) -> Result<Action, LinkError> {
        self.apply(&Message::Obs(obs.clone()))?;
        if obs.step == 0 {
            self.agent.reset();
        }
        let a = self.agent.act(&obs.observation());
        match self.apply(&Message::Action(a))? {
            Message::Action(a) => Ok(a),
            _ => unreachable!(),
        }
    }

    fn episode_end(&mut self, result: &EpisodeResult) -> Result<(), LinkError> {
        self.apply(&Message::EpisodeEnd(EpisodeSummary::from_result(result)))?;
        Ok(())
    }

    fn run_end(&mut self, report: Option<&MetricsReport>) -> Result<(), LinkError> {
        self.apply(&Message::RunEnd {
            report: report_object(report),
        })?;
        Ok(())
    }

    fn shutdown(&mut self) {
        let _ = self.apply(&Message::Shutdown);
    }

    fn stats(&self) -> LinkStats {
        self.stats
    }
}

/// A remote agent on a byte stream. Lines are read on a helper thread so
/// that a slow agent can be timed out.
pub struct RemoteLink<W: Write> {
    writer: W,
    lines: Receiver<io::Result<String>>,
    session: SessionState,
    stats: LinkStats,
    consecutive_stalls: u32,
    /// Actions still owed for observations that timed out.
    owed: u32,
    pub action_timeout: Duration,
    pub max_stalls: u32,
    /// How long to wait for hello replies.
    pub handshake_timeout: Duration,
    socket: Option<TcpStream>,
}

impl RemoteLink<TcpStream> {
    pub fn from_tcp(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let socket = stream.try_clone()?;
        let mut link = RemoteLink::new(reader, stream);
        link.socket = Some(socket);
        Ok(link)
    }
}

impl<W: Write> RemoteLink<W> {
    pub fn new<R: io::Read + Send + 'static>(reader: R, writer: W) -> Self {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        RemoteLink {
            writer,
            lines: rx,
            session: SessionState::new(Mode::Evaluate),
            stats: LinkStats::default(),
            consecutive_stalls: 0,
            owed: 0,
            action_timeout: DEFAULT_ACTION_TIMEOUT,
            max_stalls: MAX_CONSECUTIVE_STALLS,
            handshake_timeout: Duration::from_secs(30),
            socket: None,
        }
    }

    fn send(&mut self, m: &Message) -> Result<(), LinkError> {
        let mut line = encode_message(m);
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        Ok(())
    }

    fn send_server(&mut self, m: &Message) -> Result<(), LinkError> {
        let (next, _) = validate_transition(&self.session, m)?;
        self.session = next;
        self.send(m)
    }

    fn fail(&mut self, e: LinkError) -> LinkError {
        let code = match &e {
            LinkError::Codec(_) => "bad_message",
            LinkError::Violation(_) => "protocol_violation",
            LinkError::Stalled(_) => "stalled",
            _ => "aborted",
        };
        let _ = self.send(&Message::error(code, e.to_string()));
        self.session.phase = Phase::Closed;
        e
    }

    /// Next decoded agent message, or `None` on timeout.
    fn recv(&mut self, timeout: Duration) -> Result<Option<Message>, LinkError> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => {
                if line.trim().is_empty() {
                    return Ok(None);
                }
                Ok(Some(decode_message(&line)?))
            }
            Ok(Err(e)) => Err(LinkError::Transport(e)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(LinkError::Closed),
        }
    }

    fn agent_message(&mut self, m: Message) -> Result<Message, LinkError> {
        if let Message::Error { code, detail } = m {
            self.session.phase = Phase::Closed;
            return Err(LinkError::Remote { code, detail });
        }
        let (next, out) = validate_transition(&self.session, &m)?;
        self.session = next;
        self.stats.warnings = self.session.warnings;
        Ok(out)
    }

    fn hello_inner(&mut self, mode: Mode, track: &str) -> Result<Vec<CameraView>, LinkError> {
        self.send_server(&Message::Hello {
            protocol: PROTOCOL_VERSION,
            mode,
            track: track.to_string(),
        })?;
        let deadline = Instant::now() + self.handshake_timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(LinkError::Stalled(1));
            }
            match self.recv(left)? {
                None => continue,
                // late replies to observations of the previous run
                Some(Message::Action(_)) if self.owed > 0 => {
                    self.owed -= 1;
                    self.stats.stale += 1;
                }
                Some(m) => {
                    if let Message::Declare { cameras } = self.agent_message(m)? {
                        return Ok(cameras);
                    }
                }
            }
        }
    }

    fn act_inner(&mut self, obs: &ObsMessage) -> Result<Action, LinkError> {
        self.send_server(&Message::Obs(obs.clone()))?;
        let deadline = Instant::now() + self.action_timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            let msg = if left.is_zero() { None } else { self.recv(left)? };
            match msg {
                Some(Message::Action(_)) if self.owed > 0 => {
                    self.owed -= 1;
                    self.stats.stale += 1;
                }
                Some(m) => {
                    self.consecutive_stalls = 0;
                    match self.agent_message(m)? {
                        Message::Action(a) => return Ok(a),
                        other => {
                            return Err(LinkError::Violation(Violation {
                                expected: "action",
                                got: other.type_name().into(),
                            }))
                        }
                    }
                }
                None if left.is_zero() || Instant::now() >= deadline => {
                    // substitute the zero action and move on
                    self.stats.stalls += 1;
                    self.consecutive_stalls += 1;
                    self.owed += 1;
                    self.session.phase = Phase::Idle;
                    if self.consecutive_stalls >= self.max_stalls {
                        return Err(LinkError::Stalled(self.consecutive_stalls));
                    }
                    return Ok(Action::ZERO);
                }
                None => {}
            }
        }
    }
}

impl<W: Write> Drop for RemoteLink<W> {
    fn drop(&mut self) {
        if let Some(s) = self.socket.take() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
    }
}

impl<W: Write> AgentLink for RemoteLink<W> {
    fn hello(&mut self, mode: Mode, track: &str) -> Result<Vec<CameraView>, LinkError> {
        self.hello_inner(mode, track).map_err(|e| self.fail(e))
    }

    fn act(&mut self, obs: &ObsMessage) -> Result<Action, LinkError> {
        self.act_inner(obs).map_err(|e| self.fail(e))
    }

    fn episode_end(&mut self, result: &EpisodeResult) -> Result<(), LinkError> {
        self.send_server(&Message::EpisodeEnd(EpisodeSummary::from_result(result)))
    }

    fn run_end(&mut self, report: Option<&MetricsReport>) -> Result<(), LinkError> {
        self.send_server(&Message::RunEnd {
            report: report_object(report),
        })
    }

    fn shutdown(&mut self) {
        if self.session.phase != Phase::Closed {
            let _ = self.send(&Message::Shutdown);
            self.session.phase = Phase::Closed;
        }
        if let Some(s) = self.socket.take() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
    }

    fn stats(&self) -> LinkStats {
        self.stats
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Budget {
    /// Simulated seconds.
    Simulated(f64),
    WallClock(Duration),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunLength {
    Episodes(usize),
    /// Keep running episodes until the budget is spent; the last one may be
    /// cut short.
    Budget(Budget),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOutcome {
    pub cameras: Vec<CameraView>,
    /// Finished episodes.
    pub episodes: Vec<EpisodeResult>,
    /// Infractions in finished and cut-short episodes.
    pub infractions: usize,
    pub simulated_time: f64,
    pub steps: u64,
    /// One per episode, finished or cut, when the environment logs them.
    pub trajectories: Vec<Vec<TrajectoryRecord>>,
}

/// One hello → declare → episodes → run_end exchange. `make_env` builds the
/// environment for the declared cameras.
pub fn run_phase(
    link: &mut dyn AgentLink,
    mode: Mode,
    track_id: &str,
    length: RunLength,
    make_env: &mut dyn FnMut(&[CameraView]) -> Result<Env, EnvError>,
) -> Result<RunOutcome, LinkError> {
    let cameras = link.hello(mode, track_id)?;
    let mut out = RunOutcome {
        cameras: cameras.clone(),
        ..RunOutcome::default()
    };
    let started = Instant::now();
    let spent = |out: &RunOutcome| match length {
        RunLength::Episodes(n) => out.episodes.len() >= n,
        RunLength::Budget(Budget::Simulated(s)) => out.simulated_time >= s - 1e-9,
        RunLength::Budget(Budget::WallClock(d)) => started.elapsed() >= d,
    };
    let mut env = if spent(&out) { None } else { Some(make_env(&cameras)?) };
    let mut episode = 0u64;
    while let Some(env) = env.as_mut().filter(|_| !spent(&out)) {
        let mut obs = env.reset();
        let mut step = 0u64;
        let mut cut = false;
        loop {
            let msg = ObsMessage {
                episode,
                step,
                speed: obs.speed,
                cameras: obs.cameras,
                privileged: if mode == Mode::Evaluate { None } else { obs.privileged },
            };
            let action = link.act(&msg)?;
            let o = env.step(action)?;
            step += 1;
            out.steps += 1;
            out.simulated_time += env.config().dt;
            if o.done {
                break;
            }
            obs = o.observation;
            if matches!(length, RunLength::Budget(_)) && spent(&out) {
                cut = true;
                break;
            }
        }
        if env.config().log_trajectory {
            out.trajectories.push(env.trajectory().to_vec());
        }
        if cut {
            out.infractions += env.partial_result().infractions.len();
        } else {
            let r = env.result().expect("finished episode has a result").clone();
            out.infractions += r.infractions.len();
            link.episode_end(&r)?;
            out.episodes.push(r);
        }
        episode += 1;
    }
    let report = metrics::aggregate(&out.episodes).ok();
    link.run_end(report.as_ref())?;
    Ok(out)
}

/// Accept one agent connection.
pub fn accept(listener: &TcpListener, action_timeout: Duration) -> io::Result<RemoteLink<TcpStream>> {
    let (stream, _) = listener.accept()?;
    let mut link = RemoteLink::from_tcp(stream)?;
    link.action_timeout = action_timeout;
    Ok(link)
}

/// Run a session on one accepted connection and shut it down.
pub fn serve(
    listener: &TcpListener,
    mode: Mode,
    track_id: &str,
    length: RunLength,
    action_timeout: Duration,
    make_env: &mut dyn FnMut(&[CameraView]) -> Result<Env, EnvError>,
) -> Result<RunOutcome, LinkError> {
    let mut link = accept(listener, action_timeout)?;
    let out = run_phase(&mut link, mode, track_id, length, make_env);
    link.shutdown();
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClientReport {
    pub modes: Vec<Mode>,
    pub episodes: Vec<EpisodeSummary>,
    pub run_reports: Vec<Map<String, Value>>,
    pub steps: u64,
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("transport: {0}")]
    Transport(#[from] io::Error),
    #[error("bad line from server: {0}")]
    Codec(#[from] CodecError),
    #[error("server speaks protocol {0}")]
    Version(u64),
    #[error("server error {code}: {detail}")]
    Server { code: String, detail: String },
    #[error("server closed the connection before shutdown")]
    Closed,
}

/// Agent side of a session over any line stream.
pub fn drive_agent<R: BufRead, W: Write>(reader: R, mut writer: W, agent: &mut dyn Agent) -> Result<ClientReport, ClientError> {
    let mut report = ClientReport::default();
    let send = |w: &mut W, m: &Message| -> io::Result<()> {
        let mut line = encode_message(m);
        line.push('\n');
        w.write_all(line.as_bytes())?;
        w.flush()
    };
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match decode_message(&line)? {
            Message::Hello { protocol, mode, .. } => {
                if protocol != PROTOCOL_VERSION {
                    return Err(ClientError::Version(protocol));
                }
                agent.begin_run(mode);
                report.modes.push(mode);
                send(&mut writer, &Message::Declare { cameras: agent.cameras() })?;
            }
            Message::Obs(o) => {
                if o.step == 0 {
                    agent.reset();
                }
                let a = agent.act(&o.observation());
                report.steps += 1;
                send(&mut writer, &Message::Action(a))?;
            }
            Message::EpisodeEnd(s) => report.episodes.push(s),
            Message::RunEnd { report: r } => report.run_reports.push(r),
            Message::Shutdown => return Ok(report),
            Message::Error { code, detail } => return Err(ClientError::Server { code, detail }),
            Message::Declare { .. } | Message::Action(_) => {}
        }
    }
    Err(ClientError::Closed)
}

/// Connect to a server and run `agent` until shutdown.
pub fn run_agent(addr: impl ToSocketAddrs, agent: &mut dyn Agent) -> Result<ClientReport, ClientError> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let reader = BufReader::new(stream.try_clone()?);
    drive_agent(reader, stream, agent)
}

#[cfg(test)]
mod tests;
