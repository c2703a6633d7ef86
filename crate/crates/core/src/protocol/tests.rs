use super::*;
use crate::agents::{FullThrottleAgent, IdleAgent};
use crate::env::{EnvConfig, ObservationMode, Watchdog};
use crate::track::{generate_track, Track, TrackSpec};
use proptest::prelude::*;
use std::sync::Arc;

fn small_circle() -> Arc<Track> {
    Arc::new(generate_track(&TrackSpec::circle(40.0, 12.0), 0).unwrap())
}

fn env_factory(track: Arc<Track>, mode: ObservationMode) -> impl FnMut(&[CameraView]) -> Result<Env, EnvError> {
    move |cams| {
        let mut cfg = EnvConfig::new(track.clone());
        cfg.cameras = cams.to_vec();
        cfg.mode = mode;
        cfg.watchdog = Watchdog {
            min_progress: 1.0,
            window: 0.5,
        };
        Env::make(cfg)
    }
}

fn sample_obs() -> ObsMessage {
    let mut r = Raster::new(3, 2);
    r.set(0, 1, 1);
    r.set(1, 2, 1);
    let mut cameras = BTreeMap::new();
    cameras.insert(CameraView::Front, r.clone());
    ObsMessage {
        episode: 2,
        step: 7,
        speed: 12.345678901234567,
        cameras,
        privileged: Some(Privileged {
            position: Vec2::new(-3.25, 1e-7),
            heading: 0.1 + 0.2,
            frame: Some(TrackFrame { s: 100.5, d: -0.3 }),
            mask: Some(r),
        }),
    }
}

fn all_messages() -> Vec<Message> {
    let mut report = Map::new();
    report.insert("sr".into(), json!(1.0));
    vec![
        Message::Hello {
            protocol: 1,
            mode: Mode::Practice,
            track: "vegas_standin".into(),
        },
        Message::Declare {
            cameras: vec![CameraView::Front, CameraView::Left, CameraView::Right],
        },
        Message::Obs(sample_obs()),
        Message::Obs(ObsMessage {
            privileged: None,
            ..sample_obs()
        }),
        Message::Action(Action::new(-1.0 / 3.0, 0.1)),
        Message::EpisodeEnd(EpisodeSummary {
            sr: 0.7,
            aats_kph: 63.08,
            nsi: 3,
            ed_s: 12.5,
        }),
        Message::RunEnd { report },
        Message::Shutdown,
        Message::error("protocol_violation", "expected declare, got action"),
    ]
}

#[test]
fn every_message_round_trips() {
    for m in all_messages() {
        let line = encode_message(&m);
        assert!(!line.contains('\n'));
        assert_eq!(decode_message(&line).unwrap(), m, "{line}");
    }
}

#[test]
fn wire_field_names() {
    let line = encode_message(&Message::Action(Action::new(0.5, -0.25)));
    assert_eq!(line, r#"{"acceleration":-0.25,"steering":0.5,"type":"action"}"#);
    let line = encode_message(&Message::Declare {
        cameras: vec![CameraView::Front],
    });
    assert_eq!(line, r#"{"cameras":["front"],"type":"declare"}"#);
    let v: Value = serde_json::from_str(&encode_message(&Message::Obs(sample_obs()))).unwrap();
    assert_eq!(v["cameras"]["front"], json!([[0, 1, 0], [0, 0, 1]]));
    assert_eq!(v["privileged"]["frame"]["s"], json!(100.5));
}

#[test]
fn floats_use_shortest_round_trip_form() {
    let line = encode_message(&Message::Action(Action::new(0.1, -1.0 / 3.0)));
    assert!(line.contains(r#""steering":0.1,"#), "{line}");
    match decode_message(&line).unwrap() {
        Message::Action(a) => {
            assert_eq!(a.steering.to_bits(), 0.1f64.to_bits());
            assert_eq!(a.acceleration.to_bits(), (-1.0f64 / 3.0).to_bits());
        }
        m => panic!("{m:?}"),
    }
}

proptest! {
    #[test]
    fn obs_round_trips_bitwise(
        speed in 0.0..100.0f64,
        x in -1e4..1e4f64,
        h in -3.2..3.2f64,
        cells in proptest::collection::vec(0u8..2, 12),
        step in 0u64..1_000_000,
    ) {
        let mut r = Raster::new(4, 3);
        r.cells = cells;
        let mut cameras = BTreeMap::new();
        cameras.insert(CameraView::Left, r.clone());
        let m = Message::Obs(ObsMessage {
            episode: 0,
            step,
            speed,
            cameras,
            privileged: Some(Privileged {
                position: Vec2::new(x, -x),
                heading: h,
                frame: None,
                mask: None,
            }),
        });
        prop_assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
    }
}

#[test]
fn decode_errors_name_the_field() {
    assert_eq!(
        decode_message(r#"{"type":"action","acceleration":0}"#),
        Err(CodecError::MissingField("steering".into()))
    );
    assert_eq!(
        decode_message(r#"{"type":"action","steering":"x","acceleration":0}"#),
        Err(CodecError::WrongType {
            field: "steering".into(),
            expected: "a number"
        })
    );
    assert_eq!(
        decode_message(r#"{"type":"episode_end","result":{"sr":1,"aats_kph":2,"ed_s":0}}"#),
        Err(CodecError::MissingField("result.nsi".into()))
    );
    assert!(matches!(
        decode_message(r#"{"type":"declare","cameras":["rear"]}"#),
        Err(CodecError::InvalidValue { field, .. }) if field == "cameras"
    ));
    assert!(matches!(
        decode_message(r#"{"type":"obs","episode":0,"step":0,"speed":1,"cameras":{"front":[[0,2]]},"privileged":null}"#),
        Err(CodecError::WrongType { field, .. }) if field == "cameras.front"
    ));
    assert_eq!(decode_message(r#"{"type":"acton"}"#), Err(CodecError::UnknownType("acton".into())));
    assert!(matches!(decode_message("{not json"), Err(CodecError::Malformed(_))));
    assert!(matches!(decode_message("[1,2]"), Err(CodecError::Malformed(_))));
    assert_eq!(decode_message(r#"{"steering":1}"#), Err(CodecError::MissingField("type".into())));
}

fn declared(mode: Mode) -> SessionState {
    let s = SessionState::new(mode);
    validate_transition(
        &s,
        &Message::Declare {
            cameras: vec![CameraView::Front],
        },
    )
    .unwrap()
    .0
}

#[test]
fn legal_transitions() {
    let s = declared(Mode::Practice);
    assert_eq!(s.phase, Phase::Idle);
    assert_eq!(s.cameras, vec![CameraView::Front]);
    let (s, _) = validate_transition(&s, &Message::Obs(sample_obs())).unwrap();
    assert_eq!(s.phase, Phase::AwaitingAction);
    let (s, out) = validate_transition(&s, &Message::Action(Action::new(0.2, 0.3))).unwrap();
    assert_eq!(s.phase, Phase::Idle);
    assert_eq!(out, Message::Action(Action::new(0.2, 0.3)));
    assert_eq!(s.warnings, 0);
    let (s, _) = validate_transition(&s, &Message::RunEnd { report: Map::new() }).unwrap();
    let (s, _) = validate_transition(
        &s,
        &Message::Hello {
            protocol: 1,
            mode: Mode::Practice,
            track: "t".into(),
        },
    )
    .unwrap();
    assert_eq!((s.phase, s.mode), (Phase::AwaitingDeclare, Mode::Practice));
    for phase in [Phase::AwaitingDeclare, Phase::Idle, Phase::AwaitingAction] {
        let st = SessionState { phase, ..s.clone() };
        let (n, _) = validate_transition(&st, &Message::Shutdown).unwrap();
        assert_eq!(n.phase, Phase::Closed);
    }
}

#[test]
fn action_before_declare_is_a_violation() {
    let s = SessionState::new(Mode::Evaluate);
    let e = validate_transition(&s, &Message::Action(Action::ZERO)).unwrap_err();
    assert_eq!(e.expected, "declare");
    assert_eq!(e.got, "action");
    let e = validate_transition(&declared(Mode::Evaluate), &Message::Action(Action::ZERO)).unwrap_err();
    assert_eq!(e.got, "action");
    let mut st = declared(Mode::Practice);
    st.phase = Phase::AwaitingAction;
    assert_eq!(
        validate_transition(&st, &Message::Obs(sample_obs())).unwrap_err().expected,
        "action"
    );
    st.phase = Phase::Closed;
    assert!(validate_transition(&st, &Message::Shutdown).is_err());
}

#[test]
fn two_actions_for_one_obs() {
    let s = declared(Mode::Evaluate);
    let (s, _) = validate_transition(&s, &Message::Obs(ObsMessage { privileged: None, ..sample_obs() })).unwrap();
    let (s, _) = validate_transition(&s, &Message::Action(Action::ZERO)).unwrap();
    let e = validate_transition(&s, &Message::Action(Action::ZERO)).unwrap_err();
    assert_eq!(e.got, "action");
}

#[test]
fn evaluate_obs_never_carries_privileged_data() {
    let s = declared(Mode::Evaluate);
    assert!(validate_transition(&s, &Message::Obs(sample_obs())).is_err());
    assert!(validate_transition(&declared(Mode::Practice), &Message::Obs(sample_obs())).is_ok());
}

#[test]
fn full_size_raster_round_trips() {
    let mut r = Raster::new(64, 64);
    for (i, c) in r.cells.iter_mut().enumerate() {
        *c = ((i * 7919) % 3 == 0) as u8;
    }
    let mut cameras = BTreeMap::new();
    cameras.insert(CameraView::Front, r);
    let m = Message::Obs(ObsMessage { privileged: None, cameras, ..sample_obs() });
    assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
}

#[test]
fn bad_declarations() {
    let s = SessionState::new(Mode::Evaluate);
    assert!(validate_transition(&s, &Message::Declare { cameras: vec![] }).is_err());
    assert!(validate_transition(
        &s,
        &Message::Declare {
            cameras: vec![CameraView::Front, CameraView::Front]
        }
    )
    .is_err());
}

#[test]
fn out_of_range_actions_are_clamped_with_a_warning() {
    let mut s = declared(Mode::Evaluate);
    s.phase = Phase::AwaitingAction;
    let (n, out) = validate_transition(&s, &Message::Action(Action::new(3.0, -1.5))).unwrap();
    assert_eq!(out, Message::Action(Action::new(1.0, -1.0)));
    assert_eq!(n.warnings, 1);
    assert!(validate_transition(&s, &Message::Action(Action::new(f64::NAN, 0.0))).is_err());
}

#[test]
fn in_process_phase_runs_episodes() {
    let track = small_circle();
    let mut agent = IdleAgent;
    let mut link = InProcessLink::new(&mut agent);
    let mut make = env_factory(track.clone(), ObservationMode::CameraOnly);
    let out = run_phase(&mut link, Mode::Evaluate, track.id(), RunLength::Episodes(2), &mut make).unwrap();
    assert_eq!(out.cameras, vec![CameraView::Front]);
    assert_eq!(out.episodes.len(), 2);
    for r in &out.episodes {
        assert_eq!(r.completed_segments, 0);
        assert_eq!(r.infractions.len(), r.total_segments);
    }
    assert_eq!(out.infractions, 2 * track.n_segments());
    link.shutdown();
    assert_eq!(link.stats().warnings, 0);
}

#[test]
fn simulated_budget_cuts_the_last_episode() {
    let track = small_circle();
    let mut agent = IdleAgent;
    let mut link = InProcessLink::new(&mut agent);
    let mut make = env_factory(track.clone(), ObservationMode::Privileged);
    let out = run_phase(
        &mut link,
        Mode::Practice,
        track.id(),
        RunLength::Budget(Budget::Simulated(2.0)),
        &mut make,
    )
    .unwrap();
    assert_eq!(out.steps, 40);
    assert!(out.episodes.is_empty());
    // the watchdog fired on the first segments inside the two seconds
    assert!(out.infractions >= 1);

    let mut agent = IdleAgent;
    let mut link = InProcessLink::new(&mut agent);
    let out = run_phase(
        &mut link,
        Mode::Practice,
        track.id(),
        RunLength::Budget(Budget::Simulated(0.0)),
        &mut make,
    )
    .unwrap();
    assert_eq!(out.steps, 0);
}

fn listener() -> (TcpListener, String) {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap().to_string();
    (l, addr)
}

#[test]
fn tcp_session_matches_in_process() {
    let track = small_circle();
    let (l, addr) = listener();
    let client = thread::spawn(move || run_agent(addr, &mut FullThrottleAgent).unwrap());
    let mut make = env_factory(track.clone(), ObservationMode::CameraOnly);
    let remote = serve(&l, Mode::Evaluate, track.id(), RunLength::Episodes(1), Duration::from_secs(5), &mut make).unwrap();
    let report = client.join().unwrap();

    let mut agent = FullThrottleAgent;
    let mut link = InProcessLink::new(&mut agent);
    let local = run_phase(&mut link, Mode::Evaluate, track.id(), RunLength::Episodes(1), &mut make).unwrap();
    assert_eq!(remote, local);
    assert_eq!(report.modes, vec![Mode::Evaluate]);
    assert_eq!(report.steps, remote.steps);
    assert_eq!(report.episodes, vec![EpisodeSummary::from_result(&remote.episodes[0])]);
    assert_eq!(report.run_reports.len(), 1);
    assert!(report.run_reports[0].contains_key("aats_kph"));
}

fn scripted(addr: String, script: impl FnOnce(&mut BufReader<TcpStream>, &mut TcpStream) + Send + 'static) -> thread::JoinHandle<Vec<String>> {
    thread::spawn(move || {
        let stream = TcpStream::connect(addr).unwrap();
        let mut w = stream.try_clone().unwrap();
        let mut r = BufReader::new(stream);
        script(&mut r, &mut w);
        r.lines().map_while(Result::ok).collect()
    })
}

fn read_msg(r: &mut BufReader<TcpStream>) -> Message {
    let mut line = String::new();
    r.read_line(&mut line).unwrap();
    decode_message(&line).unwrap()
}

fn write_msg(w: &mut TcpStream, m: &Message) {
    writeln!(w, "{}", encode_message(m)).unwrap();
}

#[test]
fn action_before_declare_closes_the_session() {
    let track = small_circle();
    let (l, addr) = listener();
    let client = scripted(addr, |r, w| {
        write_msg(w, &Message::Action(Action::ZERO));
        assert!(matches!(read_msg(r), Message::Hello { .. }));
    });
    let mut make = env_factory(track.clone(), ObservationMode::CameraOnly);
    let err = serve(&l, Mode::Evaluate, track.id(), RunLength::Episodes(1), Duration::from_secs(1), &mut make).unwrap_err();
    match err {
        LinkError::Violation(v) => assert_eq!(v.expected, "declare"),
        e => panic!("{e}"),
    }
    let rest = client.join().unwrap();
    assert_eq!(rest.len(), 1, "{rest:?}");
    match decode_message(&rest[0]).unwrap() {
        Message::Error { code, .. } => assert_eq!(code, "protocol_violation"),
        m => panic!("{m:?}"),
    }
}

#[test]
fn garbage_line_is_reported() {
    let track = small_circle();
    let (l, addr) = listener();
    let client = scripted(addr, |r, w| {
        read_msg(r);
        writeln!(w, "{{\"type\":\"declare\"}}").unwrap();
    });
    let mut make = env_factory(track.clone(), ObservationMode::CameraOnly);
    let err = serve(&l, Mode::Evaluate, track.id(), RunLength::Episodes(1), Duration::from_secs(1), &mut make).unwrap_err();
    assert!(matches!(err, LinkError::Codec(CodecError::MissingField(ref f)) if f == "cameras"), "{err}");
    let rest = client.join().unwrap();
    assert!(rest[0].contains("bad_message"));
}

#[test]
fn silent_agent_is_aborted_after_consecutive_stalls() {
    let track = small_circle();
    let (l, addr) = listener();
    let client = scripted(addr, |r, w| {
        read_msg(r);
        write_msg(
            w,
            &Message::Declare {
                cameras: vec![CameraView::Front],
            },
        );
    });
    let mut link = accept(&l, Duration::from_millis(10)).unwrap();
    let mut make = env_factory(track.clone(), ObservationMode::CameraOnly);
    let err = run_phase(&mut link, Mode::Evaluate, track.id(), RunLength::Episodes(1), &mut make).unwrap_err();
    assert!(matches!(err, LinkError::Stalled(MAX_CONSECUTIVE_STALLS)), "{err}");
    assert_eq!(link.stats().stalls, MAX_CONSECUTIVE_STALLS);
    link.shutdown();
    let rest = client.join().unwrap();
    let obs = rest.iter().filter(|l| l.contains("\"obs\"")).count();
    assert_eq!(obs, MAX_CONSECUTIVE_STALLS as usize);
    assert!(rest.last().unwrap().contains("stalled"));
}

#[test]
fn late_action_is_discarded() {
    let track = small_circle();
    let (l, addr) = listener();
    let client = scripted(addr, |r, w| {
        read_msg(r);
        write_msg(
            w,
            &Message::Declare {
                cameras: vec![CameraView::Front],
            },
        );
        let mut first = true;
        loop {
            match read_msg(r) {
                Message::Obs(_) => {
                    if first {
                        thread::sleep(Duration::from_millis(400));
                        first = false;
                        write_msg(w, &Message::Action(Action::new(1.0, 1.0)));
                    } else {
                        write_msg(w, &Message::Action(Action::new(0.0, 1.0)));
                    }
                }
                Message::RunEnd { .. } => break,
                _ => {}
            }
        }
    });
    let mut link = accept(&l, Duration::from_millis(150)).unwrap();
    let mut make = env_factory(track.clone(), ObservationMode::CameraOnly);
    let out = run_phase(
        &mut link,
        Mode::Evaluate,
        track.id(),
        RunLength::Budget(Budget::Simulated(0.5)),
        &mut make,
    )
    .unwrap();
    link.shutdown();
    client.join().unwrap();
    assert_eq!(out.steps, 10);
    let st = link.stats();
    // the sleep spans one or more timeouts; each owed reply is dropped
    assert!(st.stalls >= 1);
    assert_eq!(st.stale, st.stalls);
}
