use std::net::TcpListener;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use hzl_core::estimators::EstimatorKind;
use hzl_core::pipeline::Stage;
use hzl_core::synth::{synth_video, SceneSpec};
use hzl_core::transport::codec::{FLAG_AIRLIGHT, FLAG_DEHAZED, FLAG_TRANSMISSION};
use hzl_core::transport::{
    decode_message, encode_message, push_source, run_distributed, Body, EndpointOptions, FramePayload,
    ServerHandle, SourceStream, StageEndpoints, StageServer, TopologyAssignment, WireMessage,
};
use hzl_core::{run_pipeline, AirlightParams, DehazeConfig, FrameId, MonitorEvent, PipelineMetrics, Rgb8Image, StageConfig};
use proptest::prelude::*;

type Events = Vec<(FrameId, Option<Vec<u8>>)>;

fn video(w: u32, h: u32, n: u32) -> Vec<Rgb8Image> {
    synth_video(&SceneSpec { noise: 0.02, ..SceneSpec::sized(w, h, n) }).frames
}

fn spawn(stage: Stage, dehaze: DehazeConfig, options: EndpointOptions) -> ServerHandle {
    StageServer::bind("127.0.0.1:0", stage, dehaze, options).unwrap().spawn()
}

struct Cluster {
    handles: Vec<ServerHandle>,
    topo: TopologyAssignment,
}

impl Cluster {
    fn new(dehaze: DehazeConfig, counts: [usize; 3], options: impl Fn(Stage, usize) -> EndpointOptions) -> Self {
        let mut handles = Vec::new();
        let mut addrs: [Vec<String>; 3] = Default::default();
        for (slot, stage) in Stage::ALL.into_iter().enumerate() {
            for i in 0..counts[slot] {
                let h = spawn(stage, dehaze, options(stage, i));
                addrs[slot].push(h.addr.clone());
                handles.push(h);
            }
        }
        let [transmission, airlight, generator] = addrs;
        let mut topo = TopologyAssignment::new(StageEndpoints { transmission, airlight, generator }, "127.0.0.1:0");
        topo.dehaze = dehaze;
        Self { handles, topo }
    }

    fn stop(self) {
        for h in self.handles {
            h.stop();
        }
    }
}

fn collect(events: &mut Events) -> impl FnMut(MonitorEvent) -> Result<(), hzl_core::frame_io::FrameIoError> + '_ {
    |ev| {
        match ev {
            MonitorEvent::Frame(f) => events.push((f.id, Some(f.output().unwrap().data))),
            MonitorEvent::Skip(id) => events.push((id, None)),
            MonitorEvent::EndOfStream => {}
        }
        Ok(())
    }
}

fn in_process(frames: &[Rgb8Image], stage: &StageConfig, dehaze: &DehazeConfig) -> (Events, PipelineMetrics) {
    let mut events = Vec::new();
    let m = run_pipeline(frames.iter().cloned().map(Ok::<_, String>), stage, dehaze, collect(&mut events)).unwrap();
    (events, m)
}

fn distributed(
    topo: &TopologyAssignment,
    frames: &[Rgb8Image],
    stage: &StageConfig,
    dehaze: &DehazeConfig,
) -> (Events, PipelineMetrics) {
    let mut events = Vec::new();
    let m = run_distributed(topo, stage, dehaze, frames.iter().cloned().map(Ok::<_, String>), collect(&mut events)).unwrap();
    (events, m)
}

fn with_watchdog<T: Send + 'static>(secs: u64, f: impl FnOnce() -> T + Send + 'static) -> T {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let _ = tx.send(f());
    });
    rx.recv_timeout(Duration::from_secs(secs)).expect("watchdog fired")
}

#[test]
fn loopback_matches_in_process() {
    let frames = video(48, 32, 30);
    for algo in [EstimatorKind::Dcp, EstimatorKind::Cap] {
        let dehaze = DehazeConfig { airlight: AirlightParams::new(4, 0.2).unwrap(), ..DehazeConfig::with_algo(algo) };
        let stage = StageConfig::new(1, 1, 1).deterministic(true).timeout(None);
        let (expected, expected_m) = in_process(&frames, &stage, &dehaze);
        let cluster = Cluster::new(dehaze, [2, 2, 2], |_, _| EndpointOptions { workers: 2, fail_after: None });
        let topo = cluster.topo.clone();
        let frames2 = frames.clone();
        let (got, m) = with_watchdog(60, move || distributed(&topo, &frames2, &stage, &dehaze));
        cluster.stop();
        assert_eq!(got.len(), expected.len());
        assert!(got == expected, "{algo}: distributed output differs from in-process");
        assert_eq!(m.frames_out, 30);
        // broadcast keeps endpoints in step: no endpoint re-estimates inside the interval
        assert_eq!(m.airlight_estimations, expected_m.airlight_estimations, "{algo}");
    }
}

#[test]
fn racy_distributed_emits_everything() {
    let frames = video(32, 24, 25);
    let dehaze = DehazeConfig::default();
    let cluster = Cluster::new(dehaze, [2, 2, 2], |_, _| EndpointOptions::default());
    let stage = StageConfig::default().timeout(None);
    let topo = cluster.topo.clone();
    let (got, m) = with_watchdog(60, move || distributed(&topo, &frames, &stage, &dehaze));
    cluster.stop();
    let ids: Vec<_> = got.iter().map(|e| e.0).collect();
    assert_eq!(ids, (0..25).collect::<Vec<_>>());
    assert!(got.iter().all(|e| e.1.is_some()));
    assert_eq!(m.frames_in, 25);
    assert!(m.airlight_estimations >= 4);
}

#[test]
fn killed_generator_endpoint_drops_in_flight_frames() {
    let frames = video(32, 24, 40);
    let dehaze = DehazeConfig::default();
    let cluster = Cluster::new(dehaze, [1, 1, 2], |stage, i| EndpointOptions {
        workers: 1,
        fail_after: (stage == Stage::Generator && i == 0).then_some(6),
    });
    let stage = StageConfig::default().timeout(None);
    let topo = cluster.topo.clone();
    let (got, m) = with_watchdog(60, move || distributed(&topo, &frames, &stage, &dehaze));
    cluster.stop();
    assert!(got.windows(2).all(|w| w[0].0 < w[1].0));
    assert_eq!(got.len(), 40);
    assert!(m.frames_dropped > 0);
    assert!(m.frames_out >= 20, "surviving endpoint keeps serving: {}", m.frames_out);
    assert_eq!(m.frames_in, m.frames_out + m.frames_dropped);
}

#[test]
fn losing_a_whole_stage_drops_the_rest() {
    let frames = video(16, 16, 12);
    let dehaze = DehazeConfig::default();
    for deterministic in [true, false] {
        let cluster = Cluster::new(dehaze, [1, 1, 1], |stage, _| EndpointOptions {
            workers: 1,
            fail_after: (stage == Stage::Airlight).then_some(3),
        });
        let stage = StageConfig::default().deterministic(deterministic).timeout(None);
        let topo = cluster.topo.clone();
        let frames = frames.clone();
        let (got, m) = with_watchdog(60, move || distributed(&topo, &frames, &stage, &dehaze));
        cluster.stop();
        assert_eq!(got.len(), 12);
        assert!(got.windows(2).all(|w| w[0].0 < w[1].0));
        assert_eq!(m.frames_in, m.frames_out + m.frames_dropped);
        if deterministic {
            // one airlight request at a time: exactly the first three complete
            assert_eq!(m.frames_out, 3);
        } else {
            assert!(m.frames_out <= 3);
        }
    }
}

#[test]
fn remote_source_feeds_monitor() {
    let frames = video(16, 12, 7);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let to_send = frames.clone();
    let pusher = thread::spawn(move || push_source(&addr, to_send.into_iter().map(Ok::<_, String>)).unwrap());
    let received: Vec<_> = SourceStream::accept(&listener).unwrap().collect::<Result<_, _>>().unwrap();
    assert_eq!(pusher.join().unwrap(), 7);
    assert_eq!(received, frames);
}

#[test]
fn unreachable_endpoint_is_an_error() {
    let free = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string();
    let topo = TopologyAssignment::new(
        StageEndpoints { transmission: vec![free.clone()], airlight: vec![free.clone()], generator: vec![free] },
        "127.0.0.1:0",
    );
    let r = run_distributed(
        &topo,
        &StageConfig::default(),
        &DehazeConfig::default(),
        std::iter::empty::<Result<Rgb8Image, String>>(),
        |_| Ok(()),
    );
    assert!(r.is_err());
}

#[test]
#[ignore = "throughput comparison; needs at least 2 idle cores"]
fn two_transmission_endpoints_are_faster() {
    let frames = synth_video(&SceneSpec::sized(640, 480, 60)).frames;
    let dehaze = DehazeConfig::default();
    let stage = StageConfig::default().timeout(None);
    let time = |n: usize| {
        let cluster = Cluster::new(dehaze, [n, 1, 1], |_, _| EndpointOptions::default());
        let start = Instant::now();
        distributed(&cluster.topo, &frames, &stage, &dehaze);
        let took = start.elapsed();
        cluster.stop();
        took
    };
    let (one, two) = (time(1), time(2));
    assert!(two < one, "2 endpoints {two:?} vs 1 endpoint {one:?}");
}

fn unit_f32() -> impl Strategy<Value = f32> {
    prop_oneof![Just(0.0f32), Just(1.0f32), 0.0f32..=1.0]
}

fn message() -> impl Strategy<Value = WireMessage> {
    let frame = (1u32..5, 1u32..5, 0u8..8, any::<u64>()).prop_flat_map(|(w, h, flags, id)| {
        let n = (w * h) as usize;
        (
            proptest::collection::vec(any::<u8>(), 3 * n),
            proptest::collection::vec(unit_f32(), n),
            [unit_f32(), unit_f32(), unit_f32()],
        )
            .prop_map(move |(image, t, a)| {
                WireMessage::frame(
                    id,
                    FramePayload {
                        width: w,
                        height: h,
                        image,
                        dehazed: flags & FLAG_DEHAZED != 0,
                        transmission: (flags & FLAG_TRANSMISSION != 0).then_some(t),
                        airlight: (flags & FLAG_AIRLIGHT != 0).then_some(a),
                    },
                )
            })
    });
    prop_oneof![
        frame,
        (any::<Option<u64>>(), [unit_f32(), unit_f32(), unit_f32()], any::<u64>())
            .prop_map(|(k, rgb, cursor)| WireMessage::airlight(k, rgb, cursor)),
        (any::<u64>(), any::<Option<u64>>()).prop_map(|(id, n)| WireMessage::end_of_stream(id, n)),
        any::<u64>().prop_map(WireMessage::skip),
    ]
}

proptest! {
    #[test]
    fn codec_round_trip(msg in message()) {
        let bytes = encode_message(&msg);
        let (back, used) = decode_message(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn decoder_is_total(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        if let Ok((msg, used)) = decode_message(&bytes) {
            prop_assert_eq!(&encode_message(&msg)[..], &bytes[..used]);
        }
    }

    #[test]
    fn mutated_messages_never_crash(msg in message(), at in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let mut bytes = encode_message(&msg);
        let i = at.index(bytes.len());
        bytes[i] = byte;
        if let Ok((back, used)) = decode_message(&bytes) {
            prop_assert_eq!(&encode_message(&back)[..], &bytes[..used]);
        }
    }
}

#[test]
fn frame_body_is_readable_from_stream() {
    let msg = WireMessage::frame(3, FramePayload::new(1, 1, vec![1, 2, 3]));
    let mut cursor = std::io::Cursor::new(encode_message(&msg));
    let back = hzl_core::transport::read_message(&mut cursor).unwrap().unwrap();
    assert!(matches!(back.body, Body::FrameData(_)));
}
