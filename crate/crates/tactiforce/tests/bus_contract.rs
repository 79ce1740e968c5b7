use std::time::{Duration, Instant};

use futures_util::SinkExt;
use tactiforce::bus::client::close_reason;
use tactiforce::bus::record::{read_record, record, replay};
use tactiforce::bus::{
    serve, BusClient, BusError, Envelope, FollowerState, FrameRef, LeaderState, OperatorCmd, Payload, Registry,
    ServerHandle, ServerOptions, Verb, DIGIT_FORCE, DIGIT_FRAME, FOLLOWER_STATE, LEADER_STATE, OPERATOR_CMD,
};
use tactiforce::config::Config;
use tactiforce::live::{self, LiveSensor};
use tactiforce_core::regress::ForceRecord;
use tactiforce_core::sim::{press_frame, GelConfig, Indenter, IndenterShape, LightingModel};
use tokio::time::timeout;
use tokio_tungstenite::tungstenite::Message;

const WAIT: Duration = Duration::from_secs(20);

async fn server() -> ServerHandle {
    serve("127.0.0.1:0", Registry::default(), ServerOptions::default()).await.unwrap()
}

fn force(i: u64) -> Payload {
    Payload::Force(ForceRecord {
        frame_id: i,
        stamp: i as f64 / 30.0,
        force_n: i as f64 * 0.01,
        max_depth_mm: 0.1,
        clamped: false,
    })
}

fn leader(i: u64) -> Payload {
    Payload::Leader(LeaderState {
        t: i as f64 * 1e-3,
        x_h: 0.02,
        x_l: 0.02,
        f_l: 0.0,
        f_ld: 0.0,
    })
}

async fn next_pub(c: &mut BusClient) -> Envelope {
    loop {
        let env = timeout(WAIT, c.recv()).await.expect("delivery in time").expect("open connection");
        if env.verb == Verb::Pub {
            return env;
        }
        panic!("unexpected {:?} {:?}", env.verb, env.data);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn ten_thousand_lossless_in_order() {
    let srv = server().await;
    let mut subs = Vec::new();
    for _ in 0..2 {
        let mut c = BusClient::connect(&srv.url()).await.unwrap();
        c.subscribe(DIGIT_FORCE).await.unwrap();
        c.subscribe(LEADER_STATE).await.unwrap();
        subs.push(c);
    }
    let mut publisher = BusClient::connect(&srv.url()).await.unwrap();
    let n = 10_000u64;
    let sender = tokio::spawn(async move {
        for i in 0..n {
            publisher.publish(DIGIT_FORCE, i as f64, &force(i)).await.unwrap();
            publisher.publish(LEADER_STATE, i as f64, &leader(i)).await.unwrap();
        }
        publisher
    });
    for sub in &mut subs {
        let (mut next_force, mut next_leader) = (1u64, 1u64);
        while next_force <= n || next_leader <= n {
            let env = next_pub(sub).await;
            match env.topic.as_str() {
                DIGIT_FORCE => {
                    assert_eq!(env.seq, next_force);
                    let rec: ForceRecord = serde_json::from_value(env.data).unwrap();
                    assert_eq!(rec.frame_id, next_force - 1);
                    next_force += 1;
                }
                LEADER_STATE => {
                    assert_eq!(env.seq, next_leader);
                    next_leader += 1;
                }
                other => panic!("unexpected topic {other}"),
            }
        }
    }
    let publisher = sender.await.unwrap();
    assert!(publisher.refused.is_empty());
    let stats = srv.stats();
    assert_eq!(stats.published_on(DIGIT_FORCE), n);
    assert_eq!(stats.dropped_on(DIGIT_FORCE), 0);
    assert_eq!(stats.dropped_on(LEADER_STATE), 0);
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn stalled_frame_reader_drops_only_frames() {
    let srv = server().await;
    let mut healthy = BusClient::connect(&srv.url()).await.unwrap();
    for t in [DIGIT_FORCE, FOLLOWER_STATE, LEADER_STATE] {
        healthy.subscribe(t).await.unwrap();
    }
    // subscribes to frames, then never reads again
    let (mut stalled, _) = tokio_tungstenite::connect_async(srv.url()).await.unwrap();
    stalled
        .send(Message::Text(Envelope::control(Verb::Sub, DIGIT_FRAME).encode().into()))
        .await
        .unwrap();
    tokio::time::sleep(Duration::from_millis(100)).await;

    let gel = GelConfig {
        width_px: 96,
        height_px: 96,
        ..GelConfig::default()
    };
    let ind = Indenter {
        shape: IndenterShape::CALIBRATION_BALL,
        center: gel.center_mm(),
        press_depth: 0.5,
    };
    let (_, frame) = press_frame(&gel, &LightingModel::default(), &ind).unwrap();
    let frame = Payload::Frame(FrameRef::new(&frame));

    let mut publisher = BusClient::connect(&srv.url()).await.unwrap();
    let n = 600u64;
    let sender = tokio::spawn(async move {
        for i in 0..n {
            publisher.publish(DIGIT_FRAME, i as f64, &frame).await.unwrap();
            publisher.publish(DIGIT_FORCE, i as f64, &force(i)).await.unwrap();
            let f = Payload::Follower(FollowerState {
                t: i as f64,
                x_fd: 0.0,
                x_f: 0.0,
                v_f: 0.0,
                f_s: 0.0,
            });
            publisher.publish(FOLLOWER_STATE, i as f64, &f).await.unwrap();
            publisher.publish(LEADER_STATE, i as f64, &leader(i)).await.unwrap();
        }
    });
    let mut counts = [0u64; 3];
    while counts.iter().any(|&c| c < n) {
        let env = next_pub(&mut healthy).await;
        let k = [DIGIT_FORCE, FOLLOWER_STATE, LEADER_STATE]
            .iter()
            .position(|t| *t == env.topic)
            .expect("subscribed topic");
        counts[k] += 1;
        assert_eq!(env.seq, counts[k]);
    }
    sender.await.unwrap();
    let stats = srv.stats();
    assert!(stats.dropped_on(DIGIT_FRAME) >= 1, "{stats:?}");
    for t in [DIGIT_FORCE, FOLLOWER_STATE, LEADER_STATE] {
        assert_eq!(stats.dropped_on(t), 0, "{t}");
        assert_eq!(stats.published_on(t), n);
    }
    drop(stalled);
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn late_subscriber_gets_no_history() {
    let srv = server().await;
    let mut publisher = BusClient::connect(&srv.url()).await.unwrap();
    for i in 0..5 {
        publisher.publish(DIGIT_FORCE, 0.0, &force(i)).await.unwrap();
    }
    let mut probe = BusClient::connect(&srv.url()).await.unwrap();
    probe.subscribe(LEADER_STATE).await.unwrap();
    publisher.publish(LEADER_STATE, 0.0, &leader(0)).await.unwrap();
    next_pub(&mut probe).await;
    assert_eq!(srv.stats().published_on(DIGIT_FORCE), 5);

    let mut late = BusClient::connect(&srv.url()).await.unwrap();
    late.subscribe(DIGIT_FORCE).await.unwrap();
    publisher.publish(DIGIT_FORCE, 0.0, &force(99)).await.unwrap();
    let env = next_pub(&mut late).await;
    assert_eq!(env.seq, 6);
    let rec: ForceRecord = serde_json::from_value(env.data).unwrap();
    assert_eq!(rec.frame_id, 99);
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn refusals_are_nacked() {
    let srv = server().await;
    let mut c = BusClient::connect(&srv.url()).await.unwrap();
    match c.subscribe("/nope").await {
        Err(BusError::Nack { reason, verb, .. }) => {
            assert_eq!(reason, "unknown_topic");
            assert_eq!(verb, Verb::Sub);
        }
        other => panic!("{other:?}"),
    }
    match c.unsubscribe(DIGIT_FORCE).await {
        Err(BusError::Nack { reason, .. }) => assert_eq!(reason, "not_subscribed"),
        other => panic!("{other:?}"),
    }
    c.publish("/nope", 0.0, &force(0)).await.unwrap();
    c.publish(DIGIT_FORCE, 0.0, &leader(0)).await.unwrap();
    // round trip so both refusals have come back
    c.subscribe(DIGIT_FORCE).await.unwrap();
    let reasons: Vec<String> = c
        .refused
        .iter()
        .map(|e| e.data["reason"].as_str().unwrap().to_owned())
        .collect();
    assert_eq!(reasons.len(), 2, "{reasons:?}");
    assert_eq!(reasons[0], "unknown_topic");
    assert!(reasons[1].starts_with("bad_payload"), "{}", reasons[1]);
    assert_eq!(srv.stats().published_on(DIGIT_FORCE), 0);
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn unsubscribe_stops_delivery() {
    let srv = server().await;
    let mut c = BusClient::connect(&srv.url()).await.unwrap();
    c.subscribe(DIGIT_FORCE).await.unwrap();
    c.subscribe(LEADER_STATE).await.unwrap();
    c.unsubscribe(DIGIT_FORCE).await.unwrap();
    let mut p = BusClient::connect(&srv.url()).await.unwrap();
    p.publish(DIGIT_FORCE, 0.0, &force(1)).await.unwrap();
    p.publish(LEADER_STATE, 0.0, &leader(1)).await.unwrap();
    let env = next_pub(&mut c).await;
    assert_eq!(env.topic, LEADER_STATE);
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn malformed_frame_closes_the_client() {
    let srv = server().await;
    let mut c = BusClient::connect(&srv.url()).await.unwrap();
    c.send_raw("{not json").await.unwrap();
    let env = timeout(WAIT, c.recv()).await.unwrap().expect("close frame");
    assert_eq!(env.verb, Verb::Close);
    assert!(close_reason(&env).unwrap().starts_with("malformed"));
    assert!(timeout(WAIT, c.recv()).await.unwrap().is_none());
    srv.shutdown().await;
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn shutdown_sends_close() {
    let srv = server().await;
    let mut c = BusClient::connect(&srv.url()).await.unwrap();
    c.subscribe(DIGIT_FORCE).await.unwrap();
    srv.shutdown().await;
    let env = timeout(WAIT, c.recv()).await.unwrap().expect("close frame");
    assert_eq!(env.verb, Verb::Close);
    assert_eq!(close_reason(&env).as_deref(), Some("shutdown"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn record_then_replay_at_double_speed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.jsonl");
    let n = 40u64;
    let spacing = Duration::from_millis(25);

    let srv = server().await;
    let mut rec_client = BusClient::connect(&srv.url()).await.unwrap();
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
    let out = std::fs::File::create(&path).unwrap();
    let recorder = tokio::spawn(async move {
        let stop = async {
            let _ = stop_rx.await;
        };
        record(&mut rec_client, &[DIGIT_FORCE, OPERATOR_CMD], out, stop).await.unwrap()
    });
    // let the recorder's subscriptions land
    let mut watcher = BusClient::connect(&srv.url()).await.unwrap();
    watcher.subscribe(DIGIT_FORCE).await.unwrap();
    tokio::time::sleep(Duration::from_millis(200)).await;
    let mut p = BusClient::connect(&srv.url()).await.unwrap();
    for i in 0..n {
        p.publish(DIGIT_FORCE, i as f64, &force(i)).await.unwrap();
        tokio::time::sleep(spacing).await;
    }
    p.publish(OPERATOR_CMD, 0.0, &Payload::Cmd(OperatorCmd { x_h: 0.01, feedback: Some(true) }))
        .await
        .unwrap();
    for _ in 0..n {
        next_pub(&mut watcher).await;
    }
    tokio::time::sleep(Duration::from_millis(200)).await;
    stop_tx.send(()).unwrap();
    assert_eq!(recorder.await.unwrap(), n as usize + 1);
    srv.shutdown().await;

    let records = read_record(&path).unwrap();
    assert_eq!(records.len(), n as usize + 1);
    let forces: Vec<_> = records.iter().filter(|r| r.envelope.topic == DIGIT_FORCE).collect();
    for (i, r) in forces.iter().enumerate() {
        assert_eq!(r.envelope.seq, i as u64 + 1);
    }
    let recorded_span = forces.last().unwrap().recv - forces[0].recv;

    let srv = server().await;
    let mut sub = BusClient::connect(&srv.url()).await.unwrap();
    sub.subscribe(DIGIT_FORCE).await.unwrap();
    let mut player = BusClient::connect(&srv.url()).await.unwrap();
    let only_forces: Vec<_> = forces.into_iter().cloned().collect();
    let play = tokio::spawn(async move {
        replay(&mut player, &only_forces, 2.0).await.unwrap();
        player
    });
    let mut arrivals = Vec::new();
    for i in 0..n {
        let env = next_pub(&mut sub).await;
        arrivals.push(Instant::now());
        assert_eq!(env.seq, i + 1);
        assert_eq!(env.data, records.iter().filter(|r| r.envelope.topic == DIGIT_FORCE).nth(i as usize).unwrap().envelope.data);
    }
    play.await.unwrap();
    let replay_span = (arrivals[arrivals.len() - 1] - arrivals[0]).as_secs_f64();
    let want = recorded_span / 2.0;
    assert!(
        (replay_span - want).abs() <= 0.25 * want,
        "replayed over {replay_span:.3} s, recorded {recorded_span:.3} s"
    );
    srv.shutdown().await;
}

#[test]
fn corrupt_record_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    let good = r#"{"recv":1.0,"topic":"/digit/force","seq":1,"stamp":0.0,"type":"PUB","data":{}}"#;
    std::fs::write(&path, format!("{good}\n{good}\n{{oops\n")).unwrap();
    let err = read_record(&path).unwrap_err().to_string();
    assert!(err.starts_with("line 3:"), "{err}");
}

async fn force_rate(seconds: f64) -> (usize, f64) {
    let mut cfg = Config::default();
    cfg.bus.publish_frames = false;
    let handle = live::start(&cfg, "127.0.0.1:0", LiveSensor::Ideal).await.unwrap();
    let mut c = BusClient::connect(&handle.url()).await.unwrap();
    c.subscribe(DIGIT_FORCE).await.unwrap();
    let mut stamps = Vec::new();
    let end = Instant::now() + Duration::from_secs_f64(seconds);
    while Instant::now() < end {
        let env = next_pub(&mut c).await;
        stamps.push(env.stamp);
    }
    handle.stop().await.unwrap();
    let span = stamps[stamps.len() - 1] - stamps[0];
    (stamps.len(), (stamps.len() - 1) as f64 / span)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn live_force_topic_runs_at_30_hz() {
    let (n, hz) = force_rate(3.0).await;
    assert!(n >= 80, "{n} records");
    assert!((hz - 30.0).abs() <= 1.0, "{hz} Hz");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
#[ignore = "one minute of wall time"]
async fn live_force_topic_holds_30_hz_for_a_minute() {
    let (n, hz) = force_rate(60.0).await;
    assert!(n >= 1700, "{n} records");
    let gap_ms = 1e3 / hz;
    assert!((gap_ms - 1e3 / 30.0).abs() <= 5.0, "mean inter-arrival {gap_ms} ms");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn live_command_moves_the_follower() {
    let cfg = Config::default();
    let handle = live::start(&cfg, "127.0.0.1:0", LiveSensor::Ideal).await.unwrap();
    let mut c = BusClient::connect(&handle.url()).await.unwrap();
    c.subscribe(FOLLOWER_STATE).await.unwrap();
    let target = 0.03;
    c.publish(OPERATOR_CMD, 0.0, &Payload::Cmd(OperatorCmd { x_h: target, feedback: None }))
        .await
        .unwrap();
    let start = Instant::now();
    let mut moved = None;
    while start.elapsed() < Duration::from_secs(5) {
        let env = next_pub(&mut c).await;
        let s: FollowerState = serde_json::from_value(env.data).unwrap();
        if (s.x_fd - target).abs() < 1e-12 && s.x_f > cfg.teleop.initial_aperture + 1e-3 {
            moved = Some(start.elapsed());
            break;
        }
    }
    let after = moved.expect("follower never moved");
    assert!(after < Duration::from_millis(500), "{after:?}");
    handle.stop().await.unwrap();
}
