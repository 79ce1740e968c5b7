//! Live mode: bus server, 30 Hz force stage and 1 kHz teleop loop, wired
//! together only through bus topics.
//!
//! The two compute stages run on their own threads. Each has a bridge task
//! that owns its bus connection, forwards deliveries in through `watch`
//! channels and publishes what the thread emits.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle as ThreadHandle;
use std::time::{Duration, Instant};

use tactiforce_core::mlp::MlpParams;
use tactiforce_core::regress::{eval_force, ForceEstimator, ForceRecord, PolyCurve};
use tactiforce_core::sim::{self, Indenter};
use tactiforce_core::teleop::{ForceSensor, Teleop};
use tokio::sync::{mpsc, watch};
use tokio::task::JoinHandle;

use crate::bus::{
    serve, BusClient, BusStats, FollowerState, FrameRef, LeaderState, Payload, Registry, ServerHandle,
    ServerOptions, Verb, DIGIT_FORCE, DIGIT_FRAME, FOLLOWER_STATE, LEADER_STATE, OPERATOR_CMD,
};
use crate::config::Config;

/// Force source of the live force stage.
#[derive(Debug, Clone)]
pub enum LiveSensor {
    Ideal,
    Oracle(PolyCurve),
    Pipeline(Box<MlpParams>, PolyCurve),
}

type Outgoing = (&'static str, f64, Payload);

pub struct LiveHandle {
    server: ServerHandle,
    stop: Arc<AtomicBool>,
    threads: Vec<ThreadHandle<anyhow::Result<()>>>,
    bridges: Vec<JoinHandle<()>>,
}

impl LiveHandle {
    pub fn url(&self) -> String {
        self.server.url()
    }

    pub fn stats(&self) -> BusStats {
        self.server.stats()
    }

    /// Stops both stages, then shuts the server down with CLOSE frames.
    pub async fn stop(self) -> anyhow::Result<BusStats> {
        self.stop.store(true, Ordering::SeqCst);
        let mut first_err = None;
        for t in self.threads {
            let res = tokio::task::spawn_blocking(move || t.join())
                .await
                .map_err(anyhow::Error::from)
                .and_then(|r| r.map_err(|_| anyhow::anyhow!("live stage panicked")))
                .and_then(|r| r);
            if let Err(e) = res {
                first_err.get_or_insert(e);
            }
        }
        for b in &self.bridges {
            b.abort();
        }
        let stats = self.server.stats();
        self.server.shutdown().await;
        match first_err {
            Some(e) => Err(e),
            None => Ok(stats),
        }
    }
}

pub async fn start(cfg: &Config, addr: &str, sensor: LiveSensor) -> anyhow::Result<LiveHandle> {
    let opts = ServerOptions {
        lossy_depth: cfg.bus.lossy_depth,
        lossless_capacity: cfg.bus.lossless_capacity,
        ..ServerOptions::default()
    };
    let server = serve(addr, Registry::default(), opts).await?;
    let url = server.url();
    let stop = Arc::new(AtomicBool::new(false));
    let epoch = Instant::now();

    // force stage
    let mut force_client = BusClient::connect(&url).await?;
    force_client.subscribe(FOLLOWER_STATE).await?;
    let (xf_tx, xf_rx) = watch::channel(cfg.teleop.initial_aperture);
    let (force_out, force_rx) = mpsc::unbounded_channel();
    let force_bridge = tokio::spawn(bridge(force_client, force_rx, move |env| {
        if env.topic == FOLLOWER_STATE {
            if let Ok(s) = serde_json::from_value::<FollowerState>(env.data) {
                let _ = xf_tx.send(s.x_f);
            }
        }
    }));
    let force_thread = {
        let (cfg, stop) = (cfg.clone(), stop.clone());
        std::thread::Builder::new()
            .name("force-stage".into())
            .spawn(move || force_stage(&cfg, sensor, xf_rx, force_out, &stop, epoch))?
    };

    // teleop loop
    let mut teleop_client = BusClient::connect(&url).await?;
    teleop_client.subscribe(OPERATOR_CMD).await?;
    teleop_client.subscribe(DIGIT_FORCE).await?;
    let (cmd_tx, cmd_rx) = watch::channel((cfg.teleop.initial_aperture, true));
    let (fs_tx, fs_rx) = watch::channel(0.0f64);
    let (teleop_out, teleop_rx) = mpsc::unbounded_channel();
    let teleop_bridge = tokio::spawn(bridge(teleop_client, teleop_rx, move |env| match env.topic.as_str() {
        OPERATOR_CMD => {
            if let Ok(Payload::Cmd(c)) = Payload::from_value(crate::bus::Schema::OperatorCmd, &env.data) {
                cmd_tx.send_modify(|(x, fb)| {
                    *x = c.x_h;
                    if let Some(f) = c.feedback {
                        *fb = f;
                    }
                });
            }
        }
        DIGIT_FORCE => {
            if let Ok(r) = serde_json::from_value::<ForceRecord>(env.data) {
                let _ = fs_tx.send(r.force_n);
            }
        }
        _ => {}
    }));
    let teleop_thread = {
        let (cfg, stop) = (cfg.clone(), stop.clone());
        std::thread::Builder::new()
            .name("teleop-loop".into())
            .spawn(move || teleop_loop(&cfg, cmd_rx, fs_rx, teleop_out, &stop, epoch))?
    };

    Ok(LiveHandle {
        server,
        stop,
        threads: vec![force_thread, teleop_thread],
        bridges: vec![force_bridge, teleop_bridge],
    })
}

async fn bridge(
    mut client: BusClient,
    mut outgoing: mpsc::UnboundedReceiver<Outgoing>,
    mut on_delivery: impl FnMut(crate::bus::Envelope) + Send,
) {
    loop {
        tokio::select! {
            env = client.recv() => match env {
                Some(env) if env.verb == Verb::Pub => on_delivery(env),
                Some(_) | None => break,
            },
            out = outgoing.recv() => match out {
                Some((topic, stamp, payload)) => {
                    if client.publish(topic, stamp, &payload).await.is_err() {
                        break;
                    }
                }
                None => break,
            },
        }
    }
}

/// Latest force heard on the force topic; the loop's own sensor tick
/// samples it, giving the zero-order hold.
struct BusForce(watch::Receiver<f64>);

impl ForceSensor for BusForce {
    fn sense(&mut self, _press_depth: f64, _t: f64) -> tactiforce_core::Result<f64> {
        Ok(*self.0.borrow())
    }
}

fn teleop_loop(
    cfg: &Config,
    cmd: watch::Receiver<(f64, bool)>,
    force: watch::Receiver<f64>,
    out: mpsc::UnboundedSender<Outgoing>,
    stop: &AtomicBool,
    epoch: Instant,
) -> anyhow::Result<()> {
    let tc = &cfg.teleop;
    let mut sim = Teleop::new(
        tc.models(),
        Some(tc.object),
        Box::new(BusForce(force)),
        tc.sensor_rate,
        tc.initial_aperture,
    )?;
    let dt = 1.0 / tc.control_rate;
    let publish_every = (tc.control_rate / tc.state_rate).round().max(1.0) as u64;
    let start = Instant::now();
    let mut k: u64 = 0;
    while !stop.load(Ordering::Relaxed) {
        let due = (start.elapsed().as_secs_f64() * tc.control_rate) as u64;
        while k < due {
            let (x_cmd, feedback) = *cmd.borrow();
            k += 1;
            let state = *sim.step(x_cmd, feedback, dt, k as f64 * dt)?;
            if k % publish_every == 0 {
                let stamp = epoch.elapsed().as_secs_f64();
                let _ = out.send((LEADER_STATE, stamp, Payload::Leader(LeaderState::from(&state))));
                let _ = out.send((FOLLOWER_STATE, stamp, Payload::Follower(FollowerState::from(&state))));
            }
        }
        std::thread::sleep(Duration::from_millis(1));
    }
    Ok(())
}

fn force_stage(
    cfg: &Config,
    sensor: LiveSensor,
    x_f: watch::Receiver<f64>,
    out: mpsc::UnboundedSender<Outgoing>,
    stop: &AtomicBool,
    epoch: Instant,
) -> anyhow::Result<()> {
    let (gel, lm, object) = (cfg.gel, &cfg.lighting, cfg.teleop.object);
    let estimator = match &sensor {
        LiveSensor::Pipeline(p, curve) => {
            let mut est = ForceEstimator::new(p, &gel, *curve)?;
            est.pipeline = est.pipeline.with_median(cfg.solver.median_filter);
            Some(est)
        }
        _ => None,
    };
    let period = Duration::from_secs_f64(1.0 / cfg.teleop.sensor_rate);
    let mut next = Instant::now();
    let mut frame_id = 0u64;
    while !stop.load(Ordering::Relaxed) {
        let now = Instant::now();
        if now < next {
            std::thread::sleep((next - now).min(Duration::from_millis(5)));
            continue;
        }
        next += period;
        let stamp = epoch.elapsed().as_secs_f64();
        let press = object.press_depth(*x_f.borrow()).min(gel.max_indent);
        let ind = Indenter {
            shape: object.shape,
            center: gel.center_mm(),
            press_depth: press,
        };
        let needs_frame = estimator.is_some() || cfg.bus.publish_frames;
        let (depth_map, frame) = if needs_frame {
            let (d, mut f) = sim::press_frame(&gel, lm, &ind)?;
            f.frame_id = frame_id;
            f.timestamp = stamp;
            (d, Some(f))
        } else {
            (sim::indent_depth(&gel, &ind)?, None)
        };
        let record = match (&sensor, &estimator, &frame) {
            (_, Some(est), Some(f)) => est.estimate(f)?,
            (LiveSensor::Oracle(curve), _, _) => {
                let d = depth_map.max();
                let e = eval_force(curve, d);
                ForceRecord {
                    frame_id,
                    stamp,
                    force_n: e.force,
                    max_depth_mm: d,
                    clamped: e.clamped,
                }
            }
            _ => ForceRecord {
                frame_id,
                stamp,
                force_n: cfg.teleop.material.force(press),
                max_depth_mm: press,
                clamped: false,
            },
        };
        if cfg.bus.publish_frames {
            if let Some(f) = &frame {
                let _ = out.send((DIGIT_FRAME, stamp, Payload::Frame(FrameRef::new(f))));
            }
        }
        if out.send((DIGIT_FORCE, stamp, Payload::Force(record))).is_err() {
            break;
        }
        frame_id += 1;
    }
    Ok(())
}
