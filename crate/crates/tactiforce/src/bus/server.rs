//! Topic broker over WebSocket.
//!
//! Every connection gets an outbox drained by its own writer task. Lossless
//! topics share one FIFO per client; each lossy topic has its own bounded
//! queue that drops its oldest entry when full. A client whose lossless
//! backlog overflows is closed rather than silently skipped.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use serde::Serialize;
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{watch, Notify};
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::{Message, Utf8Bytes};

use super::protocol::{Envelope, Payload, Qos, Registry, Reply, Verb};

/// Largest number of queued messages a writer takes per flush.
const WRITE_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerOptions {
    pub lossy_depth: usize,
    pub lossless_capacity: usize,
    /// How long shutdown waits for each client to take its CLOSE frame.
    pub close_grace: Duration,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            lossy_depth: 64,
            lossless_capacity: 1 << 16,
            close_grace: Duration::from_secs(2),
        }
    }
}

/// Counters per topic, summed over subscribers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BusStats {
    pub published: BTreeMap<String, u64>,
    pub dropped: BTreeMap<String, u64>,
    pub clients: usize,
}

impl BusStats {
    pub fn dropped_on(&self, topic: &str) -> u64 {
        self.dropped.get(topic).copied().unwrap_or(0)
    }

    pub fn published_on(&self, topic: &str) -> u64 {
        self.published.get(topic).copied().unwrap_or(0)
    }
}

#[derive(Default)]
struct OutboxQueues {
    lossless: VecDeque<Utf8Bytes>,
    lossy: BTreeMap<String, VecDeque<Utf8Bytes>>,
    closing: Option<String>,
}

struct Outbox {
    queues: Mutex<OutboxQueues>,
    wake: Notify,
    opts: ServerOptions,
}

enum Pushed {
    Queued,
    DroppedOldest,
    Overflow,
}

enum Batch {
    Messages(Vec<Utf8Bytes>),
    Close(String),
}

impl Outbox {
    fn new(opts: ServerOptions) -> Self {
        Outbox {
            queues: Mutex::new(OutboxQueues::default()),
            wake: Notify::new(),
            opts,
        }
    }

    fn push(&self, topic: &str, qos: Qos, msg: Utf8Bytes) -> Pushed {
        let mut q = self.queues.lock().expect("outbox lock");
        if q.closing.is_some() {
            return Pushed::Queued;
        }
        let res = match qos {
            Qos::Lossless if q.lossless.len() >= self.opts.lossless_capacity => {
                q.closing = Some("lossless_overflow".into());
                Pushed::Overflow
            }
            Qos::Lossless => {
                q.lossless.push_back(msg);
                Pushed::Queued
            }
            Qos::Lossy => {
                let depth = self.opts.lossy_depth;
                let lane = q.lossy.entry(topic.to_owned()).or_default();
                let dropped = lane.len() >= depth;
                if dropped {
                    lane.pop_front();
                }
                lane.push_back(msg);
                if dropped {
                    Pushed::DroppedOldest
                } else {
                    Pushed::Queued
                }
            }
        };
        drop(q);
        self.wake.notify_one();
        res
    }

    fn reply(&self, env: &Envelope) {
        self.push("", Qos::Lossless, env.encode().into());
    }

    fn close(&self, reason: &str) {
        let mut q = self.queues.lock().expect("outbox lock");
        q.closing.get_or_insert_with(|| reason.to_owned());
        drop(q);
        self.wake.notify_one();
    }

    fn is_closing(&self) -> bool {
        self.queues.lock().expect("outbox lock").closing.is_some()
    }

    async fn next(&self) -> Batch {
        loop {
            {
                let mut q = self.queues.lock().expect("outbox lock");
                let mut out = Vec::new();
                while out.len() < WRITE_BATCH {
                    match q.lossless.pop_front() {
                        Some(m) => out.push(m),
                        None => break,
                    }
                }
                for lane in q.lossy.values_mut() {
                    while out.len() < WRITE_BATCH {
                        match lane.pop_front() {
                            Some(m) => out.push(m),
                            None => break,
                        }
                    }
                }
                if !out.is_empty() {
                    return Batch::Messages(out);
                }
                if let Some(reason) = &q.closing {
                    return Batch::Close(reason.clone());
                }
            }
            self.wake.notified().await;
        }
    }
}

struct TopicState {
    seq: u64,
    published: u64,
    dropped: u64,
    subscribers: Vec<(u64, Arc<Outbox>)>,
}

struct Broker {
    registry: Registry,
    opts: ServerOptions,
    topics: Mutex<HashMap<String, TopicState>>,
    clients: Mutex<HashMap<u64, Arc<Outbox>>>,
    next_client: Mutex<u64>,
}

impl Broker {
    fn new(registry: Registry, opts: ServerOptions) -> Self {
        let topics = registry
            .topics()
            .map(|(name, _)| {
                (
                    name.to_owned(),
                    TopicState {
                        seq: 0,
                        published: 0,
                        dropped: 0,
                        subscribers: Vec::new(),
                    },
                )
            })
            .collect();
        Broker {
            registry,
            opts,
            topics: Mutex::new(topics),
            clients: Mutex::new(HashMap::new()),
            next_client: Mutex::new(0),
        }
    }

    fn register(&self) -> (u64, Arc<Outbox>) {
        let mut n = self.next_client.lock().expect("client counter");
        *n += 1;
        let outbox = Arc::new(Outbox::new(self.opts));
        self.clients
            .lock()
            .expect("clients lock")
            .insert(*n, outbox.clone());
        (*n, outbox)
    }

    fn unregister(&self, id: u64) {
        self.clients.lock().expect("clients lock").remove(&id);
        for t in self.topics.lock().expect("topics lock").values_mut() {
            t.subscribers.retain(|(c, _)| *c != id);
        }
    }

    fn subscribe(&self, topic: &str, id: u64, outbox: &Arc<Outbox>) {
        let mut topics = self.topics.lock().expect("topics lock");
        let t = topics.get_mut(topic).expect("registered topic");
        if !t.subscribers.iter().any(|(c, _)| *c == id) {
            t.subscribers.push((id, outbox.clone()));
        }
    }

    fn unsubscribe(&self, topic: &str, id: u64) {
        if let Some(t) = self.topics.lock().expect("topics lock").get_mut(topic) {
            t.subscribers.retain(|(c, _)| *c != id);
        }
    }

    /// Stamps the per-topic sequence number and fans out under one lock, so
    /// every subscriber sees the same order.
    fn publish(&self, mut env: Envelope, qos: Qos) {
        let mut topics = self.topics.lock().expect("topics lock");
        let t = topics.get_mut(&env.topic).expect("registered topic");
        t.seq += 1;
        t.published += 1;
        env.seq = t.seq;
        let text: Utf8Bytes = env.encode().into();
        for (_, outbox) in &t.subscribers {
            match outbox.push(&env.topic, qos, text.clone()) {
                Pushed::Queued => {}
                Pushed::DroppedOldest => t.dropped += 1,
                Pushed::Overflow => {}
            }
        }
    }

    fn stats(&self) -> BusStats {
        let topics = self.topics.lock().expect("topics lock");
        BusStats {
            published: topics.iter().map(|(k, t)| (k.clone(), t.published)).collect(),
            dropped: topics.iter().map(|(k, t)| (k.clone(), t.dropped)).collect(),
            clients: self.clients.lock().expect("clients lock").len(),
        }
    }

    fn close_all(&self, reason: &str) {
        for outbox in self.clients.lock().expect("clients lock").values() {
            outbox.close(reason);
        }
    }
}

/// Running server. Dropping it leaves the server running; call
/// [`ServerHandle::shutdown`] to stop it.
pub struct ServerHandle {
    addr: SocketAddr,
    broker: Arc<Broker>,
    stop: watch::Sender<bool>,
    accept: JoinHandle<()>,
    connections: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("ws://{}", self.addr)
    }

    pub fn stats(&self) -> BusStats {
        self.broker.stats()
    }

    /// Sends CLOSE to every client, waits for the writers to deliver it,
    /// then stops accepting.
    pub async fn shutdown(self) {
        self.broker.close_all("shutdown");
        let _ = self.stop.send(true);
        self.accept.abort();
        let conns = std::mem::take(&mut *self.connections.lock().expect("connections lock"));
        let grace = self.broker.opts.close_grace + Duration::from_millis(500);
        for c in conns {
            let abort = c.abort_handle();
            if tokio::time::timeout(grace, c).await.is_err() {
                abort.abort();
            }
        }
    }
}

/// Binds `addr` and starts accepting clients in the background.
pub async fn serve(addr: &str, registry: Registry, opts: ServerOptions) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let broker = Arc::new(Broker::new(registry, opts));
    let (stop, stop_rx) = watch::channel(false);
    let connections = Arc::new(Mutex::new(Vec::new()));
    let accept = tokio::spawn(accept_loop(listener, broker.clone(), stop_rx, connections.clone()));
    Ok(ServerHandle {
        addr: local,
        broker,
        stop,
        accept,
        connections,
    })
}

async fn accept_loop(
    listener: TcpListener,
    broker: Arc<Broker>,
    stop: watch::Receiver<bool>,
    connections: Arc<Mutex<Vec<JoinHandle<()>>>>,
) {
    loop {
        let Ok((stream, _)) = listener.accept().await else {
            continue;
        };
        let _ = stream.set_nodelay(true);
        let task = tokio::spawn(connection(stream, broker.clone(), stop.clone()));
        let mut conns = connections.lock().expect("connections lock");
        conns.retain(|c| !c.is_finished());
        conns.push(task);
    }
}

async fn connection(stream: TcpStream, broker: Arc<Broker>, mut stop: watch::Receiver<bool>) {
    let Ok(ws) = tokio_tungstenite::accept_async(stream).await else {
        return;
    };
    let (mut sink, mut source) = ws.split();
    let (id, outbox) = broker.register();
    if *stop.borrow() {
        outbox.close("shutdown");
    }

    let writer = {
        let outbox = outbox.clone();
        tokio::spawn(async move {
            loop {
                match outbox.next().await {
                    Batch::Messages(msgs) => {
                        for m in msgs {
                            if sink.feed(Message::Text(m)).await.is_err() {
                                return;
                            }
                        }
                        if sink.flush().await.is_err() {
                            return;
                        }
                    }
                    Batch::Close(reason) => {
                        let mut env = Envelope::control(Verb::Close, "");
                        env.data = serde_json::json!({ "reason": reason });
                        let _ = sink.send(Message::Text(env.encode().into())).await;
                        let _ = sink.close().await;
                        return;
                    }
                }
            }
        })
    };

    let mut subscribed = HashSet::new();
    loop {
        tokio::select! {
            msg = source.next() => match msg {
                Some(Ok(Message::Text(text))) => {
                    if let Err(reason) = handle(&broker, id, &outbox, &mut subscribed, text.as_str()) {
                        outbox.close(&reason);
                        break;
                    }
                }
                Some(Ok(Message::Binary(_))) => {
                    outbox.close("malformed: binary frames are not accepted");
                    break;
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
            _ = stop.changed() => {
                outbox.close("shutdown");
                break;
            }
        }
        if outbox.is_closing() {
            break;
        }
    }

    broker.unregister(id);
    outbox.close("bye");
    let abort = writer.abort_handle();
    if tokio::time::timeout(broker.opts.close_grace, writer).await.is_err() {
        abort.abort();
    }
}

/// One inbound frame. `Err` means the frame was malformed and the client
/// is to be disconnected with that reason.
fn handle(
    broker: &Broker,
    id: u64,
    outbox: &Arc<Outbox>,
    subscribed: &mut HashSet<String>,
    text: &str,
) -> Result<(), String> {
    let env = Envelope::decode(text).map_err(|e| format!("malformed: {e}"))?;
    let reply = |verb: Verb, answered: Verb, reason: Option<String>| {
        let mut r = Envelope::control(verb, &env.topic);
        r.data = serde_json::to_value(Reply {
            verb: answered,
            reason,
        })
        .expect("reply serializes");
        outbox.reply(&r);
    };
    let nack = |answered: Verb, reason: &str| reply(Verb::Nack, answered, Some(reason.into()));

    let Some(spec) = broker.registry.get(&env.topic) else {
        if matches!(env.verb, Verb::Close) {
            return Err("client closed".into());
        }
        nack(env.verb, "unknown_topic");
        return Ok(());
    };
    match env.verb {
        Verb::Sub => {
            broker.subscribe(&env.topic, id, outbox);
            subscribed.insert(env.topic.clone());
            reply(Verb::Ack, Verb::Sub, None);
        }
        Verb::Unsub => {
            if subscribed.remove(&env.topic) {
                broker.unsubscribe(&env.topic, id);
                reply(Verb::Ack, Verb::Unsub, None);
            } else {
                nack(Verb::Unsub, "not_subscribed");
            }
        }
        Verb::Pub => match Payload::from_value(spec.schema, &env.data) {
            Ok(_) => broker.publish(env, spec.qos),
            Err(e) => nack(Verb::Pub, &format!("bad_payload: {e}")),
        },
        Verb::Close => return Err("client closed".into()),
        Verb::Ack | Verb::Nack => nack(env.verb, "unexpected_verb"),
    }
    Ok(())
}
