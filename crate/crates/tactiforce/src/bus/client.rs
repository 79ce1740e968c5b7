use futures_util::stream::SplitSink;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use super::protocol::{Envelope, Payload, Reply, Verb};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

#[derive(Debug, thiserror::Error)]
pub enum BusError {
    #[error("websocket: {0}")]
    Ws(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("{verb:?} {topic} refused: {reason}")]
    Nack { verb: Verb, topic: String, reason: String },
    #[error("connection closed{}", .0.as_deref().map(|r| format!(": {r}")).unwrap_or_default())]
    Closed(Option<String>),
}

/// `host:port` or a full `ws://` URL.
pub fn ws_url(addr: &str) -> String {
    if addr.starts_with("ws://") || addr.starts_with("wss://") {
        addr.to_owned()
    } else {
        format!("ws://{addr}")
    }
}

/// Async bus client. A background task splits incoming traffic into
/// deliveries (PUB and CLOSE) and replies (ACK and NACK).
pub struct BusClient {
    sink: SplitSink<Ws, Message>,
    replies: mpsc::UnboundedReceiver<Envelope>,
    inbox: mpsc::UnboundedReceiver<Envelope>,
    /// NACKs that did not answer a pending request, usually refused PUBs.
    pub refused: Vec<Envelope>,
    reader: JoinHandle<()>,
}

impl BusClient {
    pub async fn connect(addr: &str) -> Result<Self, BusError> {
        let (ws, _) = tokio_tungstenite::connect_async(ws_url(addr)).await?;
        let (sink, mut source) = ws.split();
        let (reply_tx, replies) = mpsc::unbounded_channel();
        let (inbox_tx, inbox) = mpsc::unbounded_channel();
        let reader = tokio::spawn(async move {
            while let Some(Ok(msg)) = source.next().await {
                let Message::Text(text) = msg else { continue };
                let Ok(env) = Envelope::decode(text.as_str()) else {
                    continue;
                };
                let to = match env.verb {
                    Verb::Ack | Verb::Nack => &reply_tx,
                    _ => &inbox_tx,
                };
                if env.verb == Verb::Close {
                    let _ = reply_tx.send(env.clone());
                }
                if to.send(env).is_err() {
                    break;
                }
            }
        });
        Ok(BusClient {
            sink,
            replies,
            inbox,
            refused: Vec::new(),
            reader,
        })
    }

    async fn send(&mut self, env: &Envelope) -> Result<(), BusError> {
        Ok(self.sink.send(Message::Text(env.encode().into())).await?)
    }

    /// Sends a control request and waits for its ACK or NACK.
    async fn request(&mut self, verb: Verb, topic: &str) -> Result<(), BusError> {
        self.send(&Envelope::control(verb, topic)).await?;
        loop {
            let Some(r) = self.replies.recv().await else {
                return Err(BusError::Closed(None));
            };
            if r.verb == Verb::Close {
                return Err(BusError::Closed(close_reason(&r)));
            }
            let body: Option<Reply> = serde_json::from_value(r.data.clone()).ok();
            let answers = r.topic == topic && body.as_ref().is_some_and(|b| b.verb == verb);
            match (answers, r.verb) {
                (true, Verb::Ack) => return Ok(()),
                (true, _) => {
                    return Err(BusError::Nack {
                        verb,
                        topic: topic.into(),
                        reason: body.and_then(|b| b.reason).unwrap_or_default(),
                    })
                }
                (false, _) => self.refused.push(r),
            }
        }
    }

    pub async fn subscribe(&mut self, topic: &str) -> Result<(), BusError> {
        self.request(Verb::Sub, topic).await
    }

    pub async fn unsubscribe(&mut self, topic: &str) -> Result<(), BusError> {
        self.request(Verb::Unsub, topic).await
    }

    /// Fire and forget; a refusal comes back as a NACK in [`Self::refused`].
    pub async fn publish(&mut self, topic: &str, stamp: f64, payload: &Payload) -> Result<(), BusError> {
        self.send(&Envelope::publish(topic, stamp, payload)).await
    }

    pub async fn publish_envelope(&mut self, env: &Envelope) -> Result<(), BusError> {
        self.send(env).await
    }

    /// Sends `text` verbatim as one text frame.
    pub async fn send_raw(&mut self, text: &str) -> Result<(), BusError> {
        Ok(self.sink.send(Message::Text(text.to_owned().into())).await?)
    }

    /// Next delivery: a PUB, or CLOSE when the server shuts the session.
    /// `None` once the connection is gone.
    pub async fn recv(&mut self) -> Option<Envelope> {
        self.inbox.recv().await
    }

    /// Sends CLOSE and closes the socket.
    pub async fn close(mut self) {
        let _ = self.send(&Envelope::control(Verb::Close, "")).await;
        let _ = self.sink.close().await;
        self.reader.abort();
    }
}

impl Drop for BusClient {
    fn drop(&mut self) {
        self.reader.abort();
    }
}

pub fn close_reason(env: &Envelope) -> Option<String> {
    env.data.get("reason").and_then(|r| r.as_str()).map(str::to_owned)
}
