//! Topic-based pub/sub over WebSocket carrying JSON envelopes.
//!
//! Verbs: `SUB`, `UNSUB`, `PUB` from clients; `ACK`, `NACK`, `CLOSE` and
//! delivered `PUB`s from the server. The server assigns `seq` per topic.

pub mod client;
pub mod protocol;
pub mod record;
pub mod server;

pub use client::{BusClient, BusError};
pub use protocol::{
    Envelope, FollowerState, FrameRef, LeaderState, OperatorCmd, Payload, Qos, Registry, Schema, Verb,
    DIGIT_FORCE, DIGIT_FRAME, FOLLOWER_STATE, LEADER_STATE, OPERATOR_CMD,
};
pub use server::{serve, BusStats, ServerHandle, ServerOptions};
