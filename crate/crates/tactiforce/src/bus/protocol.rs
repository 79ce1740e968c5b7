//! Wire format: one JSON envelope per WebSocket text frame,
//! `{topic, seq, stamp, type, data}`.

use std::collections::BTreeMap;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tactiforce_core::regress::ForceRecord;
use tactiforce_core::sim::TactileFrame;
use tactiforce_core::teleop::TeleopState;

use crate::formats::{FormatError, Tfr1};

pub const LEADER_STATE: &str = "/leader/state";
pub const FOLLOWER_STATE: &str = "/follower/state";
pub const DIGIT_FRAME: &str = "/digit/frame";
pub const DIGIT_FORCE: &str = "/digit/force";
pub const OPERATOR_CMD: &str = "/operator/cmd";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verb {
    Sub,
    Unsub,
    Pub,
    Ack,
    Nack,
    Close,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub topic: String,
    pub seq: u64,
    /// s
    pub stamp: f64,
    #[serde(rename = "type")]
    pub verb: Verb,
    #[serde(default)]
    pub data: Value,
}

impl Envelope {
    pub fn control(verb: Verb, topic: &str) -> Self {
        Envelope {
            topic: topic.into(),
            seq: 0,
            stamp: 0.0,
            verb,
            data: Value::Null,
        }
    }

    pub fn publish(topic: &str, stamp: f64, payload: &Payload) -> Self {
        Envelope {
            topic: topic.into(),
            seq: 0,
            stamp,
            verb: Verb::Pub,
            data: payload.to_value(),
        }
    }

    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("envelopes serialize")
    }

    pub fn decode(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Body of an ACK or NACK: which request it answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub verb: Verb,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    LeaderState,
    FollowerState,
    FrameRef,
    Force,
    OperatorCmd,
}

/// Delivery class of a topic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Qos {
    /// Every message or a failed connection.
    Lossless,
    /// Bounded queue, oldest dropped first.
    Lossy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TopicSpec {
    pub schema: Schema,
    pub qos: Qos,
}

/// Static topic table, fixed when the server starts.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    topics: BTreeMap<String, TopicSpec>,
}

impl Default for Registry {
    fn default() -> Self {
        let t = |schema, qos| TopicSpec { schema, qos };
        Registry {
            topics: [
                (LEADER_STATE, t(Schema::LeaderState, Qos::Lossless)),
                (FOLLOWER_STATE, t(Schema::FollowerState, Qos::Lossless)),
                (DIGIT_FRAME, t(Schema::FrameRef, Qos::Lossy)),
                (DIGIT_FORCE, t(Schema::Force, Qos::Lossless)),
                (OPERATOR_CMD, t(Schema::OperatorCmd, Qos::Lossless)),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_owned(), v))
            .collect(),
        }
    }
}

impl Registry {
    pub fn get(&self, topic: &str) -> Option<TopicSpec> {
        self.topics.get(topic).copied()
    }

    pub fn topics(&self) -> impl Iterator<Item = (&str, TopicSpec)> {
        self.topics.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeaderState {
    pub t: f64,
    pub x_h: f64,
    pub x_l: f64,
    pub f_l: f64,
    pub f_ld: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FollowerState {
    pub t: f64,
    pub x_fd: f64,
    pub x_f: f64,
    pub v_f: f64,
    pub f_s: f64,
}

impl From<&TeleopState> for LeaderState {
    fn from(s: &TeleopState) -> Self {
        LeaderState {
            t: s.t,
            x_h: s.x_h,
            x_l: s.x_l,
            f_l: s.f_l,
            f_ld: s.f_ld,
        }
    }
}

impl From<&TeleopState> for FollowerState {
    fn from(s: &TeleopState) -> Self {
        FollowerState {
            t: s.t,
            x_fd: s.x_fd,
            x_f: s.x_f,
            v_f: s.v_f,
            f_s: s.f_s,
        }
    }
}

/// A tactile frame carried inline as a base64 `TFR1` container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRef {
    pub frame_id: u64,
    pub stamp: f64,
    pub width: u32,
    pub height: u32,
    pub tfr1: String,
}

impl FrameRef {
    pub fn new(f: &TactileFrame) -> Self {
        let t = Tfr1::from_frame(f);
        FrameRef {
            frame_id: f.frame_id,
            stamp: f.timestamp,
            width: t.width,
            height: t.height,
            tfr1: base64::engine::general_purpose::STANDARD.encode(t.encode()),
        }
    }

    pub fn frame(&self) -> Result<TactileFrame, FormatError> {
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.tfr1)
            .map_err(|e| FormatError::Encoding(e.to_string()))?;
        Tfr1::decode(&bytes)?.to_frame(self.frame_id, self.stamp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorCmd {
    /// m, commanded aperture
    pub x_h: f64,
    /// Scenario mode flag from the console; `None` keeps the current mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Leader(LeaderState),
    Follower(FollowerState),
    Frame(FrameRef),
    Force(ForceRecord),
    Cmd(OperatorCmd),
}

impl Payload {
    pub fn schema(&self) -> Schema {
        match self {
            Payload::Leader(_) => Schema::LeaderState,
            Payload::Follower(_) => Schema::FollowerState,
            Payload::Frame(_) => Schema::FrameRef,
            Payload::Force(_) => Schema::Force,
            Payload::Cmd(_) => Schema::OperatorCmd,
        }
    }

    pub fn to_value(&self) -> Value {
        let v = match self {
            Payload::Leader(p) => serde_json::to_value(p),
            Payload::Follower(p) => serde_json::to_value(p),
            Payload::Frame(p) => serde_json::to_value(p),
            Payload::Force(p) => serde_json::to_value(p),
            Payload::Cmd(p) => serde_json::to_value(p),
        };
        v.expect("payloads serialize")
    }

    pub fn from_value(schema: Schema, v: &Value) -> Result<Self, serde_json::Error> {
        use serde_json::from_value as de;
        let v = v.clone();
        Ok(match schema {
            Schema::LeaderState => Payload::Leader(de(v)?),
            Schema::FollowerState => Payload::Follower(de(v)?),
            Schema::FrameRef => Payload::Frame(de(v)?),
            Schema::Force => Payload::Force(de(v)?),
            Schema::OperatorCmd => Payload::Cmd(de(v)?),
        })
    }
}
