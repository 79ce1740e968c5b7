//! JSON-lines session recording and timed replay.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use super::client::{BusClient, BusError};
use super::protocol::{Envelope, Verb};

/// One recorded delivery: the envelope plus when it arrived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recorded {
    /// s since the Unix epoch
    pub recv: f64,
    #[serde(flatten)]
    pub envelope: Envelope,
}

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("line {line}: {source}")]
    Corrupt {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Bus(#[from] BusError),
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

/// Subscribes to `topics` and appends every delivery to `out` until `stop`
/// resolves or the server closes the session. Returns the message count.
pub async fn record<W: Write>(
    client: &mut BusClient,
    topics: &[&str],
    mut out: W,
    stop: impl std::future::Future<Output = ()>,
) -> Result<usize, RecordError> {
    for t in topics {
        client.subscribe(t).await?;
    }
    tokio::pin!(stop);
    let mut n = 0;
    loop {
        tokio::select! {
            env = client.recv() => match env {
                Some(env) if env.verb == Verb::Pub => {
                    let line = serde_json::to_string(&Recorded { recv: unix_now(), envelope: env })
                        .expect("recorded envelopes serialize");
                    writeln!(out, "{line}")?;
                    n += 1;
                }
                Some(_) | None => break,
            },
            _ = &mut stop => break,
        }
    }
    out.flush()?;
    Ok(n)
}

/// Parses a whole record file, naming the first bad line (1-based).
pub fn read_record(path: &Path) -> Result<Vec<Recorded>, RecordError> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| RecordError::Corrupt { line: i + 1, source })?;
        out.push(rec);
    }
    Ok(out)
}

/// Republishes `records` keeping their relative receive times divided by
/// `speed`. Stamps are replaced with the replay wall clock.
pub async fn replay(client: &mut BusClient, records: &[Recorded], speed: f64) -> Result<(), RecordError> {
    let Some(first) = records.first() else {
        return Ok(());
    };
    let speed = if speed > 0.0 && speed.is_finite() { speed } else { 1.0 };
    let start = Instant::now();
    for r in records {
        let offset = ((r.recv - first.recv) / speed).max(0.0);
        tokio::time::sleep_until(start + Duration::from_secs_f64(offset)).await;
        let mut env = r.envelope.clone();
        env.seq = 0;
        env.stamp = unix_now();
        env.verb = Verb::Pub;
        client.publish_envelope(&env).await?;
    }
    Ok(())
}
