//! The JSON-lines trace format: one message record per line.

use std::str::FromStr;

use acre_core::{parse_term, Direction, Message, ProtocolId};
use anyhow::{anyhow, Context, Result};
use serde::Deserialize;

/// One trace line. `content` uses the textual term grammar and must be
/// ground; `protocol` is the canonical `namespace/name/version` triple.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    #[serde(default)]
    pub direction: TraceDirection,
    pub sender: String,
    pub receiver: String,
    pub performative: String,
    pub content: String,
    #[serde(rename = "conversation-id", default)]
    pub conversation_id: Option<String>,
    #[serde(default)]
    pub protocol: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceDirection {
    Sent,
    #[default]
    Received,
}

impl From<TraceDirection> for Direction {
    fn from(direction: TraceDirection) -> Direction {
        match direction {
            TraceDirection::Sent => Direction::Sent,
            TraceDirection::Received => Direction::Received,
        }
    }
}

impl TraceRecord {
    pub fn to_message(&self) -> Result<Message> {
        let content = parse_term(&self.content)
            .map_err(|e| anyhow!("invalid content term `{}`: {e}", self.content))?;
        let mut message = Message::new(
            self.sender.clone(),
            self.receiver.clone(),
            self.performative.clone(),
            content,
        )?;
        if let Some(id) = &self.conversation_id {
            message = message.with_conversation_id(id.clone());
        }
        if let Some(protocol) = &self.protocol {
            let id = ProtocolId::from_str(protocol)
                .map_err(|e| anyhow!("invalid protocol field `{protocol}`: {e}"))?;
            message = message.with_protocol(id);
        }
        Ok(message)
    }
}

/// Parses a whole trace file, skipping blank lines. Errors name the
/// offending line number.
pub fn parse_trace(text: &str) -> Result<Vec<(usize, TraceRecord)>> {
    let mut records = Vec::new();
    for (index, line) in text.lines().enumerate() {
        let line_no = index + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(line)
            .with_context(|| format!("trace line {line_no}: malformed record"))?;
        // Surface term / protocol syntax errors with the line number now,
        // not midway through a replay.
        record
            .to_message()
            .with_context(|| format!("trace line {line_no}: invalid message"))?;
        records.push((line_no, record));
    }
    Ok(records)
}
