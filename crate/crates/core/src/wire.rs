//! Length-prefixed JSON wire protocol.
//!
//! Every message is one frame: a 4-byte big-endian payload length followed
//! by that many bytes of UTF-8 JSON. Message payloads are tagged objects
//! (`{"type": "...", ...}`); the exact field names below are the protocol
//! contract. Nodes speak [`NodeMessage`]/[`MasterMessage`] on a persistent
//! connection; clients send one [`ClientRequest`] per connection and read
//! one [`ClientResponse`]. An in-memory transport (the simulation driver)
//! exchanges the same message values without sockets.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Millis;
use crate::cluster::{LogRecord, LogSource};
use crate::scheduler::{AttemptOutcome, WorkflowStatus};

/// Frames above this are rejected to bound memory.
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN}-byte limit")]
    FrameTooLarge(u32),
    #[error("malformed message: {0}")]
    Decode(#[from] serde_json::Error),
    #[error("connection closed by peer")]
    ConnectionClosed,
}

pub fn write_frame<W: Write, T: Serialize>(writer: &mut W, msg: &T) -> Result<(), WireError> {
    let payload = serde_json::to_vec(msg)?;
    let len = payload.len() as u32;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    writer.write_all(&len.to_be_bytes())?;
    writer.write_all(&payload)?;
    writer.flush()?;
    Ok(())
}

pub fn read_frame<R: Read, T: DeserializeOwned>(reader: &mut R) -> Result<T, WireError> {
    Ok(serde_json::from_slice(&read_frame_bytes(reader)?)?)
}

pub fn read_frame_bytes<R: Read>(reader: &mut R) -> Result<Vec<u8>, WireError> {
    let mut len_buf = [0u8; 4];
    match reader.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            return Err(WireError::ConnectionClosed)
        }
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len_buf);
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut payload = vec![0u8; len as usize];
    reader.read_exact(&mut payload)?;
    Ok(payload)
}

/// Messages a node sends to the master.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NodeMessage {
    Register {
        node_id: String,
        capacity: u32,
        spot: bool,
    },
    Heartbeat {
        node_id: String,
        load: u32,
        seq: u64,
    },
    Result {
        task_id: String,
        outcome: AttemptOutcome,
        attempt: u32,
    },
    Log { record: LogRecord },
}

impl NodeMessage {
    pub fn node_id(&self) -> Option<&str> {
        match self {
            NodeMessage::Register { node_id, .. } | NodeMessage::Heartbeat { node_id, .. } => {
                Some(node_id)
            }
            NodeMessage::Log { record } => Some(&record.node_id),
            NodeMessage::Result { .. } => None,
        }
    }
}

/// Messages the master pushes to a node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MasterMessage {
    Assign {
        task_id: String,
        command: String,
        env: BTreeMap<String, String>,
    },
}

/// Log query filter; `None` fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LogFilter {
    pub node: Option<String>,
    pub task: Option<String>,
    pub source: Option<LogSource>,
}

impl LogFilter {
    pub fn matches(&self, record: &LogRecord) -> bool {
        self.node.as_deref().is_none_or(|n| record.node_id == n)
            && self
                .task
                .as_deref()
                .is_none_or(|t| record.task_id.as_deref() == Some(t))
            && self.source.is_none_or(|s| record.source == s)
    }
}

/// One-shot client API requests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientRequest {
    SubmitRecipe { yaml: String, seed: u64 },
    GetStatus { workflow_id: String },
    GetLogs {
        workflow_id: String,
        filter: LogFilter,
    },
    UploadDataset {
        local_root: String,
        dataset: String,
        chunk_target: u64,
    },
    Snapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Bad input: recipe validation, usage errors.
    Validation,
    /// Unknown workflow/dataset/object.
    NotFound,
    /// Store or service outage.
    Unavailable,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientResponse {
    Submitted {
        workflow_id: String,
        warnings: Vec<String>,
    },
    Status { status: WorkflowStatus },
    Logs { records: Vec<LogRecord> },
    Uploaded {
        dataset: String,
        files: usize,
        chunks: usize,
        chunks_uploaded: usize,
        chunks_skipped: usize,
    },
    SnapshotTaken { event_offset: u64 },
    Error { code: ErrorCode, message: String },
}

/// Timestamped wrapper for in-memory transports that need a stable order.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub at_ms: Millis,
    pub message: NodeMessage,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_roundtrip() {
        let msg = NodeMessage::Register {
            node_id: "n1".into(),
            capacity: 2,
            spot: true,
        };
        let mut buf = Vec::new();
        write_frame(&mut buf, &msg).unwrap();
        assert_eq!(u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize, buf.len() - 4);
        let back: NodeMessage = read_frame(&mut buf.as_slice()).unwrap();
        assert_eq!(back, msg);
    }

    #[test]
    fn message_json_shape_is_stable() {
        let msg = NodeMessage::Heartbeat {
            node_id: "n1".into(),
            load: 1,
            seq: 42,
        };
        assert_eq!(
            serde_json::to_string(&msg).unwrap(),
            r#"{"type":"heartbeat","node_id":"n1","load":1,"seq":42}"#
        );
        let assign = MasterMessage::Assign {
            task_id: "wf-1/t.0".into(),
            command: "echo hi".into(),
            env: BTreeMap::from([("HYPER_TASK_ID".to_string(), "wf-1/t.0".to_string())]),
        };
        assert_eq!(
            serde_json::to_string(&assign).unwrap(),
            r#"{"type":"assign","task_id":"wf-1/t.0","command":"echo hi","env":{"HYPER_TASK_ID":"wf-1/t.0"}}"#
        );
    }

    #[test]
    fn closed_stream_is_reported() {
        let empty: &[u8] = &[];
        match read_frame::<_, NodeMessage>(&mut { empty }) {
            Err(WireError::ConnectionClosed) => {}
            other => panic!("expected ConnectionClosed, got {other:?}"),
        }
    }

    #[test]
    fn oversized_frame_is_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(&(MAX_FRAME_LEN + 1).to_be_bytes());
        match read_frame::<_, NodeMessage>(&mut buf.as_slice()) {
            Err(WireError::FrameTooLarge(_)) => {}
            other => panic!("expected FrameTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn log_filter_matching() {
        let record = LogRecord {
            source: LogSource::Application,
            node_id: "n1".into(),
            task_id: Some("wf/t.0".into()),
            at_ms: 5,
            line: "hello".into(),
        };
        assert!(LogFilter::default().matches(&record));
        assert!(LogFilter {
            node: Some("n1".into()),
            task: Some("wf/t.0".into()),
            source: Some(LogSource::Application),
        }
        .matches(&record));
        assert!(!LogFilter {
            source: Some(LogSource::Utilization),
            ..Default::default()
        }
        .matches(&record));
        assert!(!LogFilter {
            node: Some("n2".into()),
            ..Default::default()
        }
        .matches(&record));
    }
}
