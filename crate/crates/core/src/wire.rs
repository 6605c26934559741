//! Length-prefixed framing and the service envelope codec.
//!
//! Every frame on the wire is a 4-byte big-endian length `L` followed by `L`
//! bytes. Container traffic carries one UTF-8 JSON envelope per frame:
//!
//! ```text
//! {"message_id":"<uuid>","source_node":"<uuid>","target_node":"<uuid>",
//!  "target_service":"directory","kind":"dir.query",
//!  "payload":"<base64>","reply_to":null}
//! ```
//!
//! A nil `target_node` addresses whichever container receives the frame.

use std::io::{self, Read, Write};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::io::{AsyncRead, AsyncReadExt, AsyncWrite, AsyncWriteExt};

use crate::ids::{MessageId, NodeId};

/// Default cap on an envelope's raw payload.
pub const MAX_PAYLOAD_BYTES: usize = 8 * 1024 * 1024;

/// Largest JSON frame a payload of [`MAX_PAYLOAD_BYTES`] can produce.
pub const MAX_FRAME_BYTES: usize = MAX_PAYLOAD_BYTES / 3 * 4 + 64 * 1024;

/// Envelope kind used for error replies.
pub const ERROR_KIND: &str = "error";

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame of {len} bytes exceeds the {max} byte limit")]
    TooLarge { len: usize, max: usize },
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed envelope: {0}")]
    Malformed(String),
}

pub async fn write_frame<W: AsyncWrite + Unpin>(w: &mut W, body: &[u8]) -> Result<(), FrameError> {
    let len = u32::try_from(body.len())
        .map_err(|_| FrameError::TooLarge { len: body.len(), max: u32::MAX as usize })?;
    w.write_all(&len.to_be_bytes()).await?;
    w.write_all(body).await?;
    w.flush().await?;
    Ok(())
}

pub async fn read_frame<R: AsyncRead + Unpin>(r: &mut R, max: usize) -> Result<Vec<u8>, FrameError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len).await {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(FrameError::Closed),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > max {
        return Err(FrameError::TooLarge { len, max });
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).await?;
    Ok(body)
}

pub fn write_frame_sync<W: Write>(w: &mut W, body: &[u8]) -> Result<(), FrameError> {
    let len = u32::try_from(body.len())
        .map_err(|_| FrameError::TooLarge { len: body.len(), max: u32::MAX as usize })?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(body)?;
    Ok(())
}

pub fn read_frame_sync<R: Read>(r: &mut R, max: usize) -> Result<Vec<u8>, FrameError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Err(FrameError::Closed),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > max {
        return Err(FrameError::TooLarge { len, max });
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(body)
}

/// The routed message unit between named services.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceEnvelope {
    pub message_id: MessageId,
    pub source_node: NodeId,
    pub target_node: NodeId,
    pub target_service: String,
    pub kind: String,
    #[serde(with = "base64_bytes")]
    pub payload: Vec<u8>,
    pub reply_to: Option<MessageId>,
}

impl ServiceEnvelope {
    pub fn request(
        source_node: NodeId,
        target_node: NodeId,
        target_service: impl Into<String>,
        kind: impl Into<String>,
        payload: Vec<u8>,
    ) -> Self {
        Self {
            message_id: MessageId::new(),
            source_node,
            target_node,
            target_service: target_service.into(),
            kind: kind.into(),
            payload,
            reply_to: None,
        }
    }

    /// Reply correlated to this envelope.
    pub fn reply(&self, from: NodeId, kind: impl Into<String>, payload: Vec<u8>) -> Self {
        Self {
            message_id: MessageId::new(),
            source_node: from,
            target_node: self.source_node,
            target_service: self.target_service.clone(),
            kind: kind.into(),
            payload,
            reply_to: Some(self.message_id),
        }
    }

    pub fn error_reply(&self, from: NodeId, error: &WireError) -> Self {
        self.reply(from, ERROR_KIND, serde_json::to_vec(error).unwrap_or_default())
    }

    pub fn is_error(&self) -> bool {
        self.kind == ERROR_KIND
    }

    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("envelope serializes")
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        serde_json::from_slice(bytes).map_err(|e| FrameError::Malformed(e.to_string()))
    }
}

/// Body of an error reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Error)]
#[error("{code}: {message}")]
pub struct WireError {
    pub code: String,
    pub message: String,
}

impl WireError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into() }
    }
}

pub async fn send_envelope<W: AsyncWrite + Unpin>(w: &mut W, env: &ServiceEnvelope) -> Result<(), FrameError> {
    if env.payload.len() > MAX_PAYLOAD_BYTES {
        return Err(FrameError::TooLarge { len: env.payload.len(), max: MAX_PAYLOAD_BYTES });
    }
    write_frame(w, &env.encode()).await
}

pub async fn recv_envelope<R: AsyncRead + Unpin>(r: &mut R) -> Result<ServiceEnvelope, FrameError> {
    let frame = read_frame(r, MAX_FRAME_BYTES).await?;
    ServiceEnvelope::decode(&frame)
}

/// Serde helper: bytes as a base64 string.
pub mod base64_bytes {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&BASE64.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        BASE64.decode(s).map_err(serde::de::Error::custom)
    }
}

/// Serde helper: optional bytes as an optional base64 string.
pub mod base64_opt {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &Option<Vec<u8>>, s: S) -> Result<S::Ok, S::Error> {
        match bytes {
            Some(b) => s.serialize_some(&BASE64.encode(b)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u8>>, D::Error> {
        let s = Option::<String>::deserialize(d)?;
        s.map(|s| BASE64.decode(s).map_err(serde::de::Error::custom)).transpose()
    }
}
