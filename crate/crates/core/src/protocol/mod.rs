//! Binary wire protocol between workspace clients and per-DTN shard
//! services.
//!
//! ```text
//! frame   := length u32 | msg_type u16 | request_id u32 | payload
//! payload := field_count u16 | (tag u8 | len u32 | bytes)*
//! ```
//!
//! `length` counts everything after itself. All integers are big-endian.
//! Field tags per message are listed in `PROTOCOL.md`.

mod codec;
mod fields;
mod frame;

pub use codec::*;
pub use fields::{FieldReader, Fields, MAX_FIELDS};
pub use frame::{decode_frame, encode_frame, Frame, MAX_FRAME_LEN, MAX_PAYLOAD_LEN};

use std::io;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("payload of {0} bytes exceeds the frame limit")]
    PayloadTooLarge(usize),
    #[error("declared frame length {0} exceeds the limit")]
    OversizedFrame(u32),
    #[error("connection closed mid-frame")]
    Truncated,
    #[error("connection closed")]
    Closed,
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown message type {0}")]
    UnknownMessageType(u16),
    #[error("transport: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum MessageType {
    PutFile = 1,
    GetFile = 2,
    ListVisible = 3,
    BatchExport = 4,
    EnqueueIndex = 5,
    Query = 6,
    Tag = 7,
    RegisterNs = 8,
    Result = 9,
    Error = 10,
}

impl MessageType {
    pub const ALL: [MessageType; 10] = [
        MessageType::PutFile,
        MessageType::GetFile,
        MessageType::ListVisible,
        MessageType::BatchExport,
        MessageType::EnqueueIndex,
        MessageType::Query,
        MessageType::Tag,
        MessageType::RegisterNs,
        MessageType::Result,
        MessageType::Error,
    ];

    pub fn from_u16(v: u16) -> Option<Self> {
        Self::ALL.iter().copied().find(|t| *t as u16 == v)
    }
}

/// Codes carried by ERROR frames (field tag 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u16)]
pub enum ErrorCode {
    NotFound = 1,
    BadRequest = 2,
    Conflict = 3,
    Internal = 4,
    Unsupported = 5,
}

impl ErrorCode {
    pub fn from_u16(v: u16) -> Option<Self> {
        match v {
            1 => Some(ErrorCode::NotFound),
            2 => Some(ErrorCode::BadRequest),
            3 => Some(ErrorCode::Conflict),
            4 => Some(ErrorCode::Internal),
            5 => Some(ErrorCode::Unsupported),
            _ => None,
        }
    }
}
