//! Byte-exact encodings for depot operations: a text-header protocol for
//! reliable streams and a binary frame format for datagrams.
//!
//! There is deliberately no flow-control or credit type here; encoders never
//! consult receiver state.

mod datagram;
mod stream;

pub use datagram::{
    decode_frame, encode_frame, Admission, DatagramReceiver, DedupWindow, FrameBody, OpFrame,
    RetransmitAction, RetransmitPolicy, UnackedOp, DEFAULT_WINDOW, MAGIC, MAX_DEPS,
};
pub use stream::{
    decode_request, decode_response, encode_request, encode_response, parse_request_header,
    parse_response_header, read_header_line, read_payload, read_request, read_response, Request,
    Response, Verb, MAX_HEADER,
};

use std::io;

use crate::error::ErrorCode;

#[derive(Debug, thiserror::Error)]
pub enum WireError {
    #[error("malformed frame: {0}")]
    MalformedFrame(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WireError {
    pub fn malformed(msg: impl Into<String>) -> Self {
        WireError::MalformedFrame(msg.into())
    }

    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            WireError::MalformedFrame(_) => Some(ErrorCode::MalformedFrame),
            WireError::Io(_) => None,
        }
    }
}
