//! Datagram-mode frames: operation ids, dependency tags, duplicate
//! suppression at the receiver, and a fixed-interval retransmit policy.
//!
//! Frame layout, all integers big-endian:
//!
//! ```text
//! "EBP1" | op_id u64 | dep_count u8 | deps dep_count × u64 | verb_code u8 | body
//! ```
//!
//! `verb_code` 1..=9 is a request for that verb, `0x80 | verb` its response
//! and `0xF0` a bare receipt ("held") for a frame waiting on dependencies.
//! Request and response bodies are `u32 header_len | header | u32 payload_len
//! | payload` where `header` is the stream-mode header line without its LF
//! (for requests, without the leading verb token). A held frame has an empty
//! body.

use std::collections::{BTreeMap, BTreeSet};

use super::stream::{parse_request_header, parse_response_header, Request, Response, Verb};
use super::WireError;
use crate::error::ErrorCode;

pub const MAGIC: &[u8; 4] = b"EBP1";
pub const MAX_DEPS: usize = 16;
pub const DEFAULT_WINDOW: usize = 4096;

const RESPONSE_BIT: u8 = 0x80;
const HELD_CODE: u8 = 0xF0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FrameBody {
    Request(Request),
    Response { verb: Verb, response: Response },
    Held,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpFrame {
    pub op_id: u64,
    pub deps: Vec<u64>,
    pub body: FrameBody,
}

impl OpFrame {
    pub fn request(op_id: u64, deps: Vec<u64>, request: Request) -> Self {
        OpFrame {
            op_id,
            deps,
            body: FrameBody::Request(request),
        }
    }

    fn reply(op_id: u64, verb: Verb, response: Response) -> Self {
        OpFrame {
            op_id,
            deps: Vec::new(),
            body: FrameBody::Response { verb, response },
        }
    }
}

fn put_section(out: &mut Vec<u8>, bytes: &[u8]) -> Result<(), WireError> {
    let len = u32::try_from(bytes.len()).map_err(|_| WireError::malformed("section too long"))?;
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

pub fn encode_frame(frame: &OpFrame) -> Result<Vec<u8>, WireError> {
    if frame.deps.len() > MAX_DEPS {
        return Err(WireError::malformed(format!(
            "{} dependencies exceed the limit of {MAX_DEPS}",
            frame.deps.len()
        )));
    }
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&frame.op_id.to_be_bytes());
    out.push(frame.deps.len() as u8);
    for d in &frame.deps {
        out.extend_from_slice(&d.to_be_bytes());
    }
    match &frame.body {
        FrameBody::Request(req) => {
            req.validate()?;
            out.push(req.verb().code());
            put_section(&mut out, req.args().as_bytes())?;
            put_section(&mut out, req.payload())?;
        }
        FrameBody::Response { verb, response } => {
            out.push(RESPONSE_BIT | verb.code());
            let bytes = super::stream::encode_response(response);
            let nl = bytes.iter().position(|b| *b == b'\n').expect("encoded response has LF");
            put_section(&mut out, &bytes[..nl])?;
            put_section(&mut out, &bytes[nl + 1..])?;
        }
        FrameBody::Held => out.push(HELD_CODE),
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.bytes.len() < n {
            return Err(WireError::malformed("truncated frame"));
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn section(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

pub fn decode_frame(bytes: &[u8]) -> Result<OpFrame, WireError> {
    let mut c = Cursor { bytes };
    if c.take(4)? != MAGIC {
        return Err(WireError::malformed("bad magic"));
    }
    let op_id = c.u64()?;
    let dep_count = c.u8()? as usize;
    if dep_count > MAX_DEPS {
        return Err(WireError::malformed(format!("dep_count {dep_count} exceeds {MAX_DEPS}")));
    }
    let deps = (0..dep_count).map(|_| c.u64()).collect::<Result<Vec<_>, _>>()?;
    let code = c.u8()?;
    let body = if code == HELD_CODE {
        FrameBody::Held
    } else {
        let verb = Verb::from_code(code & !RESPONSE_BIT)
            .ok_or_else(|| WireError::malformed(format!("bad verb code {code:#04x}")))?;
        let header = c.section()?;
        let payload = c.section()?;
        if code & RESPONSE_BIT == 0 {
            let mut line = verb.as_str().as_bytes().to_vec();
            if !header.is_empty() {
                line.push(b' ');
                line.extend_from_slice(header);
            }
            let (mut req, declared) = parse_request_header(&line)?;
            if payload.len() as u64 != declared {
                return Err(WireError::malformed("payload length mismatch"));
            }
            if let Request::Store { payload: p, .. } = &mut req {
                *p = payload.to_vec();
            }
            FrameBody::Request(req)
        } else {
            let (mut response, declared) = parse_response_header(verb, header)?;
            if payload.len() as u64 != declared {
                return Err(WireError::malformed("payload length mismatch"));
            }
            if let Response::Loaded(l) = &mut response {
                l.data = payload.to_vec();
            }
            FrameBody::Response { verb, response }
        }
    };
    if !c.bytes.is_empty() {
        return Err(WireError::malformed("trailing bytes after frame"));
    }
    Ok(OpFrame { op_id, deps, body })
}

/// Outcome of offering a frame to a receiver's window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    Execute,
    Duplicate(Response),
    Defer(Vec<u64>),
    /// The op id fell below the low watermark and its response was dropped.
    StaleOp,
}

/// Receiver-side record of completed operations for one sender session.
#[derive(Debug, Clone)]
pub struct DedupWindow {
    completed: BTreeMap<u64, Response>,
    low_watermark: u64,
    capacity: usize,
}

impl Default for DedupWindow {
    fn default() -> Self {
        Self::new(DEFAULT_WINDOW)
    }
}

impl DedupWindow {
    pub fn new(capacity: usize) -> Self {
        DedupWindow {
            completed: BTreeMap::new(),
            low_watermark: 0,
            capacity: capacity.max(1),
        }
    }

    pub fn low_watermark(&self) -> u64 {
        self.low_watermark
    }

    pub fn len(&self) -> usize {
        self.completed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completed.is_empty()
    }

    pub fn is_done(&self, op_id: u64) -> bool {
        op_id < self.low_watermark || self.completed.contains_key(&op_id)
    }

    pub fn admit_frame(&self, frame: &OpFrame) -> Admission {
        if let Some(cached) = self.completed.get(&frame.op_id) {
            return Admission::Duplicate(cached.clone());
        }
        if frame.op_id < self.low_watermark {
            return Admission::StaleOp;
        }
        let missing: Vec<u64> = frame
            .deps
            .iter()
            .copied()
            .filter(|d| !self.is_done(*d))
            .collect();
        if missing.is_empty() {
            Admission::Execute
        } else {
            Admission::Defer(missing)
        }
    }

    /// Records a completed operation. Past capacity, the low watermark moves
    /// across the contiguous completed prefix and those responses are dropped.
    pub fn record(&mut self, op_id: u64, response: Response) {
        self.completed.insert(op_id, response);
        while self.completed.len() > self.capacity {
            match self.completed.first_key_value() {
                Some((first, _)) if *first == self.low_watermark => {
                    self.completed.pop_first();
                    self.low_watermark += 1;
                }
                Some((first, _)) if *first < self.low_watermark => {
                    self.completed.pop_first();
                }
                _ => break,
            }
        }
    }
}

/// One sender session as seen by a depot: admission, held frames, and
/// release of held frames once their dependencies complete.
#[derive(Debug, Default)]
pub struct DatagramReceiver {
    window: DedupWindow,
    held: BTreeMap<u64, OpFrame>,
    executed: BTreeSet<u64>,
}

impl DatagramReceiver {
    pub fn new(window_capacity: usize) -> Self {
        DatagramReceiver {
            window: DedupWindow::new(window_capacity),
            held: BTreeMap::new(),
            executed: BTreeSet::new(),
        }
    }

    pub fn window(&self) -> &DedupWindow {
        &self.window
    }

    pub fn held_count(&self) -> usize {
        self.held.len()
    }

    /// Handles one incoming frame, running `exec` for every request that
    /// becomes executable, and returns the frames to send back.
    pub fn on_frame(
        &mut self,
        frame: OpFrame,
        exec: &mut dyn FnMut(&Request) -> Response,
    ) -> Vec<OpFrame> {
        let FrameBody::Request(req) = &frame.body else {
            return Vec::new();
        };
        let verb = req.verb();
        match self.window.admit_frame(&frame) {
            Admission::Duplicate(resp) => vec![OpFrame::reply(frame.op_id, verb, resp)],
            Admission::StaleOp => vec![OpFrame::reply(
                frame.op_id,
                verb,
                Response::error(ErrorCode::StaleOp, "op id below the dedup window"),
            )],
            Admission::Defer(_) => {
                let id = frame.op_id;
                self.held.entry(id).or_insert(frame);
                vec![OpFrame {
                    op_id: id,
                    deps: Vec::new(),
                    body: FrameBody::Held,
                }]
            }
            Admission::Execute => {
                let mut replies = Vec::new();
                self.run(frame, exec, &mut replies);
                self.release_held(exec, &mut replies);
                replies
            }
        }
    }

    fn run(
        &mut self,
        frame: OpFrame,
        exec: &mut dyn FnMut(&Request) -> Response,
        replies: &mut Vec<OpFrame>,
    ) {
        let FrameBody::Request(req) = &frame.body else {
            return;
        };
        debug_assert!(!self.executed.contains(&frame.op_id), "op executed twice");
        self.executed.insert(frame.op_id);
        let resp = exec(req);
        self.window.record(frame.op_id, resp.clone());
        self.held.remove(&frame.op_id);
        replies.push(OpFrame::reply(frame.op_id, req.verb(), resp));
    }

    fn release_held(
        &mut self,
        exec: &mut dyn FnMut(&Request) -> Response,
        replies: &mut Vec<OpFrame>,
    ) {
        loop {
            let ready = self
                .held
                .values()
                .find(|f| f.deps.iter().all(|d| self.window.is_done(*d)))
                .map(|f| f.op_id);
            let Some(id) = ready else { break };
            let frame = self.held.remove(&id).expect("ready frame is held");
            self.run(frame, exec, replies);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetransmitAction {
    Wait,
    Resend,
    GiveUp,
}

/// Fixed-interval retransmission: resend every `interval_ms` until
/// `max_attempts` sends have gone unanswered, then give up. No backoff;
/// receiver-side dedup makes resends safe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetransmitPolicy {
    pub interval_ms: u64,
    pub max_attempts: u32,
}

impl Default for RetransmitPolicy {
    fn default() -> Self {
        RetransmitPolicy {
            interval_ms: 50,
            max_attempts: 8,
        }
    }
}

/// Sender-side state of an operation awaiting its response.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnackedOp {
    pub attempts: u32,
    pub last_sent_ms: u64,
}

impl RetransmitPolicy {
    pub fn action(&self, op: &UnackedOp, now_ms: u64) -> RetransmitAction {
        if now_ms.saturating_sub(op.last_sent_ms) < self.interval_ms {
            RetransmitAction::Wait
        } else if op.attempts < self.max_attempts {
            RetransmitAction::Resend
        } else {
            RetransmitAction::GiveUp
        }
    }

    /// Time from the first send until the policy gives up on a silent peer.
    pub fn give_up_after_ms(&self) -> u64 {
        self.interval_ms * u64::from(self.max_attempts)
    }
}
