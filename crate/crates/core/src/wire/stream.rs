//! Text-header request/response framing for reliable byte streams.
//!
//! Every message is one header line of space-separated tokens terminated by
//! a single LF, optionally followed by a raw payload whose length appears in
//! the header. Numbers are canonical decimal (no sign, no leading zeros), so
//! any byte string that decodes re-encodes to itself.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Read};

use crate::capability::{parse_canonical_u64, CapSet, Capability};
use crate::depot::{DepotStats, Hardness, Loaded, ProbeInfo, TierCounts};
use crate::error::ErrorCode;
use crate::nfu::{OutputsState, ResourceBudget, TransformResult, TransformStatus};

use super::WireError;

/// Longest header line accepted, excluding the terminating LF.
pub const MAX_HEADER: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verb {
    Allocate,
    Store,
    Load,
    Transfer,
    Transform,
    Probe,
    Renew,
    Release,
    Stats,
}

impl Verb {
    pub const ALL: [Verb; 9] = [
        Verb::Allocate,
        Verb::Store,
        Verb::Load,
        Verb::Transfer,
        Verb::Transform,
        Verb::Probe,
        Verb::Renew,
        Verb::Release,
        Verb::Stats,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Verb::Allocate => "ALLOCATE",
            Verb::Store => "STORE",
            Verb::Load => "LOAD",
            Verb::Transfer => "TRANSFER",
            Verb::Transform => "TRANSFORM",
            Verb::Probe => "PROBE",
            Verb::Renew => "RENEW",
            Verb::Release => "RELEASE",
            Verb::Stats => "STATS",
        }
    }

    pub fn parse(s: &str) -> Option<Verb> {
        Verb::ALL.into_iter().find(|v| v.as_str() == s)
    }

    /// Code used in datagram frames, 1 through 9.
    pub fn code(self) -> u8 {
        Verb::ALL.iter().position(|v| *v == self).unwrap() as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<Verb> {
        Verb::ALL.get(usize::from(code).checked_sub(1)?).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Request {
    Allocate {
        capacity: u64,
        duration: u64,
        hardness: Hardness,
    },
    Store {
        cap: Capability,
        offset: u64,
        payload: Vec<u8>,
    },
    Load {
        cap: Capability,
        offset: u64,
        length: u64,
    },
    Transfer {
        src: Capability,
        src_offset: u64,
        dst: Capability,
        dst_offset: u64,
        length: u64,
    },
    Transform {
        op_name: String,
        inputs: Vec<Capability>,
        outputs: Vec<Capability>,
        budget: ResourceBudget,
        params: BTreeMap<String, String>,
    },
    Probe {
        cap: Capability,
    },
    Renew {
        cap: Capability,
        extension: u64,
    },
    Release {
        cap: Capability,
    },
    Stats,
}

impl Request {
    pub fn verb(&self) -> Verb {
        match self {
            Request::Allocate { .. } => Verb::Allocate,
            Request::Store { .. } => Verb::Store,
            Request::Load { .. } => Verb::Load,
            Request::Transfer { .. } => Verb::Transfer,
            Request::Transform { .. } => Verb::Transform,
            Request::Probe { .. } => Verb::Probe,
            Request::Renew { .. } => Verb::Renew,
            Request::Release { .. } => Verb::Release,
            Request::Stats => Verb::Stats,
        }
    }

    /// Allocation the request addresses, for logging.
    pub fn alloc_id(&self) -> Option<u64> {
        match self {
            Request::Store { cap, .. }
            | Request::Load { cap, .. }
            | Request::Probe { cap }
            | Request::Renew { cap, .. }
            | Request::Release { cap } => Some(cap.alloc_id),
            Request::Transfer { src, .. } => Some(src.alloc_id),
            Request::Transform { outputs, .. } => outputs.first().map(|c| c.alloc_id),
            Request::Allocate { .. } | Request::Stats => None,
        }
    }

    /// Header tokens after the verb, joined by spaces.
    pub fn args(&self) -> String {
        let mut t: Vec<String> = Vec::new();
        match self {
            Request::Allocate {
                capacity,
                duration,
                hardness,
            } => {
                t.extend([capacity.to_string(), duration.to_string(), hardness.to_string()]);
            }
            Request::Store {
                cap,
                offset,
                payload,
            } => t.extend([cap.to_string(), offset.to_string(), payload.len().to_string()]),
            Request::Load {
                cap,
                offset,
                length,
            } => t.extend([cap.to_string(), offset.to_string(), length.to_string()]),
            Request::Transfer {
                src,
                src_offset,
                dst,
                dst_offset,
                length,
            } => t.extend([
                src.to_string(),
                src_offset.to_string(),
                dst.to_string(),
                dst_offset.to_string(),
                length.to_string(),
            ]),
            Request::Transform {
                op_name,
                inputs,
                outputs,
                budget,
                params,
            } => {
                t.push(op_name.clone());
                t.push(inputs.len().to_string());
                t.extend(inputs.iter().map(|c| c.to_string()));
                t.push(outputs.len().to_string());
                t.extend(outputs.iter().map(|c| c.to_string()));
                t.extend([
                    budget.max_wall_ms.to_string(),
                    budget.max_scratch_bytes.to_string(),
                    budget.max_io_bytes.to_string(),
                    params.len().to_string(),
                ]);
                for (k, v) in params {
                    t.push(k.clone());
                    t.push(v.clone());
                }
            }
            Request::Probe { cap } | Request::Release { cap } => t.push(cap.to_string()),
            Request::Renew { cap, extension } => {
                t.extend([cap.to_string(), extension.to_string()])
            }
            Request::Stats => {}
        }
        t.join(" ")
    }

    pub fn payload(&self) -> &[u8] {
        match self {
            Request::Store { payload, .. } => payload,
            _ => &[],
        }
    }

    /// Checks that every free-form token (operation name, params) is a valid
    /// header token and that the header fits.
    pub fn validate(&self) -> Result<(), WireError> {
        if let Request::Transform {
            op_name, params, ..
        } = self
        {
            for token in std::iter::once(op_name).chain(params.iter().flat_map(|(k, v)| [k, v])) {
                if !is_token(token) {
                    return Err(WireError::malformed(format!("bad token {token:?}")));
                }
            }
        }
        let len = self.verb().as_str().len() + 1 + self.args().len();
        if len > MAX_HEADER {
            return Err(WireError::malformed(format!("header of {len} bytes exceeds limit")));
        }
        Ok(())
    }
}

pub(crate) fn is_token(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_graphic() || b >= 0x80) && !s.contains(char::is_whitespace)
}

/// Header line for `verb` with `args` (no trailing LF).
fn header_line(verb: &str, args: &str) -> String {
    if args.is_empty() {
        verb.to_string()
    } else {
        format!("{verb} {args}")
    }
}

pub fn encode_request(req: &Request) -> Vec<u8> {
    let mut out = header_line(req.verb().as_str(), &req.args()).into_bytes();
    out.push(b'\n');
    out.extend_from_slice(req.payload());
    out
}

/// Token cursor over one header line.
pub(crate) struct Tokens<'a> {
    inner: std::str::Split<'a, char>,
}

impl<'a> Tokens<'a> {
    pub(crate) fn new(line: &'a str) -> Self {
        Tokens {
            inner: line.split(' '),
        }
    }

    pub(crate) fn next(&mut self, what: &str) -> Result<&'a str, WireError> {
        match self.inner.next() {
            Some(t) if !t.is_empty() => Ok(t),
            _ => Err(WireError::malformed(format!("missing or empty {what}"))),
        }
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64, WireError> {
        let t = self.next(what)?;
        parse_canonical_u64(t).ok_or_else(|| WireError::malformed(format!("bad {what} {t:?}")))
    }

    fn count(&mut self, what: &str, max: usize) -> Result<usize, WireError> {
        let n = self.u64(what)?;
        usize::try_from(n)
            .ok()
            .filter(|n| *n <= max)
            .ok_or_else(|| WireError::malformed(format!("{what} {n} too large")))
    }

    pub(crate) fn cap(&mut self, what: &str) -> Result<Capability, WireError> {
        let t = self.next(what)?;
        t.parse()
            .map_err(|e| WireError::malformed(format!("{what}: {e}")))
    }

    pub(crate) fn rest(&mut self) -> Option<String> {
        let parts: Vec<&str> = self.inner.by_ref().collect();
        if parts.is_empty() {
            None
        } else {
            Some(parts.join(" "))
        }
    }

    pub(crate) fn end(mut self) -> Result<(), WireError> {
        match self.inner.next() {
            None => Ok(()),
            Some(t) => Err(WireError::malformed(format!("trailing token {t:?}"))),
        }
    }
}

pub(crate) fn header_str(line: &[u8]) -> Result<&str, WireError> {
    if line.len() > MAX_HEADER {
        return Err(WireError::malformed(format!(
            "header of {} bytes exceeds {MAX_HEADER}",
            line.len()
        )));
    }
    let s = std::str::from_utf8(line).map_err(|_| WireError::malformed("header is not UTF-8"))?;
    if s.bytes().any(|b| b.is_ascii_control()) {
        return Err(WireError::malformed("control character in header"));
    }
    Ok(s)
}

/// Parses a request header (without LF). A STORE comes back with an empty
/// payload; the second value is the number of payload bytes that follow.
pub fn parse_request_header(line: &[u8]) -> Result<(Request, u64), WireError> {
    let s = header_str(line)?;
    let mut tok = Tokens::new(s);
    let verb_token = tok.next("verb")?;
    let verb = Verb::parse(verb_token)
        .ok_or_else(|| WireError::malformed(format!("unknown verb {verb_token:?}")))?;
    let mut payload_len = 0;
    let req = match verb {
        Verb::Allocate => Request::Allocate {
            capacity: tok.u64("capacity")?,
            duration: tok.u64("duration")?,
            hardness: tok
                .next("tier")?
                .parse()
                .map_err(|e: crate::error::DepotError| WireError::malformed(e.to_string()))?,
        },
        Verb::Store => {
            let cap = tok.cap("write capability")?;
            let offset = tok.u64("offset")?;
            payload_len = tok.u64("length")?;
            Request::Store {
                cap,
                offset,
                payload: Vec::new(),
            }
        }
        Verb::Load => Request::Load {
            cap: tok.cap("read capability")?,
            offset: tok.u64("offset")?,
            length: tok.u64("length")?,
        },
        Verb::Transfer => Request::Transfer {
            src: tok.cap("source capability")?,
            src_offset: tok.u64("source offset")?,
            dst: tok.cap("destination capability")?,
            dst_offset: tok.u64("destination offset")?,
            length: tok.u64("length")?,
        },
        Verb::Transform => {
            let op_name = tok.next("operation")?.to_string();
            let n_in = tok.count("input count", MAX_HEADER)?;
            let inputs = (0..n_in)
                .map(|_| tok.cap("input capability"))
                .collect::<Result<Vec<_>, _>>()?;
            let n_out = tok.count("output count", MAX_HEADER)?;
            let outputs = (0..n_out)
                .map(|_| tok.cap("output capability"))
                .collect::<Result<Vec<_>, _>>()?;
            let budget = ResourceBudget {
                max_wall_ms: tok.u64("max_wall_ms")?,
                max_scratch_bytes: tok.u64("max_scratch")?,
                max_io_bytes: tok.u64("max_io")?,
            };
            let n_params = tok.count("param count", MAX_HEADER)?;
            let mut params = BTreeMap::new();
            let mut last: Option<&str> = None;
            for _ in 0..n_params {
                let k = tok.next("param key")?;
                let v = tok.next("param value")?;
                if last.is_some_and(|prev| prev >= k) {
                    return Err(WireError::malformed("param keys must be strictly ascending"));
                }
                last = Some(k);
                params.insert(k.to_string(), v.to_string());
            }
            Request::Transform {
                op_name,
                inputs,
                outputs,
                budget,
                params,
            }
        }
        Verb::Probe => Request::Probe {
            cap: tok.cap("manage capability")?,
        },
        Verb::Renew => Request::Renew {
            cap: tok.cap("manage capability")?,
            extension: tok.u64("extension")?,
        },
        Verb::Release => Request::Release {
            cap: tok.cap("manage capability")?,
        },
        Verb::Stats => Request::Stats,
    };
    tok.end()?;
    Ok((req, payload_len))
}

/// Decodes one complete request; the input must be exactly one message.
pub fn decode_request(bytes: &[u8]) -> Result<Request, WireError> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| WireError::malformed("header not terminated by LF"))?;
    let (mut req, payload_len) = parse_request_header(&bytes[..nl])?;
    let payload = &bytes[nl + 1..];
    if payload.len() as u64 != payload_len {
        return Err(WireError::malformed(format!(
            "payload is {} bytes, header declares {payload_len}",
            payload.len()
        )));
    }
    if let Request::Store { payload: p, .. } = &mut req {
        *p = payload.to_vec();
    }
    Ok(req)
}

/// Reads one LF-terminated line of at most `MAX_HEADER` bytes. Returns
/// `Ok(None)` on a clean EOF before any byte.
pub fn read_header_line<R: BufRead>(r: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut line = Vec::new();
    let n = r
        .by_ref()
        .take(MAX_HEADER as u64 + 1)
        .read_until(b'\n', &mut line)?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        if line.len() > MAX_HEADER {
            return Err(WireError::malformed("header line too long"));
        }
        return Err(WireError::Io(io::ErrorKind::UnexpectedEof.into()));
    }
    line.pop();
    Ok(Some(line))
}

/// Reads exactly `len` bytes, returning whatever arrived if the stream ends
/// first (the `bool` is `true` when complete).
pub fn read_payload<R: Read>(r: &mut R, len: u64) -> io::Result<(Vec<u8>, bool)> {
    let mut buf = Vec::with_capacity(len.min(64 << 20) as usize);
    let got = r.by_ref().take(len).read_to_end(&mut buf)?;
    Ok((buf, got as u64 == len))
}

/// Reads a complete request from a stream. `Ok(None)` means the peer closed
/// the connection between requests.
pub fn read_request<R: BufRead>(r: &mut R) -> Result<Option<Request>, WireError> {
    let Some(line) = read_header_line(r)? else {
        return Ok(None);
    };
    let (mut req, len) = parse_request_header(&line)?;
    if let Request::Store { payload, .. } = &mut req {
        let (bytes, complete) = read_payload(r, len)?;
        if !complete {
            return Err(WireError::Io(io::ErrorKind::UnexpectedEof.into()));
        }
        *payload = bytes;
    }
    Ok(Some(req))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Allocated(CapSet),
    Stored { written: u64 },
    Loaded(Loaded),
    Transferred { moved: u64 },
    Transformed(TransformResult),
    Probed(ProbeInfo),
    Renewed { expires_in_ms: u64 },
    Released,
    Stats(DepotStats),
    Err { code: ErrorCode, message: String },
}

impl Response {
    pub fn error(code: ErrorCode, message: impl std::fmt::Display) -> Self {
        let message = message
            .to_string()
            .chars()
            .map(|c| if c.is_control() { ' ' } else { c })
            .collect::<String>();
        let message = message.trim().to_string();
        Response::Err {
            code,
            message: if message.is_empty() { "-".into() } else { message },
        }
    }

    pub fn is_ok(&self) -> bool {
        !matches!(self, Response::Err { .. })
    }

    /// Header line (without LF) and payload.
    fn parts(&self) -> (String, &[u8]) {
        let ok = |tokens: Vec<String>| header_line("OK", &tokens.join(" "));
        match self {
            Response::Allocated(caps) => (
                ok(vec![
                    caps.read.to_string(),
                    caps.write.to_string(),
                    caps.manage.to_string(),
                ]),
                &[],
            ),
            Response::Stored { written } => (ok(vec![written.to_string()]), &[]),
            Response::Loaded(l) => (
                ok(vec![
                    l.data.len().to_string(),
                    state_token(l.unknown_state).into(),
                ]),
                &l.data,
            ),
            Response::Transferred { moved } => (ok(vec![moved.to_string()]), &[]),
            Response::Transformed(r) => {
                let mut t = vec![
                    r.status.as_str().to_string(),
                    r.io_bytes_used.to_string(),
                    r.wall_ms_used.to_string(),
                    r.scratch_bytes_used.to_string(),
                    r.outputs_state.as_str().to_string(),
                    r.output_lengths.len().to_string(),
                ];
                t.extend(r.output_lengths.iter().map(|l| l.to_string()));
                (ok(t), &[])
            }
            Response::Probed(p) => (
                ok(vec![
                    p.capacity.to_string(),
                    p.used.to_string(),
                    p.expires_in_ms.to_string(),
                    p.hardness.to_string(),
                    state_token(p.unknown_state).into(),
                ]),
                &[],
            ),
            Response::Renewed { expires_in_ms } => (ok(vec![expires_in_ms.to_string()]), &[]),
            Response::Released => ("OK".into(), &[]),
            Response::Stats(s) => (
                ok([
                    s.sum_hard,
                    s.sum_soft,
                    s.bytes_in_use,
                    s.live_allocations,
                    s.preemptions.best_effort,
                    s.preemptions.soft,
                    s.preemptions.hard,
                ]
                .iter()
                .map(u64::to_string)
                .collect()),
                &[],
            ),
            Response::Err { code, message } => (format!("ERR {code} {message}"), &[]),
        }
    }
}

fn state_token(unknown: bool) -> &'static str {
    if unknown {
        "unknown"
    } else {
        "defined"
    }
}

fn parse_state(tok: &mut Tokens<'_>) -> Result<bool, WireError> {
    match tok.next("state")? {
        "unknown" => Ok(true),
        "defined" => Ok(false),
        other => Err(WireError::malformed(format!("bad state {other:?}"))),
    }
}

pub fn encode_response(resp: &Response) -> Vec<u8> {
    let (header, payload) = resp.parts();
    let mut out = header.into_bytes();
    out.push(b'\n');
    out.extend_from_slice(payload);
    out
}

/// Parses a response header for a request of kind `verb`. A LOAD comes back
/// with an empty data vector; the second value is the payload length.
pub fn parse_response_header(verb: Verb, line: &[u8]) -> Result<(Response, u64), WireError> {
    let s = header_str(line)?;
    let mut tok = Tokens::new(s);
    match tok.next("status")? {
        "OK" => {}
        "ERR" => {
            let code_token = tok.next("error code")?;
            let code = code_token
                .parse()
                .map_err(|_| WireError::malformed(format!("unknown error code {code_token:?}")))?;
            let message = tok
                .rest()
                .filter(|m| !m.is_empty())
                .ok_or_else(|| WireError::malformed("missing error message"))?;
            return Ok((Response::Err { code, message }, 0));
        }
        other => return Err(WireError::malformed(format!("bad status {other:?}"))),
    }
    let mut payload_len = 0;
    let resp = match verb {
        Verb::Allocate => Response::Allocated(CapSet {
            read: tok.cap("read capability")?,
            write: tok.cap("write capability")?,
            manage: tok.cap("manage capability")?,
        }),
        Verb::Store => Response::Stored {
            written: tok.u64("bytes written")?,
        },
        Verb::Load => {
            payload_len = tok.u64("length")?;
            Response::Loaded(Loaded {
                data: Vec::new(),
                unknown_state: parse_state(&mut tok)?,
            })
        }
        Verb::Transfer => Response::Transferred {
            moved: tok.u64("bytes moved")?,
        },
        Verb::Transform => {
            let status_token = tok.next("transform status")?;
            let status = TransformStatus::parse(status_token)
                .ok_or_else(|| WireError::malformed(format!("bad status {status_token:?}")))?;
            let io_bytes_used = tok.u64("io")?;
            let wall_ms_used = tok.u64("wall")?;
            let scratch_bytes_used = tok.u64("scratch")?;
            let state_token = tok.next("outputs state")?;
            let outputs_state = OutputsState::parse(state_token)
                .ok_or_else(|| WireError::malformed(format!("bad state {state_token:?}")))?;
            let n = tok.count("output count", MAX_HEADER)?;
            let output_lengths = (0..n)
                .map(|_| tok.u64("output length"))
                .collect::<Result<Vec<_>, _>>()?;
            Response::Transformed(TransformResult {
                status,
                io_bytes_used,
                wall_ms_used,
                scratch_bytes_used,
                outputs_state,
                output_lengths,
            })
        }
        Verb::Probe => Response::Probed(ProbeInfo {
            capacity: tok.u64("capacity")?,
            used: tok.u64("used")?,
            expires_in_ms: tok.u64("expires_in_ms")?,
            hardness: tok
                .next("tier")?
                .parse()
                .map_err(|e: crate::error::DepotError| WireError::malformed(e.to_string()))?,
            unknown_state: parse_state(&mut tok)?,
        }),
        Verb::Renew => Response::Renewed {
            expires_in_ms: tok.u64("expires_in_ms")?,
        },
        Verb::Release => Response::Released,
        Verb::Stats => {
            let mut v = [0u64; 7];
            for (i, slot) in v.iter_mut().enumerate() {
                *slot = tok.u64(&format!("stat {i}"))?;
            }
            Response::Stats(DepotStats {
                sum_hard: v[0],
                sum_soft: v[1],
                bytes_in_use: v[2],
                live_allocations: v[3],
                preemptions: TierCounts {
                    best_effort: v[4],
                    soft: v[5],
                    hard: v[6],
                },
            })
        }
    };
    tok.end()?;
    Ok((resp, payload_len))
}

pub fn decode_response(verb: Verb, bytes: &[u8]) -> Result<Response, WireError> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| WireError::malformed("header not terminated by LF"))?;
    let (mut resp, len) = parse_response_header(verb, &bytes[..nl])?;
    let payload = &bytes[nl + 1..];
    if payload.len() as u64 != len {
        return Err(WireError::malformed("payload length mismatch"));
    }
    if let Response::Loaded(l) = &mut resp {
        l.data = payload.to_vec();
    }
    Ok(resp)
}

pub fn read_response<R: BufRead>(r: &mut R, verb: Verb) -> Result<Response, WireError> {
    let line = read_header_line(r)?
        .ok_or_else(|| WireError::Io(io::ErrorKind::UnexpectedEof.into()))?;
    let (mut resp, len) = parse_response_header(verb, &line)?;
    if let Response::Loaded(l) = &mut resp {
        let (bytes, complete) = read_payload(r, len)?;
        if !complete {
            return Err(WireError::Io(io::ErrorKind::UnexpectedEof.into()));
        }
        l.data = bytes;
    }
    Ok(resp)
}
