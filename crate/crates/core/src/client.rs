//! Blocking client for the stream protocol. A session carries one request at
//! a time; open several sessions for parallelism.

use std::io::{self, BufReader, BufWriter, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use crate::capability::{CapSet, Capability};
use crate::depot::{DepotStats, Hardness, Loaded, ProbeInfo};
use crate::error::ErrorCode;
use crate::nfu::{TransformResult, TransformSpec};
use crate::wire::{encode_request, read_response, Request, Response, WireError};

/// Largest payload carried by one STORE or LOAD issued by the SDK.
pub const PIECE_SIZE: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error("{code} {message}")]
    Remote { code: ErrorCode, message: String },
    #[error("Timeout")]
    Timeout,
    #[error("ConnectionLost: {0}")]
    ConnectionLost(String),
    /// The depot answered with bytes that are not a valid response.
    #[error("MalformedFrame: {0}")]
    Malformed(String),
}

impl ClientError {
    /// Error name as printed by tools: the wire code, or `Timeout` /
    /// `ConnectionLost`.
    pub fn name(&self) -> &'static str {
        match self {
            ClientError::Remote { code, .. } => code.as_str(),
            ClientError::Timeout => "Timeout",
            ClientError::ConnectionLost(_) => "ConnectionLost",
            ClientError::Malformed(_) => ErrorCode::MalformedFrame.as_str(),
        }
    }

    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            ClientError::Remote { code, .. } => Some(*code),
            _ => None,
        }
    }

    fn from_io(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => ClientError::Timeout,
            _ => ClientError::ConnectionLost(e.to_string()),
        }
    }
}

pub type Result<T, E = ClientError> = std::result::Result<T, E>;

/// Payload bytes moved by the sessions sharing this counter.
#[derive(Debug, Default)]
pub struct Traffic {
    pub payload_sent: AtomicU64,
    pub payload_received: AtomicU64,
    pub requests: AtomicU64,
}

impl Traffic {
    pub fn payload_sent(&self) -> u64 {
        self.payload_sent.load(Ordering::Relaxed)
    }

    pub fn payload_received(&self) -> u64 {
        self.payload_received.load(Ordering::Relaxed)
    }

    pub fn payload_total(&self) -> u64 {
        self.payload_sent() + self.payload_received()
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

pub struct Session {
    addr: String,
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    traffic: Arc<Traffic>,
    broken: bool,
}

impl std::fmt::Debug for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Session").field("addr", &self.addr).finish()
    }
}

impl Session {
    pub fn connect(addr: &str, timeout_ms: u64) -> Result<Self> {
        Self::connect_with(addr, timeout_ms, Arc::default())
    }

    /// Connects with `timeout_ms` applying to the connect and to every
    /// subsequent read and write.
    pub fn connect_with(addr: &str, timeout_ms: u64, traffic: Arc<Traffic>) -> Result<Self> {
        let timeout = Duration::from_millis(timeout_ms.max(1));
        let targets = addr
            .to_socket_addrs()
            .map_err(|e| ClientError::ConnectionLost(format!("{addr}: {e}")))?;
        let mut last = ClientError::ConnectionLost(format!("{addr}: no address"));
        for target in targets {
            match TcpStream::connect_timeout(&target, timeout) {
                Ok(stream) => {
                    let setup = stream
                        .set_read_timeout(Some(timeout))
                        .and_then(|()| stream.set_write_timeout(Some(timeout)))
                        .and_then(|()| stream.set_nodelay(true))
                        .and_then(|()| stream.try_clone());
                    let clone = setup.map_err(ClientError::from_io)?;
                    return Ok(Session {
                        addr: addr.to_string(),
                        reader: BufReader::with_capacity(64 * 1024, clone),
                        writer: BufWriter::with_capacity(64 * 1024, stream),
                        traffic,
                        broken: false,
                    });
                }
                Err(e) => last = ClientError::from_io(e),
            }
        }
        Err(last)
    }

    pub fn addr(&self) -> &str {
        &self.addr
    }

    pub fn traffic(&self) -> &Arc<Traffic> {
        &self.traffic
    }

    /// Sends one request and reads its response. Error responses are
    /// returned as `Ok(Response::Err{..})`; transport failures leave the
    /// session unusable.
    pub fn request(&mut self, req: &Request) -> Result<Response> {
        if self.broken {
            return Err(ClientError::ConnectionLost(format!(
                "{}: session closed by an earlier failure",
                self.addr
            )));
        }
        let outcome = self.exchange(req);
        if outcome.is_err() {
            self.broken = true;
        }
        outcome
    }

    fn exchange(&mut self, req: &Request) -> Result<Response> {
        let bytes = encode_request(req);
        self.writer
            .write_all(&bytes)
            .and_then(|()| self.writer.flush())
            .map_err(ClientError::from_io)?;
        self.traffic.requests.fetch_add(1, Ordering::Relaxed);
        self.traffic
            .payload_sent
            .fetch_add(req.payload().len() as u64, Ordering::Relaxed);
        let resp = read_response(&mut self.reader, req.verb()).map_err(|e| match e {
            WireError::Io(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                ClientError::ConnectionLost(format!("{}: closed by depot", self.addr))
            }
            WireError::Io(e) => ClientError::from_io(e),
            WireError::MalformedFrame(m) => ClientError::Malformed(m),
        })?;
        if let Response::Loaded(l) = &resp {
            self.traffic
                .payload_received
                .fetch_add(l.data.len() as u64, Ordering::Relaxed);
        }
        Ok(resp)
    }

    fn call(&mut self, req: &Request) -> Result<Response> {
        match self.request(req)? {
            Response::Err { code, message } => Err(ClientError::Remote { code, message }),
            other => Ok(other),
        }
    }

    pub fn allocate(&mut self, capacity: u64, duration: u64, hardness: Hardness) -> Result<CapSet> {
        let req = Request::Allocate {
            capacity,
            duration,
            hardness,
        };
        match self.call(&req)? {
            Response::Allocated(caps) => Ok(caps),
            other => Err(unexpected(&other)),
        }
    }

    /// Stores `data` at `offset` in sequential pieces of at most
    /// [`PIECE_SIZE`] bytes.
    pub fn store(&mut self, cap: &Capability, offset: u64, data: &[u8]) -> Result<u64> {
        if data.is_empty() {
            return self.store_single(cap, offset, data);
        }
        let mut written = 0;
        for (i, piece) in data.chunks(PIECE_SIZE as usize).enumerate() {
            written += self.store_single(cap, offset + i as u64 * PIECE_SIZE, piece)?;
        }
        Ok(written)
    }

    /// Stores `data` in one request regardless of size.
    pub fn store_single(&mut self, cap: &Capability, offset: u64, data: &[u8]) -> Result<u64> {
        let req = Request::Store {
            cap: cap.clone(),
            offset,
            payload: data.to_vec(),
        };
        match self.call(&req)? {
            Response::Stored { written } => Ok(written),
            other => Err(unexpected(&other)),
        }
    }

    /// Loads `length` bytes in pieces of at most [`PIECE_SIZE`]; the result is
    /// unknown-state if any piece was.
    pub fn load(&mut self, cap: &Capability, offset: u64, length: u64) -> Result<Loaded> {
        let mut out = Loaded {
            data: Vec::with_capacity(length.min(1 << 30) as usize),
            unknown_state: false,
        };
        let mut done = 0;
        loop {
            let n = (length - done).min(PIECE_SIZE);
            let req = Request::Load {
                cap: cap.clone(),
                offset: offset + done,
                length: n,
            };
            match self.call(&req)? {
                Response::Loaded(piece) => {
                    out.unknown_state |= piece.unknown_state;
                    out.data.extend_from_slice(&piece.data);
                }
                other => return Err(unexpected(&other)),
            }
            done += n;
            if done >= length {
                return Ok(out);
            }
        }
    }

    pub fn transfer(
        &mut self,
        src: &Capability,
        src_offset: u64,
        dst: &Capability,
        dst_offset: u64,
        length: u64,
    ) -> Result<u64> {
        let req = Request::Transfer {
            src: src.clone(),
            src_offset,
            dst: dst.clone(),
            dst_offset,
            length,
        };
        match self.call(&req)? {
            Response::Transferred { moved } => Ok(moved),
            other => Err(unexpected(&other)),
        }
    }

    pub fn transform(&mut self, spec: &TransformSpec) -> Result<TransformResult> {
        let req = Request::Transform {
            op_name: spec.op_name.clone(),
            inputs: spec.inputs.clone(),
            outputs: spec.outputs.clone(),
            budget: spec.budget,
            params: spec.params.clone(),
        };
        match self.call(&req)? {
            Response::Transformed(r) => Ok(r),
            other => Err(unexpected(&other)),
        }
    }

    pub fn probe(&mut self, cap: &Capability) -> Result<ProbeInfo> {
        match self.call(&Request::Probe { cap: cap.clone() })? {
            Response::Probed(info) => Ok(info),
            other => Err(unexpected(&other)),
        }
    }

    /// Returns the milliseconds remaining on the lease after renewal.
    pub fn renew(&mut self, cap: &Capability, extension: u64) -> Result<u64> {
        let req = Request::Renew {
            cap: cap.clone(),
            extension,
        };
        match self.call(&req)? {
            Response::Renewed { expires_in_ms } => Ok(expires_in_ms),
            other => Err(unexpected(&other)),
        }
    }

    pub fn release(&mut self, cap: &Capability) -> Result<()> {
        match self.call(&Request::Release { cap: cap.clone() })? {
            Response::Released => Ok(()),
            other => Err(unexpected(&other)),
        }
    }

    pub fn stats(&mut self) -> Result<DepotStats> {
        match self.call(&Request::Stats)? {
            Response::Stats(s) => Ok(s),
            other => Err(unexpected(&other)),
        }
    }
}

fn unexpected(resp: &Response) -> ClientError {
    ClientError::Malformed(format!("unexpected response {resp:?}"))
}
