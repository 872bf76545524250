//! Network service for one depot: the stream protocol over TCP, one thread per
//! session, a periodic lease sweeper, and source-initiated TRANSFER.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use parking_lot::Mutex;

use crate::capability::Capability;
use crate::client::{ClientError, Session};
use crate::clock::{Clock, SystemClock};
use crate::depot::{Depot, DepotConfig};
use crate::error::{DepotError, ErrorCode};
use crate::nfu::{NfuEngine, TransformSpec};
use crate::wire::{
    encode_response, parse_request_header, read_header_line, read_payload, DatagramReceiver,
    OpFrame, Request, Response, WireError,
};

#[derive(Debug, thiserror::Error)]
pub enum ServerError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Byte counters kept by a running depot.
#[derive(Debug, Default)]
pub struct ServerTraffic {
    /// Payload bytes returned to LOAD callers.
    pub load_bytes_served: AtomicU64,
    /// Payload bytes received in STORE requests.
    pub store_bytes_received: AtomicU64,
    /// Bytes read locally as the source of a TRANSFER.
    pub transfer_bytes_read: AtomicU64,
    /// Bytes pushed to other depots by TRANSFER.
    pub transfer_bytes_pushed: AtomicU64,
    pub requests: AtomicU64,
}

impl ServerTraffic {
    pub fn load_bytes_served(&self) -> u64 {
        self.load_bytes_served.load(Ordering::Relaxed)
    }

    pub fn transfer_bytes_pushed(&self) -> u64 {
        self.transfer_bytes_pushed.load(Ordering::Relaxed)
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

/// Executes decoded requests against a depot and its transform engine. Shared
/// by the stream listener and the datagram receiver.
#[derive(Clone)]
pub struct Dispatcher {
    depot: Arc<Depot>,
    engine: Arc<NfuEngine>,
    traffic: Arc<ServerTraffic>,
    remote_timeout_ms: u64,
}

impl Dispatcher {
    pub fn new(depot: Arc<Depot>, engine: Arc<NfuEngine>) -> Self {
        Dispatcher {
            depot,
            engine,
            traffic: Arc::default(),
            remote_timeout_ms: 10_000,
        }
    }

    pub fn with_remote_timeout(mut self, ms: u64) -> Self {
        self.remote_timeout_ms = ms;
        self
    }

    pub fn depot(&self) -> &Arc<Depot> {
        &self.depot
    }

    pub fn engine(&self) -> &Arc<NfuEngine> {
        &self.engine
    }

    pub fn traffic(&self) -> &Arc<ServerTraffic> {
        &self.traffic
    }

    pub fn handle(&self, req: &Request) -> Response {
        self.traffic.requests.fetch_add(1, Ordering::Relaxed);
        let resp = self.dispatch(req);
        let outcome = match &resp {
            Response::Err { code, .. } => code.as_str(),
            _ => "OK",
        };
        match req.alloc_id() {
            Some(id) => log::info!("{} {id} {outcome}", req.verb().as_str()),
            None => log::info!("{} - {outcome}", req.verb().as_str()),
        }
        resp
    }

    fn dispatch(&self, req: &Request) -> Response {
        let d = &self.depot;
        let fail = |e: DepotError| Response::error(e.code(), e);
        match req {
            Request::Allocate {
                capacity,
                duration,
                hardness,
            } => d
                .allocate(*capacity, *duration, *hardness)
                .map_or_else(fail, Response::Allocated),
            Request::Store {
                cap,
                offset,
                payload,
            } => {
                self.traffic
                    .store_bytes_received
                    .fetch_add(payload.len() as u64, Ordering::Relaxed);
                d.store(cap, *offset, payload)
                    .map_or_else(fail, |written| Response::Stored { written })
            }
            Request::Load {
                cap,
                offset,
                length,
            } => match d.load(cap, *offset, *length) {
                Ok(loaded) => {
                    self.traffic
                        .load_bytes_served
                        .fetch_add(loaded.data.len() as u64, Ordering::Relaxed);
                    Response::Loaded(loaded)
                }
                Err(e) => fail(e),
            },
            Request::Transfer {
                src,
                src_offset,
                dst,
                dst_offset,
                length,
            } => self
                .transfer(src, *src_offset, dst, *dst_offset, *length)
                .unwrap_or_else(|(code, msg)| Response::error(code, msg)),
            Request::Transform {
                op_name,
                inputs,
                outputs,
                budget,
                params,
            } => {
                let spec = TransformSpec {
                    op_name: op_name.clone(),
                    inputs: inputs.clone(),
                    outputs: outputs.clone(),
                    params: params.clone(),
                    budget: *budget,
                };
                match self.engine.execute(d, &spec) {
                    Ok(result) => Response::Transformed(result),
                    Err(e) => Response::error(e.code(), e),
                }
            }
            Request::Probe { cap } => d.probe(cap).map_or_else(fail, Response::Probed),
            Request::Renew { cap, extension } => d
                .renew(cap, *extension)
                .map_or_else(fail, |expires_in_ms| Response::Renewed { expires_in_ms }),
            Request::Release { cap } => d.release(cap).map_or_else(fail, |()| Response::Released),
            Request::Stats => Response::Stats(d.stats()),
        }
    }

    fn transfer(
        &self,
        src: &Capability,
        src_offset: u64,
        dst: &Capability,
        dst_offset: u64,
        length: u64,
    ) -> Result<Response, (ErrorCode, String)> {
        let local = self.depot.addr();
        let depot_err = |e: DepotError| (e.code(), e.to_string());
        if src.depot_addr != local {
            return Err(depot_err(DepotError::NotLocal(src.depot_addr.clone())));
        }
        let loaded = self
            .depot
            .load(src, src_offset, length)
            .map_err(depot_err)?;
        self.traffic
            .transfer_bytes_read
            .fetch_add(length, Ordering::Relaxed);
        if dst.depot_addr == local {
            let moved = self
                .depot
                .store(dst, dst_offset, &loaded.data)
                .map_err(depot_err)?;
            return Ok(Response::Transferred { moved });
        }
        let remote = |e: ClientError| match e {
            ClientError::Remote { code, message } => (code, message),
            other => (
                ErrorCode::RemoteUnreachable,
                format!("{}: {other}", dst.depot_addr),
            ),
        };
        let mut session =
            Session::connect(&dst.depot_addr, self.remote_timeout_ms).map_err(remote)?;
        // a single STORE, so an interrupted push poisons the destination
        let moved = session
            .store_single(dst, dst_offset, &loaded.data)
            .map_err(remote)?;
        self.traffic
            .transfer_bytes_pushed
            .fetch_add(moved, Ordering::Relaxed);
        Ok(Response::Transferred { moved })
    }

    /// Feeds one datagram frame through `receiver`, executing whatever becomes
    /// runnable, and returns the frames to send back.
    pub fn on_datagram(&self, receiver: &mut DatagramReceiver, frame: OpFrame) -> Vec<OpFrame> {
        receiver.on_frame(frame, &mut |req| self.handle(req))
    }
}

/// Runs the stream protocol over one connection until the peer closes it or
/// sends something unparseable. A malformed header is answered with
/// `ERR MalformedFrame` and ends the session, since the payload boundary is
/// then unknown.
pub fn serve_connection<R: BufRead, W: Write>(
    dispatcher: &Dispatcher,
    reader: &mut R,
    writer: &mut W,
) -> io::Result<()> {
    loop {
        let line = match read_header_line(reader) {
            Ok(Some(line)) => line,
            Ok(None) => return Ok(()),
            Err(WireError::MalformedFrame(msg)) => {
                return reply_malformed(writer, &msg);
            }
            Err(WireError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(WireError::Io(e)) => return Err(e),
        };
        let (mut req, payload_len) = match parse_request_header(&line) {
            Ok(parsed) => parsed,
            Err(e) => return reply_malformed(writer, &e.to_string()),
        };
        if let Request::Store {
            cap,
            offset,
            payload,
        } = &mut req
        {
            let (bytes, complete) = read_payload(reader, payload_len)?;
            if !complete {
                log::info!("STORE {} interrupted", cap.alloc_id);
                if let Err(e) =
                    dispatcher
                        .depot
                        .store_interrupted(cap, *offset, payload_len, &bytes)
                {
                    log::debug!("interrupted store not recorded: {e}");
                }
                return Ok(());
            }
            *payload = bytes;
        }
        let resp = dispatcher.handle(&req);
        writer.write_all(&encode_response(&resp))?;
        writer.flush()?;
    }
}

fn reply_malformed<W: Write>(writer: &mut W, msg: &str) -> io::Result<()> {
    log::info!("- - MalformedFrame");
    writer.write_all(&encode_response(&Response::error(
        ErrorCode::MalformedFrame,
        msg,
    )))?;
    writer.flush()
}

#[derive(Clone)]
pub struct ServerOptions {
    pub clock: Arc<dyn Clock>,
    pub engine: Arc<NfuEngine>,
    pub sweep_interval: Duration,
    /// Connect and I/O timeout for TRANSFER pushes to other depots.
    pub remote_timeout_ms: u64,
}

impl Default for ServerOptions {
    fn default() -> Self {
        ServerOptions {
            clock: Arc::new(SystemClock::new()),
            engine: Arc::new(NfuEngine::new()),
            sweep_interval: Duration::from_secs(1),
            remote_timeout_ms: 10_000,
        }
    }
}

/// A running depot server. Dropping it kills the server.
pub struct DepotServer {
    addr: SocketAddr,
    dispatcher: Dispatcher,
    stop: Arc<AtomicBool>,
    sessions: Arc<Mutex<HashMap<u64, TcpStream>>>,
    threads: Vec<JoinHandle<()>>,
}

impl DepotServer {
    pub fn start(config: DepotConfig) -> Result<Self, ServerError> {
        Self::start_with(config, ServerOptions::default())
    }

    pub fn start_with(config: DepotConfig, options: ServerOptions) -> Result<Self, ServerError> {
        config.validate().map_err(ServerError::Config)?;
        let listener =
            TcpListener::bind(&config.listen_addr).map_err(|source| ServerError::BindFailure {
                addr: config.listen_addr.clone(),
                source,
            })?;
        let bind_err = |source| ServerError::BindFailure {
            addr: config.listen_addr.clone(),
            source,
        };
        let addr = listener.local_addr().map_err(bind_err)?;
        listener.set_nonblocking(true).map_err(bind_err)?;

        let depot = Arc::new(Depot::with_clock(config, options.clock));
        depot.set_addr(addr.to_string());
        let dispatcher = Dispatcher::new(depot, options.engine)
            .with_remote_timeout(options.remote_timeout_ms);
        let stop = Arc::new(AtomicBool::new(false));
        let sessions: Arc<Mutex<HashMap<u64, TcpStream>>> = Arc::default();

        let acceptor = {
            let (dispatcher, stop, sessions) = (dispatcher.clone(), stop.clone(), sessions.clone());
            thread::Builder::new()
                .name(format!("depot-accept-{}", addr.port()))
                .spawn(move || accept_loop(listener, dispatcher, stop, sessions))
                .expect("spawn acceptor")
        };
        let sweeper = {
            let (depot, stop) = (dispatcher.depot.clone(), stop.clone());
            let period = options.sweep_interval;
            thread::Builder::new()
                .name(format!("depot-sweep-{}", addr.port()))
                .spawn(move || sweep_loop(depot, stop, period))
                .expect("spawn sweeper")
        };
        log::info!("depot listening on {addr}");
        Ok(DepotServer {
            addr,
            dispatcher,
            stop,
            sessions,
            threads: vec![acceptor, sweeper],
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// The `host:port` string embedded in this depot's capabilities.
    pub fn addr_string(&self) -> String {
        self.addr.to_string()
    }

    pub fn depot(&self) -> &Arc<Depot> {
        &self.dispatcher.depot
    }

    pub fn traffic(&self) -> &Arc<ServerTraffic> {
        &self.dispatcher.traffic
    }

    pub fn dispatcher(&self) -> &Dispatcher {
        &self.dispatcher
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().len()
    }

    /// Stops accepting, lets each in-flight request finish and closes every
    /// session at its next request boundary.
    pub fn shutdown(mut self) {
        self.stop_with(Shutdown::Read);
    }

    /// Drops every connection immediately, as a crash would.
    pub fn kill(mut self) {
        self.stop_with(Shutdown::Both);
    }

    fn stop_with(&mut self, how: Shutdown) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        for s in self.sessions.lock().values() {
            let _ = s.shutdown(how);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        log::info!("depot {} stopped", self.addr);
    }
}

impl Drop for DepotServer {
    fn drop(&mut self) {
        self.stop_with(Shutdown::Both);
    }
}

fn accept_loop(
    listener: TcpListener,
    dispatcher: Dispatcher,
    stop: Arc<AtomicBool>,
    sessions: Arc<Mutex<HashMap<u64, TcpStream>>>,
) {
    let mut next_id = 0u64;
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let Ok(registered) = stream.try_clone() else {
                    continue;
                };
                let id = next_id;
                next_id += 1;
                sessions.lock().insert(id, registered);
                // a session registered after shutdown began must not linger
                if stop.load(Ordering::SeqCst) {
                    let _ = stream.shutdown(Shutdown::Both);
                }
                let (dispatcher, sessions) = (dispatcher.clone(), sessions.clone());
                workers.retain(|w| !w.is_finished());
                workers.push(thread::spawn(move || {
                    log::debug!("session {id} from {peer}");
                    let mut reader = match stream.try_clone() {
                        Ok(s) => BufReader::with_capacity(64 * 1024, s),
                        Err(_) => return,
                    };
                    let mut writer = BufWriter::with_capacity(64 * 1024, stream);
                    if let Err(e) = serve_connection(&dispatcher, &mut reader, &mut writer) {
                        log::debug!("session {id} ended: {e}");
                    }
                    sessions.lock().remove(&id);
                }));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(5));
            }
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(5));
            }
        }
    }
    drop(listener);
    for w in workers {
        let _ = w.join();
    }
}

fn sweep_loop(depot: Arc<Depot>, stop: Arc<AtomicBool>, period: Duration) {
    let mut next = Instant::now() + period;
    while !stop.load(Ordering::SeqCst) {
        let now = Instant::now();
        if now >= next {
            let n = depot.sweep();
            if n > 0 {
                log::info!("sweep reclaimed {n} expired allocation(s)");
            }
            next = now + period;
        }
        thread::sleep((next - Instant::now().min(next)).min(Duration::from_millis(20)));
    }
}

/// Runs a depot until `stop` becomes true, then shuts it down gracefully.
pub fn serve(config: DepotConfig, stop: Arc<AtomicBool>) -> Result<(), ServerError> {
    let server = DepotServer::start(config)?;
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(50));
    }
    server.shutdown();
    Ok(())
}
