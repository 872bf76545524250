//! File operations over exNodes: chunked, replicated upload; parallel download
//! with replica failover; and repair by depot-to-depot transfer.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use parking_lot::Mutex;

use crate::client::{ClientError, Session, Traffic};
use crate::depot::Hardness;
use crate::error::ErrorCode;
use crate::exnode::{ExNode, Extent, Replica, Violation};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LorsError {
    #[error("InvalidArgument: {0}")]
    InvalidArgument(String),
    #[error("invalid exNode: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidExNode(Vec<Violation>),
    /// Every depot refused a chunk with the same error.
    #[error("chunk at offset {offset}: {error}")]
    Chunk { offset: u64, error: ClientError },
    #[error("InsufficientDepots: chunk at offset {offset} placed on {placed} of {needed} depots")]
    InsufficientDepots {
        offset: u64,
        needed: usize,
        placed: usize,
    },
    #[error("ExtentUnavailable: [{start},{end}) ({reason})")]
    ExtentUnavailable { start: u64, end: u64, reason: String },
}

impl LorsError {
    /// Name printed by tools on failure.
    pub fn name(&self) -> &'static str {
        match self {
            LorsError::InvalidArgument(_) => ErrorCode::InvalidArgument.as_str(),
            LorsError::InvalidExNode(_) => "ValidationFailed",
            LorsError::Chunk { error, .. } => error.name(),
            LorsError::InsufficientDepots { .. } => "InsufficientDepots",
            LorsError::ExtentUnavailable { .. } => "ExtentUnavailable",
        }
    }
}

#[derive(Debug, Clone)]
pub struct UploadOptions {
    pub chunk_size: u64,
    pub replicas: usize,
    /// Seconds.
    pub lease: u64,
    pub hardness: Hardness,
    pub parallelism: usize,
}

impl Default for UploadOptions {
    fn default() -> Self {
        UploadOptions {
            chunk_size: 4 << 20,
            replicas: 1,
            lease: 3600,
            hardness: Hardness::Hard,
            parallelism: 4,
        }
    }
}

/// Outcome of a repair pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RepairReport {
    /// Replicas created by depot-to-depot transfer.
    pub transfers: usize,
    /// Replicas found dead and removed from the exNode.
    pub dropped: usize,
    /// Extents that are still below target, with the reason.
    pub shortfalls: Vec<(u64, String)>,
}

/// Client-side runtime. Holds no file state; every call is self-contained.
#[derive(Debug, Clone)]
pub struct Lors {
    pub timeout_ms: u64,
    traffic: Arc<Traffic>,
}

impl Default for Lors {
    fn default() -> Self {
        Lors::new(10_000)
    }
}

/// Lazily opened sessions, one per depot, for a single worker thread.
pub(crate) struct Sessions<'a> {
    lors: &'a Lors,
    open: HashMap<String, Session>,
}

impl<'a> Sessions<'a> {
    pub(crate) fn new(lors: &'a Lors) -> Self {
        Sessions {
            lors,
            open: HashMap::new(),
        }
    }

    /// Runs `f` on a session to `addr`, discarding the session if the
    /// transport failed so the next call reconnects.
    pub(crate) fn with<T>(
        &mut self,
        addr: &str,
        f: impl FnOnce(&mut Session) -> Result<T, ClientError>,
    ) -> Result<T, ClientError> {
        if !self.open.contains_key(addr) {
            let s = Session::connect_with(addr, self.lors.timeout_ms, self.lors.traffic.clone())?;
            self.open.insert(addr.to_string(), s);
        }
        let session = self.open.get_mut(addr).expect("inserted above");
        let out = f(session);
        if matches!(
            out,
            Err(ClientError::Timeout | ClientError::ConnectionLost(_) | ClientError::Malformed(_))
        ) {
            self.open.remove(addr);
        }
        out
    }
}

/// Runs `job(worker_sessions, item)` for items `0..n` on up to `p` threads.
fn parallel<T: Send>(
    lors: &Lors,
    n: usize,
    p: usize,
    job: impl Fn(&mut Sessions<'_>, usize) -> T + Sync,
) -> Vec<T> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    thread::scope(|scope| {
        for _ in 0..p.clamp(1, n.max(1)) {
            scope.spawn(|| {
                let mut sessions = Sessions::new(lors);
                loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= n {
                        break;
                    }
                    let r = job(&mut sessions, i);
                    results.lock()[i] = Some(r);
                }
            });
        }
    });
    results
        .into_inner()
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

fn dedup_depots(depots: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    depots
        .iter()
        .filter(|d| seen.insert(d.as_str()))
        .cloned()
        .collect()
}

impl Lors {
    pub fn new(timeout_ms: u64) -> Self {
        Lors {
            timeout_ms,
            traffic: Arc::default(),
        }
    }

    /// Payload bytes this runtime has moved over its own client sessions.
    pub fn traffic(&self) -> &Arc<Traffic> {
        &self.traffic
    }

    /// Splits `data` into `chunk_size` extents and stores each on
    /// `replicas` distinct depots. Extent `i` starts its search at depot
    /// `i mod |depots|` and walks the list in order, skipping depots that
    /// refuse.
    pub fn upload(
        &self,
        data: &[u8],
        depots: &[String],
        opts: &UploadOptions,
    ) -> Result<ExNode, LorsError> {
        let depots = dedup_depots(depots);
        if opts.chunk_size == 0 {
            return Err(LorsError::InvalidArgument("chunk_size must be at least 1".into()));
        }
        if opts.replicas == 0 || opts.replicas > depots.len() {
            return Err(LorsError::InvalidArgument(format!(
                "replication {} needs between 1 and {} depots",
                opts.replicas,
                depots.len()
            )));
        }
        let total = data.len() as u64;
        let n = total.div_ceil(opts.chunk_size) as usize;
        let placed = parallel(self, n, opts.parallelism, |sessions, i| {
            let offset = i as u64 * opts.chunk_size;
            let end = (offset + opts.chunk_size).min(total);
            let chunk = &data[offset as usize..end as usize];
            self.place_chunk(sessions, &depots, i, offset, chunk, opts)
        });

        let mut extents = Vec::with_capacity(n);
        let mut failure = None;
        for r in placed {
            match r {
                Ok(e) => extents.push(e),
                Err(e) => {
                    failure.get_or_insert(e);
                }
            }
        }
        if let Some(err) = failure {
            self.release_all(&extents);
            return Err(err);
        }
        let mut x = ExNode::new(total, extents);
        let created = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        x.metadata.insert("created-at".into(), created.to_string());
        Ok(x)
    }

    fn place_chunk(
        &self,
        sessions: &mut Sessions<'_>,
        depots: &[String],
        index: usize,
        offset: u64,
        chunk: &[u8],
        opts: &UploadOptions,
    ) -> Result<Extent, LorsError> {
        let mut replicas = Vec::with_capacity(opts.replicas);
        let mut errors = Vec::new();
        for step in 0..depots.len() {
            if replicas.len() == opts.replicas {
                break;
            }
            let addr = &depots[(index + step) % depots.len()];
            let stored = sessions.with(addr, |s| {
                let caps = s.allocate(chunk.len() as u64, opts.lease, opts.hardness)?;
                match s.store(&caps.write, 0, chunk) {
                    Ok(_) => Ok(caps),
                    Err(e) => {
                        let _ = s.release(&caps.manage);
                        Err(e)
                    }
                }
            });
            match stored {
                Ok(caps) => replicas.push(Replica::from_caps(&caps)),
                Err(e) => {
                    log::debug!("chunk {index} refused by {addr}: {e}");
                    errors.push(e);
                }
            }
        }
        if replicas.len() == opts.replicas {
            return Ok(Extent::new(offset, chunk.len() as u64, replicas));
        }
        self.release_all(&[Extent::new(offset, chunk.len() as u64, replicas.clone())]);
        // surface a depot's refusal verbatim when every depot said the same
        let same_remote = errors.first().filter(|first| {
            replicas.is_empty()
                && first.code().is_some()
                && errors.iter().all(|e| e.code() == first.code())
        });
        match same_remote {
            Some(e) => Err(LorsError::Chunk {
                offset,
                error: e.clone(),
            }),
            None => Err(LorsError::InsufficientDepots {
                offset,
                needed: opts.replicas,
                placed: replicas.len(),
            }),
        }
    }

    fn release_all(&self, extents: &[Extent]) {
        let mut sessions = Sessions::new(self);
        for r in extents.iter().flat_map(|e| &e.replicas) {
            if let Some(m) = &r.manage {
                let _ = sessions.with(&r.depot, |s| s.release(m));
            }
        }
    }

    /// Reads the whole file, fetching up to `parallelism` extents at once and
    /// trying replicas in list order. A replica flagged unknown-state counts
    /// as failed.
    pub fn download(&self, x: &ExNode, parallelism: usize) -> Result<Vec<u8>, LorsError> {
        let violations = x.validate();
        if !violations.is_empty() {
            return Err(LorsError::InvalidExNode(violations));
        }
        let fetched = parallel(self, x.extents.len(), parallelism, |sessions, i| {
            fetch_extent(sessions, &x.extents[i])
        });
        let mut out = Vec::with_capacity(x.total_length as usize);
        for (e, r) in x.extents.iter().zip(fetched) {
            match r {
                Ok(bytes) => out.extend_from_slice(&bytes),
                Err(reason) => {
                    return Err(LorsError::ExtentUnavailable {
                        start: e.offset,
                        end: e.end(),
                        reason,
                    })
                }
            }
        }
        Ok(out)
    }

    /// Brings every extent to at least `k` live replicas. Dead replicas are
    /// dropped; new ones are allocated on depots not already holding the
    /// extent and filled by a TRANSFER issued to a surviving replica's depot,
    /// so no payload passes through this client.
    pub fn repair(
        &self,
        x: &ExNode,
        k: usize,
        depots: &[String],
        lease: u64,
    ) -> Result<(ExNode, RepairReport), LorsError> {
        let violations = x.validate();
        if !violations.is_empty() {
            return Err(LorsError::InvalidExNode(violations));
        }
        let depots = dedup_depots(depots);
        let mut sessions = Sessions::new(self);
        let mut report = RepairReport::default();
        let mut out = x.clone();
        for (index, extent) in out.extents.iter_mut().enumerate() {
            let live: Vec<Replica> = extent
                .replicas
                .iter()
                .filter(|r| replica_alive(&mut sessions, r, extent.length))
                .cloned()
                .collect();
            if live.is_empty() {
                return Err(LorsError::ExtentUnavailable {
                    start: extent.offset,
                    end: extent.end(),
                    reason: "no live replica to copy from".into(),
                });
            }
            report.dropped += extent.replicas.len() - live.len();
            if live.len() != extent.replicas.len() {
                extent.replicas = live;
            }
            let holders: BTreeSet<String> =
                extent.replicas.iter().map(|r| r.depot.clone()).collect();
            let mut candidates = (0..depots.len())
                .map(|step| &depots[(index + step) % depots.len()])
                .filter(|d| !holders.contains(*d));
            while extent.replicas.len() < k {
                let Some(target) = candidates.next() else {
                    report.shortfalls.push((
                        extent.offset,
                        format!("{} of {k} replicas, no further depots", extent.replicas.len()),
                    ));
                    break;
                };
                match copy_replica(&mut sessions, extent, target, lease) {
                    Ok(r) => {
                        extent.replicas.push(r);
                        report.transfers += 1;
                    }
                    Err(e) => log::info!("repair of [{},{}) onto {target} failed: {e}", extent.offset, extent.end()),
                }
            }
        }
        Ok((out, report))
    }
}

fn fetch_extent(sessions: &mut Sessions<'_>, e: &Extent) -> Result<Vec<u8>, String> {
    let mut reasons = Vec::new();
    for r in &e.replicas {
        match sessions.with(&r.depot, |s| s.load(&r.read, r.base, e.length)) {
            Ok(l) if !l.unknown_state => return Ok(l.data),
            Ok(_) => reasons.push(format!("{}: unknown state", r.depot)),
            Err(err) => reasons.push(format!("{}: {err}", r.depot)),
        }
    }
    Err(reasons.join("; "))
}

/// A replica is alive when its allocation answers, holds the extent's bytes
/// and is not flagged unknown-state. Uses PROBE when the manage capability is
/// known, otherwise a zero-length LOAD.
fn replica_alive(sessions: &mut Sessions<'_>, r: &Replica, length: u64) -> bool {
    match &r.manage {
        Some(m) => sessions
            .with(&r.depot, |s| s.probe(m))
            .is_ok_and(|p| !p.unknown_state && p.used >= r.base + length),
        None => sessions
            .with(&r.depot, |s| s.load(&r.read, r.base + length, 0))
            .is_ok_and(|l| !l.unknown_state),
    }
}

fn copy_replica(
    sessions: &mut Sessions<'_>,
    extent: &Extent,
    target: &str,
    lease: u64,
) -> Result<Replica, ClientError> {
    let caps = sessions.with(target, |s| s.allocate(extent.length, lease, Hardness::Hard))?;
    let mut last = None;
    for src in &extent.replicas {
        let moved = sessions.with(&src.depot, |s| {
            s.transfer(&src.read, src.base, &caps.write, 0, extent.length)
        });
        match moved {
            Ok(_) => return Ok(Replica::from_caps(&caps)),
            Err(e) => last = Some(e),
        }
    }
    let _ = sessions.with(target, |s| s.release(&caps.manage));
    Err(last.unwrap_or_else(|| ClientError::ConnectionLost("no source replica".into())))
}
