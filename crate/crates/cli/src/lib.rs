//! Argument parsing and command bodies shared by the `ebp` and `ebp-depot`
//! binaries.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use ebp_core::lodn::LodnError;
use ebp_core::{
    CapKind, Capability, ClientError, ExNode, Hardness, Lors, LorsError, ResourceBudget,
    Scheduler, Session, TransformSpec, TransformStatus, UploadOptions,
};
use serde_json::json;

pub const DEPOTS_ENV: &str = "EBP_DEFAULT_DEPOTS";
pub const DEPOT_CONFIG_ENV: &str = "EBP_DEPOT_CONFIG";
pub const TIMEOUT_MS: u64 = 30_000;

/// How a command failed. Usage problems exit 2, everything else 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    Usage(String),
    Op { name: String, message: String },
}

impl Failure {
    pub fn op(name: impl Into<String>, message: impl fmt::Display) -> Self {
        Failure::Op {
            name: name.into(),
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Op { .. } => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(msg) => write!(f, "usage: {msg}"),
            Failure::Op { name, message } => write!(f, "{name}: {message}"),
        }
    }
}

impl From<LorsError> for Failure {
    fn from(e: LorsError) -> Self {
        Failure::op(e.name(), e)
    }
}

impl From<ClientError> for Failure {
    fn from(e: ClientError) -> Self {
        Failure::op(e.name(), e)
    }
}

impl From<LodnError> for Failure {
    fn from(e: LodnError) -> Self {
        let name = match &e {
            LodnError::NotManaged(_) => "NotManaged",
            LodnError::ValidationFailed(_) => "ValidationFailed",
            LodnError::InvalidPolicy(_) => "InvalidArgument",
            LodnError::Io(_) => "Io",
        };
        Failure::op(name, e)
    }
}

fn io_failure(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::op("Io", format!("{}: {e}", path.display()))
}

/// Parses a byte count with an optional `KiB`, `MiB` or `GiB` suffix.
pub fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, unit) = match s.find(|c: char| !c.is_ascii_digit()) {
        Some(i) => s.split_at(i),
        None => (s, ""),
    };
    let n: u64 = digits
        .parse()
        .map_err(|_| format!("bad size {s:?}: expected digits with an optional KiB/MiB/GiB suffix"))?;
    let shift = match unit {
        "" | "B" => 0,
        "KiB" => 10,
        "MiB" => 20,
        "GiB" => 30,
        other => return Err(format!("bad size unit {other:?} in {s:?}")),
    };
    n.checked_mul(1 << shift)
        .ok_or_else(|| format!("size {s:?} overflows"))
}

/// Parses `wall=1000,scratch=16MiB,io=64MiB`. All three are required.
pub fn parse_budget(s: &str) -> Result<ResourceBudget, String> {
    let mut wall = None;
    let mut scratch = None;
    let mut io = None;
    for part in s.split(',') {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| format!("budget entry {part:?} is not key=value"))?;
        match k.trim() {
            "wall" => wall = Some(v.trim().parse().map_err(|_| format!("bad wall {v:?}"))?),
            "scratch" => scratch = Some(parse_size(v)?),
            "io" => io = Some(parse_size(v)?),
            other => return Err(format!("unknown budget key {other:?}")),
        }
    }
    match (wall, scratch, io) {
        (Some(max_wall_ms), Some(max_scratch_bytes), Some(max_io_bytes)) => Ok(ResourceBudget {
            max_wall_ms,
            max_scratch_bytes,
            max_io_bytes,
        }),
        _ => Err("budget needs wall, scratch and io".into()),
    }
}

pub fn parse_param(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("param {s:?} is not key=value"))?;
    if k.is_empty() || v.is_empty() {
        return Err(format!("param {s:?} has an empty key or value"));
    }
    Ok((k.to_string(), v.to_string()))
}

pub fn parse_hardness(s: &str) -> Result<Hardness, String> {
    s.parse().map_err(|_| format!("tier must be hard, soft or best-effort, got {s:?}"))
}

/// Depots from `--depots`, else from `EBP_DEFAULT_DEPOTS`.
pub fn depot_list(flag: Option<&str>) -> Result<Vec<String>, Failure> {
    let env = std::env::var(DEPOTS_ENV).ok();
    let raw = flag
        .map(str::to_string)
        .or(env)
        .ok_or_else(|| Failure::Usage(format!("--depots not given and {DEPOTS_ENV} is unset")))?;
    let depots: Vec<String> = raw
        .split(',')
        .map(|d| d.trim().to_string())
        .filter(|d| !d.is_empty())
        .collect();
    if depots.is_empty() {
        return Err(Failure::Usage("empty depot list".into()));
    }
    Ok(depots)
}

pub struct PutArgs<'a> {
    pub file: &'a Path,
    pub depots: Vec<String>,
    pub replicas: usize,
    pub chunk: u64,
    pub lease: u64,
    pub hardness: Hardness,
    pub parallel: usize,
    pub output: PathBuf,
}

pub fn put(args: PutArgs<'_>, as_json: bool) -> Result<String, Failure> {
    let bytes = std::fs::read(args.file).map_err(|e| io_failure(args.file, e))?;
    let x = Lors::new(TIMEOUT_MS).upload(
        &bytes,
        &args.depots,
        &UploadOptions {
            chunk_size: args.chunk,
            replicas: args.replicas,
            lease: args.lease,
            hardness: args.hardness,
            parallelism: args.parallel,
        },
    )?;
    x.save(&args.output).map_err(|e| io_failure(&args.output, e))?;
    Ok(if as_json {
        json!({
            "exnode": args.output.display().to_string(),
            "length": x.total_length,
            "extents": x.extents.len(),
            "replicas": args.replicas,
        })
        .to_string()
    } else {
        format!(
            "stored {} bytes as {} extent(s) x{} -> {}",
            x.total_length,
            x.extents.len(),
            args.replicas,
            args.output.display()
        )
    })
}

fn load_exnode(path: &Path) -> Result<ExNode, Failure> {
    ExNode::load(path).map_err(|e| Failure::op("ValidationFailed", format!("{}: {e}", path.display())))
}

pub fn get(exnode: &Path, output: &Path, parallel: usize, as_json: bool) -> Result<String, Failure> {
    let x = load_exnode(exnode)?;
    let bytes = Lors::new(TIMEOUT_MS).download(&x, parallel)?;
    std::fs::write(output, &bytes).map_err(|e| io_failure(output, e))?;
    Ok(if as_json {
        json!({"file": output.display().to_string(), "length": bytes.len()}).to_string()
    } else {
        format!("wrote {} bytes to {}", bytes.len(), output.display())
    })
}

/// Probes one manage capability, or every replica of an exNode.
pub fn stat(target: &str, as_json: bool) -> Result<String, Failure> {
    if let Ok(cap) = target.parse::<Capability>() {
        if cap.kind != CapKind::Manage {
            return Err(Failure::Usage(format!(
                "stat needs a manage capability, got a {} capability",
                cap.kind
            )));
        }
        let info = Session::connect(&cap.depot_addr, TIMEOUT_MS)?.probe(&cap)?;
        let state = if info.unknown_state { "unknown" } else { "defined" };
        return Ok(if as_json {
            json!({
                "capacity": info.capacity,
                "used": info.used,
                "expires_in_ms": info.expires_in_ms,
                "hardness": info.hardness.as_str(),
                "state": state,
            })
            .to_string()
        } else {
            format!(
                "capacity {}\nused {}\nexpires_in {:.3} s\nhardness {}\nstate {state}",
                info.capacity,
                info.used,
                info.expires_in_ms as f64 / 1000.0,
                info.hardness
            )
        });
    }
    let path = Path::new(target);
    if !path.exists() {
        return Err(Failure::Usage(format!(
            "{target:?} is neither a capability nor an existing exNode file"
        )));
    }
    let x = load_exnode(path)?;
    let mut rows = Vec::new();
    let mut lines = vec![format!(
        "length {} in {} extent(s)",
        x.total_length,
        x.extents.len()
    )];
    for e in &x.extents {
        for r in &e.replicas {
            let probe = r.manage.as_ref().map(|m| {
                Session::connect(&r.depot, TIMEOUT_MS).and_then(|mut s| s.probe(m))
            });
            let (status, expires) = match &probe {
                None => ("read-only".to_string(), None),
                Some(Ok(p)) if p.unknown_state => ("unknown".into(), Some(p.expires_in_ms)),
                Some(Ok(p)) => ("ok".into(), Some(p.expires_in_ms)),
                Some(Err(err)) => (err.name().to_string(), None),
            };
            lines.push(format!(
                "[{}, {}) {} {status}{}",
                e.offset,
                e.end(),
                r.depot,
                expires.map(|ms| format!(" expires_in {:.3} s", ms as f64 / 1000.0)).unwrap_or_default()
            ));
            rows.push(json!({
                "offset": e.offset,
                "length": e.length,
                "depot": r.depot,
                "status": status,
                "expires_in_ms": expires,
            }));
        }
    }
    Ok(if as_json {
        json!({"length": x.total_length, "replicas": rows}).to_string()
    } else {
        lines.join("\n")
    })
}

/// Renews every replica with a manage capability. Any failure fails the
/// command after all replicas have been tried.
pub fn renew(exnode: &Path, extend: u64, as_json: bool) -> Result<String, Failure> {
    let x = load_exnode(exnode)?;
    let mut renewed = 0;
    let mut first_error: Option<Failure> = None;
    for r in x.extents.iter().flat_map(|e| &e.replicas) {
        let Some(m) = &r.manage else { continue };
        match Session::connect(&r.depot, TIMEOUT_MS).and_then(|mut s| s.renew(m, extend)) {
            Ok(_) => renewed += 1,
            Err(e) => {
                log::warn!("renew on {}: {e}", r.depot);
                first_error.get_or_insert(Failure::op(e.name(), format!("{}: {e}", r.depot)));
            }
        }
    }
    if let Some(e) = first_error {
        return Err(e);
    }
    Ok(if as_json {
        json!({"renewed": renewed}).to_string()
    } else {
        format!("renewed {renewed} replica(s) by {extend} s")
    })
}

pub struct TransformArgs {
    pub depot: String,
    pub op_name: String,
    pub inputs: Vec<Capability>,
    pub outputs: Vec<Capability>,
    pub budget: ResourceBudget,
    pub params: BTreeMap<String, String>,
}

pub fn transform(args: TransformArgs, as_json: bool) -> Result<String, Failure> {
    let mut s = Session::connect(&args.depot, TIMEOUT_MS)?;
    let r = s.transform(&TransformSpec {
        op_name: args.op_name,
        inputs: args.inputs,
        outputs: args.outputs,
        params: args.params,
        budget: args.budget,
    })?;
    let text = if as_json {
        json!({
            "status": r.status.as_str(),
            "io_bytes_used": r.io_bytes_used,
            "wall_ms_used": r.wall_ms_used,
            "scratch_bytes_used": r.scratch_bytes_used,
            "outputs_state": r.outputs_state.as_str(),
            "output_lengths": r.output_lengths,
        })
        .to_string()
    } else {
        format!(
            "status {}\nio {} B\nwall {} ms\nscratch {} B\noutputs {}",
            r.status.as_str(),
            r.io_bytes_used,
            r.wall_ms_used,
            r.scratch_bytes_used,
            r.outputs_state.as_str()
        )
    };
    if r.status != TransformStatus::Ok {
        println!("{text}");
        return Err(Failure::op(r.status.as_str(), "outputs are in unknown state"));
    }
    Ok(text)
}

/// Runs the scheduler over every managed exNode in `dir`, rescanning for new
/// policy files each round. Stops after one round when `once` is set.
pub fn lodn_run(dir: &Path, once: bool, stop: &std::sync::atomic::AtomicBool) -> Result<(), Failure> {
    use std::sync::atomic::Ordering;
    let mut sched = Scheduler::new(Lors::new(TIMEOUT_MS));
    let start = std::time::Instant::now();
    loop {
        for problem in sched.scan_dir(dir)? {
            eprintln!("lodn: {problem}");
        }
        let report = sched.tick(start.elapsed().as_millis() as u64);
        println!(
            "tick: {} managed, {} renewed, {} repaired, {} dropped, {} rewritten, {} failure(s)",
            sched.list().len(),
            report.renewals,
            report.repairs,
            report.dropped,
            report.rewrites,
            report.failures.len()
        );
        for f in &report.failures {
            eprintln!("lodn: {f}");
        }
        if once {
            return Ok(());
        }
        let period = Duration::from_secs(sched.check_period().unwrap_or(10));
        let until = std::time::Instant::now() + period;
        while std::time::Instant::now() < until {
            if stop.load(Ordering::SeqCst) {
                return Ok(());
            }
            std::thread::sleep(Duration::from_millis(100));
        }
    }
}
