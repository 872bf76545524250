//! Depot-local transform engine: named built-in operations over buffers of
//! one depot, metered against a wall-clock, scratch-memory and I/O budget.
//!
//! A transform that fails for any reason leaves every output allocation
//! flagged unknown-state; a later successful transform or whole-buffer store
//! clears the flag.

use std::collections::BTreeMap;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use sha2::{Digest, Sha256};

use crate::capability::{CapKind, Capability};
use crate::depot::{Access, AllocHandle, Depot};
use crate::error::{DepotError, ErrorCode};

/// Working-buffer granularity for the built-ins; budget checks happen at least
/// once per chunk.
pub const CHUNK: usize = 64 * 1024;

pub const BUILTIN_NAMES: [&str; 7] = [
    "checksum-crc32",
    "checksum-sha256",
    "xor",
    "copy-range",
    "fill",
    "rle-compress",
    "rle-decompress",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResourceBudget {
    pub max_wall_ms: u64,
    pub max_scratch_bytes: u64,
    pub max_io_bytes: u64,
}

impl ResourceBudget {
    pub fn validate(&self) -> Result<(), NfuError> {
        if self.max_wall_ms == 0 || self.max_scratch_bytes == 0 || self.max_io_bytes == 0 {
            return Err(NfuError::InvalidArgument(
                "budget dimensions must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformSpec {
    pub op_name: String,
    pub inputs: Vec<Capability>,
    pub outputs: Vec<Capability>,
    pub params: BTreeMap<String, String>,
    pub budget: ResourceBudget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformStatus {
    Ok,
    BudgetExceeded,
    OpFault,
}

impl TransformStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TransformStatus::Ok => "Ok",
            TransformStatus::BudgetExceeded => "BudgetExceeded",
            TransformStatus::OpFault => "OpFault",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Ok" => Some(TransformStatus::Ok),
            "BudgetExceeded" => Some(TransformStatus::BudgetExceeded),
            "OpFault" => Some(TransformStatus::OpFault),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OutputsState {
    Defined,
    Unknown,
}

impl OutputsState {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputsState::Defined => "defined",
            OutputsState::Unknown => "unknown",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "defined" => Some(OutputsState::Defined),
            "unknown" => Some(OutputsState::Unknown),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformResult {
    pub status: TransformStatus,
    pub io_bytes_used: u64,
    pub wall_ms_used: u64,
    pub scratch_bytes_used: u64,
    pub outputs_state: OutputsState,
    /// Highest byte written into each output, in output order.
    pub output_lengths: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NfuError {
    #[error("unknown operation {0:?}")]
    UnknownOperation(String),
    #[error("operation {0:?} is already registered")]
    DuplicateName(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Depot(#[from] DepotError),
}

impl NfuError {
    pub fn code(&self) -> ErrorCode {
        match self {
            NfuError::UnknownOperation(_) => ErrorCode::UnknownOperation,
            NfuError::DuplicateName(_) => ErrorCode::DuplicateName,
            NfuError::InvalidArgument(_) => ErrorCode::InvalidArgument,
            NfuError::Depot(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetKind {
    Wall,
    Scratch,
    Io,
}

/// Why a built-in stopped early.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpFailure {
    Budget(BudgetKind),
    Fault(String),
}

impl OpFailure {
    pub fn fault(msg: impl fmt::Display) -> Self {
        OpFailure::Fault(msg.to_string())
    }
}

pub type OpResult<T = ()> = Result<T, OpFailure>;

/// A registered operation. Implementations must touch buffers only through
/// the context so that every byte and millisecond is metered.
pub trait Builtin: Send + Sync {
    fn run(&self, ctx: &mut ExecContext<'_>) -> OpResult;
}

impl<F> Builtin for F
where
    F: Fn(&mut ExecContext<'_>) -> OpResult + Send + Sync,
{
    fn run(&self, ctx: &mut ExecContext<'_>) -> OpResult {
        self(ctx)
    }
}

/// Metered view of the buffers bound to one transform.
pub struct ExecContext<'a> {
    depot: &'a Depot,
    inputs: Vec<AllocHandle>,
    outputs: Vec<AllocHandle>,
    params: &'a BTreeMap<String, String>,
    budget: ResourceBudget,
    started: Instant,
    io_used: u64,
    scratch_live: u64,
    scratch_peak: u64,
    output_lengths: Vec<u64>,
}

impl<'a> ExecContext<'a> {
    pub fn input_count(&self) -> usize {
        self.inputs.len()
    }

    pub fn output_count(&self) -> usize {
        self.outputs.len()
    }

    pub fn param(&self, key: &str) -> Option<&str> {
        self.params.get(key).map(String::as_str)
    }

    pub fn param_u64(&self, key: &str, default: u64) -> OpResult<u64> {
        match self.param(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| OpFailure::fault(format!("param {key}={v:?} is not an integer"))),
        }
    }

    fn require_arity(&self, inputs: usize, outputs: usize) -> OpResult {
        if self.inputs.len() != inputs || self.outputs.len() != outputs {
            return Err(OpFailure::fault(format!(
                "expects {inputs} input(s) and {outputs} output(s), got {} and {}",
                self.inputs.len(),
                self.outputs.len()
            )));
        }
        Ok(())
    }

    /// Bytes currently stored in input `i` (its high-watermark).
    pub fn input_len(&self, i: usize) -> u64 {
        self.inputs[i].data.lock().len() as u64
    }

    pub fn output_capacity(&self, j: usize) -> u64 {
        self.outputs[j].capacity
    }

    pub fn elapsed_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    pub fn check_time(&self) -> OpResult {
        if self.elapsed_ms() > self.budget.max_wall_ms {
            return Err(OpFailure::Budget(BudgetKind::Wall));
        }
        Ok(())
    }

    fn charge_io(&mut self, n: u64) -> OpResult {
        self.check_time()?;
        if self.io_used + n > self.budget.max_io_bytes {
            return Err(OpFailure::Budget(BudgetKind::Io));
        }
        self.io_used += n;
        Ok(())
    }

    /// Allocates a zeroed working buffer charged against the scratch budget.
    pub fn scratch(&mut self, n: usize) -> OpResult<Vec<u8>> {
        let n64 = n as u64;
        if self.scratch_live + n64 > self.budget.max_scratch_bytes {
            return Err(OpFailure::Budget(BudgetKind::Scratch));
        }
        self.scratch_live += n64;
        self.scratch_peak = self.scratch_peak.max(self.scratch_live);
        Ok(vec![0; n])
    }

    /// Returns `bytes` of scratch previously obtained from [`Self::scratch`].
    pub fn release_scratch(&mut self, bytes: usize) {
        self.scratch_live = self.scratch_live.saturating_sub(bytes as u64);
    }

    /// Fills `buf` from input `i` starting at `offset`.
    pub fn read(&mut self, i: usize, offset: u64, buf: &mut [u8]) -> OpResult {
        self.charge_io(buf.len() as u64)?;
        let id = self.inputs[i].id;
        self.depot.check_live(id).map_err(OpFailure::fault)?;
        let data = self.inputs[i].data.lock();
        let start = offset as usize;
        let end = start
            .checked_add(buf.len())
            .filter(|end| *end <= data.len())
            .ok_or_else(|| {
                OpFailure::fault(format!(
                    "read [{offset}, +{}) beyond input {i} length {}",
                    buf.len(),
                    data.len()
                ))
            })?;
        buf.copy_from_slice(&data[start..end]);
        Ok(())
    }

    pub fn write(&mut self, j: usize, offset: u64, bytes: &[u8]) -> OpResult {
        self.charge_io(bytes.len() as u64)?;
        let id = self.outputs[j].id;
        let data = self
            .depot
            .prepare_write(Access::Id(id), offset, bytes.len() as u64)
            .map_err(OpFailure::fault)?;
        let start = offset as usize;
        data.lock()[start..start + bytes.len()].copy_from_slice(bytes);
        let end = offset + bytes.len() as u64;
        self.output_lengths[j] = self.output_lengths[j].max(end);
        Ok(())
    }
}

/// Registry of named operations plus the executor.
pub struct NfuEngine {
    registry: RwLock<BTreeMap<String, Arc<dyn Builtin>>>,
}

impl fmt::Debug for NfuEngine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NfuEngine")
            .field("operations", &self.names())
            .finish()
    }
}

impl Default for NfuEngine {
    fn default() -> Self {
        Self::new()
    }
}

impl NfuEngine {
    /// An engine with the shipped built-ins registered.
    pub fn new() -> Self {
        let engine = NfuEngine::empty();
        let builtins: [(&str, Arc<dyn Builtin>); 7] = [
            ("checksum-crc32", Arc::new(op_crc32)),
            ("checksum-sha256", Arc::new(op_sha256)),
            ("xor", Arc::new(op_xor)),
            ("copy-range", Arc::new(op_copy_range)),
            ("fill", Arc::new(op_fill)),
            ("rle-compress", Arc::new(op_rle_compress)),
            ("rle-decompress", Arc::new(op_rle_decompress)),
        ];
        for (name, op) in builtins {
            engine
                .register_builtin(name, op)
                .expect("built-in names are distinct");
        }
        engine
    }

    pub fn empty() -> Self {
        NfuEngine {
            registry: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn register_builtin(&self, name: &str, op: Arc<dyn Builtin>) -> Result<(), NfuError> {
        let mut registry = self.registry.write();
        if registry.contains_key(name) {
            return Err(NfuError::DuplicateName(name.to_string()));
        }
        registry.insert(name.to_string(), op);
        Ok(())
    }

    pub fn names(&self) -> Vec<String> {
        self.registry.read().keys().cloned().collect()
    }

    pub fn execute(&self, depot: &Depot, spec: &TransformSpec) -> Result<TransformResult, NfuError> {
        spec.budget.validate()?;
        let op = self
            .registry
            .read()
            .get(&spec.op_name)
            .cloned()
            .ok_or_else(|| NfuError::UnknownOperation(spec.op_name.clone()))?;

        let local = depot.addr();
        for cap in spec.inputs.iter().chain(&spec.outputs) {
            if cap.depot_addr != local {
                return Err(DepotError::NotLocal(cap.depot_addr.clone()).into());
            }
        }
        let inputs = spec
            .inputs
            .iter()
            .map(|c| depot.resolve(c, CapKind::Read))
            .collect::<Result<Vec<_>, _>>()?;
        let outputs = spec
            .outputs
            .iter()
            .map(|c| depot.resolve(c, CapKind::Write))
            .collect::<Result<Vec<_>, _>>()?;

        // transforms sharing an output serialize; lock in id order
        let mut lock_order: Vec<(u64, Arc<Mutex<()>>)> = outputs
            .iter()
            .map(|h: &AllocHandle| (h.id, Arc::clone(&h.exec_lock)))
            .collect();
        lock_order.sort_by_key(|(id, _)| *id);
        lock_order.dedup_by_key(|(id, _)| *id);
        let _guards: Vec<_> = lock_order.iter().map(|(_, l)| l.lock()).collect();

        let mut ctx = ExecContext {
            depot,
            output_lengths: vec![0; outputs.len()],
            inputs,
            outputs,
            params: &spec.params,
            budget: spec.budget,
            started: Instant::now(),
            io_used: 0,
            scratch_live: 0,
            scratch_peak: 0,
        };
        let outcome = catch_unwind(AssertUnwindSafe(|| op.run(&mut ctx)))
            .unwrap_or_else(|_| Err(OpFailure::fault("operation panicked")));
        let wall_ms_used = ctx.elapsed_ms();

        let status = match &outcome {
            Ok(()) => TransformStatus::Ok,
            Err(OpFailure::Budget(_)) => TransformStatus::BudgetExceeded,
            Err(OpFailure::Fault(msg)) => {
                log::debug!("transform {} faulted: {msg}", spec.op_name);
                TransformStatus::OpFault
            }
        };
        let outputs_state = if status == TransformStatus::Ok {
            OutputsState::Defined
        } else {
            OutputsState::Unknown
        };
        for h in &ctx.outputs {
            match outputs_state {
                OutputsState::Defined => depot.clear_poison(h.id),
                OutputsState::Unknown => depot.poison(h.id),
            }
        }
        Ok(TransformResult {
            status,
            io_bytes_used: ctx.io_used,
            wall_ms_used,
            scratch_bytes_used: ctx.scratch_peak,
            outputs_state,
            output_lengths: ctx.output_lengths,
        })
    }
}

const fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}

static CRC32_TABLE: [u32; 256] = crc32_table();

/// Incremental CRC-32 (IEEE 802.3, reflected, init and xorout 0xFFFFFFFF).
#[derive(Debug, Clone, Copy)]
pub struct Crc32(u32);

impl Default for Crc32 {
    fn default() -> Self {
        Crc32(0xFFFF_FFFF)
    }
}

impl Crc32 {
    pub fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = CRC32_TABLE[((self.0 ^ b as u32) & 0xFF) as usize] ^ (self.0 >> 8);
        }
    }

    pub fn finish(self) -> u32 {
        self.0 ^ 0xFFFF_FFFF
    }
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let mut c = Crc32::default();
    c.update(bytes);
    c.finish()
}

/// Encodes `data` as (count, value) pairs with 1 ≤ count ≤ 255.
pub fn rle_encode(data: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut enc = RleEncoder::default();
    enc.push(data, &mut out);
    enc.finish(&mut out);
    out
}

pub fn rle_decode(encoded: &[u8]) -> Result<Vec<u8>, String> {
    if encoded.len() % 2 != 0 {
        return Err("odd-length run-length stream".into());
    }
    let mut out = Vec::new();
    for pair in encoded.chunks_exact(2) {
        if pair[0] == 0 {
            return Err("zero-length run".into());
        }
        out.extend(std::iter::repeat_n(pair[1], pair[0] as usize));
    }
    Ok(out)
}

#[derive(Default)]
struct RleEncoder {
    run: Option<(u8, u8)>,
}

impl RleEncoder {
    fn push(&mut self, data: &[u8], out: &mut Vec<u8>) {
        for &b in data {
            self.run = match self.run {
                Some((v, n)) if v == b && n < u8::MAX => Some((v, n + 1)),
                Some((v, n)) => {
                    out.extend([n, v]);
                    Some((b, 1))
                }
                None => Some((b, 1)),
            };
        }
    }

    fn finish(&mut self, out: &mut Vec<u8>) {
        if let Some((v, n)) = self.run.take() {
            out.extend([n, v]);
        }
    }
}

/// Input range `[offset, offset + length)` of input 0, from the `offset` and
/// `length` params.
fn input_range(ctx: &ExecContext<'_>) -> OpResult<(u64, u64)> {
    let len = ctx.input_len(0);
    let offset = ctx.param_u64("offset", 0)?;
    let length = ctx.param_u64("length", len.saturating_sub(offset))?;
    if offset.checked_add(length).is_none_or(|end| end > len) {
        return Err(OpFailure::fault(format!(
            "range [{offset}, +{length}) beyond input length {len}"
        )));
    }
    Ok((offset, length))
}

fn stream_input(
    ctx: &mut ExecContext<'_>,
    offset: u64,
    length: u64,
    mut sink: impl FnMut(&[u8]),
) -> OpResult {
    let mut buf = ctx.scratch(CHUNK.min(length as usize))?;
    let mut done = 0u64;
    while done < length {
        let n = (length - done).min(CHUNK as u64) as usize;
        ctx.read(0, offset + done, &mut buf[..n])?;
        sink(&buf[..n]);
        done += n as u64;
    }
    ctx.release_scratch(buf.len());
    Ok(())
}

fn op_crc32(ctx: &mut ExecContext<'_>) -> OpResult {
    ctx.require_arity(1, 1)?;
    let (offset, length) = input_range(ctx)?;
    let mut crc = Crc32::default();
    stream_input(ctx, offset, length, |chunk| crc.update(chunk))?;
    let out_offset = ctx.param_u64("out_offset", 0)?;
    ctx.write(0, out_offset, &crc.finish().to_be_bytes())
}

fn op_sha256(ctx: &mut ExecContext<'_>) -> OpResult {
    ctx.require_arity(1, 1)?;
    let (offset, length) = input_range(ctx)?;
    let mut hasher = Sha256::new();
    stream_input(ctx, offset, length, |chunk| hasher.update(chunk))?;
    let out_offset = ctx.param_u64("out_offset", 0)?;
    let digest = hasher.finalize();
    ctx.write(0, out_offset, digest.as_slice())
}

/// XOR of all inputs (equal lengths) into output 0.
fn op_xor(ctx: &mut ExecContext<'_>) -> OpResult {
    if ctx.input_count() < 2 || ctx.output_count() != 1 {
        return Err(OpFailure::fault("xor expects at least 2 inputs and 1 output"));
    }
    let len = ctx.input_len(0);
    for i in 1..ctx.input_count() {
        if ctx.input_len(i) != len {
            return Err(OpFailure::fault("xor inputs differ in length"));
        }
    }
    let mut acc = ctx.scratch(CHUNK.min(len as usize))?;
    let mut tmp = ctx.scratch(CHUNK.min(len as usize))?;
    let mut done = 0u64;
    while done < len {
        let n = (len - done).min(CHUNK as u64) as usize;
        ctx.read(0, done, &mut acc[..n])?;
        for i in 1..ctx.input_count() {
            ctx.read(i, done, &mut tmp[..n])?;
            acc[..n].iter_mut().zip(&tmp[..n]).for_each(|(a, b)| *a ^= b);
        }
        ctx.write(0, done, &acc[..n])?;
        done += n as u64;
    }
    ctx.release_scratch(acc.len());
    ctx.release_scratch(tmp.len());
    Ok(())
}

fn op_copy_range(ctx: &mut ExecContext<'_>) -> OpResult {
    ctx.require_arity(1, 1)?;
    let src = ctx.param_u64("src_offset", 0)?;
    let len = ctx.input_len(0);
    let length = ctx.param_u64("length", len.saturating_sub(src))?;
    let dst = ctx.param_u64("dst_offset", 0)?;
    if src.checked_add(length).is_none_or(|end| end > len) {
        return Err(OpFailure::fault("source range beyond input length"));
    }
    let mut buf = ctx.scratch(CHUNK.min(length as usize))?;
    let mut done = 0u64;
    while done < length {
        let n = (length - done).min(CHUNK as u64) as usize;
        ctx.read(0, src + done, &mut buf[..n])?;
        ctx.write(0, dst + done, &buf[..n])?;
        done += n as u64;
    }
    ctx.release_scratch(buf.len());
    Ok(())
}

fn op_fill(ctx: &mut ExecContext<'_>) -> OpResult {
    ctx.require_arity(0, 1)?;
    let value = ctx.param_u64("value", 0)?;
    let value = u8::try_from(value).map_err(|_| OpFailure::fault("fill value must be 0..=255"))?;
    let offset = ctx.param_u64("offset", 0)?;
    let cap = ctx.output_capacity(0);
    let length = ctx.param_u64("length", cap.saturating_sub(offset))?;
    let mut buf = ctx.scratch(CHUNK.min(length as usize))?;
    buf.fill(value);
    let mut done = 0u64;
    while done < length {
        let n = (length - done).min(CHUNK as u64) as usize;
        ctx.write(0, offset + done, &buf[..n])?;
        done += n as u64;
    }
    ctx.release_scratch(buf.len());
    Ok(())
}

fn op_rle_compress(ctx: &mut ExecContext<'_>) -> OpResult {
    ctx.require_arity(1, 1)?;
    let (offset, length) = input_range(ctx)?;
    let mut input = ctx.scratch(CHUNK.min(length as usize))?;
    // worst case doubles
    let mut pending = ctx.scratch(2 * CHUNK + 2)?;
    pending.clear();
    let mut enc = RleEncoder::default();
    let mut written = 0u64;
    let mut done = 0u64;
    while done < length {
        let n = (length - done).min(CHUNK as u64) as usize;
        ctx.read(0, offset + done, &mut input[..n])?;
        enc.push(&input[..n], &mut pending);
        ctx.write(0, written, &pending)?;
        written += pending.len() as u64;
        pending.clear();
        done += n as u64;
    }
    enc.finish(&mut pending);
    ctx.write(0, written, &pending)?;
    ctx.release_scratch(input.len());
    ctx.release_scratch(2 * CHUNK + 2);
    Ok(())
}

fn op_rle_decompress(ctx: &mut ExecContext<'_>) -> OpResult {
    ctx.require_arity(1, 1)?;
    let (offset, length) = input_range(ctx)?;
    if length % 2 != 0 {
        return Err(OpFailure::fault("odd-length run-length stream"));
    }
    // even-sized chunks keep pairs intact; each byte pair expands up to 255x
    let chunk = 4096.min(length as usize);
    let mut input = ctx.scratch(chunk)?;
    let mut pending = ctx.scratch(chunk / 2 * 255)?;
    pending.clear();
    let mut written = 0u64;
    let mut done = 0u64;
    while done < length {
        let n = (length - done).min(chunk as u64) as usize;
        ctx.read(0, offset + done, &mut input[..n])?;
        for pair in input[..n].chunks_exact(2) {
            if pair[0] == 0 {
                return Err(OpFailure::fault("zero-length run"));
            }
            pending.extend(std::iter::repeat_n(pair[1], pair[0] as usize));
        }
        ctx.write(0, written, &pending)?;
        written += pending.len() as u64;
        pending.clear();
        done += n as u64;
    }
    ctx.release_scratch(input.len());
    ctx.release_scratch(chunk / 2 * 255);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capability::CapSet;
    use crate::depot::{DepotConfig, Hardness, MIB};
    use proptest::prelude::*;
    use rand::RngCore;

    fn generous() -> ResourceBudget {
        ResourceBudget {
            max_wall_ms: 10_000,
            max_scratch_bytes: 16 * MIB,
            max_io_bytes: 256 * MIB,
        }
    }

    fn depot() -> Depot {
        Depot::new(DepotConfig {
            total_capacity: 256 * MIB,
            ..DepotConfig::default()
        })
    }

    fn buffer(d: &Depot, cap: u64, contents: &[u8]) -> CapSet {
        let caps = d.allocate(cap, 600, Hardness::Hard).unwrap();
        if !contents.is_empty() {
            d.store(&caps.write, 0, contents).unwrap();
        }
        caps
    }

    fn spec(op: &str, inputs: &[&CapSet], outputs: &[&CapSet], params: &[(&str, &str)]) -> TransformSpec {
        TransformSpec {
            op_name: op.into(),
            inputs: inputs.iter().map(|c| c.read.clone()).collect(),
            outputs: outputs.iter().map(|c| c.write.clone()).collect(),
            params: params
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            budget: generous(),
        }
    }

    /// Bitwise CRC-32, independent of the table-driven path.
    fn crc32_bitwise(data: &[u8]) -> u32 {
        let mut crc = !0u32;
        for &b in data {
            crc ^= b as u32;
            for _ in 0..8 {
                let mask = (crc & 1).wrapping_neg();
                crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
            }
        }
        !crc
    }

    #[test]
    fn registry_contents_and_duplicates() {
        let engine = NfuEngine::new();
        let mut expected: Vec<String> = BUILTIN_NAMES.iter().map(|s| s.to_string()).collect();
        expected.sort();
        assert_eq!(engine.names(), expected);
        assert_eq!(
            engine.register_builtin("xor", Arc::new(op_xor)),
            Err(NfuError::DuplicateName("xor".into()))
        );
    }

    #[test]
    fn unknown_operation() {
        let d = depot();
        let out = buffer(&d, 4, &[]);
        let err = NfuEngine::new()
            .execute(&d, &spec("nope", &[], &[&out], &[]))
            .unwrap_err();
        assert_eq!(err.code(), ErrorCode::UnknownOperation);
    }

    #[test]
    fn xor_two_buffers() {
        let d = depot();
        let a = buffer(&d, 2, &[0xFF, 0x00]);
        let b = buffer(&d, 2, &[0x0F, 0x0F]);
        let c = buffer(&d, 2, &[]);
        let r = NfuEngine::new()
            .execute(&d, &spec("xor", &[&a, &b], &[&c], &[]))
            .unwrap();
        assert_eq!(r.status, TransformStatus::Ok);
        assert_eq!(d.load(&c.read, 0, 2).unwrap().data, [0xF0, 0x0F]);
        assert_eq!(r.io_bytes_used, 6);
    }

    #[test]
    fn crc32_check_value() {
        assert_eq!(crc32_bitwise(b"123456789"), 0xCBF4_3926);
        let d = depot();
        let input = buffer(&d, 9, b"123456789");
        let out = buffer(&d, 4, &[]);
        let r = NfuEngine::new()
            .execute(&d, &spec("checksum-crc32", &[&input], &[&out], &[]))
            .unwrap();
        assert_eq!(r.status, TransformStatus::Ok);
        assert_eq!(d.load(&out.read, 0, 4).unwrap().data, 0xCBF4_3926u32.to_be_bytes());
    }

    #[test]
    fn sha256_matches_digest() {
        let d = depot();
        let mut payload = vec![0u8; 200_000];
        rand::thread_rng().fill_bytes(&mut payload);
        let input = buffer(&d, payload.len() as u64, &payload);
        let out = buffer(&d, 32, &[]);
        NfuEngine::new()
            .execute(&d, &spec("checksum-sha256", &[&input], &[&out], &[]))
            .unwrap();
        let expected = Sha256::digest(&payload);
        assert_eq!(d.load(&out.read, 0, 32).unwrap().data, expected.as_slice());
    }

    #[test]
    fn rle_round_trip_through_depot() {
        let d = depot();
        let mut payload = vec![0u8; 64 * 1024];
        let mut rng = rand::thread_rng();
        rng.fill_bytes(&mut payload);
        // long runs too
        payload[1000..5000].fill(7);
        let input = buffer(&d, payload.len() as u64, &payload);
        let packed = buffer(&d, 2 * payload.len() as u64, &[]);
        let unpacked = buffer(&d, payload.len() as u64, &[]);
        let engine = NfuEngine::new();
        let r = engine
            .execute(&d, &spec("rle-compress", &[&input], &[&packed], &[]))
            .unwrap();
        assert_eq!(r.status, TransformStatus::Ok);
        let packed_len = r.output_lengths[0].to_string();
        let r = engine
            .execute(
                &d,
                &spec("rle-decompress", &[&packed], &[&unpacked], &[("length", &packed_len)]),
            )
            .unwrap();
        assert_eq!(r.status, TransformStatus::Ok);
        assert_eq!(r.output_lengths[0], payload.len() as u64);
        assert_eq!(d.load(&unpacked.read, 0, payload.len() as u64).unwrap().data, payload);
    }

    #[test]
    fn copy_range_and_fill() {
        let d = depot();
        let src = buffer(&d, 10, b"0123456789");
        let dst = buffer(&d, 10, &[]);
        let engine = NfuEngine::new();
        engine
            .execute(&d, &spec("fill", &[], &[&dst], &[("value", "46")]))
            .unwrap();
        engine
            .execute(
                &d,
                &spec(
                    "copy-range",
                    &[&src],
                    &[&dst],
                    &[("src_offset", "2"), ("length", "3"), ("dst_offset", "5")],
                ),
            )
            .unwrap();
        assert_eq!(d.load(&dst.read, 0, 10).unwrap().data, b".....234..");
    }

    #[test]
    fn io_budget_exceeded_poisons_output() {
        let d = depot();
        let payload = vec![9u8; 4096];
        let src = buffer(&d, 4096, &payload);
        let dst = buffer(&d, 4096, &[]);
        let mut s = spec("copy-range", &[&src], &[&dst], &[]);
        s.budget.max_io_bytes = 1000;
        let r = NfuEngine::new().execute(&d, &s).unwrap();
        assert_eq!(r.status, TransformStatus::BudgetExceeded);
        assert_eq!(r.outputs_state, OutputsState::Unknown);
        assert!(r.io_bytes_used <= 1000);
        let p = d.probe(&dst.manage).unwrap();
        assert!(p.unknown_state);
        // a successful transform clears the flag
        let r = NfuEngine::new()
            .execute(&d, &spec("copy-range", &[&src], &[&dst], &[]))
            .unwrap();
        assert_eq!(r.outputs_state, OutputsState::Defined);
        assert!(!d.load(&dst.read, 0, 1).unwrap().unknown_state);
    }

    #[test]
    fn scratch_budget_enforced() {
        let d = depot();
        let src = buffer(&d, 4096, &[1; 4096]);
        let dst = buffer(&d, 4096, &[]);
        let mut s = spec("copy-range", &[&src], &[&dst], &[]);
        s.budget.max_scratch_bytes = 100;
        let r = NfuEngine::new().execute(&d, &s).unwrap();
        assert_eq!(r.status, TransformStatus::BudgetExceeded);
        assert!(r.scratch_bytes_used <= 100);
    }

    #[test]
    fn faults_are_reported_not_thrown() {
        let d = depot();
        let a = buffer(&d, 2, &[1, 2]);
        let b = buffer(&d, 3, &[1, 2, 3]);
        let c = buffer(&d, 2, &[]);
        let r = NfuEngine::new()
            .execute(&d, &spec("xor", &[&a, &b], &[&c], &[]))
            .unwrap();
        assert_eq!(r.status, TransformStatus::OpFault);
        assert!(d.probe(&c.manage).unwrap().unknown_state);
        // output overflow
        let big = buffer(&d, 8, &[5; 8]);
        let small = buffer(&d, 4, &[]);
        let r = NfuEngine::new()
            .execute(&d, &spec("copy-range", &[&big], &[&small], &[]))
            .unwrap();
        assert_eq!(r.status, TransformStatus::OpFault);
    }

    #[test]
    fn wall_budget_with_registered_op() {
        let d = depot();
        let out = buffer(&d, 1, &[]);
        let engine = NfuEngine::new();
        engine
            .register_builtin(
                "spin",
                Arc::new(|ctx: &mut ExecContext<'_>| loop {
                    ctx.check_time()?;
                    std::thread::sleep(std::time::Duration::from_millis(1));
                }),
            )
            .unwrap();
        let mut s = spec("spin", &[], &[&out], &[]);
        s.budget.max_wall_ms = 30;
        let r = engine.execute(&d, &s).unwrap();
        assert_eq!(r.status, TransformStatus::BudgetExceeded);
        assert!(r.wall_ms_used <= 30 + 50);
    }

    #[test]
    fn capability_checks() {
        let d = depot();
        let a = buffer(&d, 2, &[1, 2]);
        let out = buffer(&d, 4, &[]);
        let engine = NfuEngine::new();
        let mut s = spec("checksum-crc32", &[&a], &[&out], &[]);
        s.inputs[0] = a.write.clone();
        assert_eq!(engine.execute(&d, &s).unwrap_err().code(), ErrorCode::BadCapability);
        let mut s = spec("checksum-crc32", &[&a], &[&out], &[]);
        s.outputs[0].depot_addr = "elsewhere:1".into();
        assert_eq!(engine.execute(&d, &s).unwrap_err().code(), ErrorCode::NotLocal);
        let mut s = spec("checksum-crc32", &[&a], &[&out], &[]);
        s.budget.max_io_bytes = 0;
        assert_eq!(engine.execute(&d, &s).unwrap_err().code(), ErrorCode::InvalidArgument);
    }

    #[test]
    fn deterministic_outputs() {
        let d = depot();
        let mut payload = vec![0u8; 300_000];
        rand::thread_rng().fill_bytes(&mut payload);
        let input = buffer(&d, payload.len() as u64, &payload);
        let engine = NfuEngine::new();
        for op in ["checksum-sha256", "rle-compress"] {
            let mut outs = Vec::new();
            for _ in 0..2 {
                let out = buffer(&d, 2 * payload.len() as u64, &[]);
                let r = engine.execute(&d, &spec(op, &[&input], &[&out], &[])).unwrap();
                outs.push(d.load(&out.read, 0, r.output_lengths[0]).unwrap().data);
            }
            assert_eq!(outs[0], outs[1]);
        }
    }

    proptest! {
        #[test]
        fn crc_matches_bitwise_oracle(data in proptest::collection::vec(any::<u8>(), 0..2048)) {
            prop_assert_eq!(crc32(&data), crc32_bitwise(&data));
        }

        #[test]
        fn rle_identity(data in proptest::collection::vec(prop_oneof![Just(0u8), Just(1u8), any::<u8>()], 0..2048)) {
            let enc = rle_encode(&data);
            prop_assert!(enc.chunks(2).all(|p| p[0] >= 1));
            prop_assert_eq!(rle_decode(&enc).unwrap(), data);
        }
    }
}
