//! In-process depot: allocation table, lease clock, capability issuance and
//! hardness-tiered admission with overbooking.
//!
//! Physical accounting (`bytes_in_use`) charges each allocation its
//! footprint: the full capacity for Hard (reserved up front) and BestEffort
//! (taken at the moment of the call), and the high-watermark `used` for Soft,
//! whose reservations are overbooked by `overbook_factor` and only become
//! physical as they are written.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::capability::{CapKey, CapKind, CapSet, Capability};
use crate::clock::{Clock, SystemClock};
use crate::error::DepotError;

pub type Result<T, E = DepotError> = std::result::Result<T, E>;

pub const KIB: u64 = 1024;
pub const MIB: u64 = 1024 * KIB;

/// QoS class of an allocation. Ordered from weakest to strongest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Hardness {
    BestEffort,
    Soft,
    Hard,
}

impl Hardness {
    pub const ALL: [Hardness; 3] = [Hardness::BestEffort, Hardness::Soft, Hardness::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Hardness::BestEffort => "best-effort",
            Hardness::Soft => "soft",
            Hardness::Hard => "hard",
        }
    }
}

impl fmt::Display for Hardness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Hardness {
    type Err = DepotError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best-effort" => Ok(Hardness::BestEffort),
            "soft" => Ok(Hardness::Soft),
            "hard" => Ok(Hardness::Hard),
            other => Err(DepotError::InvalidArgument(format!("unknown tier {other:?}"))),
        }
    }
}

fn default_max_alloc_size() -> u64 {
    16 * MIB
}
fn default_max_duration() -> u64 {
    86_400
}
fn default_total_capacity() -> u64 {
    1024 * MIB
}
fn default_overbook_factor() -> f64 {
    1.5
}
fn default_listen_addr() -> String {
    "127.0.0.1:6714".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepotConfig {
    #[serde(default = "default_max_alloc_size")]
    pub max_alloc_size: u64,
    /// Seconds.
    #[serde(default = "default_max_duration")]
    pub max_duration: u64,
    #[serde(default = "default_total_capacity")]
    pub total_capacity: u64,
    #[serde(default = "default_overbook_factor")]
    pub overbook_factor: f64,
    #[serde(default = "default_listen_addr")]
    pub listen_addr: String,
}

impl Default for DepotConfig {
    fn default() -> Self {
        DepotConfig {
            max_alloc_size: default_max_alloc_size(),
            max_duration: default_max_duration(),
            total_capacity: default_total_capacity(),
            overbook_factor: default_overbook_factor(),
            listen_addr: default_listen_addr(),
        }
    }
}

impl DepotConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let config: DepotConfig = serde_json::from_str(text).map_err(|e| e.to_string())?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_alloc_size == 0 || self.max_duration == 0 || self.total_capacity == 0 {
            return Err("max_alloc_size, max_duration and total_capacity must be positive".into());
        }
        if !(self.overbook_factor >= 1.0 && self.overbook_factor.is_finite()) {
            return Err(format!(
                "overbook_factor must be a finite value >= 1, got {}",
                self.overbook_factor
            ));
        }
        Ok(())
    }

    /// Ceiling on `sum_hard + sum_soft`: floor(β · total_capacity).
    pub fn soft_limit(&self) -> u64 {
        let limit = (self.overbook_factor * self.total_capacity as f64).floor();
        if limit >= u64::MAX as f64 {
            u64::MAX
        } else {
            (limit as u64).max(self.total_capacity)
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierCounts {
    pub best_effort: u64,
    pub soft: u64,
    pub hard: u64,
}

impl TierCounts {
    fn bump(&mut self, tier: Hardness) {
        match tier {
            Hardness::BestEffort => self.best_effort += 1,
            Hardness::Soft => self.soft += 1,
            Hardness::Hard => self.hard += 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepotStats {
    pub sum_hard: u64,
    pub sum_soft: u64,
    pub bytes_in_use: u64,
    pub live_allocations: u64,
    pub preemptions: TierCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProbeInfo {
    pub capacity: u64,
    pub used: u64,
    pub expires_in_ms: u64,
    pub hardness: Hardness,
    pub unknown_state: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Loaded {
    pub data: Vec<u8>,
    pub unknown_state: bool,
}

/// Read-only view of one table entry, for audits and tooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocSummary {
    pub alloc_id: u64,
    pub capacity: u64,
    pub used: u64,
    pub expiry_ms: u64,
    pub hardness: Hardness,
    pub unknown_state: bool,
}

struct Entry {
    capacity: u64,
    used: u64,
    expiry_ms: u64,
    hardness: Hardness,
    keys: [CapKey; 3],
    poisoned: bool,
    // len == used at all times once the owning table lock is released
    data: Arc<Mutex<Vec<u8>>>,
    exec_lock: Arc<Mutex<()>>,
}

impl Entry {
    fn footprint(&self) -> u64 {
        match self.hardness {
            Hardness::Soft => self.used,
            Hardness::Hard | Hardness::BestEffort => self.capacity,
        }
    }

    fn is_expired(&self, now: u64) -> bool {
        now > self.expiry_ms
    }
}

#[derive(Default)]
struct Table {
    entries: HashMap<u64, Entry>,
    next_id: u64,
    sum_hard: u64,
    sum_soft: u64,
    bytes_in_use: u64,
    preemptions: TierCounts,
}

impl Table {
    fn remove(&mut self, id: u64) -> Option<Entry> {
        let entry = self.entries.remove(&id)?;
        match entry.hardness {
            Hardness::Hard => self.sum_hard -= entry.capacity,
            Hardness::Soft => self.sum_soft -= entry.capacity,
            Hardness::BestEffort => {}
        }
        self.bytes_in_use -= entry.footprint();
        Some(entry)
    }

    fn sweep(&mut self, now: u64) -> usize {
        let expired: Vec<u64> = self
            .entries
            .iter()
            .filter(|(_, e)| e.expiry_ms < now)
            .map(|(id, _)| *id)
            .collect();
        for id in &expired {
            self.remove(*id);
        }
        expired.len()
    }

    /// Preemptible allocations for `tier`, in reclamation order.
    fn victims(&self, tier: Hardness) -> Vec<(Hardness, u64, u64)> {
        let mut v: Vec<(Hardness, u64, u64)> = self
            .entries
            .iter()
            .filter(|(_, e)| e.hardness < tier && e.hardness != Hardness::Hard)
            .map(|(id, e)| (e.hardness, e.expiry_ms, *id))
            .collect();
        v.sort_unstable();
        v
    }

    /// Reclaims victims in order until `bytes_in_use + phys ≤ total` and
    /// `sum_hard + sum_soft + acct ≤ soft_limit`. Nothing is reclaimed when the
    /// shortfall cannot be covered.
    fn preempt(
        &mut self,
        tier: Hardness,
        phys: u64,
        acct: u64,
        config: &DepotConfig,
    ) -> Result<Vec<u64>> {
        let phys_short = |t: &Table| (t.bytes_in_use + phys).saturating_sub(config.total_capacity);
        let acct_short =
            |t: &Table| (t.sum_hard + t.sum_soft + acct).saturating_sub(config.soft_limit());
        if phys_short(self) == 0 && acct_short(self) == 0 {
            return Ok(Vec::new());
        }
        let victims = self.victims(tier);
        let (mut phys_free, mut acct_free) = (0u64, 0u64);
        for (_, _, id) in &victims {
            let e = &self.entries[id];
            phys_free += e.footprint();
            if e.hardness == Hardness::Soft {
                acct_free += e.capacity;
            }
        }
        if phys_free < phys_short(self) || acct_free < acct_short(self) {
            return Err(DepotError::ResourceExhausted {
                needed: phys,
                available: config.total_capacity - self.bytes_in_use + phys_free,
            });
        }
        let mut reclaimed = Vec::new();
        for (hardness, _, id) in victims {
            if phys_short(self) == 0 && acct_short(self) == 0 {
                break;
            }
            self.remove(id);
            self.preemptions.bump(hardness);
            reclaimed.push(id);
        }
        Ok(reclaimed)
    }

    fn stats(&self) -> DepotStats {
        DepotStats {
            sum_hard: self.sum_hard,
            sum_soft: self.sum_soft,
            bytes_in_use: self.bytes_in_use,
            live_allocations: self.entries.len() as u64,
            preemptions: self.preemptions,
        }
    }
}

/// Who is asking for an entry: an external capability (checked), or an
/// internal caller that already holds a validated handle.
#[derive(Clone, Copy)]
pub(crate) enum Access<'a> {
    Cap(&'a Capability, CapKind),
    Id(u64),
}

/// Validated reference to a live allocation, used by the transform engine.
#[derive(Clone)]
pub(crate) struct AllocHandle {
    pub id: u64,
    pub capacity: u64,
    pub data: Arc<Mutex<Vec<u8>>>,
    pub exec_lock: Arc<Mutex<()>>,
}

/// A depot: the buffer service of one intermediate node.
pub struct Depot {
    config: DepotConfig,
    addr: Mutex<String>,
    clock: Arc<dyn Clock>,
    rng: Mutex<StdRng>,
    table: Mutex<Table>,
    store_fault_after: Mutex<Option<u64>>,
}

impl fmt::Debug for Depot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Depot")
            .field("addr", &*self.addr.lock())
            .field("stats", &self.stats())
            .finish()
    }
}

impl Depot {
    pub fn new(config: DepotConfig) -> Self {
        Self::with_clock(config, Arc::new(SystemClock::new()))
    }

    pub fn with_clock(config: DepotConfig, clock: Arc<dyn Clock>) -> Self {
        Depot {
            addr: Mutex::new(config.listen_addr.clone()),
            config,
            clock,
            rng: Mutex::new(StdRng::from_entropy()),
            table: Mutex::new(Table {
                next_id: 1,
                ..Table::default()
            }),
            store_fault_after: Mutex::new(None),
        }
    }

    pub fn config(&self) -> &DepotConfig {
        &self.config
    }

    /// Address embedded in issued capabilities.
    pub fn addr(&self) -> String {
        self.addr.lock().clone()
    }

    pub fn set_addr(&self, addr: impl Into<String>) {
        *self.addr.lock() = addr.into();
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn lease_end(&self, now: u64, secs: u64) -> u64 {
        now.saturating_add(secs.min(self.config.max_duration).saturating_mul(1000))
    }

    pub fn allocate(&self, capacity: u64, duration_secs: u64, hardness: Hardness) -> Result<CapSet> {
        if capacity == 0 || duration_secs == 0 {
            return Err(DepotError::InvalidArgument(
                "capacity and duration must be at least 1".into(),
            ));
        }
        if capacity > self.config.max_alloc_size {
            return Err(DepotError::SizeLimitExceeded {
                requested: capacity,
                limit: self.config.max_alloc_size,
            });
        }
        let now = self.now_ms();
        let mut table = self.table.lock();
        if let Err(denied) = self.admit(&mut table, capacity, hardness) {
            // expired leases still hold pool space until swept
            if table.sweep(now) == 0 {
                return Err(denied);
            }
            self.admit(&mut table, capacity, hardness)?;
        }

        let keys = {
            let mut rng = self.rng.lock();
            [
                CapKey::generate(&mut *rng),
                CapKey::generate(&mut *rng),
                CapKey::generate(&mut *rng),
            ]
        };
        let id = table.next_id;
        table.next_id += 1;
        let entry = Entry {
            capacity,
            used: 0,
            expiry_ms: self.lease_end(now, duration_secs),
            hardness,
            keys,
            poisoned: false,
            data: Arc::new(Mutex::new(Vec::new())),
            exec_lock: Arc::new(Mutex::new(())),
        };
        match hardness {
            Hardness::Hard => table.sum_hard += capacity,
            Hardness::Soft => table.sum_soft += capacity,
            Hardness::BestEffort => {}
        }
        table.bytes_in_use += entry.footprint();
        table.entries.insert(id, entry);
        drop(table);

        let addr = self.addr();
        let cap = |kind: CapKind| Capability::new(addr.clone(), id, kind, keys[kind.index()]);
        Ok(CapSet {
            read: cap(CapKind::Read),
            write: cap(CapKind::Write),
            manage: cap(CapKind::Manage),
        })
    }

    /// Checks the admission rule for `hardness` and performs any preemption a
    /// Hard request needs to stay within the physical and overbooking limits.
    fn admit(&self, table: &mut Table, capacity: u64, hardness: Hardness) -> Result<()> {
        let total = self.config.total_capacity;
        match hardness {
            Hardness::Hard => {
                if table.sum_hard + capacity > total {
                    return Err(DepotError::AdmissionDenied(format!(
                        "hard pool holds {} of {total} bytes, cannot add {capacity}",
                        table.sum_hard
                    )));
                }
                table
                    .preempt(Hardness::Hard, capacity, capacity, &self.config)
                    .map_err(|e| DepotError::AdmissionDenied(e.to_string()))?;
            }
            Hardness::Soft => {
                let limit = self.config.soft_limit();
                if table.sum_hard + table.sum_soft + capacity > limit {
                    return Err(DepotError::AdmissionDenied(format!(
                        "reservations {} + {} + {capacity} exceed overbooked limit {limit}",
                        table.sum_hard, table.sum_soft
                    )));
                }
            }
            Hardness::BestEffort => {
                if table.bytes_in_use + capacity > total {
                    return Err(DepotError::AdmissionDenied(format!(
                        "{} of {total} bytes in use, cannot add {capacity}",
                        table.bytes_in_use
                    )));
                }
            }
        }
        Ok(())
    }

    fn lookup<'t>(&self, table: &'t mut Table, access: Access<'_>, now: u64) -> Result<&'t mut Entry> {
        let id = match access {
            Access::Cap(cap, _) => cap.alloc_id,
            Access::Id(id) => id,
        };
        let entry = table
            .entries
            .get_mut(&id)
            .ok_or(DepotError::NoSuchAllocation(id))?;
        if let Access::Cap(cap, required) = access {
            if cap.kind != required || !entry.keys[required.index()].ct_eq(&cap.key) {
                return Err(DepotError::BadCapability);
            }
        }
        if entry.is_expired(now) {
            return Err(DepotError::Expired(id));
        }
        Ok(entry)
    }

    pub fn probe(&self, manage: &Capability) -> Result<ProbeInfo> {
        let now = self.now_ms();
        let mut table = self.table.lock();
        let e = self.lookup(&mut table, Access::Cap(manage, CapKind::Manage), now)?;
        Ok(ProbeInfo {
            capacity: e.capacity,
            used: e.used,
            expires_in_ms: e.expiry_ms - now,
            hardness: e.hardness,
            unknown_state: e.poisoned,
        })
    }

    /// Extends the lease; returns milliseconds until the new expiry.
    pub fn renew(&self, manage: &Capability, extension_secs: u64) -> Result<u64> {
        if extension_secs == 0 {
            return Err(DepotError::InvalidArgument("extension must be at least 1".into()));
        }
        let now = self.now_ms();
        let target = self.lease_end(now, extension_secs);
        let mut table = self.table.lock();
        let e = self.lookup(&mut table, Access::Cap(manage, CapKind::Manage), now)?;
        e.expiry_ms = e.expiry_ms.max(target);
        Ok(e.expiry_ms - now)
    }

    pub fn release(&self, manage: &Capability) -> Result<()> {
        let mut table = self.table.lock();
        let id = manage.alloc_id;
        let e = table
            .entries
            .get(&id)
            .ok_or(DepotError::NoSuchAllocation(id))?;
        if manage.kind != CapKind::Manage || !e.keys[CapKind::Manage.index()].ct_eq(&manage.key) {
            return Err(DepotError::BadCapability);
        }
        table.remove(id);
        Ok(())
    }

    /// Validates a write of `len` bytes at `offset`, grows `used` (taking
    /// physical bytes for Soft allocations, preempting if necessary) and
    /// returns the buffer to write into.
    pub(crate) fn prepare_write(
        &self,
        access: Access<'_>,
        offset: u64,
        len: u64,
    ) -> Result<Arc<Mutex<Vec<u8>>>> {
        let now = self.now_ms();
        let mut table = self.table.lock();
        let e = self.lookup(&mut table, access, now)?;
        let (capacity, used, hardness) = (e.capacity, e.used, e.hardness);
        let end = offset
            .checked_add(len)
            .filter(|end| *end <= capacity)
            .ok_or_else(|| {
                DepotError::OutOfRange(format!(
                    "write [{offset}, +{len}) exceeds capacity {capacity}"
                ))
            })?;
        let id = match access {
            Access::Cap(cap, _) => cap.alloc_id,
            Access::Id(id) => id,
        };
        let growth = end.saturating_sub(used);
        if hardness == Hardness::Soft && growth > 0 {
            let total = self.config.total_capacity;
            if table.bytes_in_use + growth > total {
                table.sweep(now);
                table.preempt(Hardness::Soft, growth, 0, &self.config)?;
            }
            // preemption never picks Soft victims for a Soft requester
            let e = table.entries.get(&id).expect("requester survives its own preemption");
            debug_assert_eq!(e.hardness, Hardness::Soft);
            table.bytes_in_use += growth;
        }
        let e = table.entries.get_mut(&id).expect("entry checked above");
        if growth > 0 {
            e.used = end;
            e.data.lock().resize(end as usize, 0);
        }
        if offset == 0 && len == e.capacity {
            e.poisoned = false;
        }
        Ok(e.data.clone())
    }

    pub(crate) fn poison(&self, id: u64) {
        if let Some(e) = self.table.lock().entries.get_mut(&id) {
            e.poisoned = true;
        }
    }

    pub(crate) fn clear_poison(&self, id: u64) {
        if let Some(e) = self.table.lock().entries.get_mut(&id) {
            e.poisoned = false;
        }
    }

    /// Arms a one-shot fault: the next store writes only its first
    /// `after_bytes` bytes and then fails, leaving the target poisoned.
    pub fn inject_store_fault(&self, after_bytes: u64) {
        *self.store_fault_after.lock() = Some(after_bytes);
    }

    pub fn store(&self, write: &Capability, offset: u64, payload: &[u8]) -> Result<u64> {
        let buf = self.prepare_write(Access::Cap(write, CapKind::Write), offset, payload.len() as u64)?;
        let fault = self.store_fault_after.lock().take();
        let start = offset as usize;
        match fault {
            Some(after) if (after as usize) < payload.len() => {
                let partial = &payload[..after as usize];
                buf.lock()[start..start + partial.len()].copy_from_slice(partial);
                self.poison(write.alloc_id);
                Err(DepotError::StoreFault(format!(
                    "fault after {after} of {} bytes",
                    payload.len()
                )))
            }
            _ => {
                buf.lock()[start..start + payload.len()].copy_from_slice(payload);
                Ok(payload.len() as u64)
            }
        }
    }

    /// Records a store whose payload stopped arriving after `partial.len()` of
    /// `declared_len` bytes: the received prefix is written and the allocation
    /// is poisoned. The range is validated against the declared length.
    pub fn store_interrupted(
        &self,
        write: &Capability,
        offset: u64,
        declared_len: u64,
        partial: &[u8],
    ) -> Result<()> {
        let buf = self.prepare_write(
            Access::Cap(write, CapKind::Write),
            offset,
            partial.len() as u64,
        )?;
        if offset.checked_add(declared_len).is_none() {
            return Err(DepotError::OutOfRange("declared range overflows".into()));
        }
        let start = offset as usize;
        buf.lock()[start..start + partial.len()].copy_from_slice(partial);
        self.poison(write.alloc_id);
        Ok(())
    }

    pub fn load(&self, read: &Capability, offset: u64, length: u64) -> Result<Loaded> {
        let now = self.now_ms();
        let (data, poisoned) = {
            let mut table = self.table.lock();
            let e = self.lookup(&mut table, Access::Cap(read, CapKind::Read), now)?;
            if offset.checked_add(length).is_none_or(|end| end > e.used) {
                return Err(DepotError::OutOfRange(format!(
                    "read [{offset}, +{length}) beyond used {}",
                    e.used
                )));
            }
            (e.data.clone(), e.poisoned)
        };
        let start = offset as usize;
        let bytes = data.lock()[start..start + length as usize].to_vec();
        Ok(Loaded {
            data: bytes,
            unknown_state: poisoned,
        })
    }

    /// Resolves a capability for the transform engine.
    pub(crate) fn resolve(&self, cap: &Capability, kind: CapKind) -> Result<AllocHandle> {
        let now = self.now_ms();
        let mut table = self.table.lock();
        let e = self.lookup(&mut table, Access::Cap(cap, kind), now)?;
        Ok(AllocHandle {
            id: cap.alloc_id,
            capacity: e.capacity,
            data: e.data.clone(),
            exec_lock: e.exec_lock.clone(),
        })
    }

    /// Checks that `id` is still live and unexpired.
    pub(crate) fn check_live(&self, id: u64) -> Result<()> {
        let now = self.now_ms();
        let mut table = self.table.lock();
        self.lookup(&mut table, Access::Id(id), now).map(|_| ())
    }

    /// Reclaims every allocation whose expiry is before `now_ms`.
    pub fn sweep_leases(&self, now_ms: u64) -> usize {
        self.table.lock().sweep(now_ms)
    }

    /// Sweeps with the depot's own clock.
    pub fn sweep(&self) -> usize {
        self.sweep_leases(self.now_ms())
    }

    /// Frees at least `bytes_needed` physical bytes by reclaiming allocations
    /// of tiers strictly below `requesting_tier` (never Hard), BestEffort
    /// first, then Soft; earliest expiry first, then smallest id.
    pub fn preempt_for(&self, bytes_needed: u64, requesting_tier: Hardness) -> Result<Vec<u64>> {
        self.table
            .lock()
            .preempt(requesting_tier, bytes_needed, 0, &self.config)
    }

    pub fn stats(&self) -> DepotStats {
        self.table.lock().stats()
    }

    /// Accounting recomputed from the full table rather than the running sums.
    pub fn audit(&self) -> DepotStats {
        let table = self.table.lock();
        let mut stats = DepotStats {
            live_allocations: table.entries.len() as u64,
            preemptions: table.preemptions,
            ..DepotStats::default()
        };
        for e in table.entries.values() {
            match e.hardness {
                Hardness::Hard => stats.sum_hard += e.capacity,
                Hardness::Soft => stats.sum_soft += e.capacity,
                Hardness::BestEffort => {}
            }
            stats.bytes_in_use += e.footprint();
        }
        stats
    }

    pub fn snapshot(&self) -> Vec<AllocSummary> {
        let table = self.table.lock();
        let mut out: Vec<AllocSummary> = table
            .entries
            .iter()
            .map(|(id, e)| AllocSummary {
                alloc_id: *id,
                capacity: e.capacity,
                used: e.used,
                expiry_ms: e.expiry_ms,
                hardness: e.hardness,
                unknown_state: e.poisoned,
            })
            .collect();
        out.sort_by_key(|s| s.alloc_id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use rand::seq::SliceRandom;
    use rand::RngCore;

    fn depot_with(total: u64, clock: &ManualClock) -> Depot {
        let config = DepotConfig {
            total_capacity: total,
            max_alloc_size: total.min(16 * MIB),
            ..DepotConfig::default()
        };
        Depot::with_clock(config, Arc::new(clock.clone()))
    }

    fn small() -> (Depot, ManualClock) {
        let clock = ManualClock::new(0);
        (depot_with(100, &clock), clock)
    }

    #[test]
    fn minimal_allocation() {
        let (d, _) = small();
        let caps = d.allocate(1, 1, Hardness::Hard).unwrap();
        let p = d.probe(&caps.manage).unwrap();
        assert_eq!((p.capacity, p.used, p.hardness), (1, 0, Hardness::Hard));
        assert_ne!(caps.read.key, caps.write.key);
        assert_ne!(caps.write.key, caps.manage.key);
    }

    #[test]
    fn size_limit_boundary() {
        let d = Depot::new(DepotConfig::default());
        let max = d.config().max_alloc_size;
        assert!(matches!(
            d.allocate(max + 1, 60, Hardness::Soft),
            Err(DepotError::SizeLimitExceeded { .. })
        ));
        assert!(d.allocate(max, 60, Hardness::Soft).is_ok());
        assert!(matches!(
            d.allocate(0, 60, Hardness::Soft),
            Err(DepotError::InvalidArgument(_))
        ));
    }

    #[test]
    fn overbooked_soft_admission() {
        let (d, _) = small();
        d.allocate(60, 60, Hardness::Hard).unwrap();
        d.allocate(80, 60, Hardness::Soft).unwrap();
        assert!(matches!(
            d.allocate(20, 60, Hardness::Soft),
            Err(DepotError::AdmissionDenied(_))
        ));
        let s = d.stats();
        assert_eq!((s.sum_hard, s.sum_soft, s.bytes_in_use), (60, 80, 60));
    }

    #[test]
    fn probe_kinds_and_expiry() {
        let (d, clock) = small();
        let caps = d.allocate(10, 60, Hardness::Soft).unwrap();
        let p = d.probe(&caps.manage).unwrap();
        assert_eq!((p.used, p.capacity, p.expires_in_ms), (0, 10, 60_000));
        assert_eq!(d.probe(&caps.read), Err(DepotError::BadCapability));
        clock.advance_secs(61);
        assert_eq!(d.probe(&caps.manage), Err(DepotError::Expired(caps.manage.alloc_id)));
        assert_eq!(d.sweep(), 1);
        assert_eq!(
            d.probe(&caps.manage),
            Err(DepotError::NoSuchAllocation(caps.manage.alloc_id))
        );
    }

    #[test]
    fn renew_caps_and_is_monotone() {
        let (d, clock) = small();
        let caps = d.allocate(10, 5, Hardness::Soft).unwrap();
        assert!(d.renew(&caps.manage, 10).unwrap() >= 10_000);
        let max = d.config().max_duration;
        assert_eq!(d.renew(&caps.manage, 2 * max).unwrap(), max * 1000);
        // shorter extension never lowers expiry
        assert_eq!(d.renew(&caps.manage, 1).unwrap(), max * 1000);
        clock.advance_secs(10);
        assert_eq!(d.renew(&caps.manage, 1).unwrap(), max * 1000 - 10_000);
        assert_eq!(d.renew(&caps.write, 10), Err(DepotError::BadCapability));
    }

    #[test]
    fn release_semantics() {
        let (d, _) = small();
        let caps = d.allocate(60, 60, Hardness::Hard).unwrap();
        assert!(d.allocate(60, 60, Hardness::Hard).is_err());
        assert_eq!(d.release(&caps.read), Err(DepotError::BadCapability));
        d.release(&caps.manage).unwrap();
        assert_eq!(d.stats().sum_hard, 0);
        let id = caps.manage.alloc_id;
        assert_eq!(d.probe(&caps.manage), Err(DepotError::NoSuchAllocation(id)));
        assert_eq!(d.release(&caps.manage), Err(DepotError::NoSuchAllocation(id)));
        assert!(d.allocate(60, 60, Hardness::Hard).is_ok());
    }

    #[test]
    fn store_load_basics() {
        let (d, _) = small();
        let caps = d.allocate(10, 60, Hardness::Hard).unwrap();
        assert_eq!(d.store(&caps.write, 0, b"abc").unwrap(), 3);
        assert_eq!(d.load(&caps.read, 0, 3).unwrap().data, b"abc");
        assert!(d.load(&caps.read, 0, 0).unwrap().data.is_empty());
        assert!(matches!(d.load(&caps.read, 1, 3), Err(DepotError::OutOfRange(_))));
        assert!(matches!(d.store(&caps.write, 9, b"xy"), Err(DepotError::OutOfRange(_))));
        assert_eq!(d.store(&caps.read, 0, b"x"), Err(DepotError::BadCapability));
        assert_eq!(d.load(&caps.write, 0, 1), Err(DepotError::BadCapability));
    }

    #[test]
    fn gaps_below_used_read_as_zero() {
        let (d, _) = small();
        let caps = d.allocate(10, 60, Hardness::Soft).unwrap();
        d.store(&caps.write, 6, b"zz").unwrap();
        assert_eq!(d.load(&caps.read, 0, 8).unwrap().data, b"\0\0\0\0\0\0zz");
    }

    #[test]
    fn overlapping_stores_match_byte_oracle() {
        for order in [[0usize, 1], [1, 0]] {
            let (d, _) = small();
            let caps = d.allocate(10, 60, Hardness::Soft).unwrap();
            let writes: [(u64, &[u8]); 2] = [(0, b"aaaa"), (2, b"bbbb")];
            let mut oracle = vec![0u8; 6];
            for i in order {
                let (off, bytes) = writes[i];
                d.store(&caps.write, off, bytes).unwrap();
                oracle[off as usize..off as usize + bytes.len()].copy_from_slice(bytes);
            }
            assert_eq!(d.load(&caps.read, 0, 6).unwrap().data, oracle);
        }
        let expected_in_order = b"aabbbb";
        let (d, _) = small();
        let caps = d.allocate(10, 60, Hardness::Soft).unwrap();
        d.store(&caps.write, 0, b"aaaa").unwrap();
        d.store(&caps.write, 2, b"bbbb").unwrap();
        assert_eq!(d.load(&caps.read, 0, 6).unwrap().data, expected_in_order);
    }

    #[test]
    fn megabyte_piecewise_read() {
        let clock = ManualClock::new(0);
        let d = depot_with(4 * MIB, &clock);
        let caps = d.allocate(MIB, 60, Hardness::Hard).unwrap();
        let mut payload = vec![0u8; MIB as usize];
        rand::thread_rng().fill_bytes(&mut payload);
        d.store(&caps.write, 0, &payload).unwrap();
        let mut joined = Vec::new();
        for off in (0..MIB).step_by(4096) {
            joined.extend(d.load(&caps.read, off, 4096).unwrap().data);
        }
        assert_eq!(joined, payload);
    }

    #[test]
    fn injected_fault_poisons_until_full_overwrite() {
        let (d, _) = small();
        let caps = d.allocate(8, 60, Hardness::Hard).unwrap();
        d.inject_store_fault(2);
        assert!(matches!(
            d.store(&caps.write, 0, b"abcdef"),
            Err(DepotError::StoreFault(_))
        ));
        let l = d.load(&caps.read, 0, 2).unwrap();
        assert!(l.unknown_state);
        assert_eq!(l.data, b"ab");
        d.store(&caps.write, 0, b"xyz").unwrap();
        assert!(d.load(&caps.read, 0, 1).unwrap().unknown_state);
        d.store(&caps.write, 0, b"12345678").unwrap();
        assert!(!d.load(&caps.read, 0, 1).unwrap().unknown_state);
    }

    #[test]
    fn sweep_counts() {
        let (d, clock) = small();
        assert_eq!(d.sweep_leases(clock.now_ms()), 0);
        d.allocate(1, 1, Hardness::Soft).unwrap();
        assert_eq!(d.sweep_leases(1000), 0);
        assert_eq!(d.sweep_leases(1001), 1);
    }

    #[test]
    fn sweep_at_median_matches_sort_oracle() {
        let clock = ManualClock::new(0);
        let d = depot_with(10_000, &clock);
        let mut secs: Vec<u64> = (1..=100).map(|i| i * 7).collect();
        secs.shuffle(&mut rand::thread_rng());
        let mut expiries = Vec::new();
        for s in secs {
            d.allocate(1, s, Hardness::Soft).unwrap();
            expiries.push(s * 1000);
        }
        let mut sorted = expiries.clone();
        sorted.sort_unstable();
        // strictly between the 50th and 51st expiry
        let now = (sorted[49] + sorted[50]) / 2;
        assert!(sorted[49] < now && now <= sorted[50]);
        let oracle = expiries.iter().filter(|e| **e < now).count();
        assert_eq!(oracle, 50);
        assert_eq!(d.sweep_leases(now), 50);
        assert_eq!(d.stats().live_allocations, 50);
    }

    #[test]
    fn preempt_prefers_best_effort() {
        let clock = ManualClock::new(0);
        let d = depot_with(100, &clock);
        let be = d.allocate(30, 60, Hardness::BestEffort).unwrap();
        let soft = d.allocate(40, 60, Hardness::Soft).unwrap();
        d.store(&soft.write, 0, &[1; 40]).unwrap();
        let hard = d.allocate(20, 60, Hardness::Hard).unwrap();
        assert_eq!(d.stats().bytes_in_use, 90);
        let ids = d.preempt_for(30, Hardness::Hard).unwrap();
        assert_eq!(ids, vec![be.manage.alloc_id]);
        assert!(d.probe(&soft.manage).is_ok());
        assert!(d.probe(&hard.manage).is_ok());
    }

    #[test]
    fn best_effort_requester_preempts_nobody() {
        let (d, _) = small();
        d.allocate(100, 60, Hardness::BestEffort).unwrap();
        assert!(matches!(
            d.preempt_for(1, Hardness::BestEffort),
            Err(DepotError::ResourceExhausted { .. })
        ));
        assert_eq!(d.stats().live_allocations, 1);
    }

    #[test]
    fn soft_victim_with_earliest_expiry() {
        let (d, _) = small();
        let mut caps = Vec::new();
        for secs in [5, 3, 9] {
            let c = d.allocate(30, secs, Hardness::Soft).unwrap();
            d.store(&c.write, 0, &[7; 30]).unwrap();
            caps.push(c);
        }
        d.allocate(10, 60, Hardness::BestEffort).unwrap();
        // 100 bytes in use; free exactly one 30-byte buffer after the BE
        assert_eq!(d.stats().bytes_in_use, 100);
        let ids = d.preempt_for(40, Hardness::Hard).unwrap();
        assert_eq!(ids.len(), 2);
        assert_eq!(ids[1], caps[1].manage.alloc_id);
    }

    #[test]
    fn hard_is_never_preempted() {
        let (d, _) = small();
        let hard = d.allocate(100, 60, Hardness::Hard).unwrap();
        assert!(matches!(
            d.preempt_for(1, Hardness::Hard),
            Err(DepotError::ResourceExhausted { .. })
        ));
        assert!(d.probe(&hard.manage).is_ok());
    }

    #[test]
    fn soft_growth_preempts_best_effort_only() {
        let (d, _) = small();
        let be = d.allocate(50, 60, Hardness::BestEffort).unwrap();
        let soft = d.allocate(80, 60, Hardness::Soft).unwrap();
        d.store(&soft.write, 0, &[1; 50]).unwrap();
        assert!(d.probe(&be.manage).is_ok());
        d.store(&soft.write, 50, &[1; 10]).unwrap();
        assert!(matches!(d.probe(&be.manage), Err(DepotError::NoSuchAllocation(_))));
        assert_eq!(d.stats().preemptions.best_effort, 1);
        let other = d.allocate(60, 60, Hardness::Soft).unwrap();
        assert!(matches!(
            d.store(&other.write, 0, &[1; 41]),
            Err(DepotError::ResourceExhausted { .. })
        ));
    }

    #[test]
    fn hard_admission_reclaims_overbooked_soft() {
        let (d, _) = small();
        d.allocate(60, 60, Hardness::Hard).unwrap();
        let soft = d.allocate(80, 60, Hardness::Soft).unwrap();
        d.allocate(40, 60, Hardness::Hard).unwrap();
        assert!(matches!(d.probe(&soft.manage), Err(DepotError::NoSuchAllocation(_))));
        let s = d.stats();
        assert!(s.sum_hard + s.sum_soft <= d.config().soft_limit());
        assert_eq!(s.preemptions.soft, 1);
    }

    #[test]
    fn config_json_fields() {
        let c = DepotConfig::from_json(
            r#"{"max_alloc_size": 1024, "max_duration": 60, "total_capacity": 4096,
                "overbook_factor": 2.0, "listen_addr": "127.0.0.1:0"}"#,
        )
        .unwrap();
        assert_eq!(c.soft_limit(), 8192);
        assert!(DepotConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(DepotConfig::from_json(r#"{"overbook_factor": 0.5}"#).is_err());
        assert_eq!(DepotConfig::from_json("{}").unwrap(), DepotConfig::default());
    }
}
