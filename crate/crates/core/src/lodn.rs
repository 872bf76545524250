//! Policy daemon over a set of exNode files: renews leases before they lapse
//! and restores replication after depot loss.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::exnode::{write_atomic, ExNode, FILE_EXTENSION};
use crate::lors::{Lors, Sessions};

/// Per-file management policy, stored beside the exNode as
/// `<name>.policy.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    pub replicas: usize,
    /// Seconds of remaining lease at or below which a replica is renewed.
    pub renew_before: u64,
    /// Seconds between ticks.
    pub check_period: u64,
    #[serde(default)]
    pub preferred_depots: Vec<String>,
    /// Seconds granted by each renewal and to replicas created by repair.
    #[serde(default = "default_lease_duration")]
    pub lease_duration: u64,
}

fn default_lease_duration() -> u64 {
    3600
}

impl Policy {
    pub fn validate(&self) -> Result<(), String> {
        if self.replicas == 0 {
            return Err("replicas must be at least 1".into());
        }
        if !(self.renew_before > self.check_period && self.check_period >= 1) {
            return Err(format!(
                "need renew_before > check_period >= 1, got {} and {}",
                self.renew_before, self.check_period
            ));
        }
        if self.lease_duration <= self.renew_before {
            return Err(format!(
                "lease_duration {} must exceed renew_before {}",
                self.lease_duration, self.renew_before
            ));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let p: Policy = serde_json::from_str(text).map_err(|e| e.to_string())?;
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LodnError {
    #[error("NotManaged: {0}")]
    NotManaged(PathBuf),
    #[error("ValidationFailed: {0}")]
    ValidationFailed(String),
    #[error("InvalidArgument: {0}")]
    InvalidPolicy(String),
    #[error("{0}")]
    Io(String),
}

/// Path of the policy document that accompanies `exnode_path`.
pub fn policy_path(exnode_path: &Path) -> PathBuf {
    let name = exnode_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(FILE_EXTENSION)
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(&name);
    exnode_path.with_file_name(format!("{stem}.policy.json"))
}

/// What one tick did.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TickReport {
    pub now_ms: u64,
    pub renewals: usize,
    /// Replicas created to restore replication.
    pub repairs: usize,
    /// Dead replicas removed from exNodes.
    pub dropped: usize,
    /// exNode files rewritten.
    pub rewrites: usize,
    pub failures: Vec<String>,
}

impl TickReport {
    pub fn actions(&self) -> usize {
        self.renewals + self.repairs + self.dropped + self.rewrites
    }
}

pub struct Scheduler {
    lors: Lors,
    managed: BTreeMap<PathBuf, Policy>,
}

impl Scheduler {
    pub fn new(lors: Lors) -> Self {
        Scheduler {
            lors,
            managed: BTreeMap::new(),
        }
    }

    pub fn lors(&self) -> &Lors {
        &self.lors
    }

    /// Starts managing `exnode_path` under `policy`, writing the policy file
    /// beside it.
    pub fn adopt(&mut self, exnode_path: &Path, policy: Policy) -> Result<(), LodnError> {
        policy.validate().map_err(LodnError::InvalidPolicy)?;
        let x = ExNode::load(exnode_path).map_err(|e| LodnError::ValidationFailed(e.to_string()))?;
        let violations = x.validate();
        if !violations.is_empty() {
            let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(LodnError::ValidationFailed(list.join("; ")));
        }
        let json = serde_json::to_string_pretty(&policy).expect("policy serializes");
        write_atomic(&policy_path(exnode_path), json.as_bytes())
            .map_err(|e| LodnError::Io(e.to_string()))?;
        self.managed.insert(exnode_path.to_path_buf(), policy);
        Ok(())
    }

    /// Stops managing `exnode_path` and removes its policy file. Allocations
    /// are left alone.
    pub fn drop_managed(&mut self, exnode_path: &Path) -> Result<(), LodnError> {
        if self.managed.remove(exnode_path).is_none() {
            return Err(LodnError::NotManaged(exnode_path.to_path_buf()));
        }
        let _ = std::fs::remove_file(policy_path(exnode_path));
        Ok(())
    }

    pub fn list(&self) -> Vec<(PathBuf, Policy)> {
        self.managed
            .iter()
            .map(|(p, pol)| (p.clone(), pol.clone()))
            .collect()
    }

    /// Adopts every `*.xnd.json` in `dir` that has a policy file and is not
    /// yet managed. Returns the problems found, one line per file.
    pub fn scan_dir(&mut self, dir: &Path) -> Result<Vec<String>, LodnError> {
        let entries = std::fs::read_dir(dir)
            .map_err(|e| LodnError::Io(format!("{}: {e}", dir.display())))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.to_string_lossy().ends_with(FILE_EXTENSION))
            .collect();
        paths.sort();
        let mut problems = Vec::new();
        for path in paths {
            if self.managed.contains_key(&path) {
                continue;
            }
            let pp = policy_path(&path);
            let Ok(text) = std::fs::read_to_string(&pp) else {
                continue;
            };
            let adopted = Policy::from_json(&text)
                .map_err(LodnError::InvalidPolicy)
                .and_then(|policy| self.adopt(&path, policy));
            if let Err(e) = adopted {
                problems.push(format!("{}: {e}", path.display()));
            }
        }
        Ok(problems)
    }

    /// Smallest check period among managed files, in seconds.
    pub fn check_period(&self) -> Option<u64> {
        self.managed.values().map(|p| p.check_period).min()
    }

    /// Renews replicas whose remaining lease is at most `renew_before`, then
    /// repairs extents below target. Failures are recorded and skipped.
    pub fn tick(&mut self, now_ms: u64) -> TickReport {
        let mut report = TickReport {
            now_ms,
            ..TickReport::default()
        };
        let managed: Vec<(PathBuf, Policy)> = self.list();
        for (path, policy) in managed {
            self.tick_one(&path, &policy, &mut report);
        }
        report
    }

    fn tick_one(&self, path: &Path, policy: &Policy, report: &mut TickReport) {
        let fail = |report: &mut TickReport, msg: String| {
            log::warn!("{}: {msg}", path.display());
            report.failures.push(format!("{}: {msg}", path.display()));
        };
        let x = match ExNode::load(path) {
            Ok(x) => x,
            Err(e) => return fail(report, e.to_string()),
        };
        let violations = x.validate();
        if !violations.is_empty() {
            return fail(report, format!("ValidationFailed: {}", violations[0]));
        }

        let mut sessions = Sessions::new(&self.lors);
        for r in x.extents.iter().flat_map(|e| &e.replicas) {
            let Some(m) = &r.manage else { continue };
            let Ok(info) = sessions.with(&r.depot, |s| s.probe(m)) else {
                // unreachable replicas are handled by repair below
                continue;
            };
            if info.expires_in_ms <= policy.renew_before.saturating_mul(1000) {
                match sessions.with(&r.depot, |s| s.renew(m, policy.lease_duration)) {
                    Ok(_) => report.renewals += 1,
                    Err(e) => fail(report, format!("renew on {}: {e}", r.depot)),
                }
            }
        }
        drop(sessions);

        let depots: Vec<String> = if policy.preferred_depots.is_empty() {
            let mut seen = BTreeSet::new();
            x.extents
                .iter()
                .flat_map(|e| &e.replicas)
                .map(|r| r.depot.clone())
                .filter(|d| seen.insert(d.clone()))
                .collect()
        } else {
            policy.preferred_depots.clone()
        };
        match self
            .lors
            .repair(&x, policy.replicas, &depots, policy.lease_duration)
        {
            Ok((repaired, rep)) => {
                report.repairs += rep.transfers;
                report.dropped += rep.dropped;
                for (offset, why) in rep.shortfalls {
                    fail(report, format!("extent at {offset}: {why}"));
                }
                if repaired != x {
                    match repaired.save(path) {
                        Ok(()) => report.rewrites += 1,
                        Err(e) => fail(report, e.to_string()),
                    }
                }
            }
            Err(e) => fail(report, e.to_string()),
        }
    }
}
