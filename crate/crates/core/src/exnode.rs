//! File metadata composing depot allocations into one logical byte range, with
//! replication. Serialized as canonical JSON (`.xnd.json`).

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::capability::{CapSet, Capability};

pub const FORMAT_VERSION: u64 = 1;
pub const FILE_EXTENSION: &str = ".xnd.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replica {
    pub depot: String,
    pub read: Capability,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub write: Option<Capability>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manage: Option<Capability>,
    /// Offset within the allocation where this extent's bytes begin.
    #[serde(default)]
    pub base: u64,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Replica {
    pub fn from_caps(caps: &CapSet) -> Self {
        Replica {
            depot: caps.read.depot_addr.clone(),
            read: caps.read.clone(),
            write: Some(caps.write.clone()),
            manage: Some(caps.manage.clone()),
            base: 0,
            extra: BTreeMap::new(),
        }
    }

    /// The same replica without write or manage rights.
    pub fn read_only(&self) -> Self {
        Replica {
            write: None,
            manage: None,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub offset: u64,
    pub length: u64,
    pub replicas: Vec<Replica>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Extent {
    pub fn new(offset: u64, length: u64, replicas: Vec<Replica>) -> Self {
        Extent {
            offset,
            length,
            replicas,
            extra: BTreeMap::new(),
        }
    }

    pub fn end(&self) -> u64 {
        self.offset.saturating_add(self.length)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExNode {
    pub version: u64,
    pub total_length: u64,
    pub extents: Vec<Extent>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    UnsupportedVersion(u64),
    EmptyExtent { index: usize },
    NoReplicas { index: usize },
    /// A replica whose capability names a different depot than its `depot`.
    ReplicaDepotMismatch { index: usize, replica: usize },
    Unsorted { index: usize },
    Overlap { start: u64, end: u64 },
    Gap { start: u64, end: u64 },
    Overrun { total_length: u64, end: u64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::UnsupportedVersion(v) => write!(f, "unsupported version {v}"),
            Violation::EmptyExtent { index } => write!(f, "extent {index} has length 0"),
            Violation::NoReplicas { index } => write!(f, "extent {index} has no replicas"),
            Violation::ReplicaDepotMismatch { index, replica } => {
                write!(f, "extent {index} replica {replica} names another depot")
            }
            Violation::Unsorted { index } => {
                write!(f, "extent {index} is out of offset order")
            }
            Violation::Overlap { start, end } => write!(f, "overlap at [{start},{end})"),
            Violation::Gap { start, end } => write!(f, "gap at [{start},{end})"),
            Violation::Overrun { total_length, end } => {
                write!(f, "extents end at {end}, past total_length {total_length}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExNodeError {
    #[error("ParseError: {0}")]
    Parse(String),
    #[error("SchemaError: {0}")]
    Schema(String),
    #[error("VersionUnsupported: {0}")]
    VersionUnsupported(u64),
    #[error("{0}")]
    Io(String),
}

impl ExNode {
    pub fn new(total_length: u64, extents: Vec<Extent>) -> Self {
        ExNode {
            version: FORMAT_VERSION,
            total_length,
            extents,
            metadata: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    /// Every broken invariant, in extent order. Empty means valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.version != FORMAT_VERSION {
            out.push(Violation::UnsupportedVersion(self.version));
        }
        let mut cursor = 0u64;
        let mut prev_offset = 0u64;
        for (index, e) in self.extents.iter().enumerate() {
            if e.length == 0 {
                out.push(Violation::EmptyExtent { index });
            }
            if e.replicas.is_empty() {
                out.push(Violation::NoReplicas { index });
            }
            for (replica, r) in e.replicas.iter().enumerate() {
                let names_other = |c: &Option<Capability>| {
                    c.as_ref().is_some_and(|c| c.depot_addr != r.depot)
                };
                if r.read.depot_addr != r.depot || names_other(&r.write) || names_other(&r.manage)
                {
                    out.push(Violation::ReplicaDepotMismatch { index, replica });
                }
            }
            if index > 0 && e.offset < prev_offset {
                out.push(Violation::Unsorted { index });
            } else if e.offset < cursor {
                out.push(Violation::Overlap {
                    start: e.offset,
                    end: cursor.min(e.end()),
                });
            } else if e.offset > cursor {
                out.push(Violation::Gap {
                    start: cursor,
                    end: e.offset,
                });
            }
            prev_offset = e.offset;
            cursor = cursor.max(e.end());
        }
        if cursor < self.total_length {
            out.push(Violation::Gap {
                start: cursor,
                end: self.total_length,
            });
        } else if cursor > self.total_length {
            out.push(Violation::Overrun {
                total_length: self.total_length,
                end: cursor,
            });
        }
        out
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_empty()
    }

    /// Index of the extent holding byte `offset`, assuming a valid tiling.
    pub fn extent_index_at(&self, offset: u64) -> Option<usize> {
        if offset >= self.total_length {
            return None;
        }
        let i = self.extents.partition_point(|e| e.offset <= offset);
        let i = i.checked_sub(1)?;
        (offset < self.extents[i].end()).then_some(i)
    }

    /// Replicas that hold byte `offset`.
    pub fn coverage_at(&self, offset: u64) -> &[Replica] {
        match self.extent_index_at(offset) {
            Some(i) => &self.extents[i].replicas,
            None => &[],
        }
    }

    /// Canonical JSON: keys sorted at every level, integers only, no
    /// insignificant whitespace.
    pub fn to_json(&self) -> String {
        let value = serde_json::to_value(self).expect("exnode is always representable");
        serde_json::to_string(&value).expect("value serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        let value = serde_json::to_value(self).expect("exnode is always representable");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ExNodeError> {
        let value: Value =
            serde_json::from_str(text).map_err(|e| ExNodeError::Parse(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| ExNodeError::Schema("document is not an object".into()))?;
        let version = obj
            .get("version")
            .ok_or_else(|| ExNodeError::Schema("missing field `version`".into()))?
            .as_u64()
            .ok_or_else(|| ExNodeError::Schema("`version` is not an unsigned integer".into()))?;
        if version != FORMAT_VERSION {
            return Err(ExNodeError::VersionUnsupported(version));
        }
        serde_json::from_value(value).map_err(|e| ExNodeError::Schema(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ExNodeError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExNodeError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Writes the document atomically: a temporary file in the same
    /// directory is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<(), ExNodeError> {
        write_atomic(path, self.to_json_pretty().as_bytes())
            .map_err(|e| ExNodeError::Io(format!("{}: {e}", path.display())))
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "no file name"))?;
    let tmp_name = format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id());
    let tmp = match dir {
        Some(d) => d.join(tmp_name),
        None => tmp_name.into(),
    };
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.write_all(b"\n")?;
    f.sync_all()?;
    drop(f);
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })
}
