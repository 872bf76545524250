//! Exposed buffer processing: leased byte buffers on network depots,
//! capability-gated transforms, a wire protocol, and the client-side tools
//! that aggregate depots into files.

pub mod capability;
pub mod client;
pub mod clock;
pub mod depot;
pub mod error;
pub mod exnode;
pub mod lodn;
pub mod lors;
pub mod nfu;
pub mod server;
pub mod simnet;
pub mod wire;

pub use capability::{CapKey, CapKind, CapParseError, CapSet, Capability};
pub use client::{ClientError, Session, Traffic, PIECE_SIZE};
pub use clock::{Clock, ManualClock, SystemClock};
pub use depot::{
    AllocSummary, Depot, DepotConfig, DepotStats, Hardness, Loaded, ProbeInfo, TierCounts,
};
pub use error::{DepotError, ErrorCode};
pub use exnode::{ExNode, ExNodeError, Extent, Replica, Violation};
pub use lodn::{LodnError, Policy, Scheduler, TickReport};
pub use lors::{Lors, LorsError, RepairReport, UploadOptions};
pub use nfu::{
    NfuEngine, NfuError, OutputsState, ResourceBudget, TransformResult, TransformSpec,
    TransformStatus,
};
pub use server::{DepotServer, Dispatcher, ServerError, ServerOptions};
pub use simnet::{Cluster, ClusterOptions, DatagramNet, LinkParams, SimError};
pub use wire::WireError;
