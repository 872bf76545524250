//! In-process test substrate. A [`Cluster`] runs real TCP depot servers on
//! loopback ports, with kill/restart and an optional shared virtual clock.
//! A [`DatagramNet`] is a seeded discrete-event network for datagram frames,
//! with per-link latency, loss, duplication and reordering; [`run_datagram`]
//! drives a retransmitting sender against a depot over it.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, ManualClock, SystemClock};
use crate::depot::{Depot, DepotConfig};
use crate::nfu::NfuEngine;
use crate::server::{DepotServer, Dispatcher, ServerError, ServerOptions};
use crate::wire::{
    decode_frame, encode_frame, DatagramReceiver, FrameBody, OpFrame, Request, Response,
    RetransmitAction, RetransmitPolicy, UnackedOp,
};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("UnknownDepot: {0}")]
    UnknownDepot(usize),
    #[error("depot {0} is not running")]
    Down(usize),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error("script: {0}")]
    Script(String),
}

/// Per-link behaviour of the datagram network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkParams {
    pub latency_ms: u64,
    pub loss_rate: f64,
    pub dup_rate: f64,
    pub reorder_rate: f64,
}

impl Default for LinkParams {
    fn default() -> Self {
        LinkParams {
            latency_ms: 5,
            loss_rate: 0.0,
            dup_rate: 0.0,
            reorder_rate: 0.0,
        }
    }
}

#[derive(Clone)]
pub struct ClusterOptions {
    pub base: DepotConfig,
    /// Full replacement configs for individual depots; the listen address is
    /// always forced to an ephemeral loopback port.
    pub overrides: BTreeMap<usize, DepotConfig>,
    /// Share one [`ManualClock`] across all depots instead of real time.
    pub virtual_clock: bool,
    pub sweep_interval: Duration,
    pub engine: Option<Arc<NfuEngine>>,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            base: DepotConfig::default(),
            overrides: BTreeMap::new(),
            virtual_clock: false,
            sweep_interval: Duration::from_secs(1),
            engine: None,
        }
    }
}

struct Node {
    config: DepotConfig,
    server: Option<DepotServer>,
}

pub struct Cluster {
    nodes: Vec<Node>,
    clock: Arc<dyn Clock>,
    manual: Option<Arc<ManualClock>>,
    options: ClusterOptions,
    links: BTreeMap<(usize, usize), LinkParams>,
}

/// Starts `n` depots with default settings plus per-index overrides.
pub fn spawn_cluster(
    n: usize,
    overrides: BTreeMap<usize, DepotConfig>,
) -> Result<Cluster, SimError> {
    Cluster::spawn(
        n,
        ClusterOptions {
            overrides,
            ..ClusterOptions::default()
        },
    )
}

impl Cluster {
    pub fn spawn(n: usize, options: ClusterOptions) -> Result<Self, SimError> {
        let manual = options.virtual_clock.then(|| Arc::new(ManualClock::new(0)));
        let clock: Arc<dyn Clock> = match &manual {
            Some(m) => m.clone(),
            None => Arc::new(SystemClock::new()),
        };
        let mut cluster = Cluster {
            nodes: Vec::with_capacity(n),
            clock,
            manual,
            options,
            links: BTreeMap::new(),
        };
        for i in 0..n {
            let mut config = cluster
                .options
                .overrides
                .get(&i)
                .cloned()
                .unwrap_or_else(|| cluster.options.base.clone());
            config.listen_addr = "127.0.0.1:0".into();
            let server = cluster.start_server(config.clone())?;
            config.listen_addr = server.addr_string();
            cluster.nodes.push(Node {
                config,
                server: Some(server),
            });
        }
        Ok(cluster)
    }

    fn start_server(&self, config: DepotConfig) -> Result<DepotServer, SimError> {
        let options = ServerOptions {
            clock: self.clock.clone(),
            engine: self
                .options
                .engine
                .clone()
                .unwrap_or_else(|| Arc::new(NfuEngine::new())),
            sweep_interval: self.options.sweep_interval,
            remote_timeout_ms: 5_000,
        };
        Ok(DepotServer::start_with(config, options)?)
    }

    fn node(&self, i: usize) -> Result<&Node, SimError> {
        self.nodes.get(i).ok_or(SimError::UnknownDepot(i))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Addresses of every depot, running or not, in index order.
    pub fn addrs(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.config.listen_addr.clone()).collect()
    }

    pub fn addr(&self, i: usize) -> Result<String, SimError> {
        Ok(self.node(i)?.config.listen_addr.clone())
    }

    pub fn server(&self, i: usize) -> Result<&DepotServer, SimError> {
        self.node(i)?.server.as_ref().ok_or(SimError::Down(i))
    }

    pub fn depot(&self, i: usize) -> Result<&Arc<Depot>, SimError> {
        Ok(self.server(i)?.depot())
    }

    pub fn is_up(&self, i: usize) -> Result<bool, SimError> {
        Ok(self.node(i)?.server.is_some())
    }

    /// Stops a depot abruptly. Killing a stopped depot is a no-op.
    pub fn kill(&mut self, i: usize) -> Result<(), SimError> {
        let node = self.nodes.get_mut(i).ok_or(SimError::UnknownDepot(i))?;
        if let Some(server) = node.server.take() {
            server.kill();
        }
        Ok(())
    }

    /// Starts a fresh, empty depot on the same address. Restarting a running
    /// depot kills it first.
    pub fn restart(&mut self, i: usize) -> Result<(), SimError> {
        self.kill(i)?;
        let config = self.nodes[i].config.clone();
        let server = self.start_server(config)?;
        self.nodes[i].server = Some(server);
        Ok(())
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    pub fn manual_clock(&self) -> Option<&Arc<ManualClock>> {
        self.manual.as_ref()
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// Advances the virtual clock. Panics on a real-time cluster.
    pub fn advance_ms(&self, ms: u64) {
        self.manual
            .as_ref()
            .expect("advance_ms needs a virtual-clock cluster")
            .advance_ms(ms);
    }

    /// Runs a lease sweep on every live depot now, without waiting for the
    /// periodic sweeper.
    pub fn sweep_all(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| n.server.as_ref())
            .map(|s| s.depot().sweep())
            .sum()
    }

    /// Sets the datagram behaviour from node `src` to node `dst`. Node
    /// indices are shared with [`DatagramNet`] built by [`Self::datagram_net`].
    pub fn set_link(&mut self, src: usize, dst: usize, link: LinkParams) -> Result<(), SimError> {
        self.node(src)?;
        self.node(dst)?;
        self.links.insert((src, dst), link);
        Ok(())
    }

    pub fn link(&self, src: usize, dst: usize) -> LinkParams {
        self.links.get(&(src, dst)).copied().unwrap_or_default()
    }

    /// A datagram network carrying this cluster's link settings.
    pub fn datagram_net(&self, seed: u64) -> DatagramNet {
        let mut net = DatagramNet::new(seed);
        for (&(s, d), l) in &self.links {
            net.set_link(s, d, *l);
        }
        net
    }

    /// Applies script actions in time order. On a virtual-clock cluster the
    /// clock is advanced to each action's time; otherwise the caller's
    /// thread sleeps until it.
    pub fn run_script(&mut self, script: &Script) -> Result<(), SimError> {
        let mut actions = script.actions.clone();
        actions.sort_by_key(|a| a.at_ms);
        let start = self.now_ms();
        let real_start = std::time::Instant::now();
        for timed in actions {
            match &self.manual {
                Some(m) => {
                    let target = start + timed.at_ms;
                    let now = m.now_ms();
                    if target > now {
                        m.advance_ms(target - now);
                    }
                }
                None => {
                    let due = Duration::from_millis(timed.at_ms);
                    if let Some(wait) = due.checked_sub(real_start.elapsed()) {
                        std::thread::sleep(wait);
                    }
                }
            }
            self.apply(&timed.action)?;
        }
        Ok(())
    }

    pub fn apply(&mut self, action: &Action) -> Result<(), SimError> {
        match action {
            Action::Kill { depot } => self.kill(*depot),
            Action::Restart { depot } => self.restart(*depot),
            Action::SetLink { src, dst, link } => self.set_link(*src, *dst, *link),
            Action::Sweep => {
                self.sweep_all();
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Action {
    Kill {
        depot: usize,
    },
    Restart {
        depot: usize,
    },
    SetLink {
        src: usize,
        dst: usize,
        #[serde(flatten)]
        link: LinkParams,
    },
    Sweep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedAction {
    pub at_ms: u64,
    #[serde(flatten)]
    pub action: Action,
}

/// JSON list of timed actions, e.g.
/// `[{"at_ms":0,"action":"kill","depot":1}]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Script {
    pub actions: Vec<TimedAction>,
}

impl Script {
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::Script(e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum NetEventKind {
    Sent,
    Dropped,
    Duplicated,
    Reordered,
    Delivered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct NetEvent {
    pub at_ms: u64,
    pub kind: NetEventKind,
    pub src: usize,
    pub dst: usize,
    /// Per-send sequence number; copies of one send share it.
    pub msg: u64,
    pub op_id: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Datagram {
    pub src: usize,
    pub dst: usize,
    pub bytes: Vec<u8>,
}

/// Most copies the network makes of one datagram.
pub const MAX_COPIES: u32 = 5;

/// Seeded discrete-event datagram network. All randomness comes from one
/// ChaCha8 stream, and deliveries are ordered by (time, sequence), so a seed
/// and a sequence of `send` calls fully determine the delivery schedule.
pub struct DatagramNet {
    rng: ChaCha8Rng,
    now_ms: u64,
    next_msg: u64,
    next_copy: u64,
    queue: BinaryHeap<Reverse<(u64, u64)>>,
    in_flight: HashMap<u64, (u64, Datagram)>,
    links: BTreeMap<(usize, usize), LinkParams>,
    default_link: LinkParams,
    log: Vec<NetEvent>,
}

fn frame_op_id(bytes: &[u8]) -> Option<u64> {
    let id = bytes.get(4..12)?;
    (bytes.starts_with(crate::wire::MAGIC)).then(|| u64::from_be_bytes(id.try_into().unwrap()))
}

impl DatagramNet {
    pub fn new(seed: u64) -> Self {
        DatagramNet {
            rng: ChaCha8Rng::seed_from_u64(seed),
            now_ms: 0,
            next_msg: 0,
            next_copy: 0,
            queue: BinaryHeap::new(),
            in_flight: HashMap::new(),
            links: BTreeMap::new(),
            default_link: LinkParams::default(),
            log: Vec::new(),
        }
    }

    pub fn set_link(&mut self, src: usize, dst: usize, link: LinkParams) {
        self.links.insert((src, dst), link);
    }

    /// Applies `link` to every pair not set explicitly.
    pub fn set_default_link(&mut self, link: LinkParams) {
        self.default_link = link;
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    pub fn log(&self) -> &[NetEvent] {
        &self.log
    }

    pub fn in_flight(&self) -> usize {
        self.queue.len()
    }

    fn event(&mut self, kind: NetEventKind, src: usize, dst: usize, msg: u64, op_id: Option<u64>) {
        self.log.push(NetEvent {
            at_ms: self.now_ms,
            kind,
            src,
            dst,
            msg,
            op_id,
        });
    }

    pub fn send(&mut self, src: usize, dst: usize, bytes: Vec<u8>) {
        let link = self
            .links
            .get(&(src, dst))
            .copied()
            .unwrap_or(self.default_link);
        let msg = self.next_msg;
        self.next_msg += 1;
        let op_id = frame_op_id(&bytes);
        self.event(NetEventKind::Sent, src, dst, msg, op_id);
        if self.rng.gen_bool(link.loss_rate.clamp(0.0, 1.0)) {
            self.event(NetEventKind::Dropped, src, dst, msg, op_id);
            return;
        }
        let mut copies = 1;
        while copies < MAX_COPIES && self.rng.gen_bool(link.dup_rate.clamp(0.0, 1.0)) {
            copies += 1;
            self.event(NetEventKind::Duplicated, src, dst, msg, op_id);
        }
        for _ in 0..copies {
            let mut delay = link.latency_ms;
            if self.rng.gen_bool(link.reorder_rate.clamp(0.0, 1.0)) {
                // held back long enough to land behind later traffic
                delay += self.rng.gen_range(1..=3 * link.latency_ms + 50);
                self.event(NetEventKind::Reordered, src, dst, msg, op_id);
            }
            let copy = self.next_copy;
            self.next_copy += 1;
            self.queue.push(Reverse((self.now_ms + delay, copy)));
            self.in_flight.insert(
                copy,
                (
                    msg,
                    Datagram {
                        src,
                        dst,
                        bytes: bytes.clone(),
                    },
                ),
            );
        }
    }

    pub fn next_delivery_ms(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse((t, _))| *t)
    }

    /// Moves the clock forward to `t` (never backward).
    pub fn advance_to(&mut self, t: u64) {
        self.now_ms = self.now_ms.max(t);
    }

    /// Pops the next datagram due at or before the current time.
    pub fn poll(&mut self) -> Option<Datagram> {
        let Reverse((t, copy)) = *self.queue.peek()?;
        if t > self.now_ms {
            return None;
        }
        self.queue.pop();
        let (msg, d) = self.in_flight.remove(&copy).expect("queued copy is in flight");
        let op_id = frame_op_id(&d.bytes);
        self.event(NetEventKind::Delivered, d.src, d.dst, msg, op_id);
        Some(d)
    }
}

/// One operation of a datagram run; its op id is its index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatagramOp {
    pub deps: Vec<u64>,
    pub request: Request,
}

#[derive(Debug, Clone, Copy)]
pub struct RunConfig {
    pub policy: RetransmitPolicy,
    /// After a give-up, the caller issues the same op again under the same
    /// op id, up to this many times.
    pub reissues: u32,
    /// Virtual-time limit for the whole run.
    pub deadline_ms: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            policy: RetransmitPolicy::default(),
            reissues: 0,
            deadline_ms: 600_000,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    /// Final response per op, `None` for ops that ended in give-up.
    pub responses: Vec<Option<Response>>,
    /// Ops whose last issue ended in give-up.
    pub gave_up: Vec<u64>,
    /// Give-ups followed by a caller-level reissue.
    pub reissued: u64,
    /// Frames sent by the client, first sends included.
    pub client_sends: u64,
    /// Requests handed to the depot's executor.
    pub executions: u64,
    /// Frames the depot could not decode.
    pub undecodable: u64,
    pub end_ms: u64,
}

pub const CLIENT_NODE: usize = 0;
pub const DEPOT_NODE: usize = 1;

/// Sends every op at time 0 from [`CLIENT_NODE`] to a depot at
/// [`DEPOT_NODE`], retransmitting per `config.policy`, until each op has a
/// response or has given up. A `Held` acknowledgement resets the op's
/// attempt count: the depot has it and is waiting on dependencies.
pub fn run_datagram(
    net: &mut DatagramNet,
    dispatcher: &Dispatcher,
    ops: &[DatagramOp],
    config: RunConfig,
) -> RunOutcome {
    let mut receiver = DatagramReceiver::default();
    let mut outcome = RunOutcome {
        responses: vec![None; ops.len()],
        ..RunOutcome::default()
    };
    let frames: Vec<Vec<u8>> = ops
        .iter()
        .enumerate()
        .map(|(i, op)| {
            encode_frame(&OpFrame::request(i as u64, op.deps.clone(), op.request.clone()))
                .expect("op has at most MAX_DEPS dependencies")
        })
        .collect();
    let mut unacked: BTreeMap<u64, UnackedOp> = BTreeMap::new();
    let mut reissues: HashMap<u64, u32> = HashMap::new();
    for (i, f) in frames.iter().enumerate() {
        net.send(CLIENT_NODE, DEPOT_NODE, f.clone());
        outcome.client_sends += 1;
        unacked.insert(
            i as u64,
            UnackedOp {
                attempts: 1,
                last_sent_ms: net.now_ms(),
            },
        );
    }

    let interval = config.policy.interval_ms;
    loop {
        let next_timer = unacked.values().map(|u| u.last_sent_ms + interval).min();
        let next = match (net.next_delivery_ms(), next_timer) {
            (Some(a), Some(b)) => a.min(b),
            (Some(a), None) => a,
            (None, Some(b)) => b,
            (None, None) => break,
        };
        if next > config.deadline_ms {
            break;
        }
        net.advance_to(next);
        while let Some(d) = net.poll() {
            let Ok(frame) = decode_frame(&d.bytes) else {
                outcome.undecodable += 1;
                continue;
            };
            if d.dst == DEPOT_NODE {
                let mut exec = |req: &Request| {
                    outcome.executions += 1;
                    dispatcher.handle(req)
                };
                for reply in receiver.on_frame(frame, &mut exec) {
                    let bytes = encode_frame(&reply).expect("replies carry no deps");
                    net.send(DEPOT_NODE, CLIENT_NODE, bytes);
                }
            } else {
                let id = frame.op_id;
                match frame.body {
                    FrameBody::Response { response, .. } => {
                        if unacked.remove(&id).is_some() {
                            outcome.responses[id as usize] = Some(response);
                        }
                    }
                    FrameBody::Held => {
                        if let Some(u) = unacked.get_mut(&id) {
                            u.attempts = 1;
                        }
                    }
                    FrameBody::Request(_) => {}
                }
            }
        }
        let now = net.now_ms();
        let ids: Vec<u64> = unacked.keys().copied().collect();
        for id in ids {
            let u = unacked[&id];
            match config.policy.action(&u, now) {
                RetransmitAction::Wait => {}
                RetransmitAction::Resend => {
                    net.send(CLIENT_NODE, DEPOT_NODE, frames[id as usize].clone());
                    outcome.client_sends += 1;
                    unacked.insert(
                        id,
                        UnackedOp {
                            attempts: u.attempts + 1,
                            last_sent_ms: now,
                        },
                    );
                }
                RetransmitAction::GiveUp => {
                    let used = reissues.entry(id).or_insert(0);
                    if *used < config.reissues {
                        *used += 1;
                        outcome.reissued += 1;
                        net.send(CLIENT_NODE, DEPOT_NODE, frames[id as usize].clone());
                        outcome.client_sends += 1;
                        unacked.insert(
                            id,
                            UnackedOp {
                                attempts: 1,
                                last_sent_ms: now,
                            },
                        );
                    } else {
                        unacked.remove(&id);
                        outcome.gave_up.push(id);
                    }
                }
            }
        }
    }
    outcome.gave_up.extend(unacked.keys().copied());
    outcome.gave_up.sort_unstable();
    outcome.end_ms = net.now_ms();
    outcome
}
