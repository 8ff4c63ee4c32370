//! Deterministic discrete-event simulator.
//!
//! Each round is a clustering epoch followed by a data period. Events are
//! processed in `(time, seq)` order; all randomness comes from per-purpose
//! ChaCha8 streams derived from the run seed, so a seed fixes the full trace.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mobility::{sense_velocity, step_kinematics, Kinematics, Vec2, World};
use crate::overlay::{build_overlay, forward_aggregate, ForwardResult, HopTransport, Overlay, OverlayInput, Segment, SinkSite};
use crate::protocol::{
    max_iterations, Announcement, AnnouncementKind, FailureAction, NeighborEntry, NodeId, NodeState, ProtocolConfig,
    ProtocolError, Role,
};
use crate::radio::{Band, EnergyLedger, Liveness, PowerTable, RadioError};
use crate::scenario::{FailureMode, ScenarioConfig};
use crate::trace::{Endpoint, Outcome, Trace};

/// RNG stream numbers.
mod stream {
    pub const TOPOLOGY: u64 = 0;
    pub const SENSING: u64 = 2;
    pub const PROTOCOL: u64 = 3;
    pub const LOSS: u64 = 4;
    pub const FAILURE: u64 = 5;
    pub const MOBILITY_BASE: u64 = 1 << 32;
}

/// Data attempts per frame before it is counted lost.
pub const MAX_ATTEMPTS: u32 = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invariant violated ({property}): {detail}")]
    Invariant { property: &'static str, detail: String },
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("duplicate failure injection for node {node} at t={time}")]
    DuplicateInjection { node: NodeId, time: f64 },
    #[error("simulation has finished")]
    Finished,
    #[error(transparent)]
    Radio(#[from] RadioError),
}

fn violation(property: &'static str, detail: impl Into<String>) -> EngineError {
    EngineError::Invariant {
        property,
        detail: detail.into(),
    }
}

fn protocol_violation(property: &'static str, e: ProtocolError) -> EngineError {
    violation(property, e.to_string())
}

/// Timing of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundSchedule {
    /// Length of the clustering epoch, seconds.
    pub t_cluster: f64,
    /// Length of the data period, seconds.
    pub t_p: f64,
    pub frames_per_round: u32,
    /// Defaults to one frame duration.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ack_timeout: Option<f64>,
}

impl Default for RoundSchedule {
    fn default() -> Self {
        Self {
            t_cluster: 1.0,
            t_p: 10.0,
            frames_per_round: 10,
            ack_timeout: None,
        }
    }
}

impl RoundSchedule {
    pub fn frame_duration(&self) -> f64 {
        self.t_p / self.frames_per_round as f64
    }

    pub fn ack_timeout(&self) -> f64 {
        self.ack_timeout.unwrap_or_else(|| self.frame_duration())
    }

    /// Epoch, data period, and room for the last frame's retries.
    pub fn round_length(&self) -> f64 {
        self.t_cluster + self.t_p + MAX_ATTEMPTS as f64 * self.ack_timeout()
    }

    /// Spacing of the clustering-epoch steps.
    pub fn slot(&self, iteration_limit: u32) -> f64 {
        self.t_cluster / (iteration_limit as f64 + 4.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dest {
    Unicast(NodeId),
    Broadcast,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Control(Announcement),
    Data { origin: NodeId, frame: u32 },
    Ack { frame: u32 },
    Heartbeat { frame: u32 },
}

impl Payload {
    fn label(&self) -> &'static str {
        match self {
            Payload::Control(a) => a.kind.as_str(),
            Payload::Data { .. } => "data",
            Payload::Ack { .. } => "ack",
            Payload::Heartbeat { .. } => "heartbeat",
        }
    }
}

fn kind_label(prefix: &str, label: &str) -> &'static str {
    macro_rules! table {
        ($($l:literal),*) => {
            match (prefix, label) {
                $(("tx", $l) => concat!("tx.", $l), ("rx", $l) => concat!("rx.", $l), ("drop", $l) => concat!("drop.", $l),)*
                _ => "other",
            }
        };
    }
    table!("tentative_ch", "final_ch", "join", "ach_decl", "cost_velocity", "data", "ack", "heartbeat", "aggregate", "hello")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    pub from: NodeId,
    pub dest: Dest,
    pub level: usize,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Timer {
    Phase2Step(u32),
    Finalize,
    SelectAch,
    VerifyClusters,
    Frame(u32),
    AckCheck { node: NodeId, frame: u32 },
    HeartbeatCheck { ach: NodeId, ch: NodeId, frame: u32 },
    RoundEnd,
}

#[derive(Debug, Clone, PartialEq)]
enum EventKind {
    Deliver(Transmission),
    Timer(Timer),
    MoveStep,
    RoundBoundary(u32),
    InjectFailure { node: NodeId, mode: FailureMode },
}

#[derive(Debug, Clone)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other.time.total_cmp(&self.time).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Debug, Clone)]
pub struct SimNode {
    pub id: NodeId,
    pub kin: Kinematics,
    pub state: NodeState,
    pub crashed: bool,
    /// Velocity reported by the motion sensor at the last round boundary.
    pub sensed: Vec2,
    mob_rng: ChaCha8Rng,
    inbox: Vec<Announcement>,
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub geometry: World,
    pub nodes: Vec<SimNode>,
    pub ledger: EnergyLedger,
    pub sink: SinkSite,
    pub clock: f64,
}

impl WorldState {
    pub fn is_alive(&self, id: NodeId) -> bool {
        self.nodes
            .get(id.0 as usize)
            .map(|n| !n.crashed && self.ledger.is_alive(id))
            .unwrap_or(false)
    }

    pub fn node(&self, id: NodeId) -> &SimNode {
        &self.nodes[id.0 as usize]
    }

    pub fn position(&self, id: NodeId) -> Vec2 {
        if id == self.sink.id {
            self.sink.position
        } else {
            self.nodes[id.0 as usize].kin.position
        }
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.nodes.iter().map(|n| n.kin.position).collect()
    }

    pub fn alive_mask(&self) -> Vec<bool> {
        self.nodes.iter().map(|n| self.is_alive(n.id)).collect()
    }
}

/// Neighbour lists for every node: alive nodes within the largest intra-cluster
/// range, with the minimal intra level and sensed relative speed. Dead nodes get
/// an empty list.
pub fn discover_neighbors(world: &WorldState, table: &PowerTable) -> Vec<Vec<NeighborEntry>> {
    let range = table.max_range(Band::Intra);
    let alive = world.alive_mask();
    let mut out = vec![Vec::new(); world.nodes.len()];
    for (i, a) in world.nodes.iter().enumerate() {
        if !alive[i] {
            continue;
        }
        for (j, b) in world.nodes.iter().enumerate() {
            if i == j || !alive[j] {
                continue;
            }
            let d = a.kin.position.distance(b.kin.position);
            if d <= range {
                let level = table.min_power_level(d, Band::Intra).expect("within intra range");
                let speed = (a.sensed - b.sensed).norm();
                out[i].push(NeighborEntry::new(b.id, level, speed));
            }
        }
    }
    out
}

/// Global view of the clusters after an epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSnapshot {
    pub round: u32,
    pub chs: Vec<NodeId>,
    /// Member to cluster head.
    pub membership: BTreeMap<NodeId, NodeId>,
    /// Cluster head to assistant.
    pub ach: BTreeMap<NodeId, NodeId>,
    /// Largest Phase II iteration count over all nodes.
    pub max_iterations_observed: u32,
    pub iteration_limit: u32,
}

impl ClusterSnapshot {
    /// Build the snapshot from the states of alive nodes and check the
    /// termination, coverage and uniqueness properties.
    pub fn verify<'a>(round: u32, alive: impl IntoIterator<Item = &'a NodeState>, iteration_limit: u32) -> Result<Self, EngineError> {
        let states: Vec<&NodeState> = alive.into_iter().collect();
        let alive_ids: BTreeSet<NodeId> = states.iter().map(|s| s.me).collect();
        let mut chs = Vec::new();
        let mut membership = BTreeMap::new();
        let mut ach = BTreeMap::new();
        let mut max_it = 0;
        for s in &states {
            max_it = max_it.max(s.iteration);
            if s.iteration > iteration_limit || !s.phase2_done {
                return Err(violation(
                    "termination bound",
                    format!("node {} ran {} iterations (bound {}), done={}", s.me, s.iteration, iteration_limit, s.phase2_done),
                ));
            }
            match (s.role, s.my_ch) {
                (Role::FinalCh, Some(ch)) if ch == s.me => {
                    chs.push(s.me);
                    if let Some(a) = s.my_ach {
                        ach.insert(s.me, a);
                    }
                }
                (Role::Member, Some(ch)) if ch != s.me => {
                    membership.insert(s.me, ch);
                }
                _ => {
                    return Err(violation(
                        "coverage",
                        format!("node {} ended as {:?} with cluster head {:?}", s.me, s.role, s.my_ch),
                    ))
                }
            }
        }
        let ch_set: BTreeSet<NodeId> = chs.iter().copied().collect();
        let by_id: BTreeMap<NodeId, &NodeState> = states.iter().map(|s| (s.me, *s)).collect();
        for (m, ch) in &membership {
            let head_ok = by_id.get(ch).map(|s| s.role == Role::FinalCh).unwrap_or(true);
            if !head_ok {
                return Err(violation("coverage", format!("node {m} joined {ch}, which is not a final cluster head")));
            }
        }
        let mut listed: BTreeMap<NodeId, NodeId> = BTreeMap::new();
        for ch in &chs {
            for entry in &by_id[ch].l_members {
                if !alive_ids.contains(&entry.id) {
                    continue;
                }
                if ch_set.contains(&entry.id) {
                    return Err(violation("uniqueness", format!("cluster head {} is listed as a member of {ch}", entry.id)));
                }
                if let Some(other) = listed.insert(entry.id, *ch) {
                    return Err(violation("uniqueness", format!("node {} is a member of both {other} and {ch}", entry.id)));
                }
                if membership.get(&entry.id) != Some(ch) {
                    return Err(violation(
                        "uniqueness",
                        format!("{ch} lists {} but that node follows {:?}", entry.id, membership.get(&entry.id)),
                    ));
                }
            }
        }
        for (ch, a) in &ach {
            if !by_id[ch].l_members.iter().any(|m| m.id == *a) {
                return Err(violation("assistant", format!("assistant {a} of {ch} is not one of its members")));
            }
        }
        Ok(ClusterSnapshot {
            round,
            chs,
            membership,
            ach,
            max_iterations_observed: max_it,
            iteration_limit,
        })
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes: BTreeMap<NodeId, usize> = self.chs.iter().map(|c| (*c, 1)).collect();
        for ch in self.membership.values() {
            if let Some(s) = sizes.get_mut(ch) {
                *s += 1;
            }
        }
        sizes.into_values().collect()
    }
}

/// How one member fared after its cluster head failed mid-round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemberImpact {
    pub id: NodeId,
    /// The assistant was alive and within intra-cluster range at failure time.
    pub ach_reachable: bool,
    /// Frames from the failure frame onward that were lost.
    pub lost_frames: u32,
    /// Lost frames after the failure frame.
    pub lost_after_failure_frame: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureImpact {
    pub node: NodeId,
    pub time: f64,
    /// First frame that could not reach the failed head.
    pub frame: u32,
    pub ach: Option<NodeId>,
    pub members: Vec<MemberImpact>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    pub snapshot: ClusterSnapshot,
    pub frames_sent: u32,
    pub frames_delivered: u32,
    /// `(member, frame) -> delivered`.
    pub frame_status: BTreeMap<(NodeId, u32), bool>,
    pub aggregates_sent: u32,
    pub aggregates_delivered: u32,
    pub energy_consumed_fj: u128,
    pub alive_count: u32,
    pub orphan_count: u32,
    pub failures: Vec<FailureImpact>,
    pub promotions: u32,
    /// Frames lost by members of failed cluster heads.
    pub recovery_frames_lost: u32,
}

impl RoundReport {
    pub fn delivery_ratio(&self) -> f64 {
        if self.frames_sent == 0 {
            1.0
        } else {
            self.frames_delivered as f64 / self.frames_sent as f64
        }
    }

    pub fn aggregate_delivery_ratio(&self) -> f64 {
        if self.aggregates_sent == 0 {
            1.0
        } else {
            self.aggregates_delivered as f64 / self.aggregates_sent as f64
        }
    }
}

#[derive(Debug, Clone)]
struct Pending {
    target: NodeId,
    attempts: u32,
    acked: bool,
}

#[derive(Debug, Clone)]
struct PendingFailure {
    node: NodeId,
    time: f64,
    frame: u32,
    ach: Option<NodeId>,
    members: Vec<(NodeId, bool)>,
}

/// Per-round bookkeeping.
#[derive(Debug, Clone, Default)]
struct RoundState {
    start: f64,
    data_start: f64,
    epoch_done: bool,
    buffering: bool,
    frame_status: BTreeMap<(NodeId, u32), bool>,
    pending: BTreeMap<(NodeId, u32), Pending>,
    heartbeats: BTreeSet<(NodeId, u32)>,
    unreachable: BTreeSet<(NodeId, NodeId)>,
    failures: Vec<PendingFailure>,
    promotions: u32,
    energy_at_start: u128,
    current_frame: u32,
}

pub struct Simulation {
    cfg: ScenarioConfig,
    protocol: ProtocolConfig,
    schedule: RoundSchedule,
    iteration_limit: u32,
    slot: f64,
    delay: f64,
    world: WorldState,
    trace: Trace,
    queue: BinaryHeap<Event>,
    next_seq: u64,
    injections: BTreeSet<(NodeId, u64)>,
    sensing_rng: ChaCha8Rng,
    protocol_rng: ChaCha8Rng,
    loss_rng: ChaCha8Rng,
    failure_rng: ChaCha8Rng,
    last_move: f64,
    round: u32,
    rs: RoundState,
    overlay: Option<Overlay>,
    snapshot: Option<ClusterSnapshot>,
    reports: Vec<RoundReport>,
    finished: bool,
    pending_error: Option<EngineError>,
}

impl Simulation {
    pub fn new(cfg: &ScenarioConfig, seed: u64, trace_enabled: bool) -> Result<Self, EngineError> {
        cfg.validate().map_err(|e| EngineError::Config(e.to_string()))?;
        let mut protocol = cfg.protocol.clone();
        protocol.power_levels_mw = cfg.power.levels.iter().map(|l| l.tx_power_mw).collect();
        let schedule = cfg.schedule.clone();
        let iteration_limit = max_iterations(protocol.p_min).map_err(|e| EngineError::Config(e.to_string()))?;
        let slot = schedule.slot(iteration_limit);
        let delay = slot.min(schedule.ack_timeout()) / 8.0;
        let geometry = cfg.world.world();

        let mut topo = rng_for(seed, stream::TOPOLOGY);
        let positions: Vec<Vec2> = match &cfg.positions {
            Some(p) => p.iter().map(|&a| a.into()).collect(),
            None => (0..cfg.node_count)
                .map(|_| {
                    let x = topo.random::<f64>() * geometry.width;
                    let y = topo.random::<f64>() * geometry.height;
                    Vec2::new(x, y)
                })
                .collect(),
        };
        let f = cfg.energy.initial_min_fraction;
        let initial: Vec<f64> = (0..cfg.node_count)
            .map(|_| protocol.e_max * (f + (1.0 - f) * topo.random::<f64>()))
            .collect();
        let nodes = positions
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                let id = NodeId(i as u32);
                let mut mob_rng = rng_for(seed, stream::MOBILITY_BASE + i as u64);
                let kin = Kinematics::spawn(p, &cfg.mobility, &geometry, &mut mob_rng);
                SimNode {
                    id,
                    kin,
                    state: NodeState::unclustered(id),
                    crashed: false,
                    sensed: Vec2::ZERO,
                    mob_rng,
                    inbox: Vec::new(),
                }
            })
            .collect();
        let world = WorldState {
            geometry,
            nodes,
            ledger: EnergyLedger::new(&initial, protocol.e_max),
            sink: SinkSite {
                id: NodeId(cfg.node_count as u32),
                position: cfg.world.sink_position().into(),
            },
            clock: 0.0,
        };
        let mut sim = Simulation {
            cfg: cfg.clone(),
            protocol,
            schedule,
            iteration_limit,
            slot,
            delay,
            world,
            trace: Trace::new(trace_enabled),
            queue: BinaryHeap::new(),
            next_seq: 0,
            injections: BTreeSet::new(),
            sensing_rng: rng_for(seed, stream::SENSING),
            protocol_rng: rng_for(seed, stream::PROTOCOL),
            loss_rng: rng_for(seed, stream::LOSS),
            failure_rng: rng_for(seed, stream::FAILURE),
            last_move: 0.0,
            round: 0,
            rs: RoundState::default(),
            overlay: None,
            snapshot: None,
            reports: Vec::new(),
            finished: false,
            pending_error: None,
        };
        for f in &cfg.failures {
            sim.inject_failure(NodeId(f.node), f.time, f.mode)?;
        }
        sim.push(0.0, EventKind::RoundBoundary(0));
        Ok(sim)
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn world_mut(&mut self) -> &mut WorldState {
        &mut self.world
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn overlay(&self) -> Option<&Overlay> {
        self.overlay.as_ref()
    }

    pub fn snapshot(&self) -> Option<&ClusterSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }

    pub fn schedule(&self) -> &RoundSchedule {
        &self.schedule
    }

    pub fn iteration_limit(&self) -> u32 {
        self.iteration_limit
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Schedule a crash or battery drain of `node` at `time`.
    pub fn inject_failure(&mut self, node: NodeId, time: f64, mode: FailureMode) -> Result<(), EngineError> {
        if node.0 as usize >= self.world.nodes.len() {
            return Err(EngineError::UnknownNode(node));
        }
        if !self.injections.insert((node, time.to_bits())) {
            return Err(EngineError::DuplicateInjection { node, time });
        }
        self.push(time, EventKind::InjectFailure { node, mode });
        Ok(())
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Event { time, seq, kind });
    }

    fn timer(&mut self, time: f64, t: Timer) {
        self.push(time, EventKind::Timer(t));
    }

    /// Process one event. Returns false once the queue is exhausted.
    pub fn step(&mut self) -> Result<bool, EngineError> {
        let Some(ev) = self.queue.pop() else {
            self.finished = true;
            return Ok(false);
        };
        debug_assert!(ev.time >= self.world.clock);
        self.world.clock = ev.time;
        match ev.kind {
            EventKind::Deliver(tx) => self.on_deliver(tx)?,
            EventKind::Timer(t) => self.on_timer(t)?,
            EventKind::MoveStep => self.move_nodes(),
            EventKind::RoundBoundary(r) => self.on_round_boundary(r)?,
            EventKind::InjectFailure { node, mode } => self.on_failure(node, mode)?,
        }
        Ok(true)
    }

    /// Run until the current round's clusters are formed and verified.
    pub fn run_clustering_epoch(&mut self) -> Result<ClusterSnapshot, EngineError> {
        let target = self.reports.len();
        loop {
            if self.rs.epoch_done && self.reports.len() == target && self.snapshot.as_ref().map(|s| s.round) == Some(self.round) {
                return Ok(self.snapshot.clone().expect("epoch done"));
            }
            if !self.step()? {
                return Err(EngineError::Finished);
            }
        }
    }

    /// Run until the current round ends.
    pub fn run_data_round(&mut self) -> Result<RoundReport, EngineError> {
        let target = self.reports.len() + 1;
        while self.reports.len() < target {
            if !self.step()? {
                return Err(EngineError::Finished);
            }
        }
        Ok(self.reports.last().cloned().expect("round reported"))
    }

    /// Run every configured round.
    pub fn run(&mut self) -> Result<Vec<RoundReport>, EngineError> {
        while self.step()? {}
        Ok(self.reports.clone())
    }

    // ---- energy and trace ----

    fn debit(&mut self, node: NodeId, joules: f64, kind: &'static str, dst: Endpoint, outcome: Outcome) -> Result<(), EngineError> {
        let (liveness, taken) = self.world.ledger.consume(node, joules)?;
        let t = self.world.clock;
        self.trace.push(t, kind, Some(node), dst, outcome, taken);
        if taken > 0 && liveness == Liveness::Died {
            self.trace.push(t, "event.depleted", Some(node), Endpoint::None, Outcome::Died, 0);
        }
        Ok(())
    }

    fn note(&mut self, kind: &'static str, src: Option<NodeId>, dst: Endpoint, outcome: Outcome) {
        self.trace.push(self.world.clock, kind, src, dst, outcome, 0);
    }

    fn bits(&self, payload: &Payload) -> u64 {
        match payload {
            Payload::Data { .. } => self.cfg.traffic.data_bits,
            _ => self.cfg.traffic.control_bits,
        }
    }

    fn intra_level(&self) -> usize {
        self.cfg.power.max_level(Band::Intra)
    }

    // ---- transmission ----

    fn send(&mut self, from: NodeId, dest: Dest, level: usize, payload: Payload) -> Result<(), EngineError> {
        if !self.world.is_alive(from) {
            return Ok(());
        }
        let bits = self.bits(&payload);
        let e = self.cfg.energy.model().tx_energy(bits, self.cfg.power.range(level))?;
        let dst = match dest {
            Dest::Unicast(id) => Endpoint::Node(id),
            Dest::Broadcast => Endpoint::Broadcast,
        };
        self.debit(from, e, kind_label("tx", payload.label()), dst, Outcome::Ok)?;
        let at = self.world.clock + self.delay;
        self.push(at, EventKind::Deliver(Transmission { from, dest, level, payload }));
        Ok(())
    }

    fn lost_to_channel(&mut self) -> bool {
        let p = self.cfg.p_loss;
        p > 0.0 && self.loss_rng.random::<f64>() < p
    }

    /// Reception check for one receiver; charges RX energy on success.
    fn receive(&mut self, from: NodeId, to: NodeId, level: usize, label: &str, bits: u64, report_drops: bool) -> Result<bool, EngineError> {
        let outcome = if !self.world.is_alive(from) || !self.world.is_alive(to) {
            Outcome::LostDead
        } else if !self.cfg.power.in_range(self.world.position(from), self.world.position(to), level) {
            Outcome::LostRange
        } else if self.lost_to_channel() {
            Outcome::LostChannel
        } else {
            Outcome::Ok
        };
        if outcome == Outcome::Ok {
            let e = self.cfg.energy.model().rx_energy(bits)?;
            self.debit(to, e, kind_label("rx", label), Endpoint::Node(to), Outcome::Ok)?;
            Ok(true)
        } else {
            if report_drops {
                self.trace.push(self.world.clock, kind_label("drop", label), Some(from), Endpoint::Node(to), outcome, 0);
            }
            Ok(false)
        }
    }

    fn on_deliver(&mut self, tx: Transmission) -> Result<(), EngineError> {
        let bits = self.bits(&tx.payload);
        let label = tx.payload.label();
        match tx.dest {
            Dest::Unicast(to) => {
                if self.receive(tx.from, to, tx.level, label, bits, true)? {
                    self.handle(to, tx.from, &tx.payload)?;
                }
            }
            Dest::Broadcast => {
                if !self.world.is_alive(tx.from) {
                    return Ok(());
                }
                let src = self.world.position(tx.from);
                let table = &self.cfg.power;
                let receivers: Vec<NodeId> = self
                    .world
                    .nodes
                    .iter()
                    .filter(|n| n.id != tx.from && self.world.is_alive(n.id) && table.in_range(src, n.kin.position, tx.level))
                    .map(|n| n.id)
                    .collect();
                for to in receivers {
                    if self.receive(tx.from, to, tx.level, label, bits, false)? {
                        self.handle(to, tx.from, &tx.payload)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn handle(&mut self, me: NodeId, from: NodeId, payload: &Payload) -> Result<(), EngineError> {
        match payload {
            Payload::Control(ann) => {
                if self.rs.buffering {
                    self.world.nodes[me.0 as usize].inbox.push(ann.clone());
                } else {
                    self.apply_control(me, ann)?;
                }
            }
            Payload::Data { origin, frame } => {
                if self.world.node(me).state.accepts_data() {
                    if let Some(s) = self.rs.frame_status.get_mut(&(*origin, *frame)) {
                        *s = true;
                    }
                    let level = self.intra_level();
                    self.send(me, Dest::Unicast(from), level, Payload::Ack { frame: *frame })?;
                }
            }
            Payload::Ack { frame } => {
                if let Some(p) = self.rs.pending.get_mut(&(me, *frame)) {
                    if p.target == from {
                        p.acked = true;
                    }
                }
            }
            Payload::Heartbeat { frame } => {
                self.rs.heartbeats.insert((me, *frame));
            }
        }
        Ok(())
    }

    fn apply_control(&mut self, me: NodeId, ann: &Announcement) -> Result<(), EngineError> {
        let changed = self.world.nodes[me.0 as usize].state.receive_message(ann);
        match ann.kind {
            AnnouncementKind::AchDecl => {
                let st = &self.world.node(me).state;
                if st.is_ach && st.my_ch == Some(ann.sender) {
                    let members = self.world.node(ann.sender).state.l_members.clone();
                    self.world.nodes[me.0 as usize].state.adopt_standby(ann.sender, &members);
                }
            }
            AnnouncementKind::Join if changed => {
                // Keep the assistant's copy of the membership current.
                let st = &self.world.node(me).state;
                if let Some(ach) = st.my_ach {
                    let decl = Announcement::ach_decl(me, st.cost, ach);
                    let level = self.intra_level();
                    self.send(me, Dest::Broadcast, level, Payload::Control(decl))?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn broadcast_all(&mut self, from: NodeId, anns: Vec<Announcement>) -> Result<(), EngineError> {
        let level = self.intra_level();
        for a in anns {
            let dest = match a.kind {
                AnnouncementKind::Join => Dest::Unicast(a.payload.expect("join names its head")),
                _ => Dest::Broadcast,
            };
            self.send(from, dest, level, Payload::Control(a))?;
        }
        Ok(())
    }

    fn alive_ids(&self) -> Vec<NodeId> {
        self.world.nodes.iter().map(|n| n.id).filter(|&id| self.world.is_alive(id)).collect()
    }

    // ---- mobility ----

    fn move_nodes(&mut self) {
        let now = self.world.clock;
        let dt = now - self.last_move;
        if dt > 0.0 {
            let cfg = &self.cfg.mobility;
            let geometry = self.world.geometry;
            let from = self.last_move;
            for n in &mut self.world.nodes {
                n.kin = step_kinematics(&n.kin, cfg, &geometry, from, dt, &mut n.mob_rng);
            }
        }
        self.last_move = now;
    }

    // ---- clustering epoch ----

    fn on_round_boundary(&mut self, round: u32) -> Result<(), EngineError> {
        self.round = round;
        self.move_nodes();
        let now = self.world.clock;
        self.rs = RoundState {
            start: now,
            data_start: now + self.schedule.t_cluster,
            buffering: true,
            energy_at_start: self.world.ledger.total_debited_fj(),
            ..RoundState::default()
        };
        self.overlay = None;
        self.note("event.round_boundary", None, Endpoint::None, Outcome::None);

        let noise = self.cfg.mobility.sensing_noise;
        for n in &mut self.world.nodes {
            n.sensed = sense_velocity(&n.kin, noise, &mut self.sensing_rng);
            n.state = NodeState::unclustered(n.id);
            n.inbox.clear();
        }

        // Hello exchange: deterministic, lossless, charged to every participant.
        let neighbors = discover_neighbors(&self.world, &self.cfg.power);
        let model = self.cfg.energy.model();
        let bits = self.cfg.traffic.control_bits;
        let tx = model.tx_energy(bits, self.cfg.power.max_range(Band::Intra))?;
        let rx = model.rx_energy(bits)?;
        let alive = self.alive_ids();
        for &id in &alive {
            self.debit(id, tx, "tx.hello", Endpoint::Broadcast, Outcome::Ok)?;
        }
        for &id in &alive {
            for nb in &neighbors[id.0 as usize] {
                self.debit(nb.id, rx, "rx.hello", Endpoint::Node(nb.id), Outcome::Ok)?;
            }
        }

        let mut neighbors = neighbors;
        for &id in &alive {
            if !self.world.is_alive(id) {
                continue;
            }
            let list = std::mem::take(&mut neighbors[id.0 as usize]);
            let e_res = self.world.ledger.e_res(id);
            let velocity = self.world.node(id).sensed.to_array();
            let (state, ann) = NodeState::init_phase1(id, list, &self.protocol, e_res, velocity)
                .map_err(|e| protocol_violation("phase I", e))?;
            self.world.nodes[id.0 as usize].state = state;
            self.broadcast_all(id, vec![ann])?;
        }

        for i in 0..self.iteration_limit {
            self.timer(now + (i as f64 + 1.0) * self.slot, Timer::Phase2Step(i));
        }
        let base = now + (self.iteration_limit as f64 + 1.0) * self.slot;
        self.timer(base, Timer::Finalize);
        self.timer(base + self.slot, Timer::SelectAch);
        self.timer(base + 2.0 * self.slot, Timer::VerifyClusters);
        Ok(())
    }

    fn on_timer(&mut self, t: Timer) -> Result<(), EngineError> {
        match t {
            Timer::Phase2Step(_) => self.phase2_step(),
            Timer::Finalize => self.finalize(),
            Timer::SelectAch => self.select_achs(),
            Timer::VerifyClusters => self.verify_clusters(),
            Timer::Frame(k) => self.frame(k),
            Timer::AckCheck { node, frame } => self.ack_check(node, frame),
            Timer::HeartbeatCheck { ach, ch, frame } => self.heartbeat_check(ach, ch, frame),
            Timer::RoundEnd => self.round_end(),
        }
    }

    fn phase2_step(&mut self) -> Result<(), EngineError> {
        for id in self.alive_ids() {
            let node = &mut self.world.nodes[id.0 as usize];
            let inbox = std::mem::take(&mut node.inbox);
            if node.state.phase2_done {
                for a in &inbox {
                    node.state.receive_message(a);
                }
                continue;
            }
            let draw = self.protocol_rng.random::<f64>();
            let step = node
                .state
                .step_phase2(&inbox, draw)
                .map_err(|e| protocol_violation("termination bound", e))?;
            self.broadcast_all(id, step.outbox)?;
        }
        Ok(())
    }

    fn finalize(&mut self) -> Result<(), EngineError> {
        let alive = self.alive_ids();
        for &id in &alive {
            let node = &mut self.world.nodes[id.0 as usize];
            for a in std::mem::take(&mut node.inbox) {
                node.state.receive_message(&a);
            }
        }
        self.rs.buffering = false;
        for id in alive {
            let out = self.world.nodes[id.0 as usize]
                .state
                .finalize_phase3()
                .map_err(|e| protocol_violation("termination bound", e))?;
            self.broadcast_all(id, out)?;
        }
        Ok(())
    }

    fn select_achs(&mut self) -> Result<(), EngineError> {
        if !self.protocol.ach_active() {
            return Ok(());
        }
        for id in self.alive_ids() {
            let st = &mut self.world.nodes[id.0 as usize].state;
            if st.role != Role::FinalCh {
                continue;
            }
            if let Some(decl) = st.select_ach().map_err(|e| protocol_violation("assistant", e))? {
                self.broadcast_all(id, vec![decl])?;
            }
        }
        Ok(())
    }

    fn verify_clusters(&mut self) -> Result<(), EngineError> {
        let alive = self.alive_ids();
        let snapshot = ClusterSnapshot::verify(
            self.round,
            alive.iter().map(|id| &self.world.node(*id).state),
            self.iteration_limit,
        )?;
        let positions = self.world.positions();
        let mask = self.world.alive_mask();
        let overlay = build_overlay(&OverlayInput {
            chs: &snapshot.chs,
            positions: &positions,
            alive: &mask,
            sink: self.world.sink,
            table: &self.cfg.power,
            guards: self.cfg.guards,
        });
        self.overlay = Some(overlay);
        self.note("event.clusters_formed", None, Endpoint::None, Outcome::None);

        if self.cfg.failure_policy.crash_ch_each_round {
            let candidates: Vec<NodeId> = snapshot
                .chs
                .iter()
                .copied()
                .filter(|ch| snapshot.membership.values().any(|c| c == ch))
                .collect();
            if !candidates.is_empty() {
                let pick = candidates[self.failure_rng.random_range(0..candidates.len())];
                let at = self.rs.data_start + self.cfg.failure_policy.at_frame as f64 * self.schedule.frame_duration();
                // A scripted failure may already target this node and time.
                if self.injections.insert((pick, at.to_bits())) {
                    self.push(at, EventKind::InjectFailure { node: pick, mode: FailureMode::Crash });
                }
            }
        }

        self.snapshot = Some(snapshot);
        self.rs.epoch_done = true;
        self.timer(self.rs.data_start, Timer::Frame(0));
        self.timer(self.rs.start + self.schedule.round_length(), Timer::RoundEnd);
        Ok(())
    }

    // ---- data period ----

    fn frame(&mut self, k: u32) -> Result<(), EngineError> {
        let now = self.world.clock;
        self.rs.current_frame = k;
        let timeout = self.schedule.ack_timeout();
        let level = self.intra_level();
        for id in self.alive_ids() {
            let st = &self.world.node(id).state;
            match st.role {
                Role::FinalCh => {
                    if let Some(ach) = st.my_ach {
                        self.send(id, Dest::Unicast(ach), level, Payload::Heartbeat { frame: k })?;
                    }
                }
                Role::Member => {
                    if let (true, Some(ch)) = (st.is_ach, st.my_ch) {
                        // Checked before this node's own data so a promotion settles it.
                        self.timer(now + timeout, Timer::HeartbeatCheck { ach: id, ch, frame: k });
                    }
                    let st = &self.world.node(id).state;
                    self.rs.frame_status.insert((id, k), false);
                    if let Some(target) = st.data_target() {
                        self.rs.pending.insert((id, k), Pending { target, attempts: 1, acked: false });
                        self.send(id, Dest::Unicast(target), level, Payload::Data { origin: id, frame: k })?;
                        self.timer(now + timeout, Timer::AckCheck { node: id, frame: k });
                    }
                }
                _ => {}
            }
        }
        if k + 1 < self.schedule.frames_per_round {
            let next = self.rs.data_start + (k + 1) as f64 * self.schedule.frame_duration();
            self.push(next, EventKind::MoveStep);
            self.timer(next, Timer::Frame(k + 1));
        }
        Ok(())
    }

    fn heartbeat_check(&mut self, ach: NodeId, ch: NodeId, frame: u32) -> Result<(), EngineError> {
        if self.rs.heartbeats.contains(&(ach, frame)) || !self.world.is_alive(ach) {
            return Ok(());
        }
        let st = &mut self.world.nodes[ach.0 as usize].state;
        if !st.is_ach || st.my_ch != Some(ch) {
            return Ok(());
        }
        let ann = st.promote_to_ch().map_err(|e| protocol_violation("assistant", e))?;
        self.rs.promotions += 1;
        self.note("event.promote", Some(ach), Endpoint::Node(ch), Outcome::None);
        if let Some(ov) = self.overlay.as_mut() {
            ov.substitute(ch, ach);
        }
        self.broadcast_all(ach, vec![ann])
    }

    fn ack_check(&mut self, node: NodeId, frame: u32) -> Result<(), EngineError> {
        let Some(p) = self.rs.pending.get(&(node, frame)).cloned() else {
            return Ok(());
        };
        if p.acked || !self.world.is_alive(node) {
            self.rs.pending.remove(&(node, frame));
            return Ok(());
        }
        let st = &self.world.node(node).state;
        if st.role == Role::FinalCh {
            // Promoted while this frame was outstanding: the data is already at a head.
            self.rs.frame_status.insert((node, frame), true);
            self.rs.pending.remove(&(node, frame));
            return Ok(());
        }
        if p.attempts >= MAX_ATTEMPTS {
            self.rs.pending.remove(&(node, frame));
            return Ok(());
        }
        let level = self.intra_level();
        let target = if st.my_ch == Some(p.target) || st.my_ach == Some(p.target) {
            self.rs.unreachable.insert((node, p.target));
            let chs: Vec<(NodeId, f64)> = st
                .known_final_chs()
                .into_iter()
                .filter(|(c, _)| !self.rs.unreachable.contains(&(node, *c)))
                .collect();
            let action = self.world.nodes[node.0 as usize]
                .state
                .handle_send_failure(p.target, &chs)
                .map_err(|e| protocol_violation("recovery", e))?;
            match action {
                FailureAction::RetargetToAch(ach) => {
                    self.note("event.retarget", Some(node), Endpoint::Node(ach), Outcome::None);
                    Some(ach)
                }
                FailureAction::Rejoined { ch, join } => {
                    self.note("event.rejoin", Some(node), Endpoint::Node(ch), Outcome::None);
                    self.send(node, Dest::Unicast(ch), level, Payload::Control(join))?;
                    Some(ch)
                }
                FailureAction::Orphaned => {
                    self.note("event.orphan", Some(node), Endpoint::None, Outcome::None);
                    None
                }
            }
        } else {
            st.data_target()
        };
        match target {
            Some(t) => {
                self.rs.pending.insert((node, frame), Pending { target: t, attempts: p.attempts + 1, acked: false });
                self.send(node, Dest::Unicast(t), level, Payload::Data { origin: node, frame })?;
                let at = self.world.clock + self.schedule.ack_timeout();
                self.timer(at, Timer::AckCheck { node, frame });
            }
            None => {
                self.rs.pending.remove(&(node, frame));
            }
        }
        Ok(())
    }

    fn on_failure(&mut self, node: NodeId, mode: FailureMode) -> Result<(), EngineError> {
        let was_alive = self.world.is_alive(node);
        match mode {
            FailureMode::Crash => {
                self.world.nodes[node.0 as usize].crashed = true;
                self.note("fail.crash", Some(node), Endpoint::None, Outcome::Died);
            }
            FailureMode::Drain => {
                let taken = self.world.ledger.drain(node)?;
                self.trace.push(self.world.clock, "debit.drain", Some(node), Endpoint::None, Outcome::Died, taken);
            }
        }
        let st = &self.world.node(node).state;
        let in_data_period = self.rs.epoch_done && self.world.clock >= self.rs.data_start;
        if was_alive && in_data_period && st.role == Role::FinalCh {
            let ach = st.my_ach;
            let range = self.cfg.power.max_range(Band::Intra);
            let members: Vec<(NodeId, bool)> = st
                .l_members
                .iter()
                .filter(|m| self.world.is_alive(m.id))
                .map(|m| {
                    let reachable = ach
                        .filter(|&a| a != m.id && self.world.is_alive(a))
                        .map(|a| self.world.position(a).distance(self.world.position(m.id)) <= range)
                        .unwrap_or(false);
                    (m.id, reachable)
                })
                .collect();
            let elapsed = self.world.clock - self.rs.data_start;
            let frame = (elapsed / self.schedule.frame_duration()).ceil() as u32;
            self.rs.failures.push(PendingFailure {
                node,
                time: self.world.clock,
                frame,
                ach,
                members,
            });
        }
        Ok(())
    }

    fn round_end(&mut self) -> Result<(), EngineError> {
        self.rs.pending.clear();
        let overlay = self.overlay.take().expect("overlay built at epoch end");
        let bits = self.cfg.traffic.data_bits;
        let heads: Vec<NodeId> = self
            .alive_ids()
            .into_iter()
            .filter(|id| self.world.node(*id).state.role == Role::FinalCh)
            .collect();
        let mut sent = 0;
        let mut delivered = 0;
        for ch in heads {
            if !self.world.is_alive(ch) {
                continue;
            }
            sent += 1;
            let outcome = forward_aggregate(&mut AggregateTransport { sim: self }, &overlay, ch, bits);
            if outcome.delivered() {
                delivered += 1;
            } else if outcome.result == ForwardResult::Partitioned {
                self.note("event.partitioned", Some(ch), Endpoint::None, Outcome::None);
            }
            if let Some(err) = self.pending_error.take() {
                self.overlay = Some(overlay);
                return Err(err);
            }
        }
        self.overlay = Some(overlay);

        let idle = self.cfg.energy.idle_per_round;
        if idle > 0.0 {
            for id in self.alive_ids() {
                self.debit(id, idle, "debit.idle", Endpoint::None, Outcome::Ok)?;
            }
        }

        let frame_status = std::mem::take(&mut self.rs.frame_status);
        let failures: Vec<FailureImpact> = self
            .rs
            .failures
            .iter()
            .map(|f| FailureImpact {
                node: f.node,
                time: f.time,
                frame: f.frame,
                ach: f.ach,
                members: f
                    .members
                    .iter()
                    .map(|&(id, ach_reachable)| {
                        let lost = |from: u32| {
                            frame_status
                                .range((id, from)..=(id, u32::MAX))
                                .filter(|(_, ok)| !**ok)
                                .count() as u32
                        };
                        MemberImpact {
                            id,
                            ach_reachable,
                            lost_frames: lost(f.frame),
                            lost_after_failure_frame: lost(f.frame + 1),
                        }
                    })
                    .collect(),
            })
            .collect();
        let recovery_frames_lost = failures.iter().flat_map(|f| f.members.iter()).map(|m| m.lost_frames).sum();
        let alive = self.alive_ids();
        let orphan_count = alive.iter().filter(|id| self.world.node(**id).state.orphaned).count() as u32;
        let report = RoundReport {
            round: self.round,
            snapshot: self.snapshot.clone().expect("epoch precedes data round"),
            frames_sent: frame_status.len() as u32,
            frames_delivered: frame_status.values().filter(|v| **v).count() as u32,
            frame_status,
            aggregates_sent: sent,
            aggregates_delivered: delivered,
            energy_consumed_fj: self.world.ledger.total_debited_fj() - self.rs.energy_at_start,
            alive_count: alive.len() as u32,
            orphan_count,
            failures,
            promotions: self.rs.promotions,
            recovery_frames_lost,
        };
        self.reports.push(report);
        self.note("event.round_end", None, Endpoint::None, Outcome::None);
        if self.round + 1 < self.cfg.rounds {
            self.push(self.world.clock, EventKind::RoundBoundary(self.round + 1));
        } else {
            self.queue.clear();
            self.finished = true;
        }
        Ok(())
    }
}

/// Synchronous hop-by-hop transmission of round aggregates.
struct AggregateTransport<'a> {
    sim: &'a mut Simulation,
}

impl HopTransport for AggregateTransport<'_> {
    fn transmit(&mut self, seg: Segment, bits: u64) -> bool {
        let sim = &mut *self.sim;
        if sim.pending_error.is_some() {
            return false;
        }
        match sim.transmit_segment(seg, bits) {
            Ok(ok) => ok,
            Err(e) => {
                sim.pending_error = Some(e);
                false
            }
        }
    }
}

impl Simulation {
    fn transmit_segment(&mut self, seg: Segment, bits: u64) -> Result<bool, EngineError> {
        if !self.cfg.power.in_band(seg.level, Band::Inter) {
            return Err(violation("inter-cluster band", format!("hop {} -> {} at level {}", seg.from, seg.to, seg.level)));
        }
        if !self.world.is_alive(seg.from) {
            self.trace.push(self.world.clock, "drop.aggregate", Some(seg.from), Endpoint::Node(seg.to), Outcome::LostDead, 0);
            return Ok(false);
        }
        let e = self.cfg.energy.model().tx_energy(bits, self.cfg.power.range(seg.level))?;
        self.debit(seg.from, e, "tx.aggregate", Endpoint::Node(seg.to), Outcome::Ok)?;
        if seg.to == self.world.sink.id {
            let ok = if !self.cfg.power.in_range(self.world.position(seg.from), self.world.sink.position, seg.level) {
                Some(Outcome::LostRange)
            } else if self.lost_to_channel() {
                Some(Outcome::LostChannel)
            } else {
                None
            };
            return Ok(match ok {
                None => {
                    self.note("rx.sink", Some(seg.from), Endpoint::Node(seg.to), Outcome::Ok);
                    true
                }
                Some(o) => {
                    self.trace.push(self.world.clock, "drop.aggregate", Some(seg.from), Endpoint::Node(seg.to), o, 0);
                    false
                }
            });
        }
        self.receive(seg.from, seg.to, seg.level, "aggregate", bits, true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BinaryHeap;

    #[test]
    fn schedule_arithmetic() {
        let s = RoundSchedule::default();
        assert_eq!(s.frame_duration(), 1.0);
        assert_eq!(s.ack_timeout(), 1.0);
        assert_eq!(s.round_length(), 1.0 + 10.0 + 3.0);
        assert_eq!(s.slot(6), 0.1);
        let s = RoundSchedule {
            ack_timeout: Some(0.25),
            ..s
        };
        assert_eq!(s.round_length(), 11.75);
    }

    #[test]
    fn events_pop_by_time_then_insertion() {
        let mut heap = BinaryHeap::new();
        for (seq, time) in [(0, 2.0), (1, 1.0), (2, 1.0), (3, 0.5)] {
            heap.push(Event {
                time,
                seq,
                kind: EventKind::MoveStep,
            });
        }
        let order: Vec<u64> = std::iter::from_fn(|| heap.pop()).map(|e| e.seq).collect();
        assert_eq!(order, vec![3, 1, 2, 0]);
    }

    #[test]
    fn trace_labels() {
        assert_eq!(kind_label("tx", Payload::Ack { frame: 0 }.label()), "tx.ack");
        assert_eq!(kind_label("drop", "heartbeat"), "drop.heartbeat");
        assert_eq!(kind_label("rx", "nonsense"), "other");
    }
}
