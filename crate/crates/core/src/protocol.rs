//! Per-node clustering state machine.
//!
//! Everything in this module is transport-agnostic: a [`NodeState`] consumes
//! announcements and random draws and produces announcements. The simulator in
//! [`crate::engine`] is one driver; nothing here knows about time, positions or
//! energy accounting.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cost assigned to a node that has no neighbours, so it never wins a
/// least-cost election against a real candidate.
pub const MAX_COST: f64 = f64::MAX;

/// Tolerance on the `CH_prob = 1` test.
pub const PROB_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<u32> for NodeId {
    fn from(v: u32) -> Self {
        NodeId(v)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("no neighbors")]
    NoNeighbors,
    #[error("no candidates")]
    NoCandidates,
    #[error("energy exceeds capacity ({e_res} J > {e_max} J)")]
    EnergyExceedsCapacity { e_res: f64, e_max: f64 },
    #[error("residual energy must be nonnegative, got {0}")]
    NegativeEnergy(f64),
    #[error("velocity factor must lie in (0, 1], got {0}")]
    InvalidVelocityFactor(f64),
    #[error("p_min must lie in (0, 1], got {0}")]
    InvalidPmin(f64),
    #[error("phase 2 already terminated")]
    Phase2Terminated,
    #[error("phase 2 has not terminated")]
    Phase2NotDone,
    #[error("node {0} exceeded the iteration bound of {1}")]
    IterationBound(NodeId, u32),
    #[error("not a cluster head")]
    NotClusterHead,
    #[error("not a cluster member")]
    NotMember,
    #[error("node {0} is not an assistant cluster head")]
    NotAssistant(NodeId),
    #[error("send failure reported for {0}, which is neither my CH nor my ACH")]
    UnknownTarget(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoleTag {
    Unknown,
    TentativeCh,
    FinalCh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Undecided,
    TentativeCh,
    FinalCh,
    Member,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    /// Cost proportional to 1/D: dense clusters are cheap to join.
    #[default]
    InverseDegree,
    /// Cost proportional to D: load-balanced clusters.
    Degree,
    /// Mean minimum transmit power to reach each neighbour.
    Ccf,
}

/// One entry of a node's neighbour list.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborEntry {
    pub id: NodeId,
    /// Cost the neighbour announced; zero until its cost/velocity broadcast arrives.
    pub cost: f64,
    /// Index of the smallest power level that reaches this neighbour.
    pub min_power: usize,
    /// Relative speed between this node and the neighbour, m/s.
    pub relative_speed: f64,
    pub role_tag: RoleTag,
}

impl NeighborEntry {
    pub fn new(id: NodeId, min_power: usize, relative_speed: f64) -> Self {
        Self {
            id,
            cost: 0.0,
            min_power,
            relative_speed,
            role_tag: RoleTag::Unknown,
        }
    }
}

/// A candidate cluster head heard during Phase II.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChEntry {
    pub id: NodeId,
    pub cost: f64,
    pub tag: RoleTag,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemberEntry {
    pub id: NodeId,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub k_fraction: f64,
    pub p_min: f64,
    pub e_max: f64,
    pub cost_mode: CostMode,
    pub heed_mode: bool,
    pub va_threshold: f64,
    pub ach_enabled: bool,
    /// Transmit power per level in milliwatts; used by [`CostMode::Ccf`].
    /// Filled from the radio power table when a simulation is built.
    #[serde(skip)]
    pub power_levels_mw: Vec<f64>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            k_fraction: 0.1,
            p_min: 1.0 / 1024.0,
            e_max: 2.0,
            cost_mode: CostMode::InverseDegree,
            heed_mode: false,
            va_threshold: 1.0,
            ach_enabled: true,
            power_levels_mw: Vec::new(),
        }
    }
}

impl ProtocolConfig {
    /// Whether cluster heads pick an assistant. HEED mode always disables it.
    pub fn ach_active(&self) -> bool {
        self.ach_enabled && !self.heed_mode
    }

    /// Returns `(field, message)` for the first violated invariant.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err(("k_fraction", format!("k_fraction out of range (0, 1]: {}", self.k_fraction)));
        }
        if !(self.p_min > 0.0 && self.p_min <= 1.0) {
            return Err(("p_min", format!("p_min out of range (0, 1]: {}", self.p_min)));
        }
        if self.p_min > self.k_fraction {
            return Err((
                "p_min",
                format!("p_min ({}) must not exceed k_fraction ({})", self.p_min, self.k_fraction),
            ));
        }
        if !(self.e_max > 0.0 && self.e_max.is_finite()) {
            return Err(("e_max", format!("e_max must be positive: {}", self.e_max)));
        }
        if !(self.va_threshold > 0.0 && self.va_threshold.is_finite()) {
            return Err(("va_threshold", format!("va_threshold must be positive: {}", self.va_threshold)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnouncementKind {
    TentativeCh,
    FinalCh,
    Join,
    AchDecl,
    CostVelocity,
}

impl AnnouncementKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnnouncementKind::TentativeCh => "tentative_ch",
            AnnouncementKind::FinalCh => "final_ch",
            AnnouncementKind::Join => "join",
            AnnouncementKind::AchDecl => "ach_decl",
            AnnouncementKind::CostVelocity => "cost_velocity",
        }
    }
}

/// Protocol message. Serialized field order is `kind, sender, cost, payload,
/// velocity_info`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Announcement {
    pub kind: AnnouncementKind,
    pub sender: NodeId,
    pub cost: f64,
    /// Target CH for `join`, ACH id for `ach_decl`.
    pub payload: Option<NodeId>,
    /// Sender's sensed velocity vector, m/s.
    pub velocity_info: Option<[f64; 2]>,
}

impl Announcement {
    fn declaration(kind: AnnouncementKind, sender: NodeId, cost: f64) -> Self {
        Self {
            kind,
            sender,
            cost,
            payload: None,
            velocity_info: None,
        }
    }

    pub fn tentative_ch(sender: NodeId, cost: f64) -> Self {
        Self::declaration(AnnouncementKind::TentativeCh, sender, cost)
    }

    pub fn final_ch(sender: NodeId, cost: f64) -> Self {
        Self::declaration(AnnouncementKind::FinalCh, sender, cost)
    }

    pub fn join(sender: NodeId, cost: f64, ch: NodeId) -> Self {
        Self {
            payload: Some(ch),
            ..Self::declaration(AnnouncementKind::Join, sender, cost)
        }
    }

    pub fn ach_decl(sender: NodeId, cost: f64, ach: NodeId) -> Self {
        Self {
            payload: Some(ach),
            ..Self::declaration(AnnouncementKind::AchDecl, sender, cost)
        }
    }

    pub fn cost_velocity(sender: NodeId, cost: f64, velocity: [f64; 2]) -> Self {
        Self {
            velocity_info: Some(velocity),
            ..Self::declaration(AnnouncementKind::CostVelocity, sender, cost)
        }
    }
}

/// Communication cost factor: mean of the minimum power needed per neighbour.
pub fn compute_ccf(min_powers: &[f64]) -> Result<f64, ProtocolError> {
    mean(min_powers)
}

/// Average relative speed to the neighbours, m/s.
pub fn compute_va(relative_speeds: &[f64]) -> Result<f64, ProtocolError> {
    mean(relative_speeds)
}

fn mean(values: &[f64]) -> Result<f64, ProtocolError> {
    if values.is_empty() {
        return Err(ProtocolError::NoNeighbors);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Velocity factor: 1 below the threshold, `threshold / va` at or above it.
pub fn compute_vf(va: f64, va_threshold: f64) -> f64 {
    if va < va_threshold {
        1.0
    } else {
        va_threshold / va
    }
}

/// Initial cluster-head probability, clamped to `[p_min, 1]`.
pub fn compute_ch_prob(cfg: &ProtocolConfig, e_res: f64, vf: f64) -> Result<f64, ProtocolError> {
    if e_res < 0.0 {
        return Err(ProtocolError::NegativeEnergy(e_res));
    }
    if e_res > cfg.e_max {
        return Err(ProtocolError::EnergyExceedsCapacity { e_res, e_max: cfg.e_max });
    }
    let vf = if cfg.heed_mode { 1.0 } else { vf };
    if !(vf > 0.0 && vf <= 1.0) {
        return Err(ProtocolError::InvalidVelocityFactor(vf));
    }
    let raw = cfg.k_fraction * (e_res / cfg.e_max) * vf;
    Ok(raw.clamp(cfg.p_min, 1.0))
}

/// Cost a node advertises for intra-cluster communication with it.
pub fn node_cost(cfg: &ProtocolConfig, degree: usize, ccf: f64) -> f64 {
    match cfg.cost_mode {
        CostMode::InverseDegree if degree == 0 => MAX_COST,
        CostMode::InverseDegree => 1.0 / degree as f64,
        CostMode::Degree => degree as f64,
        CostMode::Ccf => ccf,
    }
}

/// Cheapest candidate; ties go to the smallest id.
pub fn least_cost<I>(candidates: I) -> Result<NodeId, ProtocolError>
where
    I: IntoIterator<Item = (NodeId, f64)>,
{
    candidates
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(id, _)| id)
        .ok_or(ProtocolError::NoCandidates)
}

/// Upper bound on Phase II iterations: `ceil(log2(1 / p_min)) + 1`.
pub fn max_iterations(p_min: f64) -> Result<u32, ProtocolError> {
    if !(p_min > 0.0 && p_min <= 1.0) {
        return Err(ProtocolError::InvalidPmin(p_min));
    }
    let mut doublings = (1.0 / p_min).log2().ceil().max(0.0) as i32;
    // log2 of a rounded reciprocal can land one off near powers of two.
    while doublings > 0 && p_min * 2f64.powi(doublings - 1) >= 1.0 {
        doublings -= 1;
    }
    while p_min * 2f64.powi(doublings) < 1.0 {
        doublings += 1;
    }
    Ok(doublings as u32 + 1)
}

/// Outcome of one Phase II iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase2Step {
    pub outbox: Vec<Announcement>,
    pub done: bool,
}

/// What a member does after a send to its CH or ACH went unacknowledged.
#[derive(Debug, Clone, PartialEq)]
pub enum FailureAction {
    /// Resend to the assistant cluster head.
    RetargetToAch(NodeId),
    /// Joined another cluster head in range; the join must be transmitted.
    Rejoined { ch: NodeId, join: Announcement },
    /// Nothing reachable; wait for the next clustering epoch.
    Orphaned,
}

/// Copy of a cluster's membership held by its assistant.
#[derive(Debug, Clone, PartialEq)]
pub struct Standby {
    pub ch: NodeId,
    pub members: Vec<MemberEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeState {
    pub me: NodeId,
    pub role: Role,
    pub l_adj: Vec<NeighborEntry>,
    pub l_ch: Vec<ChEntry>,
    pub l_members: Vec<MemberEntry>,
    pub my_ch: Option<NodeId>,
    pub my_ach: Option<NodeId>,
    pub is_ach: bool,
    pub ch_prob: f64,
    pub ch_prev: f64,
    pub e_res: f64,
    pub cost: f64,
    pub iteration: u32,
    pub iteration_limit: u32,
    pub phase2_done: bool,
    /// Data is being sent to the ACH because the CH stopped acknowledging.
    pub retargeted: bool,
    pub orphaned: bool,
    pub standby: Option<Standby>,
}

impl NodeState {
    /// State of a node that has not yet run Phase I.
    pub fn unclustered(me: NodeId) -> Self {
        NodeState {
            me,
            role: Role::Undecided,
            l_adj: Vec::new(),
            l_ch: Vec::new(),
            l_members: Vec::new(),
            my_ch: None,
            my_ach: None,
            is_ach: false,
            ch_prob: 1.0,
            ch_prev: 1.0,
            e_res: 0.0,
            cost: MAX_COST,
            iteration: 0,
            iteration_limit: 1,
            phase2_done: false,
            retargeted: false,
            orphaned: false,
            standby: None,
        }
    }

    /// Phase I: compute cost and CH probability from the neighbour list.
    ///
    /// Returns the state together with the cost/velocity broadcast.
    pub fn init_phase1(
        me: NodeId,
        neighbors: Vec<NeighborEntry>,
        cfg: &ProtocolConfig,
        e_res: f64,
        my_velocity: [f64; 2],
    ) -> Result<(NodeState, Announcement), ProtocolError> {
        let speeds: Vec<f64> = neighbors.iter().map(|n| n.relative_speed).collect();
        let va = compute_va(&speeds).unwrap_or(0.0);
        let vf = compute_vf(va, cfg.va_threshold);
        let ch_prob = compute_ch_prob(cfg, e_res, vf)?;

        let ccf = if cfg.cost_mode == CostMode::Ccf {
            let powers: Vec<f64> = neighbors
                .iter()
                .map(|n| cfg.power_levels_mw.get(n.min_power).copied().unwrap_or(n.min_power as f64))
                .collect();
            compute_ccf(&powers).unwrap_or(MAX_COST)
        } else {
            0.0
        };
        let cost = node_cost(cfg, neighbors.len(), ccf);

        let state = NodeState {
            me,
            role: Role::Undecided,
            l_adj: neighbors,
            l_ch: Vec::new(),
            l_members: Vec::new(),
            my_ch: None,
            my_ach: None,
            is_ach: false,
            ch_prob,
            ch_prev: ch_prob,
            e_res,
            cost,
            iteration: 0,
            iteration_limit: max_iterations(cfg.p_min)?,
            phase2_done: false,
            retargeted: false,
            orphaned: false,
            standby: None,
        };
        let ann = Announcement::cost_velocity(me, cost, my_velocity);
        Ok((state, ann))
    }

    pub fn is_neighbor(&self, id: NodeId) -> bool {
        self.l_adj.iter().any(|n| n.id == id)
    }

    fn upsert_ch(&mut self, id: NodeId, cost: f64, tag: RoleTag) {
        match self.l_ch.iter_mut().find(|e| e.id == id) {
            Some(entry) => {
                entry.cost = cost;
                if entry.tag != RoleTag::FinalCh {
                    entry.tag = tag;
                }
            }
            None => self.l_ch.push(ChEntry { id, cost, tag }),
        }
        if let Some(n) = self.l_adj.iter_mut().find(|n| n.id == id) {
            if n.role_tag != RoleTag::FinalCh {
                n.role_tag = tag;
            }
        }
    }

    fn add_member(&mut self, id: NodeId, cost: f64) -> bool {
        if id == self.me || self.l_members.iter().any(|m| m.id == id) {
            return false;
        }
        self.l_members.push(MemberEntry { id, cost });
        true
    }

    /// Incorporate one received announcement.
    ///
    /// Returns true when the message changed this node's membership list.
    pub fn receive_message(&mut self, ann: &Announcement) -> bool {
        if ann.sender == self.me {
            return false;
        }
        match ann.kind {
            AnnouncementKind::CostVelocity => {
                if let Some(n) = self.l_adj.iter_mut().find(|n| n.id == ann.sender) {
                    n.cost = ann.cost;
                }
                false
            }
            AnnouncementKind::TentativeCh | AnnouncementKind::FinalCh => {
                let tag = if ann.kind == AnnouncementKind::FinalCh {
                    RoleTag::FinalCh
                } else {
                    RoleTag::TentativeCh
                };
                if self.is_neighbor(ann.sender) {
                    self.upsert_ch(ann.sender, ann.cost, tag);
                }
                // A promoted assistant takes over the cluster.
                if tag == RoleTag::FinalCh && self.role == Role::Member && self.my_ach == Some(ann.sender) {
                    self.my_ch = Some(ann.sender);
                    self.my_ach = None;
                    self.retargeted = false;
                }
                false
            }
            AnnouncementKind::Join => {
                if ann.payload == Some(self.me) && self.role == Role::FinalCh {
                    self.add_member(ann.sender, ann.cost)
                } else {
                    false
                }
            }
            AnnouncementKind::AchDecl => {
                if self.role == Role::Member && self.my_ch == Some(ann.sender) {
                    if ann.payload == Some(self.me) {
                        self.is_ach = true;
                        self.my_ach = None;
                    } else {
                        self.my_ach = ann.payload;
                    }
                }
                false
            }
        }
    }

    /// One Phase II iteration.
    pub fn step_phase2(&mut self, inbox: &[Announcement], rng_draw: f64) -> Result<Phase2Step, ProtocolError> {
        if self.phase2_done {
            return Err(ProtocolError::Phase2Terminated);
        }
        if self.iteration >= self.iteration_limit {
            return Err(ProtocolError::IterationBound(self.me, self.iteration_limit));
        }
        for ann in inbox {
            self.receive_message(ann);
        }

        let mut outbox = Vec::new();
        let at_one = self.ch_prob >= 1.0 - PROB_EPSILON;
        let declare = if self.l_ch.is_empty() {
            rng_draw < self.ch_prob
        } else {
            let best = least_cost(self.l_ch.iter().map(|e| (e.id, e.cost)))?;
            self.my_ch = Some(best);
            best == self.me
        };
        if declare {
            if at_one {
                self.role = Role::FinalCh;
                self.my_ch = Some(self.me);
                self.upsert_ch(self.me, self.cost, RoleTag::FinalCh);
                outbox.push(Announcement::final_ch(self.me, self.cost));
            } else {
                self.role = Role::TentativeCh;
                self.my_ch = Some(self.me);
                self.upsert_ch(self.me, self.cost, RoleTag::TentativeCh);
                outbox.push(Announcement::tentative_ch(self.me, self.cost));
            }
        }

        self.ch_prev = self.ch_prob;
        self.ch_prob = (self.ch_prob * 2.0).min(1.0);
        self.iteration += 1;
        self.phase2_done = self.ch_prev >= 1.0 - PROB_EPSILON;
        Ok(Phase2Step {
            outbox,
            done: self.phase2_done,
        })
    }

    /// Phase III: join the cheapest final CH heard, or become one.
    pub fn finalize_phase3(&mut self) -> Result<Vec<Announcement>, ProtocolError> {
        if !self.phase2_done {
            return Err(ProtocolError::Phase2NotDone);
        }
        if self.role != Role::FinalCh {
            let finals = self
                .l_ch
                .iter()
                .filter(|e| e.tag == RoleTag::FinalCh && e.id != self.me)
                .map(|e| (e.id, e.cost));
            if let Ok(ch) = least_cost(finals) {
                self.role = Role::Member;
                self.my_ch = Some(ch);
                return Ok(vec![Announcement::join(self.me, self.cost, ch)]);
            }
        }
        self.role = Role::FinalCh;
        self.my_ch = Some(self.me);
        self.upsert_ch(self.me, self.cost, RoleTag::FinalCh);
        Ok(vec![Announcement::final_ch(self.me, self.cost)])
    }

    /// Pick the cheapest member as assistant cluster head.
    pub fn select_ach(&mut self) -> Result<Option<Announcement>, ProtocolError> {
        if self.role != Role::FinalCh {
            return Err(ProtocolError::NotClusterHead);
        }
        match least_cost(self.l_members.iter().map(|m| (m.id, m.cost))) {
            Ok(ach) => {
                self.my_ach = Some(ach);
                Ok(Some(Announcement::ach_decl(self.me, self.cost, ach)))
            }
            Err(_) => {
                self.my_ach = None;
                Ok(None)
            }
        }
    }

    /// Store the cluster snapshot pushed by the CH to its assistant.
    pub fn adopt_standby(&mut self, ch: NodeId, members: &[MemberEntry]) {
        self.standby = Some(Standby {
            ch,
            members: members.iter().copied().filter(|m| m.id != self.me).collect(),
        });
    }

    /// The assistant takes over a cluster whose head stopped responding.
    pub fn promote_to_ch(&mut self) -> Result<Announcement, ProtocolError> {
        if !self.is_ach {
            return Err(ProtocolError::NotAssistant(self.me));
        }
        self.role = Role::FinalCh;
        self.my_ch = Some(self.me);
        self.my_ach = None;
        self.is_ach = false;
        self.retargeted = false;
        self.orphaned = false;
        self.l_members = self.standby.take().map(|s| s.members).unwrap_or_default();
        self.upsert_ch(self.me, self.cost, RoleTag::FinalCh);
        Ok(Announcement::final_ch(self.me, self.cost))
    }

    /// Phase IV recovery after an unacknowledged data send.
    pub fn handle_send_failure(
        &mut self,
        failed_target: NodeId,
        neighborhood_chs: &[(NodeId, f64)],
    ) -> Result<FailureAction, ProtocolError> {
        if self.role != Role::Member {
            return Err(ProtocolError::NotMember);
        }
        if Some(failed_target) != self.my_ch && Some(failed_target) != self.my_ach {
            return Err(ProtocolError::UnknownTarget(failed_target));
        }
        if Some(failed_target) == self.my_ch && !self.retargeted {
            if let Some(ach) = self.my_ach {
                self.retargeted = true;
                return Ok(FailureAction::RetargetToAch(ach));
            }
        }
        let excluded = [Some(failed_target), self.my_ch, self.my_ach, Some(self.me)];
        let candidates = neighborhood_chs
            .iter()
            .copied()
            .filter(|(id, _)| !excluded.contains(&Some(*id)));
        self.my_ach = None;
        self.retargeted = false;
        match least_cost(candidates) {
            Ok(ch) => {
                self.my_ch = Some(ch);
                Ok(FailureAction::Rejoined {
                    ch,
                    join: Announcement::join(self.me, self.cost, ch),
                })
            }
            Err(_) => {
                self.my_ch = None;
                self.orphaned = true;
                Ok(FailureAction::Orphaned)
            }
        }
    }

    /// Where this node's next data frame goes.
    pub fn data_target(&self) -> Option<NodeId> {
        if self.orphaned || self.role != Role::Member {
            None
        } else if self.retargeted {
            self.my_ach
        } else {
            self.my_ch
        }
    }

    /// Final CHs this node has heard, cheapest first.
    pub fn known_final_chs(&self) -> Vec<(NodeId, f64)> {
        let mut v: Vec<(NodeId, f64)> = self
            .l_ch
            .iter()
            .filter(|e| e.tag == RoleTag::FinalCh && e.id != self.me)
            .map(|e| (e.id, e.cost))
            .collect();
        v.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        v
    }

    /// Whether this node accepts data frames addressed to it.
    pub fn accepts_data(&self) -> bool {
        self.role == Role::FinalCh || self.is_ach
    }
}
