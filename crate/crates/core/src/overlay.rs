//! Cluster-head overlay: multi-hop forwarding of round aggregates to the sink,
//! with guard nodes bridging cluster heads that are out of mutual range.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::mobility::Vec2;
use crate::protocol::NodeId;
use crate::radio::{Band, PowerTable};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RouteError {
    #[error("{0} is not a cluster head in the overlay")]
    UnknownCh(NodeId),
    #[error("{0} is partitioned from the sink")]
    Partitioned(NodeId),
}

/// One physical transmission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub from: NodeId,
    pub to: NodeId,
    pub level: usize,
}

/// A logical overlay hop: direct, or relayed through a guard node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Link {
    pub guard: Option<NodeId>,
    pub segments: Vec<Segment>,
}

impl Link {
    fn rename(&mut self, old: NodeId, new: NodeId) {
        for s in &mut self.segments {
            if s.from == old {
                s.from = new;
            }
            if s.to == old {
                s.to = new;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkSite {
    pub id: NodeId,
    pub position: Vec2,
}

/// What the overlay is built from.
pub struct OverlayInput<'a> {
    pub chs: &'a [NodeId],
    /// Indexed by node id.
    pub positions: &'a [Vec2],
    /// Indexed by node id.
    pub alive: &'a [bool],
    pub sink: SinkSite,
    pub table: &'a PowerTable,
    pub guards: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub sink: NodeId,
    ch_set: BTreeSet<NodeId>,
    adjacency: BTreeMap<NodeId, BTreeMap<NodeId, Link>>,
    sink_links: BTreeMap<NodeId, Link>,
}

/// A route from a cluster head to the sink.
///
/// `chs[0]` is the source and the last entry is sink-attached; `links[i]`
/// leaves `chs[i]`, and the final link reaches the sink.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Route {
    pub chs: Vec<NodeId>,
    pub links: Vec<Link>,
}

impl Route {
    /// Logical hop count, sink hop included.
    pub fn hop_count(&self) -> usize {
        self.links.len()
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.links.iter().flat_map(|l| l.segments.iter())
    }
}

fn link_between(
    a: (NodeId, Vec2),
    b: (NodeId, Vec2),
    input: &OverlayInput<'_>,
    exclude: &BTreeSet<NodeId>,
) -> Option<Link> {
    let table = input.table;
    let reach = table.max_range(Band::Inter);
    let level = |d: f64| table.min_power_level(d, Band::Inter).ok();
    let d = a.1.distance(b.1);
    if d <= reach {
        return Some(Link {
            guard: None,
            segments: vec![Segment { from: a.0, to: b.0, level: level(d)? }],
        });
    }
    if !input.guards {
        return None;
    }
    // Guard minimising the longer of its two legs; ties to the smallest id.
    let mut best: Option<(f64, NodeId, f64, f64)> = None;
    for (i, &p) in input.positions.iter().enumerate() {
        let g = NodeId(i as u32);
        if !input.alive[i] || exclude.contains(&g) || g == a.0 || g == b.0 {
            continue;
        }
        let (da, db) = (p.distance(a.1), p.distance(b.1));
        if da > reach || db > reach {
            continue;
        }
        let worst = da.max(db);
        if best.is_none_or(|(w, id, _, _)| worst < w || (worst == w && g < id)) {
            best = Some((worst, g, da, db));
        }
    }
    let (_, g, da, db) = best?;
    Some(Link {
        guard: Some(g),
        segments: vec![
            Segment { from: a.0, to: g, level: level(da)? },
            Segment { from: g, to: b.0, level: level(db)? },
        ],
    })
}

fn reversed(link: &Link) -> Link {
    Link {
        guard: link.guard,
        segments: link
            .segments
            .iter()
            .rev()
            .map(|s| Segment { from: s.to, to: s.from, level: s.level })
            .collect(),
    }
}

/// Connect cluster heads to each other and to the sink.
pub fn build_overlay(input: &OverlayInput<'_>) -> Overlay {
    let ch_set: BTreeSet<NodeId> = input
        .chs
        .iter()
        .copied()
        .filter(|c| input.alive.get(c.0 as usize).copied().unwrap_or(false))
        .collect();
    let pos = |id: NodeId| input.positions[id.0 as usize];
    let chs: Vec<NodeId> = ch_set.iter().copied().collect();

    let mut adjacency: BTreeMap<NodeId, BTreeMap<NodeId, Link>> = chs.iter().map(|&c| (c, BTreeMap::new())).collect();
    for (i, &a) in chs.iter().enumerate() {
        for &b in &chs[i + 1..] {
            if let Some(link) = link_between((a, pos(a)), (b, pos(b)), input, &ch_set) {
                adjacency.get_mut(&b).expect("b is a CH").insert(a, reversed(&link));
                adjacency.get_mut(&a).expect("a is a CH").insert(b, link);
            }
        }
    }
    let mut sink_links = BTreeMap::new();
    for &c in &chs {
        if let Some(link) = link_between((c, pos(c)), (input.sink.id, input.sink.position), input, &ch_set) {
            sink_links.insert(c, link);
        }
    }
    Overlay {
        sink: input.sink.id,
        ch_set,
        adjacency,
        sink_links,
    }
}

impl Overlay {
    pub fn ch_set(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.ch_set.iter().copied()
    }

    pub fn contains(&self, ch: NodeId) -> bool {
        self.ch_set.contains(&ch)
    }

    pub fn link(&self, a: NodeId, b: NodeId) -> Option<&Link> {
        self.adjacency.get(&a)?.get(&b)
    }

    pub fn sink_link(&self, ch: NodeId) -> Option<&Link> {
        self.sink_links.get(&ch)
    }

    /// Directly reachable CH pairs, both orientations.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.adjacency
            .iter()
            .flat_map(|(&a, m)| m.iter().filter(|(_, l)| l.guard.is_none()).map(move |(&b, _)| (a, b)))
            .collect()
    }

    /// `(ch_a, guard, ch_b)` with `ch_a < ch_b`.
    pub fn guard_edges(&self) -> Vec<(NodeId, NodeId, NodeId)> {
        self.adjacency
            .iter()
            .flat_map(|(&a, m)| {
                m.iter()
                    .filter(move |(&b, _)| a < b)
                    .filter_map(move |(&b, l)| l.guard.map(|g| (a, g, b)))
            })
            .collect()
    }

    pub fn sink_attached(&self) -> Vec<NodeId> {
        self.sink_links.keys().copied().collect()
    }

    /// Hop distance of every CH to the sink attachment set.
    fn distances(&self) -> BTreeMap<NodeId, usize> {
        let mut dist = BTreeMap::new();
        let mut queue = VecDeque::new();
        for &c in self.sink_links.keys() {
            dist.insert(c, 0);
            queue.push_back(c);
        }
        while let Some(c) = queue.pop_front() {
            let d = dist[&c];
            for &n in self.adjacency.get(&c).into_iter().flat_map(|m| m.keys()) {
                if let std::collections::btree_map::Entry::Vacant(e) = dist.entry(n) {
                    e.insert(d + 1);
                    queue.push_back(n);
                }
            }
        }
        dist
    }

    /// Fewest-hop route to the sink; ties go to the smallest next hop.
    pub fn route_to_sink(&self, src: NodeId) -> Result<Route, RouteError> {
        if !self.ch_set.contains(&src) {
            return Err(RouteError::UnknownCh(src));
        }
        let dist = self.distances();
        let mut d = *dist.get(&src).ok_or(RouteError::Partitioned(src))?;
        let mut chs = vec![src];
        let mut links = Vec::new();
        let mut cur = src;
        while d > 0 {
            let (next, link) = self.adjacency[&cur]
                .iter()
                .find(|(n, _)| dist.get(n) == Some(&(d - 1)))
                .expect("BFS predecessor exists");
            links.push(link.clone());
            chs.push(*next);
            cur = *next;
            d -= 1;
        }
        links.push(self.sink_links[&cur].clone());
        Ok(Route { chs, links })
    }

    /// Drop a node from the overlay, as a CH and as a guard.
    pub fn remove_node(&mut self, id: NodeId) {
        self.ch_set.remove(&id);
        self.adjacency.remove(&id);
        self.sink_links.remove(&id);
        for m in self.adjacency.values_mut() {
            m.retain(|&n, l| n != id && l.guard != Some(id));
        }
        self.sink_links.retain(|_, l| l.guard != Some(id));
    }

    pub fn remove_sink_link(&mut self, ch: NodeId) {
        self.sink_links.remove(&ch);
    }

    /// `new` inherits every overlay entry of `old`.
    pub fn substitute(&mut self, old: NodeId, new: NodeId) {
        if !self.ch_set.remove(&old) || old == new {
            return;
        }
        self.ch_set.insert(new);
        let links = self.adjacency.remove(&old).unwrap_or_default();
        let mut mine = self.adjacency.remove(&new).unwrap_or_default();
        for (n, mut link) in links {
            if n == new || link.guard == Some(new) {
                continue;
            }
            link.rename(old, new);
            mine.entry(n).or_insert(link);
        }
        for (&n, m) in self.adjacency.iter_mut() {
            if let Some(mut link) = m.remove(&old) {
                if link.guard != Some(new) && n != new {
                    link.rename(old, new);
                    m.entry(new).or_insert(link);
                }
            }
        }
        self.adjacency.insert(new, mine);
        if let Some(mut link) = self.sink_links.remove(&old) {
            if link.guard != Some(new) {
                link.rename(old, new);
                self.sink_links.entry(new).or_insert(link);
            }
        }
    }
}

/// Physical transmission of one overlay segment.
pub trait HopTransport {
    fn transmit(&mut self, segment: Segment, bits: u64) -> bool;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ForwardResult {
    Delivered,
    /// No route existed from the source.
    Partitioned,
    /// A hop failed and the single repair attempt did not get through.
    Lost { failed_at: Segment },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardOutcome {
    pub result: ForwardResult,
    pub repaired: bool,
    pub transmissions: u32,
    /// Route in use when forwarding ended.
    pub route: Option<Route>,
}

impl ForwardOutcome {
    pub fn delivered(&self) -> bool {
        self.result == ForwardResult::Delivered
    }
}

/// Push a round aggregate from `src` to the sink.
///
/// A failed hop removes the unreachable node from a working copy of the
/// overlay and reroutes once from the last CH holding the data.
pub fn forward_aggregate<T: HopTransport>(transport: &mut T, overlay: &Overlay, src: NodeId, bits: u64) -> ForwardOutcome {
    let mut route = match overlay.route_to_sink(src) {
        Ok(r) => r,
        Err(_) => {
            return ForwardOutcome {
                result: ForwardResult::Partitioned,
                repaired: false,
                transmissions: 0,
                route: None,
            }
        }
    };
    let mut working: Option<Overlay> = None;
    let mut transmissions = 0;
    'attempt: loop {
        for (i, link) in route.links.iter().enumerate() {
            for seg in &link.segments {
                transmissions += 1;
                if transport.transmit(*seg, bits) {
                    continue;
                }
                let repaired = working.is_some();
                if repaired {
                    return ForwardOutcome {
                        result: ForwardResult::Lost { failed_at: *seg },
                        repaired,
                        transmissions,
                        route: Some(route),
                    };
                }
                let ov = working.insert(overlay.clone());
                let holder = route.chs[i];
                if seg.to == overlay.sink {
                    ov.remove_sink_link(holder);
                } else {
                    ov.remove_node(seg.to);
                }
                match ov.route_to_sink(holder) {
                    Ok(r) => {
                        route = r;
                        continue 'attempt;
                    }
                    Err(_) => {
                        return ForwardOutcome {
                            result: ForwardResult::Lost { failed_at: *seg },
                            repaired: true,
                            transmissions,
                            route: Some(route),
                        }
                    }
                }
            }
        }
        return ForwardOutcome {
            result: ForwardResult::Delivered,
            repaired: working.is_some(),
            transmissions,
            route: Some(route),
        };
    }
}
