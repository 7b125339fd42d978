//! Multi-pair entanglement routing.
//!
//! The pipeline runs in four stages:
//!
//! 1. [`alg1_best_path`]: the rate-maximal path of a fixed width between two
//!    users (a Dijkstra variant over a multiplicative, non-increasing metric).
//! 2. [`alg2_candidates`]: up to `h` best paths per width and demand, by
//!    deviation search on top of stage 1, against full switch capacities.
//! 3. [`alg3_merge`]: greedy commitment from the widest, best paths down,
//!    merging paths of the same demand into flow graphs that share channels.
//! 4. [`alg4_augment`]: hands leftover qubit pairs to the channel whose
//!    widening raises the total rate the most.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netgraph::{Demand, EdgeId, NetError, Network, NodeId};
use crate::rate::{self, flow_graph_rate, FlowGraph, RateError, WidthedPath};

/// Paths kept per width and demand when the caller does not say otherwise.
pub const DEFAULT_PATHS_PER_WIDTH: usize = 5;

#[derive(Debug, Error)]
pub enum RouteError {
    #[error(transparent)]
    Rate(#[from] RateError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("paths per width must be at least 1")]
    ZeroPaths,
    #[error("switch {node} has {remaining} free qubits, cannot take {wanted}")]
    Overdraft {
        node: NodeId,
        remaining: u32,
        wanted: u32,
    },
    #[error("route plan invariant violated: {0}")]
    Invariant(String),
}

/// Free qubits per switch. Users have no entry and never run out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QubitLedger {
    capacity: BTreeMap<NodeId, u32>,
    remaining: BTreeMap<NodeId, u32>,
}

impl QubitLedger {
    /// Ledger with every switch at full capacity.
    pub fn full(net: &Network) -> Self {
        let capacity: BTreeMap<NodeId, u32> = net
            .switches()
            .map(|n| (n.id, n.capacity().expect("switches have capacity")))
            .collect();
        QubitLedger {
            remaining: capacity.clone(),
            capacity,
        }
    }

    /// Free qubits at `v`, `None` for users.
    pub fn remaining(&self, v: NodeId) -> Option<u32> {
        self.remaining.get(&v).copied()
    }

    pub fn capacity(&self, v: NodeId) -> Option<u32> {
        self.capacity.get(&v).copied()
    }

    /// Qubits committed at `v`.
    pub fn used(&self, v: NodeId) -> u32 {
        match (self.capacity.get(&v), self.remaining.get(&v)) {
            (Some(c), Some(r)) => c - r,
            _ => 0,
        }
    }

    /// Whether `v` can still supply `n` qubits.
    pub fn has(&self, v: NodeId, n: u32) -> bool {
        self.remaining(v).is_none_or(|r| r >= n)
    }

    pub fn debit(&mut self, v: NodeId, n: u32) -> Result<(), RouteError> {
        if let Some(r) = self.remaining.get_mut(&v) {
            if *r < n {
                return Err(RouteError::Overdraft {
                    node: v,
                    remaining: *r,
                    wanted: n,
                });
            }
            *r -= n;
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, u32)> + '_ {
        self.remaining.iter().map(|(&k, &v)| (k, v))
    }

    /// Total free qubits over all switches.
    pub fn total_remaining(&self) -> u64 {
        self.remaining.values().map(|&r| r as u64).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct HeapEntry {
    metric: f64,
    hops: usize,
    node: NodeId,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.metric
            .total_cmp(&other.metric)
            .then(other.hops.cmp(&self.hops))
            .then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Search restrictions for one stage-1 run.
#[derive(Debug, Default, Clone)]
struct Restrictions {
    banned_nodes: BTreeSet<NodeId>,
    banned_edges: BTreeSet<EdgeId>,
}

/// Core of stage 1 between arbitrary endpoints. Returns the node sequence and
/// its metric.
///
/// `Met(src) = 1`; expanding node `i` over edge `(i, j)` offers
/// `Met(i) * q_i * (1 - (1 - p_ij)^w)`, with `q_i` omitted at `src`. Interior
/// nodes must be switches with at least `2w` qubits; switch endpoints need `w`.
fn best_path_between(
    net: &Network,
    src: NodeId,
    dst: NodeId,
    width: u32,
    caps: &QubitLedger,
    limits: &Restrictions,
) -> Option<(Vec<NodeId>, f64)> {
    if src == dst || !caps.has(src, width) || !caps.has(dst, width) {
        return None;
    }
    let n = net.node_count();
    let mut met = vec![-1.0_f64; n];
    let mut hops = vec![usize::MAX; n];
    let mut prev: Vec<Option<NodeId>> = vec![None; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    met[src.index()] = 1.0;
    hops[src.index()] = 0;
    heap.push(HeapEntry {
        metric: 1.0,
        hops: 0,
        node: src,
    });

    while let Some(HeapEntry { node: i, .. }) = heap.pop() {
        if done[i.index()] {
            continue;
        }
        done[i.index()] = true;
        if i == dst {
            break;
        }
        let here = net.node(i);
        if i != src && here.is_user() {
            continue;
        }
        let factor = if i == src { 1.0 } else { here.swap_prob() };
        let base = met[i.index()] * factor;
        for &(j, e) in net.neighbors(i) {
            if done[j.index()] || limits.banned_edges.contains(&e) || limits.banned_nodes.contains(&j)
            {
                continue;
            }
            if j != dst && (net.node(j).is_user() || !caps.has(j, 2 * width)) {
                continue;
            }
            let cand = base * rate::channel_rate_unchecked(net.edge(e).link_prob, width);
            let ji = j.index();
            let new_hops = hops[i.index()] + 1;
            let better = match cand.total_cmp(&met[ji]) {
                Ordering::Greater => true,
                Ordering::Equal => {
                    new_hops < hops[ji] || (new_hops == hops[ji] && prev[ji].is_none_or(|p| i < p))
                }
                Ordering::Less => false,
            };
            if better {
                met[ji] = cand;
                hops[ji] = new_hops;
                prev[ji] = Some(i);
                heap.push(HeapEntry {
                    metric: cand,
                    hops: new_hops,
                    node: j,
                });
            }
        }
    }

    if !done[dst.index()] {
        return None;
    }
    let mut nodes = vec![dst];
    let mut cur = dst;
    while let Some(p) = prev[cur.index()] {
        nodes.push(p);
        cur = p;
    }
    nodes.reverse();
    Some((nodes, met[dst.index()]))
}

/// Stage 1: the width-`w` path from `demand.source` to `demand.dest` with the
/// largest analytic rate under the per-switch budget `caps`, or `None`.
pub fn alg1_best_path(
    net: &Network,
    demand: &Demand,
    width: u32,
    caps: &QubitLedger,
) -> Result<Option<WidthedPath>, RouteError> {
    if width == 0 {
        return Err(RateError::ZeroWidth.into());
    }
    demand.validate(net)?;
    best_path_between(
        net,
        demand.source,
        demand.dest,
        width,
        caps,
        &Restrictions::default(),
    )
    .map(|(nodes, _)| WidthedPath::new(net, nodes, width))
    .transpose()
    .map_err(Into::into)
}

/// Candidate paths per width and demand, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    max_width: u32,
    /// `by_width[w - 1][demand index]`.
    by_width: Vec<Vec<Vec<WidthedPath>>>,
}

impl CandidateSet {
    pub fn max_width(&self) -> u32 {
        self.max_width
    }

    /// Candidates of the demand at position `demand` for width `w`.
    pub fn paths(&self, width: u32, demand: usize) -> &[WidthedPath] {
        self.by_width
            .get(width as usize - 1)
            .and_then(|per| per.get(demand))
            .map_or(&[], Vec::as_slice)
    }

    pub fn demand_count(&self) -> usize {
        self.by_width.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.by_width.iter().flatten().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Replaces the stored order of every list, e.g. to rank by another metric.
    pub fn sort_each_by(&mut self, mut cmp: impl FnMut(&WidthedPath, &WidthedPath) -> Ordering) {
        for per in &mut self.by_width {
            for list in per {
                list.sort_by(&mut cmp);
            }
        }
    }
}

struct Deviation {
    nodes: Vec<NodeId>,
    metric: f64,
    /// Index of the spur node this path deviated at.
    spur: usize,
    /// Edges out of the spur node excluded for this path's subspace.
    banned: BTreeSet<EdgeId>,
}

/// Up to `h` best width-`w` paths for one demand.
///
/// Deviation search in the partition form: each queued path remembers its spur
/// index and the edges banned there; its children spur at that index or later,
/// with the root prefix nodes excluded and the next hop of the parent banned.
/// The queue never holds more than `h - accepted` entries.
pub fn best_paths(
    net: &Network,
    demand: &Demand,
    width: u32,
    h: usize,
    caps: &QubitLedger,
) -> Result<Vec<WidthedPath>, RouteError> {
    if h == 0 {
        return Err(RouteError::ZeroPaths);
    }
    let mut accepted: Vec<WidthedPath> = Vec::new();
    let Some(first) = alg1_best_path(net, demand, width, caps)? else {
        return Ok(accepted);
    };
    let mut queue = vec![Deviation {
        nodes: first.nodes().to_vec(),
        metric: first.metric(),
        spur: 0,
        banned: BTreeSet::new(),
    }];
    let by_rank = |a: &Deviation, b: &Deviation| rate::rank_cmp(a.metric, &a.nodes, b.metric, &b.nodes);

    while !queue.is_empty() && accepted.len() < h {
        let best = (0..queue.len())
            .min_by(|&a, &b| by_rank(&queue[a], &queue[b]))
            .expect("queue is non-empty");
        let entry = queue.swap_remove(best);
        let path = WidthedPath::new(net, entry.nodes.clone(), width)?;
        accepted.push(path);

        for i in entry.spur..entry.nodes.len() - 1 {
            let spur = entry.nodes[i];
            let mut limits = Restrictions {
                banned_nodes: entry.nodes[..i].iter().copied().collect(),
                banned_edges: BTreeSet::new(),
            };
            let next = net
                .edge_between(spur, entry.nodes[i + 1])
                .expect("accepted paths are walks in the network");
            limits.banned_edges.insert(next);
            if i == entry.spur {
                limits.banned_edges.extend(entry.banned.iter().copied());
            }
            let Some((tail, _)) =
                best_path_between(net, spur, demand.dest, width, caps, &limits)
            else {
                continue;
            };
            let mut nodes = entry.nodes[..i].to_vec();
            nodes.extend(tail);
            let metric = WidthedPath::new(net, nodes.clone(), width)?.metric();
            queue.push(Deviation {
                nodes,
                metric,
                spur: i,
                banned: limits.banned_edges,
            });
            while queue.len() + accepted.len() > h {
                let worst = (0..queue.len())
                    .max_by(|&a, &b| by_rank(&queue[a], &queue[b]))
                    .expect("queue is non-empty");
                queue.swap_remove(worst);
            }
        }
    }
    Ok(accepted)
}

/// Stage 2: up to `h` candidate paths for every width from the largest switch
/// capacity down to 1 and every demand, searched against full capacities.
pub fn alg2_candidates(
    net: &Network,
    demands: &[Demand],
    h: usize,
) -> Result<CandidateSet, RouteError> {
    if h == 0 {
        return Err(RouteError::ZeroPaths);
    }
    for d in demands {
        d.validate(net)?;
    }
    let max_width = net.max_capacity().max(1);
    let caps = QubitLedger::full(net);
    let jobs: Vec<(u32, usize)> = (1..=max_width)
        .flat_map(|w| (0..demands.len()).map(move |d| (w, d)))
        .collect();
    let found: Vec<Vec<WidthedPath>> = jobs
        .par_iter()
        .map(|&(w, d)| {
            // every route has an interior switch, which needs 2w qubits
            if 2 * w > max_width {
                Ok(Vec::new())
            } else {
                best_paths(net, &demands[d], w, h, &caps)
            }
        })
        .collect::<Result<_, _>>()?;
    let mut by_width = vec![Vec::with_capacity(demands.len()); max_width as usize];
    for ((w, _), list) in jobs.into_iter().zip(found) {
        by_width[w as usize - 1].push(list);
    }
    Ok(CandidateSet {
        max_width,
        by_width,
    })
}

/// Width added to one channel by stage 4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub edge: EdgeId,
    /// Position of the demand in the routed demand list.
    pub demand: usize,
    /// Rate gain of that demand.
    pub delta: f64,
}

/// Committed routes: one flow graph per demand (possibly empty), the ledger
/// after commitment and the stage-4 widenings.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutePlan {
    pub flows: Vec<FlowGraph>,
    pub ledger: QubitLedger,
    pub augmentations: Vec<Augmentation>,
}

impl RoutePlan {
    pub fn empty(net: &Network, demands: &[Demand]) -> Self {
        RoutePlan {
            flows: demands
                .iter()
                .map(|d| FlowGraph::empty(d.id, d.source, d.dest))
                .collect(),
            ledger: QubitLedger::full(net),
            augmentations: Vec::new(),
        }
    }

    /// Analytic rate per demand.
    pub fn rates(&self, net: &Network) -> Result<Vec<f64>, RouteError> {
        self.flows
            .iter()
            .map(|fg| flow_graph_rate(net, fg).map_err(Into::into))
            .collect()
    }

    /// Network entanglement rate: the sum of per-demand rates.
    pub fn total_rate(&self, net: &Network) -> Result<f64, RouteError> {
        Ok(self.rates(net)?.iter().fold(0.0, |a, r| a + r))
    }

    /// Checks ledger bounds, per-switch qubit conservation and every flow graph.
    pub fn check_invariants(&self, net: &Network) -> Result<(), RouteError> {
        let mut committed: BTreeMap<NodeId, u64> = BTreeMap::new();
        for fg in &self.flows {
            fg.validate(net)?;
            if !fg.is_series_parallel(net)? {
                return Err(RouteError::Invariant(format!(
                    "flow graph of demand {} is not series-parallel",
                    fg.demand()
                )));
            }
            for (&e, &w) in fg.channels() {
                let edge = net.edge(e);
                for v in [edge.u, edge.v] {
                    if net.node(v).is_switch() {
                        *committed.entry(v).or_default() += w as u64;
                    }
                }
            }
        }
        conservation(net, &self.ledger, &committed)
    }

    /// Structured text export of the plan.
    pub fn to_text(&self, net: &Network, mode: &str) -> Result<String, RouteError> {
        let rates = self.rates(net)?;
        let doc = PlanDocument {
            mode: mode.to_string(),
            total_rate: rates.iter().fold(0.0, |a, r| a + r),
            demands: self
                .flows
                .iter()
                .zip(&rates)
                .map(|(fg, &rate)| DemandExport {
                    id: fg.demand(),
                    source: fg.source().0,
                    dest: fg.dest().0,
                    rate,
                    channels: fg
                        .channels()
                        .iter()
                        .map(|(&e, &width)| ChannelExport {
                            u: net.edge(e).u.0,
                            v: net.edge(e).v.0,
                            width,
                        })
                        .collect(),
                    paths: fg.paths().iter().map(PathExport::from).collect(),
                })
                .collect(),
            augmentations: self
                .augmentations
                .iter()
                .map(|a| AugmentationExport {
                    u: net.edge(a.edge).u.0,
                    v: net.edge(a.edge).v.0,
                    demand: self.flows[a.demand].demand(),
                    delta: a.delta,
                })
                .collect(),
        };
        Ok(toml::to_string(&doc).expect("plan documents always serialize"))
    }

    /// Graphviz rendering of the topology with each demand's channels colored.
    pub fn to_dot(&self, net: &Network) -> String {
        let layers: Vec<(usize, Vec<(EdgeId, u32)>)> = self
            .flows
            .iter()
            .map(|fg| (fg.demand(), fg.channels().iter().map(|(&e, &w)| (e, w)).collect()))
            .collect();
        routes_dot(net, &layers)
    }
}

pub(crate) fn conservation(
    net: &Network,
    ledger: &QubitLedger,
    committed: &BTreeMap<NodeId, u64>,
) -> Result<(), RouteError> {
    for sw in net.switches() {
        let cap = sw.capacity().expect("switch") as u64;
        let left = ledger.remaining(sw.id).ok_or_else(|| {
            RouteError::Invariant(format!("switch {} missing from the ledger", sw.id))
        })? as u64;
        if left > cap {
            return Err(RouteError::Invariant(format!(
                "switch {} has {left} free qubits above its capacity {cap}",
                sw.id
            )));
        }
        let used = committed.get(&sw.id).copied().unwrap_or(0);
        if cap - left != used {
            return Err(RouteError::Invariant(format!(
                "switch {}: ledger shows {} qubits used but channels hold {used}",
                sw.id,
                cap - left
            )));
        }
    }
    Ok(())
}

/// Text form of a committed plan, shared by the router and the baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub mode: String,
    pub total_rate: f64,
    pub demands: Vec<DemandExport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub augmentations: Vec<AugmentationExport>,
}

impl PlanDocument {
    pub fn parse(text: &str) -> Result<Self, NetError> {
        Ok(toml::from_str(text)?)
    }

    /// Rebuilds each demand's channels as a flow graph over `net`.
    pub fn flow_graphs(&self, net: &Network) -> Result<Vec<FlowGraph>, RouteError> {
        self.demands
            .iter()
            .map(|d| {
                let node = |id: u32| -> Result<NodeId, RouteError> {
                    let n = NodeId(id);
                    if net.contains(n) {
                        Ok(n)
                    } else {
                        Err(RateError::UnknownNode(n).into())
                    }
                };
                let channels = d
                    .channels
                    .iter()
                    .map(|c| {
                        let (u, v) = (node(c.u)?, node(c.v)?);
                        let e = net.edge_between(u, v).ok_or(RateError::NotAdjacent(u, v))?;
                        Ok((e, c.width))
                    })
                    .collect::<Result<Vec<_>, RouteError>>()?;
                let fg = FlowGraph::from_channels(d.id, node(d.source)?, node(d.dest)?, channels);
                fg.validate(net)?;
                Ok(fg)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandExport {
    pub id: usize,
    pub source: u32,
    pub dest: u32,
    pub rate: f64,
    pub channels: Vec<ChannelExport>,
    pub paths: Vec<PathExport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelExport {
    pub u: u32,
    pub v: u32,
    pub width: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathExport {
    pub nodes: Vec<u32>,
    pub width: u32,
    pub metric: f64,
}

impl From<&WidthedPath> for PathExport {
    fn from(p: &WidthedPath) -> Self {
        PathExport {
            nodes: p.nodes().iter().map(|n| n.0).collect(),
            width: p.width(),
            metric: p.metric(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationExport {
    pub u: u32,
    pub v: u32,
    pub demand: usize,
    pub delta: f64,
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
    "#bcbd22", "#7f7f7f",
];

pub(crate) fn routes_dot(net: &Network, layers: &[(usize, Vec<(EdgeId, u32)>)]) -> String {
    use std::fmt::Write;

    let mut out = crate::netgraph::topology_dot(net);
    out.truncate(out.len() - 2);
    let _ = writeln!(out, "  edge [color=\"#cccccc\"];");
    for (demand, channels) in layers {
        let color = PALETTE[demand % PALETTE.len()];
        for &(e, w) in channels {
            let edge = net.edge(e);
            let _ = writeln!(
                out,
                "  n{} -- n{} [color=\"{color}\", penwidth={}, label=\"d{demand} w{w}\"];",
                edge.u,
                edge.v,
                1 + w
            );
        }
    }
    out.push_str("}\n");
    out
}

/// Whether `path` attaches to the non-empty flow graph `fg` through a shared
/// prefix from the source and a shared suffix into the destination only, with a
/// middle section of fresh nodes.
fn attaches_at_ends(net: &Network, fg: &FlowGraph, path: &WidthedPath) -> bool {
    let edges = path.edges();
    let nodes = path.nodes();
    let prefix = edges.iter().take_while(|&&e| fg.contains_edge(e)).count();
    if prefix == edges.len() {
        return true;
    }
    let suffix = edges.iter().rev().take_while(|&&e| fg.contains_edge(e)).count();
    let known = fg.nodes(net);
    // nodes strictly between the prefix end and the suffix start
    let middle = &nodes[prefix + 1..nodes.len() - 1 - suffix];
    middle.iter().all(|n| !known.contains(n))
}

/// Outcome of trying to commit one candidate in stage 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOutcome {
    /// Committed; new channels were opened.
    Committed,
    /// Every hop already was a channel of the demand.
    Redundant,
    /// A switch lacks the qubits for the new hops.
    NoQubits,
    /// Merging would break the series-parallel shape of the flow graph.
    Shape,
}

/// Tries to merge `path` into the flow graph of demand position `d`.
pub fn try_commit(
    net: &Network,
    plan: &mut RoutePlan,
    d: usize,
    path: &WidthedPath,
) -> Result<MergeOutcome, RouteError> {
    let fg = &plan.flows[d];
    let fresh: Vec<EdgeId> = path
        .edges()
        .iter()
        .copied()
        .filter(|&e| !fg.contains_edge(e))
        .collect();
    if fresh.is_empty() {
        return Ok(MergeOutcome::Redundant);
    }
    let w = path.width();
    let mut need: BTreeMap<NodeId, u32> = BTreeMap::new();
    for &e in &fresh {
        let edge = net.edge(e);
        for v in [edge.u, edge.v] {
            if net.node(v).is_switch() {
                *need.entry(v).or_default() += w;
            }
        }
    }
    if need.iter().any(|(&v, &n)| !plan.ledger.has(v, n)) {
        return Ok(MergeOutcome::NoQubits);
    }
    if !fg.is_empty() {
        if !attaches_at_ends(net, fg, path) {
            return Ok(MergeOutcome::Shape);
        }
        let mut merged = fg.clone();
        merged.add_path(path.clone());
        if merged.validate(net).is_err() || !merged.is_series_parallel(net)? {
            return Ok(MergeOutcome::Shape);
        }
    }
    for (&v, &n) in &need {
        plan.ledger.debit(v, n)?;
    }
    plan.flows[d].add_path(path.clone());
    Ok(MergeOutcome::Committed)
}

/// Stage 3 with a hook called after every commitment.
pub fn alg3_merge_observed(
    net: &Network,
    demands: &[Demand],
    candidates: &CandidateSet,
    mut observe: impl FnMut(&RoutePlan),
) -> Result<RoutePlan, RouteError> {
    let mut plan = RoutePlan::empty(net, demands);
    for w in (1..=candidates.max_width()).rev() {
        let mut batch: Vec<(usize, &WidthedPath)> = (0..demands.len())
            .flat_map(|d| candidates.paths(w, d).iter().map(move |p| (d, p)))
            .collect();
        batch.sort_by(|a, b| a.1.rank_cmp(b.1).then(a.0.cmp(&b.0)));
        for (d, path) in batch {
            if try_commit(net, &mut plan, d, path)? == MergeOutcome::Committed {
                observe(&plan);
            }
        }
    }
    Ok(plan)
}

/// Stage 3: greedy commitment of candidates, widest first and best metric first
/// within a width.
///
/// A candidate is accepted when every hop is either already a channel of the
/// same demand (shared, no new qubits) or can draw `w` qubits at each switch
/// endpoint from the live ledger. Merges must attach at the two ends of the
/// existing flow graph and keep it series-parallel.
pub fn alg3_merge(
    net: &Network,
    demands: &[Demand],
    candidates: &CandidateSet,
) -> Result<RoutePlan, RouteError> {
    alg3_merge_observed(net, demands, candidates, |_| {})
}

/// Stage 4 with a hook called after every single widening.
pub fn alg4_augment_observed(
    net: &Network,
    mut plan: RoutePlan,
    mut observe: impl FnMut(&RoutePlan),
) -> Result<RoutePlan, RouteError> {
    let mut rates = plan.rates(net)?;
    for (idx, edge) in net.edges().iter().enumerate() {
        let e = EdgeId(idx as u32);
        let users: Vec<usize> = (0..plan.flows.len())
            .filter(|&d| plan.flows[d].contains_edge(e))
            .collect();
        if users.is_empty() {
            continue;
        }
        while plan.ledger.has(edge.u, 1) && plan.ledger.has(edge.v, 1) {
            let mut best: Option<(usize, f64, f64)> = None;
            for &d in &users {
                let mut wider = plan.flows[d].clone();
                let w = wider.width(e).expect("flow graph holds the edge");
                wider.set_width(e, w + 1);
                let r = flow_graph_rate(net, &wider)?;
                let delta = r - rates[d];
                if best.is_none_or(|(_, bd, _)| delta > bd) {
                    best = Some((d, delta, r));
                }
            }
            let Some((d, delta, r)) = best.filter(|b| b.1 > 0.0) else {
                break;
            };
            let w = plan.flows[d].width(e).expect("flow graph holds the edge");
            plan.flows[d].set_width(e, w + 1);
            plan.ledger.debit(edge.u, 1)?;
            plan.ledger.debit(edge.v, 1)?;
            rates[d] = r;
            plan.augmentations.push(Augmentation {
                edge: e,
                demand: d,
                delta,
            });
            observe(&plan);
        }
    }
    Ok(plan)
}

/// Stage 4: spends leftover qubits one link at a time on the channel whose
/// widening gives the largest rate increase, edge by edge.
pub fn alg4_augment(net: &Network, plan: RoutePlan) -> Result<RoutePlan, RouteError> {
    alg4_augment_observed(net, plan, |_| {})
}

/// Wall-clock time spent in each stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    /// Candidate search (stages 1 and 2).
    pub candidates: Duration,
    pub merge: Duration,
    pub augment: Duration,
}

/// Which stages to run after candidate search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stages {
    MergeOnly,
    Full,
}

/// Runs the pipeline and reports stage timings. `observe` sees the plan after
/// every stage-3 commit and stage-4 widening.
pub fn run_pipeline_observed(
    net: &Network,
    demands: &[Demand],
    h: usize,
    stages: Stages,
    mut observe: impl FnMut(&RoutePlan),
) -> Result<(RoutePlan, StageTimings), RouteError> {
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let candidates = alg2_candidates(net, demands, h)?;
    timings.candidates = t.elapsed();
    let t = Instant::now();
    let plan = alg3_merge_observed(net, demands, &candidates, &mut observe)?;
    timings.merge = t.elapsed();
    let plan = match stages {
        Stages::MergeOnly => plan,
        Stages::Full => {
            let t = Instant::now();
            let plan = alg4_augment_observed(net, plan, &mut observe)?;
            timings.augment = t.elapsed();
            plan
        }
    };
    Ok((plan, timings))
}

/// Candidate search, merge and augmentation.
pub fn run_pipeline(net: &Network, demands: &[Demand], h: usize) -> Result<RoutePlan, RouteError> {
    Ok(run_pipeline_observed(net, demands, h, Stages::Full, |_| {})?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::netgraph::{Edge, Node};
    use crate::rate::path_rate;

    fn net(nodes: Vec<Node>, edges: &[(u32, u32, f64)]) -> Network {
        Network::new(
            nodes,
            edges
                .iter()
                .map(|&(a, b, p)| Edge::new(NodeId(a), NodeId(b), 1.0, p))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ledger_accounting() {
        let (n, _) = fixtures::alice_carol_bob(0.5, 0.9, 3);
        let mut ledger = QubitLedger::full(&n);
        assert_eq!(ledger.remaining(NodeId(0)), None);
        assert_eq!(ledger.remaining(NodeId(1)), Some(3));
        ledger.debit(NodeId(1), 2).unwrap();
        ledger.debit(NodeId(0), 1000).unwrap();
        assert_eq!(ledger.used(NodeId(1)), 2);
        assert!(matches!(
            ledger.debit(NodeId(1), 2),
            Err(RouteError::Overdraft { remaining: 1, .. })
        ));
        assert_eq!(ledger.remaining(NodeId(1)), Some(1));
    }

    #[test]
    fn alg1_no_path_when_switch_too_small() {
        let (n, [a, _, b]) = fixtures::alice_carol_bob(0.5, 0.9, 3);
        let caps = QubitLedger::full(&n);
        let demand = Demand::new(0, a, b);
        assert!(alg1_best_path(&n, &demand, 2, &caps).unwrap().is_none());
        let one = alg1_best_path(&n, &demand, 1, &caps).unwrap().unwrap();
        assert_eq!(one.nodes(), &[a, NodeId(1), b]);
        assert!(alg1_best_path(&n, &demand, 0, &caps).is_err());
    }

    #[test]
    fn alg1_prefers_better_two_hop_route() {
        // S=0, v=1, w=2 (weak direct relay), D=3
        let n = net(
            vec![
                Node::user(0, 0.0, 0.0),
                Node::switch(1, 1.0, 1.0, 4, 0.9),
                Node::switch(2, 1.0, 0.0, 4, 1.0),
                Node::user(3, 2.0, 0.0),
            ],
            &[(0, 1, 0.9), (1, 3, 0.9), (0, 2, 0.5), (2, 3, 1.0)],
        );
        let d = Demand::new(0, NodeId(0), NodeId(3));
        let p = alg1_best_path(&n, &d, 1, &QubitLedger::full(&n)).unwrap().unwrap();
        assert_eq!(p.nodes(), &[NodeId(0), NodeId(1), NodeId(3)]);
        assert!((p.metric() - 0.729).abs() < 1e-12);
        assert_eq!(p.metric(), path_rate(&n, &p).unwrap());
    }

    #[test]
    fn alg1_prefix_metrics_do_not_increase() {
        let (n, demands) = crate::netgraph::generate(&crate::netgraph::GenParams {
            n_switches: 30,
            n_users: 6,
            n_demands: 4,
            avg_degree: 6.0,
            ..Default::default()
        })
        .unwrap();
        let caps = QubitLedger::full(&n);
        for d in &demands {
            let p = alg1_best_path(&n, d, 1, &caps).unwrap().unwrap();
            let mut last = 1.0;
            for k in 1..p.nodes().len() {
                let prefix =
                    rate::path_rate_with_widths(&n, &p.nodes()[..=k], &vec![1; k]).unwrap();
                assert!(prefix <= last);
                last = prefix;
            }
        }
    }

    #[test]
    fn h_one_is_alg1() {
        let (n, demands) = crate::netgraph::generate(&crate::netgraph::GenParams {
            n_switches: 20,
            n_users: 4,
            n_demands: 3,
            avg_degree: 5.0,
            capacity: 6,
            ..Default::default()
        })
        .unwrap();
        let cands = alg2_candidates(&n, &demands, 1).unwrap();
        let caps = QubitLedger::full(&n);
        assert_eq!(cands.max_width(), 6);
        for w in 1..=6 {
            for (i, d) in demands.iter().enumerate() {
                let expect: Vec<WidthedPath> =
                    alg1_best_path(&n, d, w, &caps).unwrap().into_iter().collect();
                assert_eq!(cands.paths(w, i), expect.as_slice());
            }
        }
        // widths above capacity / 2 cannot pass any switch
        for w in 4..=6 {
            assert!((0..demands.len()).all(|i| cands.paths(w, i).is_empty()));
        }
    }

    #[test]
    fn candidates_are_sorted_and_distinct() {
        let (n, demands) = crate::netgraph::generate(&crate::netgraph::GenParams {
            n_switches: 25,
            n_users: 4,
            n_demands: 3,
            avg_degree: 6.0,
            ..Default::default()
        })
        .unwrap();
        let cands = alg2_candidates(&n, &demands, 6).unwrap();
        for w in 1..=cands.max_width() {
            for i in 0..demands.len() {
                let list = cands.paths(w, i);
                assert!(list.len() <= 6);
                for pair in list.windows(2) {
                    assert_ne!(pair[0].rank_cmp(&pair[1]), Ordering::Greater);
                    assert_ne!(pair[0].nodes(), pair[1].nodes());
                }
            }
        }
    }

    #[test]
    fn zero_paths_is_rejected() {
        let (n, [a, _, b]) = fixtures::alice_carol_bob(0.5, 0.9, 4);
        assert!(matches!(
            alg2_candidates(&n, &[Demand::new(0, a, b)], 0),
            Err(RouteError::ZeroPaths)
        ));
    }

    #[test]
    fn single_demand_gets_widest_path() {
        let n = fixtures::chain(&[0.4, 0.5, 0.6], 0.9, 8);
        let d = [Demand::new(0, NodeId(0), NodeId(3))];
        let cands = alg2_candidates(&n, &d, 5).unwrap();
        let plan = alg3_merge(&n, &d, &cands).unwrap();
        assert_eq!(plan.flows[0].paths().len(), 1);
        assert_eq!(plan.flows[0].paths()[0].width(), 4);
        assert!(plan.ledger.iter().all(|(_, r)| r == 0));
        plan.check_invariants(&n).unwrap();
    }

    /// S=0 - a=1 - {b=2 | c=3} - D=4: two candidates share the S-a prefix.
    fn shared_prefix_net(cap_a: u32) -> Network {
        net(
            vec![
                Node::user(0, 0.0, 0.0),
                Node::switch(1, 1.0, 0.0, cap_a, 0.9),
                Node::switch(2, 2.0, 1.0, 2, 0.9),
                Node::switch(3, 2.0, -1.0, 2, 0.9),
                Node::user(4, 3.0, 0.0),
            ],
            &[(0, 1, 0.9), (1, 2, 0.8), (1, 3, 0.7), (2, 4, 0.8), (3, 4, 0.7)],
        )
    }

    #[test]
    fn shared_prefix_is_debited_once() {
        // a needs 1 (S-a) + 1 (a-b) + 1 (a-c) = 3 qubits only if S-a is shared
        let n = shared_prefix_net(3);
        let d = [Demand::new(0, NodeId(0), NodeId(4))];
        let cands = alg2_candidates(&n, &d, 5).unwrap();
        assert_eq!(cands.paths(1, 0).len(), 2);
        let mut commits = 0;
        let plan = alg3_merge_observed(&n, &d, &cands, |p| {
            commits += 1;
            p.check_invariants(&n).unwrap();
        })
        .unwrap();
        assert_eq!(commits, 2);
        assert_eq!(plan.flows[0].channels().len(), 5);
        assert_eq!(plan.ledger.remaining(NodeId(1)), Some(0));
        let branch_b = 0.8 * 0.9 * 0.8;
        let branch_c = 0.7 * 0.9 * 0.7;
        let expect = 0.9 * 0.9 * (1.0 - (1.0 - branch_b) * (1.0 - branch_c));
        assert!((plan.total_rate(&n).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn bottleneck_goes_to_the_better_demand() {
        // users 0,1 on the left, 3,4 on the right, one switch with 2 qubits
        let n = net(
            vec![
                Node::user(0, 0.0, 0.0),
                Node::user(1, 0.0, 1.0),
                Node::switch(2, 1.0, 0.0, 2, 0.9),
                Node::user(3, 2.0, 0.0),
                Node::user(4, 2.0, 1.0),
            ],
            &[(0, 2, 0.9), (2, 3, 0.9), (1, 2, 0.5), (2, 4, 0.5)],
        );
        let d = [
            Demand::new(0, NodeId(1), NodeId(4)),
            Demand::new(1, NodeId(0), NodeId(3)),
        ];
        let plan = alg3_merge(&n, &d, &alg2_candidates(&n, &d, 3).unwrap()).unwrap();
        assert!(plan.flows[0].is_empty());
        assert_eq!(plan.flows[1].paths().len(), 1);
        assert_eq!(plan.ledger.remaining(NodeId(2)), Some(0));
        assert!((plan.total_rate(&n).unwrap() - 0.9 * 0.9 * 0.9).abs() < 1e-12);
        plan.check_invariants(&n).unwrap();
    }

    #[test]
    fn crossing_merge_is_rejected() {
        // S=0, a=1, b=2, c=3, e=4, x=5, D=6: branches S-a-b-D and S-c-e-D, then
        // S-a-x-e-D would create a bridge
        let n = net(
            vec![
                Node::user(0, 0.0, 0.0),
                Node::switch(1, 1.0, 1.0, 8, 0.9),
                Node::switch(2, 2.0, 1.0, 8, 0.9),
                Node::switch(3, 1.0, -1.0, 8, 0.9),
                Node::switch(4, 2.0, -1.0, 8, 0.9),
                Node::switch(5, 1.5, 0.0, 8, 0.9),
                Node::user(6, 3.0, 0.0),
            ],
            &[
                (0, 1, 0.9),
                (1, 2, 0.9),
                (2, 6, 0.9),
                (0, 3, 0.8),
                (3, 4, 0.8),
                (4, 6, 0.8),
                (1, 5, 0.95),
                (5, 4, 0.95),
            ],
        );
        let path = |ids: &[u32]| {
            WidthedPath::new(&n, ids.iter().map(|&i| NodeId(i)).collect(), 1).unwrap()
        };
        let d = [Demand::new(0, NodeId(0), NodeId(6))];
        let mut plan = RoutePlan::empty(&n, &d);
        assert_eq!(try_commit(&n, &mut plan, 0, &path(&[0, 1, 2, 6])).unwrap(), MergeOutcome::Committed);
        assert_eq!(try_commit(&n, &mut plan, 0, &path(&[0, 3, 4, 6])).unwrap(), MergeOutcome::Committed);
        assert_eq!(try_commit(&n, &mut plan, 0, &path(&[0, 1, 5, 4, 6])).unwrap(), MergeOutcome::Shape);
        assert_eq!(try_commit(&n, &mut plan, 0, &path(&[0, 1, 2, 6])).unwrap(), MergeOutcome::Redundant);
        plan.check_invariants(&n).unwrap();
    }

    #[test]
    fn augment_widens_the_bottleneck() {
        let (p, q) = (0.4, 0.9);
        let (n, [a, c, b]) = fixtures::alice_carol_bob(p, q, 3);
        let d = [Demand::new(0, a, b)];
        let plan = alg3_merge(&n, &d, &alg2_candidates(&n, &d, 5).unwrap()).unwrap();
        let before = plan.total_rate(&n).unwrap();
        assert!((before - p * q * p).abs() < 1e-12);
        let after = alg4_augment(&n, plan).unwrap();
        assert_eq!(after.augmentations.len(), 1);
        let aug = after.augmentations[0];
        assert_eq!(aug.edge, n.edge_between(a, c).unwrap());
        let expect = (1.0 - (1.0 - p) * (1.0 - p)) * p * q;
        assert!((after.total_rate(&n).unwrap() - expect).abs() < 1e-12);
        assert!((aug.delta - (expect - before)).abs() < 1e-12);
        assert_eq!(after.ledger.remaining(c), Some(0));
        after.check_invariants(&n).unwrap();
    }

    #[test]
    fn augment_without_free_qubits_is_a_no_op() {
        let n = fixtures::chain(&[0.4, 0.5], 0.9, 2);
        let d = [Demand::new(0, NodeId(0), NodeId(2))];
        let plan = alg3_merge(&n, &d, &alg2_candidates(&n, &d, 5).unwrap()).unwrap();
        let after = alg4_augment(&n, plan.clone()).unwrap();
        assert_eq!(after, plan);
    }

    #[test]
    fn augment_skips_edges_off_route() {
        // the spare switch 3 hangs off the route; its qubits stay free
        let n = net(
            vec![
                Node::user(0, 0.0, 0.0),
                Node::switch(1, 1.0, 0.0, 2, 0.9),
                Node::user(2, 2.0, 0.0),
                Node::switch(3, 1.0, 1.0, 4, 0.9),
            ],
            &[(0, 1, 0.6), (1, 2, 0.6), (0, 3, 0.2), (3, 1, 0.2)],
        );
        let d = [Demand::new(0, NodeId(0), NodeId(2))];
        let plan = run_pipeline(&n, &d, 5).unwrap();
        assert!(plan.augmentations.is_empty());
        assert_eq!(plan.ledger.remaining(NodeId(3)), Some(4));
    }

    #[test]
    fn pipeline_with_no_demands() {
        let n = fixtures::chain(&[0.4, 0.5], 0.9, 2);
        let plan = run_pipeline(&n, &[], 5).unwrap();
        assert!(plan.flows.is_empty());
        assert_eq!(plan.total_rate(&n).unwrap(), 0.0);
    }

    #[test]
    fn plan_exports() {
        let n = shared_prefix_net(3);
        let d = [Demand::new(7, NodeId(0), NodeId(4))];
        let plan = run_pipeline(&n, &d, 5).unwrap();
        let text = plan.to_text(&n, "nfusion").unwrap();
        assert!(text.starts_with("mode = \"nfusion\""));
        assert!(text.contains("[[demands]]"));
        assert!(text.contains("id = 7"));
        let dot = plan.to_dot(&n);
        assert!(dot.contains("label=\"d7 w1\""));
        assert!(dot.trim_end().ends_with('}'));
    }
}
