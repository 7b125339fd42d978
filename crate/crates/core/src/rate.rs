//! Entanglement rates of channels, paths and flow graphs.
//!
//! Links and fusions are independent Bernoulli events: a width-`w` channel over an
//! edge with link probability `p` is up when at least one of its links succeeds,
//! and a switch that is interior to a route fuses all of its successful incident
//! links at once with probability `q`. A state is shared when the two users are
//! connected through up channels and up switches.
//!
//! [`flow_graph_rate`] is the analytic recursion; [`exhaustive_rate`] and
//! [`monte_carlo_rate`] evaluate the same event model by enumeration and by
//! sampling and serve as oracles for it.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::netgraph::{EdgeId, Network, NodeId};

/// Default cap on `sum(widths) + interior switches` for [`exhaustive_rate`].
pub const DEFAULT_ENUMERATION_BOUND: usize = 24;

/// Paths longer than this are scored in log space.
const LOG_SPACE_HOPS: usize = 64;

const MC_BLOCK: u64 = 1 << 16;

#[derive(Debug, Error, PartialEq)]
pub enum RateError {
    #[error("channel width must be at least 1")]
    ZeroWidth,
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("a path needs at least two nodes")]
    TooShort,
    #[error("path has {nodes} nodes but {widths} hop widths")]
    WidthCount { nodes: usize, widths: usize },
    #[error("node {0} is not part of the network")]
    UnknownNode(NodeId),
    #[error("nodes {0} and {1} are not adjacent")]
    NotAdjacent(NodeId, NodeId),
    #[error("node {0} appears twice on the path")]
    RepeatedNode(NodeId),
    #[error("user {0} cannot relay as an interior path node")]
    InteriorUser(NodeId),
    #[error("flow graph channels do not connect {0} and {1}")]
    Disconnected(NodeId, NodeId),
    #[error("flow graph evaluation exceeded recursion depth {0}")]
    DepthExceeded(usize),
    #[error("edge {0} is not part of the network")]
    UnknownEdge(EdgeId),
    #[error("flow graph invariant violated: {0}")]
    InvalidFlowGraph(String),
    #[error("{count} probabilistic elements exceed the enumeration bound {bound}; use monte_carlo_rate")]
    TooManyElements { count: usize, bound: usize },
}

fn check_prob(p: f64) -> Result<(), RateError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(RateError::Probability(p))
    }
}

/// `1 - (1 - p)^w`, the probability that at least one of `w` links succeeds.
pub fn channel_rate(p: f64, width: u32) -> Result<f64, RateError> {
    if width == 0 {
        return Err(RateError::ZeroWidth);
    }
    check_prob(p)?;
    Ok(channel_rate_unchecked(p, width))
}

#[inline]
pub(crate) fn channel_rate_unchecked(p: f64, width: u32) -> f64 {
    if p >= 1.0 {
        return 1.0;
    }
    -f64::exp_m1(width as f64 * f64::ln_1p(-p))
}

fn validate_walk(net: &Network, nodes: &[NodeId]) -> Result<Vec<EdgeId>, RateError> {
    if nodes.len() < 2 {
        return Err(RateError::TooShort);
    }
    let mut seen = BTreeSet::new();
    for &n in nodes {
        if !net.contains(n) {
            return Err(RateError::UnknownNode(n));
        }
        if !seen.insert(n) {
            return Err(RateError::RepeatedNode(n));
        }
    }
    for &n in &nodes[1..nodes.len() - 1] {
        if net.node(n).is_user() {
            return Err(RateError::InteriorUser(n));
        }
    }
    nodes
        .windows(2)
        .map(|w| net.edge_between(w[0], w[1]).ok_or(RateError::NotAdjacent(w[0], w[1])))
        .collect()
}

/// Product of hop channel rates and interior swap probabilities, multiplied in
/// path order. Switches to log space for very long paths.
fn score_walk(net: &Network, nodes: &[NodeId], edges: &[EdgeId], widths: &[u32]) -> f64 {
    if edges.len() > LOG_SPACE_HOPS {
        let mut log = 0.0;
        for (k, (&e, &w)) in edges.iter().zip(widths).enumerate() {
            if k > 0 {
                log += net.node(nodes[k]).swap_prob().ln();
            }
            log += channel_rate_unchecked(net.edge(e).link_prob, w).ln();
        }
        return log.exp();
    }
    let mut m = 1.0;
    for (k, (&e, &w)) in edges.iter().zip(widths).enumerate() {
        if k > 0 {
            m *= net.node(nodes[k]).swap_prob();
        }
        m *= channel_rate_unchecked(net.edge(e).link_prob, w);
    }
    m
}

/// Rate of a simple path with an individual width per hop.
pub fn path_rate_with_widths(
    net: &Network,
    nodes: &[NodeId],
    widths: &[u32],
) -> Result<f64, RateError> {
    if widths.len() + 1 != nodes.len() {
        return Err(RateError::WidthCount {
            nodes: nodes.len(),
            widths: widths.len(),
        });
    }
    if widths.contains(&0) {
        return Err(RateError::ZeroWidth);
    }
    let edges = validate_walk(net, nodes)?;
    Ok(score_walk(net, nodes, &edges, widths))
}

/// A simple path with one channel width on every hop and its cached analytic rate.
#[derive(Debug, Clone, PartialEq)]
pub struct WidthedPath {
    nodes: Vec<NodeId>,
    edges: Vec<EdgeId>,
    width: u32,
    metric: f64,
}

impl WidthedPath {
    pub fn new(net: &Network, nodes: Vec<NodeId>, width: u32) -> Result<Self, RateError> {
        if width == 0 {
            return Err(RateError::ZeroWidth);
        }
        let edges = validate_walk(net, &nodes)?;
        let widths = vec![width; edges.len()];
        let metric = score_walk(net, &nodes, &edges, &widths);
        Ok(WidthedPath {
            nodes,
            edges,
            width,
            metric,
        })
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn edges(&self) -> &[EdgeId] {
        &self.edges
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    /// Analytic rate, equal to [`path_rate`] of this path.
    pub fn metric(&self) -> f64 {
        self.metric
    }

    pub fn hops(&self) -> usize {
        self.edges.len()
    }

    pub fn source(&self) -> NodeId {
        self.nodes[0]
    }

    pub fn dest(&self) -> NodeId {
        *self.nodes.last().expect("paths have at least two nodes")
    }

    pub fn interior(&self) -> &[NodeId] {
        &self.nodes[1..self.nodes.len() - 1]
    }

    /// Ranking used wherever paths compete: metric descending, then fewer hops,
    /// then the lexicographically smaller node sequence.
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        rank_cmp(self.metric, &self.nodes, other.metric, &other.nodes)
    }
}

pub(crate) fn rank_cmp(ma: f64, na: &[NodeId], mb: f64, nb: &[NodeId]) -> Ordering {
    mb.total_cmp(&ma)
        .then(na.len().cmp(&nb.len()))
        .then_with(|| na.cmp(nb))
}

/// Analytic rate of a uniform-width path: product of the hop channel rates times
/// the swap probability of every interior switch.
pub fn path_rate(net: &Network, path: &WidthedPath) -> Result<f64, RateError> {
    path_rate_with_widths(net, &path.nodes, &vec![path.width; path.hops()])
}

/// Expected number of end-to-end Bell pairs when a width-`w` path is operated as
/// `w` independent width-1 lanes with two-link swapping: `w * prod(p) * prod(q)`.
pub fn classic_path_rate(net: &Network, path: &WidthedPath) -> Result<f64, RateError> {
    let edges = validate_walk(net, &path.nodes)?;
    let lane = score_walk(net, &path.nodes, &edges, &vec![1; edges.len()]);
    Ok(path.width as f64 * lane)
}

/// Channels allocated to one shared state, merged from one or more paths.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGraph {
    demand: usize,
    source: NodeId,
    dest: NodeId,
    channels: BTreeMap<EdgeId, u32>,
    paths: Vec<WidthedPath>,
}

impl FlowGraph {
    /// Empty flow graph: the demand is not served.
    pub fn empty(demand: usize, source: NodeId, dest: NodeId) -> Self {
        FlowGraph {
            demand,
            source,
            dest,
            channels: BTreeMap::new(),
            paths: Vec::new(),
        }
    }

    pub fn from_path(demand: usize, path: WidthedPath) -> Self {
        let mut fg = FlowGraph::empty(demand, path.source(), path.dest());
        fg.add_path(path);
        fg
    }

    /// Flow graph given directly by its channel widths, without member paths.
    pub fn from_channels(
        demand: usize,
        source: NodeId,
        dest: NodeId,
        channels: impl IntoIterator<Item = (EdgeId, u32)>,
    ) -> Self {
        FlowGraph {
            demand,
            source,
            dest,
            channels: channels.into_iter().collect(),
            paths: Vec::new(),
        }
    }

    /// Merges `path`: hops on edges that are already channels share them, other
    /// hops become new channels of the path's width. Returns the new edges.
    pub fn add_path(&mut self, path: WidthedPath) -> Vec<EdgeId> {
        let mut fresh = Vec::new();
        for &e in path.edges() {
            if let std::collections::btree_map::Entry::Vacant(slot) = self.channels.entry(e) {
                slot.insert(path.width());
                fresh.push(e);
            }
        }
        self.paths.push(path);
        fresh
    }

    pub fn demand(&self) -> usize {
        self.demand
    }

    pub fn source(&self) -> NodeId {
        self.source
    }

    pub fn dest(&self) -> NodeId {
        self.dest
    }

    pub fn channels(&self) -> &BTreeMap<EdgeId, u32> {
        &self.channels
    }

    pub fn paths(&self) -> &[WidthedPath] {
        &self.paths
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn width(&self, e: EdgeId) -> Option<u32> {
        self.channels.get(&e).copied()
    }

    pub fn contains_edge(&self, e: EdgeId) -> bool {
        self.channels.contains_key(&e)
    }

    /// Sets the width of an existing channel.
    pub fn set_width(&mut self, e: EdgeId, width: u32) {
        assert!(width >= 1, "channel width must stay positive");
        let slot = self
            .channels
            .get_mut(&e)
            .expect("only existing channels can be widened");
        *slot = width;
    }

    /// Every node touched by a channel.
    pub fn nodes(&self, net: &Network) -> BTreeSet<NodeId> {
        self.channels
            .keys()
            .flat_map(|&e| {
                let edge = net.edge(e);
                [edge.u, edge.v]
            })
            .collect()
    }

    /// Nodes of the flow graph other than the two terminals.
    pub fn interior_nodes(&self, net: &Network) -> Vec<NodeId> {
        self.nodes(net)
            .into_iter()
            .filter(|&n| n != self.source && n != self.dest)
            .collect()
    }

    /// Number of independent random elements: every link plus every interior switch.
    pub fn element_count(&self, net: &Network) -> usize {
        let links: u32 = self.channels.values().sum();
        links as usize + self.interior_nodes(net).len()
    }

    /// Checks connectivity, member-path coverage and acyclicity of the
    /// path-oriented channel graph. Coverage is skipped for graphs built with
    /// [`FlowGraph::from_channels`].
    pub fn validate(&self, net: &Network) -> Result<(), RateError> {
        for (&e, &w) in &self.channels {
            if e.index() >= net.edge_count() {
                return Err(RateError::UnknownEdge(e));
            }
            if w == 0 {
                return Err(RateError::ZeroWidth);
            }
        }
        if self.is_empty() {
            return Ok(());
        }
        let local = LocalGraph::build(net, self)?;
        if !local.reaches(local.src, local.dst, &local.all_edges(), None) {
            return Err(RateError::Disconnected(self.source, self.dest));
        }
        if self.paths.is_empty() {
            return Ok(());
        }
        let mut covered = BTreeSet::new();
        let mut succ: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
        for p in &self.paths {
            if p.source() != self.source || p.dest() != self.dest {
                return Err(RateError::InvalidFlowGraph(format!(
                    "member path {:?} does not join the demand endpoints",
                    p.nodes()
                )));
            }
            for (w, &e) in p.nodes().windows(2).zip(p.edges()) {
                if !self.channels.contains_key(&e) {
                    return Err(RateError::InvalidFlowGraph(format!(
                        "member path hop {}-{} has no channel",
                        w[0], w[1]
                    )));
                }
                covered.insert(e);
                succ.entry(w[0]).or_default().insert(w[1]);
            }
        }
        if covered.len() != self.channels.len() {
            return Err(RateError::InvalidFlowGraph(
                "a channel lies on no member path".into(),
            ));
        }
        if has_cycle(&succ) {
            return Err(RateError::InvalidFlowGraph(
                "member paths orient the channels cyclically".into(),
            ));
        }
        Ok(())
    }

    /// True when the channel graph is two-terminal series-parallel, i.e. when
    /// [`flow_graph_rate`] is exact on it.
    pub fn is_series_parallel(&self, net: &Network) -> Result<bool, RateError> {
        if self.is_empty() {
            return Ok(true);
        }
        Ok(evaluate(net, self)?.1)
    }
}

fn has_cycle(succ: &BTreeMap<NodeId, BTreeSet<NodeId>>) -> bool {
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state: HashMap<NodeId, u8> = HashMap::new();
    for &start in succ.keys() {
        if state.get(&start).copied().unwrap_or(0) != 0 {
            continue;
        }
        let mut stack = vec![(start, false)];
        while let Some((n, leaving)) = stack.pop() {
            if leaving {
                state.insert(n, 2);
                continue;
            }
            match state.get(&n).copied().unwrap_or(0) {
                1 | 2 => continue,
                _ => {}
            }
            state.insert(n, 1);
            stack.push((n, true));
            for &m in succ.get(&n).into_iter().flatten() {
                match state.get(&m).copied().unwrap_or(0) {
                    1 => return true,
                    0 => stack.push((m, false)),
                    _ => {}
                }
            }
        }
    }
    false
}

/// Compact view of a flow graph: local node indices, channel probabilities and
/// interior swap probabilities.
struct LocalGraph {
    ids: Vec<NodeId>,
    swap: Vec<f64>,
    /// (a, b, link prob, width) per channel, in channel order.
    channels: Vec<(usize, usize, f64, u32)>,
    adj: Vec<Vec<(usize, usize)>>,
    src: usize,
    dst: usize,
}

impl LocalGraph {
    fn build(net: &Network, fg: &FlowGraph) -> Result<Self, RateError> {
        let mut index: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut ids = Vec::new();
        let mut intern = |n: NodeId, ids: &mut Vec<NodeId>| -> usize {
            *index.entry(n).or_insert_with(|| {
                ids.push(n);
                ids.len() - 1
            })
        };
        let src = intern(fg.source, &mut ids);
        let dst = intern(fg.dest, &mut ids);
        let mut channels = Vec::with_capacity(fg.channels.len());
        for (&e, &w) in &fg.channels {
            if e.index() >= net.edge_count() {
                return Err(RateError::UnknownEdge(e));
            }
            if w == 0 {
                return Err(RateError::ZeroWidth);
            }
            let edge = net.edge(e);
            let a = intern(edge.u, &mut ids);
            let b = intern(edge.v, &mut ids);
            channels.push((a, b, edge.link_prob, w));
        }
        let mut adj = vec![Vec::new(); ids.len()];
        for (k, &(a, b, _, _)) in channels.iter().enumerate() {
            adj[a].push((b, k));
            adj[b].push((a, k));
        }
        let swap = ids
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                if i == src || i == dst {
                    1.0
                } else {
                    net.node(n).swap_prob()
                }
            })
            .collect();
        Ok(LocalGraph {
            ids,
            swap,
            channels,
            adj,
            src,
            dst,
        })
    }

    fn all_edges(&self) -> Vec<usize> {
        (0..self.channels.len()).collect()
    }

    fn ends(&self, k: usize) -> (usize, usize) {
        (self.channels[k].0, self.channels[k].1)
    }

    /// Nodes reachable from `from` over `edges` without entering `blocked`.
    fn component(&self, from: usize, edges: &[usize], blocked: &[usize]) -> Vec<bool> {
        let mut allowed = vec![false; self.channels.len()];
        for &k in edges {
            allowed[k] = true;
        }
        let mut seen = vec![false; self.ids.len()];
        seen[from] = true;
        let mut stack = vec![from];
        while let Some(n) = stack.pop() {
            for &(m, k) in &self.adj[n] {
                if allowed[k] && !seen[m] && !blocked.contains(&m) {
                    seen[m] = true;
                    stack.push(m);
                }
            }
        }
        seen
    }

    fn reaches(&self, a: usize, b: usize, edges: &[usize], blocked: Option<usize>) -> bool {
        let blocked: Vec<usize> = blocked.into_iter().collect();
        self.component(a, edges, &blocked)[b]
    }

    /// Some simple a-b path over `edges`, as a node list.
    fn any_path(&self, a: usize, b: usize, edges: &[usize]) -> Option<Vec<usize>> {
        let mut allowed = vec![false; self.channels.len()];
        for &k in edges {
            allowed[k] = true;
        }
        let mut prev = vec![usize::MAX; self.ids.len()];
        prev[a] = a;
        let mut queue = std::collections::VecDeque::from([a]);
        while let Some(n) = queue.pop_front() {
            if n == b {
                break;
            }
            for &(m, k) in &self.adj[n] {
                if allowed[k] && prev[m] == usize::MAX {
                    prev[m] = n;
                    queue.push_back(m);
                }
            }
        }
        if prev[b] == usize::MAX {
            return None;
        }
        let mut path = vec![b];
        let mut cur = b;
        while cur != a {
            cur = prev[cur];
            path.push(cur);
        }
        path.reverse();
        Some(path)
    }
}

struct Evaluator<'a> {
    g: &'a LocalGraph,
    /// Channel success probabilities.
    up: Vec<f64>,
    exact: bool,
    max_depth: usize,
}

impl Evaluator<'_> {
    /// Rate between terminals `a` and `b` of the sub-graph spanned by `edges`.
    /// Swap probabilities of `a` and `b` are applied by the caller.
    fn rate(&mut self, a: usize, b: usize, edges: &[usize], depth: usize) -> Result<f64, RateError> {
        if depth > self.max_depth {
            return Err(RateError::DepthExceeded(self.max_depth));
        }
        let Some(walk) = self.g.any_path(a, b, edges) else {
            return Ok(0.0);
        };
        if walk.len() == 2 && edges.len() == 1 {
            return Ok(self.up[edges[0]]);
        }

        // series: the first node every a-b route passes through
        for &m in &walk[1..walk.len() - 1] {
            if self.g.reaches(a, b, edges, Some(m)) {
                continue;
            }
            let left = self.g.component(a, edges, &[m]);
            let right = self.g.component(b, edges, &[m]);
            let side = |k: &usize, seen: &[bool]| {
                let (u, v) = self.g.ends(*k);
                (seen[u] || u == m) && (seen[v] || v == m)
            };
            let e1: Vec<usize> = edges.iter().copied().filter(|k| side(k, &left)).collect();
            let e2: Vec<usize> = edges.iter().copied().filter(|k| side(k, &right)).collect();
            let head = self.rate(a, m, &e1, depth + 1)?;
            let tail = self.rate(m, b, &e2, depth + 1)?;
            return Ok(head * self.g.swap[m] * tail);
        }

        // parallel: branches meeting only at the terminals
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut owner: HashMap<usize, usize> = HashMap::new();
        for &k in edges {
            let (u, v) = self.g.ends(k);
            let inner = [u, v].into_iter().find(|&x| x != a && x != b);
            match inner {
                None => groups.push(vec![k]),
                Some(x) => {
                    let g = match owner.get(&x) {
                        Some(&g) => g,
                        None => {
                            let comp = self.g.component(x, edges, &[a, b]);
                            groups.push(Vec::new());
                            let g = groups.len() - 1;
                            for (n, &inside) in comp.iter().enumerate() {
                                if inside {
                                    owner.insert(n, g);
                                }
                            }
                            g
                        }
                    };
                    groups[g].push(k);
                }
            }
        }
        groups.retain(|grp| {
            grp.iter().any(|&k| {
                let (u, v) = self.g.ends(k);
                u == a || v == a
            }) && grp.iter().any(|&k| {
                let (u, v) = self.g.ends(k);
                u == b || v == b
            })
        });
        if groups.len() == 1 && groups[0].len() < edges.len() {
            let only = groups.pop().expect("one group");
            return self.rate(a, b, &only, depth + 1);
        }
        if groups.len() >= 2 {
            let mut fail = 1.0;
            for grp in &groups {
                fail *= 1.0 - self.rate(a, b, grp, depth + 1)?;
            }
            return Ok(1.0 - fail);
        }

        // Neither a series nor a parallel split exists: expand the children of
        // `a` independently, which is not exact on such graphs.
        self.exact = false;
        let grp = groups.pop().unwrap_or_default();
        let rest: Vec<usize> = grp
            .iter()
            .copied()
            .filter(|&k| {
                let (u, v) = self.g.ends(k);
                u != a && v != a
            })
            .collect();
        let mut fail = 1.0;
        for &k in &grp {
            let (u, v) = self.g.ends(k);
            let child = match (u == a, v == a) {
                (true, _) => v,
                (_, true) => u,
                _ => continue,
            };
            let term = if child == b {
                self.up[k]
            } else {
                self.up[k] * self.g.swap[child] * self.rate(child, b, &rest, depth + 1)?
            };
            fail *= 1.0 - term;
        }
        Ok(1.0 - fail)
    }
}

/// Returns (rate, exact) for a non-empty flow graph.
fn evaluate(net: &Network, fg: &FlowGraph) -> Result<(f64, bool), RateError> {
    let g = LocalGraph::build(net, fg)?;
    for &(_, _, p, _) in &g.channels {
        check_prob(p)?;
    }
    let edges = g.all_edges();
    if !g.reaches(g.src, g.dst, &edges, None) {
        return Err(RateError::Disconnected(fg.source, fg.dest));
    }
    let up = g
        .channels
        .iter()
        .map(|&(_, _, p, w)| channel_rate_unchecked(p, w))
        .collect();
    let mut ev = Evaluator {
        g: &g,
        up,
        exact: true,
        max_depth: g.ids.len() + g.channels.len(),
    };
    let r = ev.rate(g.src, g.dst, &edges, 0)?;
    Ok((r, ev.exact))
}

/// Analytic rate of a flow graph.
///
/// Evaluates `P(a, b) = 1 - prod_children (1 - P(a, u) * P(u, b))` recursively,
/// splitting at nodes every route passes through (series, the node's swap
/// probability applied once there) and at terminals where independent branches
/// fan out (parallel). The result is exact on series-parallel flow graphs. An
/// empty flow graph has rate 0.
pub fn flow_graph_rate(net: &Network, fg: &FlowGraph) -> Result<f64, RateError> {
    if fg.is_empty() {
        return Ok(0.0);
    }
    Ok(evaluate(net, fg)?.0)
}

/// Link and fusion outcomes of one entanglement attempt over a flow graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutcomeSample {
    /// Successful links per channel, in the flow graph's channel order.
    pub links: Vec<u32>,
    /// Fusion outcome per interior node, in ascending node order.
    pub fusions: Vec<(NodeId, bool)>,
}

/// Random elements of a flow graph, prepared for repeated outcome evaluation.
pub struct Elements {
    graph: LocalGraph,
    interior: Vec<usize>,
}

impl Elements {
    pub fn new(net: &Network, fg: &FlowGraph) -> Result<Self, RateError> {
        let graph = LocalGraph::build(net, fg)?;
        for &(_, _, p, _) in &graph.channels {
            check_prob(p)?;
        }
        let mut interior: Vec<usize> = (0..graph.ids.len())
            .filter(|&i| i != graph.src && i != graph.dst)
            .collect();
        interior.sort_by_key(|&i| graph.ids[i]);
        for &i in &interior {
            check_prob(graph.swap[i])?;
        }
        Ok(Elements { graph, interior })
    }

    pub fn count(&self) -> usize {
        self.graph.channels.iter().map(|c| c.3 as usize).sum::<usize>() + self.interior.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> OutcomeSample {
        let links = self
            .graph
            .channels
            .iter()
            .map(|&(_, _, p, w)| (0..w).filter(|_| rng.gen::<f64>() < p).count() as u32)
            .collect();
        let fusions = self
            .interior
            .iter()
            .map(|&i| (self.graph.ids[i], rng.gen::<f64>() < self.graph.swap[i]))
            .collect();
        OutcomeSample { links, fusions }
    }

    /// Whether the terminals are joined by channels with a surviving link
    /// through nodes whose fusion succeeded.
    pub fn succeeds(&self, outcome: &OutcomeSample) -> bool {
        let n = self.graph.ids.len();
        let mut alive = vec![true; n];
        for (&i, &(_, ok)) in self.interior.iter().zip(&outcome.fusions) {
            alive[i] = ok;
        }
        let channel_up: Vec<bool> = outcome.links.iter().map(|&c| c > 0).collect();
        self.connected(&alive, &channel_up)
    }

    fn connected(&self, alive: &[bool], channel_up: &[bool]) -> bool {
        let mut uf = UnionFind::new(self.graph.ids.len());
        for (k, &(a, b, _, _)) in self.graph.channels.iter().enumerate() {
            if channel_up[k] && alive[a] && alive[b] {
                uf.union(a, b);
            }
        }
        uf.find(self.graph.src) == uf.find(self.graph.dst)
    }
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra] = rb;
        }
    }
}

/// Exact success probability by enumerating all `2^m` joint outcomes of the
/// flow graph's links and interior fusions, `m` bounded by `bound`.
pub fn exhaustive_rate(net: &Network, fg: &FlowGraph, bound: usize) -> Result<f64, RateError> {
    if fg.is_empty() {
        return Ok(0.0);
    }
    let el = Elements::new(net, fg)?;
    let m = el.count();
    if m > bound || m >= 63 {
        return Err(RateError::TooManyElements { count: m, bound });
    }
    let g = &el.graph;
    // element order: links channel by channel, then interior nodes
    let mut prob = Vec::with_capacity(m);
    let mut link_owner = Vec::with_capacity(m);
    for (k, &(_, _, p, w)) in g.channels.iter().enumerate() {
        for _ in 0..w {
            prob.push(p);
            link_owner.push(k);
        }
    }
    let links = prob.len();
    for &i in &el.interior {
        prob.push(g.swap[i]);
    }

    let mut total = 0.0;
    let mut carry = 0.0;
    let mut alive = vec![true; g.ids.len()];
    let mut channel_up = vec![false; g.channels.len()];
    for mask in 0u64..(1u64 << m) {
        let mut weight = 1.0;
        for (bit, &p) in prob.iter().enumerate() {
            weight *= if mask >> bit & 1 == 1 { p } else { 1.0 - p };
        }
        if weight == 0.0 {
            continue;
        }
        channel_up.iter_mut().for_each(|c| *c = false);
        for bit in 0..links {
            if mask >> bit & 1 == 1 {
                channel_up[link_owner[bit]] = true;
            }
        }
        for (j, &i) in el.interior.iter().enumerate() {
            alive[i] = mask >> (links + j) & 1 == 1;
        }
        if el.connected(&alive, &channel_up) {
            // Neumaier summation
            let t = total + weight;
            if f64::abs(total) >= weight.abs() {
                carry += (total - t) + weight;
            } else {
                carry += (weight - t) + total;
            }
            total = t;
        }
    }
    Ok(total + carry)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub std_error: f64,
    pub trials: u64,
}

/// Monte Carlo estimate of the flow graph's success probability.
///
/// Trials run in blocks of 65536, block `b` drawing from ChaCha8 stream `b` of
/// `seed`, so the result does not depend on the thread count.
pub fn monte_carlo_rate(
    net: &Network,
    fg: &FlowGraph,
    trials: u64,
    seed: u64,
) -> Result<McEstimate, RateError> {
    let trials = trials.max(1);
    if fg.is_empty() {
        return Ok(McEstimate {
            estimate: 0.0,
            std_error: 0.0,
            trials,
        });
    }
    let el = Elements::new(net, fg)?;
    let blocks = trials.div_ceil(MC_BLOCK);
    let hits: u64 = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b);
            let n = MC_BLOCK.min(trials - b * MC_BLOCK);
            (0..n).filter(|_| el.succeeds(&el.sample(&mut rng))).count() as u64
        })
        .sum();
    let estimate = hits as f64 / trials as f64;
    Ok(McEstimate {
        estimate,
        std_error: (estimate * (1.0 - estimate) / trials as f64).sqrt(),
        trials,
    })
}
