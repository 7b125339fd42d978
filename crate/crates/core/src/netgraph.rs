//! Topology data model, random network generators and the network document format.
//!
//! A [`Network`] is a simple undirected graph whose nodes are quantum users or
//! switches placed in a square area (coordinates in kilometers). Switches carry a
//! qubit capacity and a fusion success probability; edges carry a length and the
//! success probability of a single entanglement link over them.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of nearest switches each user is attached to.
pub const USER_ATTACHMENT: usize = 3;

/// How many derived seeds [`generate`] tries before giving up on a connected instance.
pub const MAX_GENERATION_ATTEMPTS: u64 = 32;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid generator parameters: {0}")]
    Params(String),
    #[error("invalid network: {0}")]
    Invalid(String),
    #[error("malformed network document: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("could not generate a network connecting every demand after {0} attempts")]
    Disconnected(u64),
}

/// Dense node index, `0..node_count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dense edge index, `0..edge_count`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EdgeId(pub u32);

impl EdgeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "e{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeKind {
    /// Endpoint processor. Users have no qubit limit and never relay.
    User,
    /// Relay performing fusion over all successful incident links.
    Switch { capacity: u32, swap_prob: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub x: f64,
    pub y: f64,
}

impl Node {
    pub fn user(id: u32, x: f64, y: f64) -> Self {
        Node {
            id: NodeId(id),
            kind: NodeKind::User,
            x,
            y,
        }
    }

    pub fn switch(id: u32, x: f64, y: f64, capacity: u32, swap_prob: f64) -> Self {
        Node {
            id: NodeId(id),
            kind: NodeKind::Switch {
                capacity,
                swap_prob,
            },
            x,
            y,
        }
    }

    pub fn is_user(&self) -> bool {
        matches!(self.kind, NodeKind::User)
    }

    pub fn is_switch(&self) -> bool {
        !self.is_user()
    }

    /// Qubit capacity, `None` for users.
    pub fn capacity(&self) -> Option<u32> {
        match self.kind {
            NodeKind::Switch { capacity, .. } => Some(capacity),
            NodeKind::User => None,
        }
    }

    /// Fusion success probability; users never fuse and report 1.
    pub fn swap_prob(&self) -> f64 {
        match self.kind {
            NodeKind::Switch { swap_prob, .. } => swap_prob,
            NodeKind::User => 1.0,
        }
    }

    fn distance(&self, other: &Node) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    /// Smaller endpoint.
    pub u: NodeId,
    /// Larger endpoint.
    pub v: NodeId,
    /// Fiber length in kilometers.
    pub length: f64,
    /// Success probability of one entanglement link over this edge.
    pub link_prob: f64,
}

impl Edge {
    /// Builds an edge with normalized endpoint order.
    pub fn new(a: NodeId, b: NodeId, length: f64, link_prob: f64) -> Self {
        let (u, v) = if a <= b { (a, b) } else { (b, a) };
        Edge {
            u,
            v,
            length,
            link_prob,
        }
    }

    pub fn other(&self, n: NodeId) -> NodeId {
        if n == self.u {
            self.v
        } else {
            self.u
        }
    }

    pub fn touches(&self, n: NodeId) -> bool {
        self.u == n || self.v == n
    }
}

/// Success probability of a single link of the given length: `exp(-alpha * length)`.
pub fn link_success_prob(length: f64, alpha: f64) -> f64 {
    (-alpha * length).exp()
}

/// Immutable simple undirected graph of users and switches.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    adjacency: Vec<Vec<(NodeId, EdgeId)>>,
    lookup: HashMap<(NodeId, NodeId), EdgeId>,
}

impl Network {
    /// Validates and indexes a node/edge list.
    ///
    /// Node `i` must carry id `i`. Edges are renormalized so that `u < v`.
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self, NetError> {
        for (i, n) in nodes.iter().enumerate() {
            if n.id.index() != i {
                return Err(NetError::Invalid(format!(
                    "node at position {i} has id {}, ids must be dense and ordered",
                    n.id
                )));
            }
            if !(n.x.is_finite() && n.y.is_finite()) {
                return Err(NetError::Invalid(format!("node {} has a non-finite position", n.id)));
            }
            if let NodeKind::Switch { swap_prob, .. } = n.kind {
                if !(0.0..=1.0).contains(&swap_prob) {
                    return Err(NetError::Invalid(format!(
                        "switch {} has swap probability {swap_prob} outside [0, 1]",
                        n.id
                    )));
                }
            }
        }
        let mut adjacency = vec![Vec::new(); nodes.len()];
        let mut lookup = HashMap::with_capacity(edges.len());
        let mut normalized = Vec::with_capacity(edges.len());
        for (i, e) in edges.into_iter().enumerate() {
            let e = Edge::new(e.u, e.v, e.length, e.link_prob);
            if e.v.index() >= nodes.len() {
                return Err(NetError::Invalid(format!(
                    "edge {i} references unknown node {}",
                    e.v
                )));
            }
            if e.u == e.v {
                return Err(NetError::Invalid(format!("edge {i} is a self-loop on node {}", e.u)));
            }
            if nodes[e.u.index()].is_user() && nodes[e.v.index()].is_user() {
                return Err(NetError::Invalid(format!(
                    "edge {i} connects two users ({} and {})",
                    e.u, e.v
                )));
            }
            if !(e.link_prob > 0.0 && e.link_prob <= 1.0) {
                return Err(NetError::Invalid(format!(
                    "edge {i} ({}-{}) has link probability {} outside (0, 1]",
                    e.u, e.v, e.link_prob
                )));
            }
            if !(e.length.is_finite() && e.length >= 0.0) {
                return Err(NetError::Invalid(format!(
                    "edge {i} has invalid length {}",
                    e.length
                )));
            }
            let id = EdgeId(i as u32);
            if lookup.insert((e.u, e.v), id).is_some() {
                return Err(NetError::Invalid(format!(
                    "duplicate edge between {} and {}",
                    e.u, e.v
                )));
            }
            adjacency[e.u.index()].push((e.v, id));
            adjacency[e.v.index()].push((e.u, id));
            normalized.push(e);
        }
        Ok(Network {
            nodes,
            edges: normalized,
            adjacency,
            lookup,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.index()]
    }

    pub fn edge(&self, id: EdgeId) -> &Edge {
        &self.edges[id.index()]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn neighbors(&self, id: NodeId) -> &[(NodeId, EdgeId)] {
        &self.adjacency[id.index()]
    }

    pub fn edge_between(&self, a: NodeId, b: NodeId) -> Option<EdgeId> {
        let key = if a <= b { (a, b) } else { (b, a) };
        self.lookup.get(&key).copied()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.index() < self.nodes.len()
    }

    pub fn users(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.is_user())
    }

    pub fn switches(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter().filter(|n| n.is_switch())
    }

    pub fn max_capacity(&self) -> u32 {
        self.switches().filter_map(Node::capacity).max().unwrap_or(0)
    }

    /// Mean number of switch-to-switch edges per switch. User attachments are
    /// not counted.
    pub fn mean_switch_degree(&self) -> f64 {
        let switches = self.switches().count();
        if switches == 0 {
            return 0.0;
        }
        let inner = self
            .edges
            .iter()
            .filter(|e| self.node(e.u).is_switch() && self.node(e.v).is_switch())
            .count();
        2.0 * inner as f64 / switches as f64
    }

    /// Breadth-first reachability over the whole topology. Users do not relay.
    pub fn connected(&self, a: NodeId, b: NodeId) -> bool {
        if a == b {
            return true;
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![a];
        seen[a.index()] = true;
        while let Some(n) = stack.pop() {
            for &(m, _) in self.neighbors(n) {
                if m == b {
                    return true;
                }
                if !seen[m.index()] && self.node(m).is_switch() {
                    seen[m.index()] = true;
                    stack.push(m);
                }
            }
        }
        false
    }

    /// Copy with every link probability replaced by `p`.
    pub fn with_uniform_link_prob(&self, p: f64) -> Result<Network, NetError> {
        let edges = self
            .edges
            .iter()
            .map(|e| Edge::new(e.u, e.v, e.length, p))
            .collect();
        Network::new(self.nodes.clone(), edges)
    }

    /// Copy with every switch's fusion probability replaced by `q`.
    pub fn with_swap_prob(&self, q: f64) -> Result<Network, NetError> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| match n.kind {
                NodeKind::Switch { capacity, .. } => Node::switch(n.id.0, n.x, n.y, capacity, q),
                NodeKind::User => n.clone(),
            })
            .collect();
        Network::new(nodes, self.edges.clone())
    }

    /// Copy with every switch's qubit capacity replaced by `capacity`.
    pub fn with_capacity(&self, capacity: u32) -> Network {
        let nodes = self
            .nodes
            .iter()
            .map(|n| match n.kind {
                NodeKind::Switch { swap_prob, .. } => {
                    Node::switch(n.id.0, n.x, n.y, capacity, swap_prob)
                }
                NodeKind::User => n.clone(),
            })
            .collect();
        Network::new(nodes, self.edges.clone()).expect("capacity change keeps invariants")
    }
}

/// One quantum state to be shared between two users.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Demand {
    pub id: usize,
    pub source: NodeId,
    pub dest: NodeId,
}

impl Demand {
    pub fn new(id: usize, source: NodeId, dest: NodeId) -> Self {
        Demand { id, source, dest }
    }

    /// Checks that both endpoints exist, are users and differ.
    pub fn validate(&self, net: &Network) -> Result<(), NetError> {
        if self.source == self.dest {
            return Err(NetError::Invalid(format!(
                "demand {} has identical endpoints {}",
                self.id, self.source
            )));
        }
        for n in [self.source, self.dest] {
            if !net.contains(n) {
                return Err(NetError::Invalid(format!(
                    "demand {} references unknown node {n}",
                    self.id
                )));
            }
            if !net.node(n).is_user() {
                return Err(NetError::Invalid(format!(
                    "demand {} endpoint {n} is not a user",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Waxman,
    WattsStrogatz,
    PowerLaw,
}

impl fmt::Display for Generator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Generator::Waxman => "waxman",
            Generator::WattsStrogatz => "watts-strogatz",
            Generator::PowerLaw => "power-law",
        })
    }
}

impl FromStr for Generator {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "waxman" => Ok(Generator::Waxman),
            "watts-strogatz" => Ok(Generator::WattsStrogatz),
            "power-law" | "aiello" => Ok(Generator::PowerLaw),
            other => Err(NetError::Params(format!("unknown generator `{other}`"))),
        }
    }
}

/// Parameters of a random network instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub generator: Generator,
    pub n_switches: usize,
    /// Number of users; demands are drawn among them.
    pub n_users: usize,
    pub n_demands: usize,
    /// Side of the square deployment area, km.
    pub area_side: f64,
    /// Target mean switch-to-switch degree.
    pub avg_degree: f64,
    /// Qubits per switch.
    pub capacity: u32,
    pub swap_prob: f64,
    /// Fiber attenuation constant, per km.
    pub alpha: f64,
    pub seed: u64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            generator: Generator::Waxman,
            n_switches: 100,
            n_users: 20,
            n_demands: 20,
            area_side: 10_000.0,
            avg_degree: 10.0,
            capacity: 10,
            swap_prob: 0.9,
            alpha: 1e-4,
            seed: 1,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), NetError> {
        let fail = |m: String| Err(NetError::Params(m));
        if self.n_switches == 0 {
            return fail("n_switches must be positive".into());
        }
        if self.n_demands > 0 && self.n_users < 2 {
            return fail("at least two users are needed to place demands".into());
        }
        if !(self.area_side > 0.0 && self.area_side.is_finite()) {
            return fail(format!("area_side must be positive, got {}", self.area_side));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.swap_prob) {
            return fail(format!("swap_prob must lie in [0, 1], got {}", self.swap_prob));
        }
        let max_degree = (self.n_switches - 1) as f64;
        if !(self.avg_degree > 0.0 && self.avg_degree <= max_degree) {
            return fail(format!(
                "avg_degree must lie in (0, {max_degree}] for {} switches, got {}",
                self.n_switches, self.avg_degree
            ));
        }
        Ok(())
    }

    /// Number of switch-to-switch edges that realizes `avg_degree`.
    pub fn target_edges(&self) -> usize {
        (self.n_switches as f64 * self.avg_degree / 2.0).round() as usize
    }

    /// Upper bound on generated Waxman edge lengths, `50 / sqrt(|V|)` in units of
    /// a tenth of the area side.
    pub fn max_edge_length(&self) -> f64 {
        let total = (self.n_switches + self.n_users) as f64;
        50.0 / total.sqrt() * self.area_side / 10.0
    }
}

pub(crate) fn derive_seed(seed: u64, attempt: u64) -> u64 {
    // splitmix64 finalizer over the attempt index
    let mut z = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    if attempt == 0 {
        return seed;
    }
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates a random network and demand list.
///
/// Switches get ids `0..n_switches`, users follow. Deterministic in `params`.
pub fn generate(params: &GenParams) -> Result<(Network, Vec<Demand>), NetError> {
    params.validate()?;
    for attempt in 0..MAX_GENERATION_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, attempt));
        let (net, demands) = build_instance(params, &mut rng)?;
        if demands.iter().all(|d| net.connected(d.source, d.dest)) {
            return Ok((net, demands));
        }
    }
    Err(NetError::Disconnected(MAX_GENERATION_ATTEMPTS))
}

fn build_instance(
    params: &GenParams,
    rng: &mut ChaCha8Rng,
) -> Result<(Network, Vec<Demand>), NetError> {
    let side = params.area_side;
    let mut nodes = Vec::with_capacity(params.n_switches + params.n_users);
    for i in 0..params.n_switches {
        let (x, y) = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
        nodes.push(Node::switch(i as u32, x, y, params.capacity, params.swap_prob));
    }
    for j in 0..params.n_users {
        let (x, y) = (rng.gen_range(0.0..side), rng.gen_range(0.0..side));
        nodes.push(Node::user((params.n_switches + j) as u32, x, y));
    }

    let switches = &nodes[..params.n_switches];
    let target = params.target_edges();
    let pairs = match params.generator {
        Generator::Waxman => waxman_edges(switches, target, params.max_edge_length(), rng),
        Generator::WattsStrogatz => watts_strogatz_edges(switches, target, side, rng),
        Generator::PowerLaw => power_law_edges(switches.len(), target, rng),
    };

    let mut edges: Vec<Edge> = pairs
        .into_iter()
        .map(|(a, b)| {
            let len = nodes[a].distance(&nodes[b]);
            Edge::new(
                NodeId(a as u32),
                NodeId(b as u32),
                len,
                link_success_prob(len, params.alpha),
            )
        })
        .collect();

    for user in &nodes[params.n_switches..] {
        let mut by_dist: Vec<(f64, usize)> = switches
            .iter()
            .enumerate()
            .map(|(i, s)| (user.distance(s), i))
            .collect();
        by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(len, s) in by_dist.iter().take(USER_ATTACHMENT) {
            edges.push(Edge::new(
                user.id,
                NodeId(s as u32),
                len,
                link_success_prob(len, params.alpha),
            ));
        }
    }
    // p underflows to 0 for absurdly long fibers; the document format rejects that
    for e in &mut edges {
        e.link_prob = e.link_prob.max(f64::MIN_POSITIVE);
    }

    let mut demands = Vec::with_capacity(params.n_demands);
    let first_user = params.n_switches;
    for id in 0..params.n_demands {
        let s = rng.gen_range(0..params.n_users);
        let mut d = rng.gen_range(0..params.n_users - 1);
        if d >= s {
            d += 1;
        }
        demands.push(Demand::new(
            id,
            NodeId((first_user + s) as u32),
            NodeId((first_user + d) as u32),
        ));
    }

    Ok((Network::new(nodes, edges)?, demands))
}

/// Smallest `x` in `[lo, hi]` with `f(x) >= target`, for nondecreasing `f`.
fn bisect(mut lo: f64, mut hi: f64, target: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    hi
}

/// Independent edge sampling with per-pair probabilities, then trimmed or topped
/// up to exactly `target` edges.
fn sample_pairs(
    weights: &[(usize, usize, f64)],
    target: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let mut chosen = Vec::new();
    let mut rest = Vec::new();
    for &(a, b, p) in weights {
        if rng.gen::<f64>() < p {
            chosen.push((a, b));
        } else if p > 0.0 {
            rest.push((a, b, p));
        }
    }
    if chosen.len() > target {
        chosen.shuffle(rng);
        chosen.truncate(target);
    } else {
        // weighted draws without replacement (Efraimidis-Spirakis keys)
        let mut keyed: Vec<(f64, usize, usize)> = rest
            .into_iter()
            .map(|(a, b, p)| (rng.gen::<f64>().powf(1.0 / p), a, b))
            .collect();
        keyed.sort_by(|x, y| y.0.total_cmp(&x.0));
        let need = target - chosen.len();
        chosen.extend(keyed.into_iter().take(need).map(|(_, a, b)| (a, b)));
    }
    chosen.sort_unstable();
    chosen
}

/// Waxman graph: `P(edge) = beta * exp(-d / (lambda * L))` for pairs within the
/// length bound, `L` the largest pairwise distance. `beta` is tuned to the target
/// edge count with `lambda = 0.25`; if `beta = 1` is not dense enough, `lambda`
/// is tuned instead.
fn waxman_edges(
    switches: &[Node],
    target: usize,
    max_len: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    let n = switches.len();
    let mut dists = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    let mut longest: f64 = 0.0;
    for a in 0..n {
        for b in a + 1..n {
            let d = switches[a].distance(&switches[b]);
            longest = longest.max(d);
            dists.push((a, b, d));
        }
    }
    let longest = longest.max(f64::MIN_POSITIVE);
    let expected = |beta: f64, lambda: f64| -> f64 {
        dists
            .iter()
            .filter(|t| t.2 <= max_len)
            .map(|t| beta * (-t.2 / (lambda * longest)).exp())
            .sum()
    };
    let target_f = target as f64;
    let mut lambda = 0.25;
    let beta = if expected(1.0, lambda) >= target_f {
        bisect(0.0, 1.0, target_f, |b| expected(b, lambda))
    } else {
        lambda = bisect(lambda, 1e6, target_f, |l| expected(1.0, l));
        1.0
    };
    let weights: Vec<(usize, usize, f64)> = dists
        .iter()
        .map(|&(a, b, d)| {
            let p = if d <= max_len {
                (beta * (-d / (lambda * longest)).exp()).min(1.0)
            } else {
                0.0
            };
            (a, b, p)
        })
        .collect();
    sample_pairs(&weights, target, rng)
}

/// Watts-Strogatz small world over switches ordered by angle around the area
/// center: ring lattice of even degree, rewiring probability 0.1, then random
/// shortcuts to reach the exact target edge count.
fn watts_strogatz_edges(
    switches: &[Node],
    target: usize,
    side: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, usize)> {
    const REWIRE: f64 = 0.1;
    let n = switches.len();
    let c = side / 2.0;
    let mut ring: Vec<usize> = (0..n).collect();
    ring.sort_by(|&a, &b| {
        let ta = (switches[a].y - c).atan2(switches[a].x - c);
        let tb = (switches[b].y - c).atan2(switches[b].x - c);
        ta.total_cmp(&tb).then(a.cmp(&b))
    });
    let half = ((target as f64 / n as f64).floor() as usize).min((n - 1) / 2);
    let mut present = std::collections::BTreeSet::new();
    let key = |a: usize, b: usize| if a < b { (a, b) } else { (b, a) };
    for i in 0..n {
        for k in 1..=half {
            present.insert(key(ring[i], ring[(i + k) % n]));
        }
    }
    let lattice: Vec<(usize, usize)> = present.iter().copied().collect();
    for (a, b) in lattice {
        if rng.gen::<f64>() < REWIRE {
            let c = rng.gen_range(0..n);
            if c != a && !present.contains(&key(a, c)) {
                present.remove(&(a, b));
                present.insert(key(a, c));
            }
        }
    }
    let mut edges: Vec<(usize, usize)> = present.iter().copied().collect();
    if edges.len() > target {
        edges.shuffle(rng);
        edges.truncate(target);
    }
    let max_edges = n * (n - 1) / 2;
    while edges.len() < target.min(max_edges) {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b && present.insert(key(a, b)) {
            edges.push(key(a, b));
        }
    }
    edges.sort_unstable();
    edges
}

/// Aiello/Chung-Lu power-law random graph with exponent 2.5: node `i` gets
/// weight `(i + 1)^(-1/1.5)` (ranks shuffled) and pairs connect with probability
/// `min(1, c * w_a * w_b)`, `c` tuned to the target edge count.
fn power_law_edges(n: usize, target: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    const EXPONENT: f64 = 2.5;
    let mut weight: Vec<f64> = (0..n)
        .map(|i| ((i + 1) as f64).powf(-1.0 / (EXPONENT - 1.0)))
        .collect();
    weight.shuffle(rng);
    let expected = |c: f64| -> f64 {
        let mut s = 0.0;
        for a in 0..n {
            for b in a + 1..n {
                s += (c * weight[a] * weight[b]).min(1.0);
            }
        }
        s
    };
    let c = bisect(0.0, 1e12, target as f64, expected);
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for a in 0..n {
        for b in a + 1..n {
            pairs.push((a, b, (c * weight[a] * weight[b]).min(1.0)));
        }
    }
    sample_pairs(&pairs, target, rng)
}

// ---------------------------------------------------------------------------
// Document format

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindTag {
    User,
    Switch,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    id: u32,
    kind: KindTag,
    x: f64,
    y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    capacity: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    q: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeRecord {
    u: u32,
    v: u32,
    length: f64,
    p: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DemandRecord {
    id: usize,
    s: u32,
    d: u32,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    #[serde(default)]
    nodes: Vec<NodeRecord>,
    #[serde(default)]
    edges: Vec<EdgeRecord>,
    #[serde(default)]
    demands: Vec<DemandRecord>,
}

fn to_document(net: &Network, demands: &[Demand]) -> Document {
    Document {
        nodes: net
            .nodes()
            .iter()
            .map(|n| match n.kind {
                NodeKind::User => NodeRecord {
                    id: n.id.0,
                    kind: KindTag::User,
                    x: n.x,
                    y: n.y,
                    capacity: None,
                    q: None,
                },
                NodeKind::Switch {
                    capacity,
                    swap_prob,
                } => NodeRecord {
                    id: n.id.0,
                    kind: KindTag::Switch,
                    x: n.x,
                    y: n.y,
                    capacity: Some(capacity),
                    q: Some(swap_prob),
                },
            })
            .collect(),
        edges: net
            .edges()
            .iter()
            .map(|e| EdgeRecord {
                u: e.u.0,
                v: e.v.0,
                length: e.length,
                p: e.link_prob,
            })
            .collect(),
        demands: demands
            .iter()
            .map(|d| DemandRecord {
                id: d.id,
                s: d.source.0,
                d: d.dest.0,
            })
            .collect(),
    }
}

fn render(doc: &Document) -> String {
    toml::to_string(doc).expect("network documents always serialize")
}

/// Serializes the topology as a TOML document (`[[nodes]]`, `[[edges]]`).
pub fn save_network(net: &Network) -> String {
    render(&to_document(net, &[]))
}

/// Serializes topology and demands into one document.
pub fn save_network_with_demands(net: &Network, demands: &[Demand]) -> String {
    render(&to_document(net, demands))
}

/// Serializes a demand list on its own (`[[demands]]`).
pub fn save_demands(demands: &[Demand]) -> String {
    let doc = Document {
        demands: to_document(&Network::new(vec![], vec![]).unwrap(), demands).demands,
        ..Document::default()
    };
    render(&doc)
}

fn network_from(doc: &Document) -> Result<Network, NetError> {
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for r in &doc.nodes {
        let node = match r.kind {
            KindTag::User => {
                if r.capacity.is_some() || r.q.is_some() {
                    return Err(NetError::Invalid(format!(
                        "user {} must not carry capacity or q",
                        r.id
                    )));
                }
                Node::user(r.id, r.x, r.y)
            }
            KindTag::Switch => {
                let capacity = r.capacity.ok_or_else(|| {
                    NetError::Invalid(format!("switch {} is missing `capacity`", r.id))
                })?;
                let q = r
                    .q
                    .ok_or_else(|| NetError::Invalid(format!("switch {} is missing `q`", r.id)))?;
                Node::switch(r.id, r.x, r.y, capacity, q)
            }
        };
        nodes.push(node);
    }
    for r in &doc.edges {
        for n in [r.u, r.v] {
            if n as usize >= nodes.len() {
                return Err(NetError::Invalid(format!(
                    "edge {}-{} references unknown node {n}",
                    r.u, r.v
                )));
            }
        }
    }
    let edges = doc
        .edges
        .iter()
        .map(|r| Edge::new(NodeId(r.u), NodeId(r.v), r.length, r.p))
        .collect();
    Network::new(nodes, edges)
}

fn demands_from(doc: &Document, net: &Network) -> Result<Vec<Demand>, NetError> {
    doc.demands
        .iter()
        .map(|r| {
            let d = Demand::new(r.id, NodeId(r.s), NodeId(r.d));
            d.validate(net).map(|_| d)
        })
        .collect()
}

/// Parses a network document; any `[[demands]]` entries are ignored.
pub fn load_network(text: &str) -> Result<Network, NetError> {
    network_from(&toml::from_str(text)?)
}

/// Parses a document and returns its topology and demands.
pub fn load_document(text: &str) -> Result<(Network, Vec<Demand>), NetError> {
    let doc: Document = toml::from_str(text)?;
    let net = network_from(&doc)?;
    let demands = demands_from(&doc, &net)?;
    Ok((net, demands))
}

/// Parses the `[[demands]]` of a document and checks them against `net`.
pub fn load_demands(text: &str, net: &Network) -> Result<Vec<Demand>, NetError> {
    demands_from(&toml::from_str(text)?, net)
}

/// Graphviz rendering of the topology with fixed node positions.
pub fn topology_dot(net: &Network) -> String {
    use std::fmt::Write;

    let scale = net
        .nodes()
        .iter()
        .map(|n| n.x.abs().max(n.y.abs()))
        .fold(0.0_f64, f64::max)
        .max(1.0)
        / 20.0;
    let mut out = String::from("graph network {\n  node [fontsize=10];\n");
    for n in net.nodes() {
        let (shape, label) = match n.kind {
            NodeKind::User => ("box", format!("u{}", n.id)),
            NodeKind::Switch { capacity, .. } => ("circle", format!("{}\\nc={capacity}", n.id)),
        };
        let _ = writeln!(
            out,
            "  n{} [shape={shape}, label=\"{label}\", pos=\"{:.3},{:.3}!\"];",
            n.id,
            n.x / scale,
            n.y / scale
        );
    }
    for e in net.edges() {
        let _ = writeln!(out, "  n{} -- n{} [label=\"{:.3}\"];", e.u, e.v, e.link_prob);
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Network {
        Network::new(
            vec![
                Node::user(0, 0.0, 0.0),
                Node::switch(1, 1.0, 0.0, 4, 0.9),
                Node::user(2, 2.0, 0.0),
            ],
            vec![
                Edge::new(NodeId(0), NodeId(1), 1.0, 0.5),
                Edge::new(NodeId(2), NodeId(1), 1.0, 0.25),
            ],
        )
        .unwrap()
    }

    #[test]
    fn link_prob_examples() {
        assert_eq!(link_success_prob(0.0, 0.3), 1.0);
        assert_eq!(link_success_prob(1234.0, 0.0), 1.0);
        assert!((link_success_prob(10_000.0, 1e-4) - 0.367_879_441_171_442_3).abs() < 1e-12);
    }

    #[test]
    fn edges_are_normalized_and_indexed() {
        let net = tiny();
        assert_eq!(net.edge(EdgeId(1)).u, NodeId(1));
        assert_eq!(net.edge_between(NodeId(2), NodeId(1)), Some(EdgeId(1)));
        assert_eq!(net.edge_between(NodeId(0), NodeId(2)), None);
        assert!(net.connected(NodeId(0), NodeId(2)));
    }

    #[test]
    fn rejects_invariant_violations() {
        let users = vec![Node::user(0, 0.0, 0.0), Node::user(1, 1.0, 0.0)];
        let err = Network::new(users, vec![Edge::new(NodeId(0), NodeId(1), 1.0, 0.5)]);
        assert!(matches!(err, Err(NetError::Invalid(m)) if m.contains("two users")));

        let sw = vec![Node::switch(0, 0.0, 0.0, 2, 0.9), Node::switch(1, 1.0, 0.0, 2, 0.9)];
        let looped = Network::new(sw.clone(), vec![Edge::new(NodeId(0), NodeId(0), 1.0, 0.5)]);
        assert!(matches!(looped, Err(NetError::Invalid(m)) if m.contains("self-loop")));

        let dup = Network::new(
            sw.clone(),
            vec![
                Edge::new(NodeId(0), NodeId(1), 1.0, 0.5),
                Edge::new(NodeId(1), NodeId(0), 1.0, 0.5),
            ],
        );
        assert!(matches!(dup, Err(NetError::Invalid(m)) if m.contains("duplicate")));

        let zero_p = Network::new(sw, vec![Edge::new(NodeId(0), NodeId(1), 1.0, 0.0)]);
        assert!(zero_p.is_err());
    }

    #[test]
    fn users_do_not_relay() {
        // s0 - u1 - s2 would only be connected through a user
        let net = Network::new(
            vec![
                Node::switch(0, 0.0, 0.0, 2, 1.0),
                Node::user(1, 0.0, 0.0),
                Node::switch(2, 0.0, 0.0, 2, 1.0),
                Node::user(3, 0.0, 0.0),
            ],
            vec![
                Edge::new(NodeId(0), NodeId(1), 1.0, 1.0),
                Edge::new(NodeId(1), NodeId(2), 1.0, 1.0),
                Edge::new(NodeId(2), NodeId(3), 1.0, 1.0),
            ],
        )
        .unwrap();
        assert!(!net.connected(NodeId(0), NodeId(3)));
        assert!(net.connected(NodeId(1), NodeId(3)));
    }

    #[test]
    fn zero_switches_is_an_error() {
        let params = GenParams {
            n_switches: 0,
            ..GenParams::default()
        };
        assert!(matches!(generate(&params), Err(NetError::Params(_))));
    }

    #[test]
    fn default_generation_hits_degree_and_probabilities() {
        let params = GenParams::default();
        let (net, demands) = generate(&params).unwrap();
        assert_eq!(net.switches().count(), 100);
        assert_eq!(net.users().count(), 20);
        assert_eq!(demands.len(), 20);
        let deg = net.mean_switch_degree();
        assert!((9.0..=11.0).contains(&deg), "mean degree {deg}");
        for e in net.edges() {
            let expect = link_success_prob(e.length, params.alpha);
            assert!((e.link_prob - expect).abs() <= 1e-12);
            assert!(net.node(e.u).is_switch() || net.node(e.v).is_switch());
        }
        for u in net.users() {
            assert_eq!(net.neighbors(u.id).len(), USER_ATTACHMENT);
        }
        for d in &demands {
            d.validate(&net).unwrap();
            assert!(net.connected(d.source, d.dest));
        }
    }

    #[test]
    fn waxman_respects_length_bound() {
        let params = GenParams::default();
        let (net, _) = generate(&params).unwrap();
        let bound = params.max_edge_length();
        for e in net.edges() {
            if net.node(e.u).is_switch() && net.node(e.v).is_switch() {
                assert!(e.length <= bound);
            }
        }
    }

    #[test]
    fn every_generator_is_deterministic() {
        for generator in [Generator::Waxman, Generator::WattsStrogatz, Generator::PowerLaw] {
            let params = GenParams {
                generator,
                n_switches: 40,
                n_users: 8,
                n_demands: 6,
                avg_degree: 6.0,
                seed: 99,
                ..GenParams::default()
            };
            let a = generate(&params).unwrap();
            let b = generate(&params).unwrap();
            assert_eq!(
                save_network_with_demands(&a.0, &a.1),
                save_network_with_demands(&b.0, &b.1)
            );
            let deg = a.0.mean_switch_degree();
            assert!((5.4..=6.6).contains(&deg), "{generator}: degree {deg}");
        }
    }

    #[test]
    fn generator_names_parse() {
        for g in [Generator::Waxman, Generator::WattsStrogatz, Generator::PowerLaw] {
            assert_eq!(g.to_string().parse::<Generator>().unwrap(), g);
        }
        assert!("grid".parse::<Generator>().is_err());
    }

    #[test]
    fn document_round_trip() {
        let (net, demands) = generate(&GenParams::default()).unwrap();
        let text = save_network_with_demands(&net, &demands);
        let (back, back_demands) = load_document(&text).unwrap();
        assert_eq!(back, net);
        assert_eq!(back_demands, demands);
        assert_eq!(load_network(&save_network(&net)).unwrap(), net);
        assert_eq!(load_demands(&save_demands(&demands), &net).unwrap(), demands);
    }

    #[test]
    fn document_rejects_bad_input() {
        let user_user = r#"
            [[nodes]]
            id = 0
            kind = "user"
            x = 0.0
            y = 0.0
            [[nodes]]
            id = 1
            kind = "user"
            x = 1.0
            y = 0.0
            [[edges]]
            u = 0
            v = 1
            length = 1.0
            p = 0.5
        "#;
        assert!(matches!(load_network(user_user), Err(NetError::Invalid(_))));

        let high_p = r#"
            [[nodes]]
            id = 0
            kind = "switch"
            x = 0.0
            y = 0.0
            capacity = 4
            q = 0.9
            [[nodes]]
            id = 1
            kind = "user"
            x = 1.0
            y = 0.0
            [[edges]]
            u = 0
            v = 1
            length = 1.0
            p = 1.2
        "#;
        let err = load_network(high_p).unwrap_err();
        assert!(err.to_string().contains("outside (0, 1]"), "{err}");

        assert!(matches!(load_network("nodes = 3"), Err(NetError::Parse(_))));
        let missing_q = r#"
            [[nodes]]
            id = 0
            kind = "switch"
            x = 0.0
            y = 0.0
            capacity = 4
        "#;
        assert!(load_network(missing_q).is_err());
    }

    #[test]
    fn dot_lists_every_node_and_edge() {
        let dot = topology_dot(&tiny());
        assert!(dot.starts_with("graph network {"));
        assert_eq!(dot.matches(" -- ").count(), 2);
        assert!(dot.contains("shape=box"));
    }
}
