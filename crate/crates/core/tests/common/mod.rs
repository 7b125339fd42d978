//! Oracles and random instances shared by the integration suites. Nothing here
//! calls into the library's rate evaluation.
#![allow(dead_code)]

use std::collections::BTreeMap;

use qroute::netgraph::{Demand, Edge, EdgeId, Network, Node, NodeId};
use qroute::rate::FlowGraph;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random topology with at most `max_nodes` nodes: three users (0, 1, 2) and
/// the rest switches with small capacities. The demand is user 0 to user 1;
/// user 2 is a bystander that must never relay.
pub fn small_network(rng: &mut impl Rng, max_nodes: usize) -> (Network, Demand) {
    let n_switches = rng.gen_range(1..=max_nodes - 3);
    let mut nodes: Vec<Node> = (0..3).map(|i| Node::user(i, i as f64, 0.0)).collect();
    for s in 0..n_switches {
        let id = 3 + s as u32;
        nodes.push(Node::switch(
            id,
            s as f64,
            1.0,
            rng.gen_range(1..=4),
            rng.gen_range(0.5..=1.0),
        ));
    }
    let switches: Vec<u32> = (3..3 + n_switches as u32).collect();
    let mut pairs = Vec::new();
    for (i, &a) in switches.iter().enumerate() {
        for &b in &switches[i + 1..] {
            if rng.gen_bool(0.5) {
                pairs.push((a, b));
            }
        }
    }
    for user in 0..3 {
        let k = rng.gen_range(1..=n_switches.min(3));
        for &s in switches.choose_multiple(rng, k) {
            pairs.push((user, s));
        }
    }
    let edges = pairs
        .into_iter()
        .map(|(a, b)| Edge::new(NodeId(a), NodeId(b), 1.0, rng.gen_range(0.05..0.99)))
        .collect();
    (
        Network::new(nodes, edges).expect("valid random network"),
        Demand::new(0, NodeId(0), NodeId(1)),
    )
}

/// Every simple path from `s` to `d` whose interior consists of switches with
/// at least `2w` qubits.
pub fn feasible_simple_paths(net: &Network, s: NodeId, d: NodeId, w: u32) -> Vec<Vec<NodeId>> {
    fn walk(
        net: &Network,
        d: NodeId,
        w: u32,
        path: &mut Vec<NodeId>,
        out: &mut Vec<Vec<NodeId>>,
    ) {
        let here = *path.last().unwrap();
        for &(next, _) in net.neighbors(here) {
            if path.contains(&next) {
                continue;
            }
            if next == d {
                let mut p = path.clone();
                p.push(d);
                out.push(p);
            } else if net.node(next).capacity().is_some_and(|c| c >= 2 * w) {
                path.push(next);
                walk(net, d, w, path, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(net, d, w, &mut vec![s], &mut out);
    out
}

/// Rate of a uniform-width path written out directly from its definition.
pub fn direct_path_rate(net: &Network, nodes: &[NodeId], w: u32) -> f64 {
    let mut r = 1.0;
    for pair in nodes.windows(2) {
        let p = net.edge(net.edge_between(pair[0], pair[1]).unwrap()).link_prob;
        r *= 1.0 - (1.0 - p).powi(w as i32);
    }
    for &v in &nodes[1..nodes.len() - 1] {
        r *= net.node(v).swap_prob();
    }
    r
}

/// Random two-terminal series-parallel flow graph with at most `max_elements`
/// elements (links plus interior switches), built by repeatedly subdividing an
/// edge or adding a parallel two-hop detour. Terminals are users 0 and 1.
pub fn random_sp_flow(rng: &mut impl Rng, max_elements: usize) -> (Network, FlowGraph) {
    assert!(max_elements >= 3);
    let target = rng.gen_range(3..=max_elements);
    let mut edges: Vec<(u32, u32)> = vec![(0, 2), (2, 1)];
    let mut next = 3u32;
    // elements with unit widths: one per edge plus one per switch
    while edges.len() + (next as usize - 2) + 2 <= target {
        let i = rng.gen_range(0..edges.len());
        let (u, v) = edges[i];
        if rng.gen_bool(0.5) || edges.len() + (next as usize - 2) + 3 > target {
            edges[i] = (u, next);
            edges.push((next, v));
        } else {
            edges.push((u, next));
            edges.push((next, v));
        }
        next += 1;
    }
    let mut widths = vec![1u32; edges.len()];
    let mut spare = target.saturating_sub(edges.len() + (next as usize - 2));
    while spare > 0 {
        let i = rng.gen_range(0..widths.len());
        if widths[i] < 3 {
            widths[i] += 1;
            spare -= 1;
        }
    }
    let mut nodes = vec![Node::user(0, 0.0, 0.0), Node::user(1, 1.0, 0.0)];
    for id in 2..next {
        nodes.push(Node::switch(id, id as f64, 1.0, 64, rng.gen_range(0.3..0.99)));
    }
    let net = Network::new(
        nodes,
        edges
            .iter()
            .map(|&(a, b)| Edge::new(NodeId(a), NodeId(b), 1.0, rng.gen_range(0.05..0.95)))
            .collect(),
    )
    .expect("valid series-parallel network");
    let fg = FlowGraph::from_channels(
        0,
        NodeId(0),
        NodeId(1),
        (0..edges.len()).map(|i| (EdgeId(i as u32), widths[i])),
    );
    (net, fg)
}

/// Success probability by enumerating every link and switch outcome: the users
/// share a state iff they are joined through channels with at least one
/// successful link and through switches whose fusion succeeded.
pub fn enumerate_rate(net: &Network, fg: &FlowGraph) -> f64 {
    let channels: Vec<(EdgeId, u32)> = fg.channels().iter().map(|(&e, &w)| (e, w)).collect();
    let mut switches: Vec<NodeId> = channels
        .iter()
        .flat_map(|&(e, _)| [net.edge(e).u, net.edge(e).v])
        .filter(|&v| net.node(v).is_switch())
        .collect();
    switches.sort();
    switches.dedup();
    let links: Vec<(usize, f64)> = channels
        .iter()
        .enumerate()
        .flat_map(|(c, &(e, w))| (0..w).map(move |_| (c, e)))
        .map(|(c, e)| (c, net.edge(e).link_prob))
        .collect();
    let m = links.len() + switches.len();
    assert!(m <= 22, "too many elements to enumerate");
    let mut total = 0.0;
    for mask in 0u64..(1 << m) {
        let mut prob = 1.0;
        let mut up = vec![false; channels.len()];
        for (i, &(c, p)) in links.iter().enumerate() {
            if mask >> i & 1 == 1 {
                prob *= p;
                up[c] = true;
            } else {
                prob *= 1.0 - p;
            }
        }
        let mut alive = BTreeMap::new();
        for (j, &v) in switches.iter().enumerate() {
            let q = net.node(v).swap_prob();
            let ok = mask >> (links.len() + j) & 1 == 1;
            prob *= if ok { q } else { 1.0 - q };
            alive.insert(v, ok);
        }
        if prob == 0.0 {
            continue;
        }
        // flood from the source through live channels and live switches
        let mut reached = vec![fg.source()];
        let mut i = 0;
        while i < reached.len() {
            let v = reached[i];
            i += 1;
            if v != fg.source() && !alive.get(&v).copied().unwrap_or(true) {
                continue;
            }
            if v == fg.dest() {
                continue;
            }
            for (c, &(e, _)) in channels.iter().enumerate() {
                let edge = net.edge(e);
                if up[c] && edge.touches(v) {
                    let o = edge.other(v);
                    if !reached.contains(&o) {
                        reached.push(o);
                    }
                }
            }
        }
        if reached.contains(&fg.dest()) {
            total += prob;
        }
    }
    total
}
