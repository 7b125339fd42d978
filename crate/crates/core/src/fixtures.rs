//! Small hand-built networks used by tests, examples and the CLI `validate`
//! self-check. Nodes sit one kilometer apart; link probabilities are set
//! explicitly.

use crate::netgraph::{Edge, Network, Node, NodeId};
use crate::rate::{FlowGraph, WidthedPath};

/// User, `probs.len() - 1` switches, user, in a line (a single hop ends at a
/// switch instead); hop `i` has link
/// probability `probs[i]`.
pub fn chain(probs: &[f64], q: f64, capacity: u32) -> Network {
    let z = probs.len();
    assert!(z >= 1, "a chain needs at least one hop");
    let mut nodes = vec![Node::user(0, 0.0, 0.0)];
    for i in 1..z {
        nodes.push(Node::switch(i as u32, i as f64, 0.0, capacity, q));
    }
    if z == 1 {
        // users never link directly; a one-hop chain ends at a switch
        nodes.push(Node::switch(1, 1.0, 0.0, capacity, q));
    } else {
        nodes.push(Node::user(z as u32, z as f64, 0.0));
    }
    let edges = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| Edge::new(NodeId(i as u32), NodeId(i as u32 + 1), 1.0, p))
        .collect();
    Network::new(nodes, edges).expect("chain fixture is valid")
}

/// Node ids of the full chain with `hops` hops.
pub fn chain_nodes(hops: usize) -> Vec<NodeId> {
    (0..=hops as u32).map(NodeId).collect()
}

/// Alice - Carol - Bob with equal link probabilities; Carol is the only switch.
pub fn alice_carol_bob(p: f64, q: f64, carol_capacity: u32) -> (Network, [NodeId; 3]) {
    (
        chain(&[p, p], q, carol_capacity),
        [NodeId(0), NodeId(1), NodeId(2)],
    )
}

/// Two width-2 channels fused at one switch (two links on each side).
pub fn fused_junction(p: f64, q: f64) -> (Network, FlowGraph) {
    let (net, path) = two_lane_chain(p, q);
    let fg = FlowGraph::from_path(0, path);
    (net, fg)
}

/// Width-2 two-hop path, the same resources as two parallel width-1 lanes.
pub fn two_lane_chain(p: f64, q: f64) -> (Network, WidthedPath) {
    let net = chain(&[p, p], q, 4);
    let path = WidthedPath::new(&net, chain_nodes(2), 2).expect("valid path");
    (net, path)
}

fn square(p: f64, q: f64, extra: &[(u32, u32)], n_switches: u32) -> Network {
    let mut nodes = vec![Node::user(0, 0.0, 0.0)];
    for i in 1..=n_switches {
        nodes.push(Node::switch(i, i as f64, 1.0, 8, q));
    }
    nodes.push(Node::user(n_switches + 1, 3.0, 0.0));
    let edges = extra
        .iter()
        .map(|&(a, b)| Edge::new(NodeId(a), NodeId(b), 1.0, p))
        .collect();
    Network::new(nodes, edges).expect("fixture is valid")
}

fn merged(net: &Network, paths: &[&[u32]]) -> FlowGraph {
    let mut fg: Option<FlowGraph> = None;
    for nodes in paths {
        let path = WidthedPath::new(net, nodes.iter().map(|&n| NodeId(n)).collect(), 1)
            .expect("fixture path is valid");
        match fg.as_mut() {
            Some(fg) => {
                fg.add_path(path);
            }
            None => fg = Some(FlowGraph::from_path(0, path)),
        }
    }
    fg.expect("at least one path")
}

/// S=0, switches 1 and 2, D=3: two disjoint width-1 two-hop branches.
pub fn diamond(p: f64, q: f64) -> (Network, FlowGraph) {
    let net = square(p, q, &[(0, 1), (1, 3), (0, 2), (2, 3)], 2);
    let fg = merged(&net, &[&[0, 1, 3], &[0, 2, 3]]);
    (net, fg)
}

/// S=0, switches 1..=3, D=4: branches via 1 and 2 meet at 3 before D.
pub fn reconverging(p: f64, q: f64) -> (Network, FlowGraph) {
    let net = square(p, q, &[(0, 1), (0, 2), (1, 3), (2, 3), (3, 4)], 3);
    let fg = merged(&net, &[&[0, 1, 3, 4], &[0, 2, 3, 4]]);
    (net, fg)
}

/// Wheatstone bridge S=0, switches 1 and 2, D=3, with the 1-2 cross link.
pub fn bridge(p: f64, q: f64) -> (Network, FlowGraph) {
    let net = square(p, q, &[(0, 1), (0, 2), (1, 2), (1, 3), (2, 3)], 2);
    let fg = merged(&net, &[&[0, 1, 3], &[0, 2, 3], &[0, 1, 2, 3]]);
    (net, fg)
}
