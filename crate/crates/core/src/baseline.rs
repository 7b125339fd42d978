//! Classic-swapping comparison algorithms.
//!
//! Both baselines take the same candidates as the n-fusion pipeline, rank them
//! by the classic per-lane rate and commit them greedily without merging. Under
//! classic swapping a shared state travels along one path, so each demand keeps
//! at most one path, and that path owns its qubits. `QCast` scores the committed paths with the
//! classic fixed-lane model, `QCastN` re-scores the very same paths as if the
//! switches fused all successful links.

use std::collections::BTreeMap;
use std::fmt;

use crate::netgraph::{Demand, EdgeId, Network, NodeId};
use crate::rate::{self, classic_path_rate, path_rate, WidthedPath};
use crate::router::{
    alg2_candidates, conservation, routes_dot, CandidateSet, ChannelExport, DemandExport, PathExport,
    PlanDocument, QubitLedger, RouteError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringMode {
    /// Bell-state measurements on `w` fixed lanes.
    Classic,
    /// Each path fuses every successful link at its switches.
    NFusion,
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringMode::Classic => "classic",
            ScoringMode::NFusion => "nfusion",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselinePlan {
    pub mode: ScoringMode,
    pub demands: Vec<Demand>,
    /// Committed path per demand position (at most one).
    pub paths: Vec<Vec<WidthedPath>>,
    pub ledger: QubitLedger,
}

impl BaselinePlan {
    pub fn score(&self, net: &Network, path: &WidthedPath) -> Result<f64, RouteError> {
        Ok(match self.mode {
            ScoringMode::Classic => classic_path_rate(net, path)?,
            ScoringMode::NFusion => path_rate(net, path)?,
        })
    }

    /// Rate per demand: the sum over its paths.
    pub fn rates(&self, net: &Network) -> Result<Vec<f64>, RouteError> {
        self.paths
            .iter()
            .map(|ps| ps.iter().try_fold(0.0, |acc, p| Ok(acc + self.score(net, p)?)))
            .collect()
    }

    pub fn total_rate(&self, net: &Network) -> Result<f64, RouteError> {
        Ok(self.rates(net)?.iter().fold(0.0, |a, r| a + r))
    }

    /// The same commitments under another scoring model.
    pub fn rescored(mut self, mode: ScoringMode) -> Self {
        self.mode = mode;
        self
    }

    /// Ledger bounds and per-switch conservation: every path holds `w` qubits
    /// at each switch endpoint of each hop.
    pub fn check_invariants(&self, net: &Network) -> Result<(), RouteError> {
        let mut committed: BTreeMap<NodeId, u64> = BTreeMap::new();
        for path in self.paths.iter().flatten() {
            for &e in path.edges() {
                let edge = net.edge(e);
                for v in [edge.u, edge.v] {
                    if net.node(v).is_switch() {
                        *committed.entry(v).or_default() += path.width() as u64;
                    }
                }
            }
        }
        conservation(net, &self.ledger, &committed)
    }

    fn lanes(&self, d: usize) -> BTreeMap<EdgeId, u32> {
        let mut lanes = BTreeMap::new();
        for p in &self.paths[d] {
            for &e in p.edges() {
                *lanes.entry(e).or_default() += p.width();
            }
        }
        lanes
    }

    /// Structured text export, in the router's plan format.
    pub fn to_text(&self, net: &Network) -> Result<String, RouteError> {
        let rates = self.rates(net)?;
        let doc = PlanDocument {
            mode: format!("qcast-{}", self.mode),
            total_rate: rates.iter().fold(0.0, |a, r| a + r),
            demands: self
                .demands
                .iter()
                .enumerate()
                .map(|(i, d)| DemandExport {
                    id: d.id,
                    source: d.source.0,
                    dest: d.dest.0,
                    rate: rates[i],
                    channels: self
                        .lanes(i)
                        .into_iter()
                        .map(|(e, width)| ChannelExport {
                            u: net.edge(e).u.0,
                            v: net.edge(e).v.0,
                            width,
                        })
                        .collect(),
                    paths: self.paths[i].iter().map(PathExport::from).collect(),
                })
                .collect(),
            augmentations: Vec::new(),
        };
        Ok(toml::to_string(&doc).expect("plan documents always serialize"))
    }

    pub fn to_dot(&self, net: &Network) -> String {
        let layers: Vec<(usize, Vec<(EdgeId, u32)>)> = self
            .demands
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id, self.lanes(i).into_iter().collect()))
            .collect();
        routes_dot(net, &layers)
    }
}

/// Greedy commitment of ready-made candidates, one path per demand, calling
/// `observe` after each accepted path.
pub fn commit_candidates(
    net: &Network,
    demands: &[Demand],
    mut candidates: CandidateSet,
    mode: ScoringMode,
    mut observe: impl FnMut(&BaselinePlan),
) -> Result<BaselinePlan, RouteError> {
    let classic = |p: &WidthedPath| classic_path_rate(net, p).expect("candidates are valid paths");
    candidates.sort_each_by(|a, b| rate::rank_cmp(classic(a), a.nodes(), classic(b), b.nodes()));

    let mut plan = BaselinePlan {
        mode,
        demands: demands.to_vec(),
        paths: vec![Vec::new(); demands.len()],
        ledger: QubitLedger::full(net),
    };
    for w in (1..=candidates.max_width()).rev() {
        let mut batch: Vec<(f64, usize, &WidthedPath)> = (0..demands.len())
            .flat_map(|d| candidates.paths(w, d).iter().map(move |p| (d, p)))
            .map(|(d, p)| (classic(p), d, p))
            .collect();
        batch.sort_by(|a, b| {
            rate::rank_cmp(a.0, a.2.nodes(), b.0, b.2.nodes()).then(a.1.cmp(&b.1))
        });
        for (_, d, path) in batch {
            if !plan.paths[d].is_empty() {
                continue;
            }
            let mut need: BTreeMap<NodeId, u32> = BTreeMap::new();
            for &e in path.edges() {
                let edge = net.edge(e);
                for v in [edge.u, edge.v] {
                    if net.node(v).is_switch() {
                        *need.entry(v).or_default() += w;
                    }
                }
            }
            if need.iter().all(|(&v, &n)| plan.ledger.has(v, n)) {
                for (&v, &n) in &need {
                    plan.ledger.debit(v, n)?;
                }
                plan.paths[d].push(path.clone());
                observe(&plan);
            }
        }
    }
    Ok(plan)
}

fn commit(
    net: &Network,
    demands: &[Demand],
    h: usize,
    mode: ScoringMode,
) -> Result<BaselinePlan, RouteError> {
    let candidates = alg2_candidates(net, demands, h)?;
    commit_candidates(net, demands, candidates, mode, |_| {})
}

/// Classic swapping only: greedy commitment of one path per demand, classic
/// scores.
pub fn run_qcast(net: &Network, demands: &[Demand], h: usize) -> Result<BaselinePlan, RouteError> {
    commit(net, demands, h, ScoringMode::Classic)
}

/// The commitments of [`run_qcast`], scored per path under n-fusion.
pub fn run_qcast_n(
    net: &Network,
    demands: &[Demand],
    h: usize,
) -> Result<BaselinePlan, RouteError> {
    commit(net, demands, h, ScoringMode::NFusion)
}
