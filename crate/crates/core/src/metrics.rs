//! Attack-path enumeration and the security metric pool.
//!
//! Per path: probability is the product of node probabilities, cost, impact
//! and MTTA are sums. System level: risk sums `probability × impact_sum`
//! over all paths; cost, success probability and MTTA take the value of the
//! attacker's best path.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harm::{Harm, NodeMetrics};

pub const DEFAULT_DEPTH_CAP: usize = 12;
pub const DEFAULT_PATH_CAP: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("attack path enumeration exceeded its caps (depth {depth_cap}, paths {path_cap}) after {found} paths")]
    PathExplosion {
        found: usize,
        depth_cap: usize,
        path_cap: usize,
    },
    #[error("metric pool is empty")]
    EmptyPool,
    #[error("unknown metric `{0}`")]
    UnknownMetric(String),
}

impl MetricsError {
    pub fn code(&self) -> &'static str {
        match self {
            MetricsError::PathExplosion { .. } => "PATH_EXPLOSION",
            MetricsError::EmptyPool => "EMPTY_POOL",
            MetricsError::UnknownMetric(_) => "UNKNOWN_METRIC",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    SystemRisk,
    AttackCost,
    ProbAttackSuccess,
    Mtta,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::SystemRisk,
        Metric::AttackCost,
        Metric::ProbAttackSuccess,
        Metric::Mtta,
    ];

    pub fn key(&self) -> &'static str {
        match self {
            Metric::SystemRisk => "system_risk",
            Metric::AttackCost => "attack_cost",
            Metric::ProbAttackSuccess => "prob_attack_success",
            Metric::Mtta => "mtta",
        }
    }

    /// True when a smaller value is better for the defender.
    pub fn lower_is_better(&self) -> bool {
        matches!(self, Metric::SystemRisk | Metric::ProbAttackSuccess)
    }

    /// Defender gain moving from `before` to `after`; positive is better.
    /// Equal values (including two infinities) give exactly zero.
    pub fn improvement(&self, before: f64, after: f64) -> f64 {
        if before == after {
            return 0.0;
        }
        if self.lower_is_better() {
            before - after
        } else {
            after - before
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Metric {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "risk" | "system_risk" => Ok(Metric::SystemRisk),
            "cost" | "attack_cost" => Ok(Metric::AttackCost),
            "prob" | "probability" | "asp" | "prob_attack_success" => Ok(Metric::ProbAttackSuccess),
            "mtta" => Ok(Metric::Mtta),
            _ => Err(MetricsError::UnknownMetric(s.to_string())),
        }
    }
}

/// Parse a comma-separated metric list such as `risk,cost`.
pub fn parse_metric_list(s: &str) -> Result<BTreeSet<Metric>, MetricsError> {
    s.split(',')
        .filter(|part| !part.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathCaps {
    pub depth_cap: usize,
    pub path_cap: usize,
    /// Error on truncation instead of returning a partial path set.
    pub strict: bool,
}

impl Default for PathCaps {
    fn default() -> Self {
        Self {
            depth_cap: DEFAULT_DEPTH_CAP,
            path_cap: DEFAULT_PATH_CAP,
            strict: true,
        }
    }
}

impl PathCaps {
    pub fn lossy() -> Self {
        Self {
            strict: false,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackPath {
    pub vms: Vec<String>,
    pub probability: f64,
    pub cost: f64,
    pub impact_sum: f64,
    #[serde(with = "crate::num")]
    pub mtta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub paths: Vec<AttackPath>,
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathAggregates {
    pub probability: f64,
    pub cost: f64,
    pub impact_sum: f64,
    pub mtta: f64,
}

pub fn path_metrics(nodes: &[NodeMetrics]) -> PathAggregates {
    PathAggregates {
        probability: nodes.iter().map(|m| m.probability).product(),
        cost: nodes.iter().map(|m| m.cost).sum(),
        impact_sum: nodes.iter().map(|m| m.impact).sum(),
        mtta: nodes.iter().map(|m| m.mttc).sum(),
    }
}

struct Enumerator<'a> {
    harm: &'a Harm,
    caps: PathCaps,
    paths: Vec<AttackPath>,
    truncated: bool,
}

/// Signals that enumeration must stop early.
struct Halt;

impl<'a> Enumerator<'a> {
    fn viable(&self, vm: &str) -> bool {
        self.harm.metrics(vm).is_exploitable()
    }

    fn successors(&self, vm: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        let harm = self.harm;
        harm.upper
            .successors_of_vm(vm)
            .filter(move |next| harm.metrics(next).is_exploitable())
    }

    /// Whether a target is reachable from `start` through viable nodes that
    /// avoid `blocked`. A BFS witness is itself a simple path disjoint from
    /// `blocked`, so a hit means a qualifying longer path really exists.
    fn target_reachable(&self, start: &str, blocked: &BTreeSet<&str>) -> bool {
        let mut seen: BTreeSet<&str> = BTreeSet::from([start]);
        let mut queue = VecDeque::from([start]);
        while let Some(vm) = queue.pop_front() {
            if self.harm.targets.contains(vm) {
                return true;
            }
            for next in self.successors(vm) {
                if !blocked.contains(next) && seen.insert(next) {
                    queue.push_back(next);
                }
            }
        }
        false
    }

    fn mark_truncated(&mut self) -> Result<(), Halt> {
        self.truncated = true;
        if self.caps.strict {
            Err(Halt)
        } else {
            Ok(())
        }
    }

    fn record(&mut self, path: &[&str]) -> Result<(), Halt> {
        if self.paths.len() >= self.caps.path_cap {
            self.truncated = true;
            return Err(Halt);
        }
        let nodes: Vec<NodeMetrics> = path.iter().map(|vm| self.harm.metrics(vm)).collect();
        let agg = path_metrics(&nodes);
        self.paths.push(AttackPath {
            vms: path.iter().map(|s| s.to_string()).collect(),
            probability: agg.probability,
            cost: agg.cost,
            impact_sum: agg.impact_sum,
            mtta: agg.mtta,
        });
        Ok(())
    }

    fn visit(&mut self, vm: &'a str, path: &mut Vec<&'a str>, on_path: &mut BTreeSet<&'a str>) -> Result<(), Halt> {
        path.push(vm);
        on_path.insert(vm);
        let result = self.visit_inner(vm, path, on_path);
        on_path.remove(vm);
        path.pop();
        result
    }

    fn visit_inner(
        &mut self,
        vm: &'a str,
        path: &mut Vec<&'a str>,
        on_path: &mut BTreeSet<&'a str>,
    ) -> Result<(), Halt> {
        if self.harm.targets.contains(vm) {
            self.record(path)?;
        }
        let next: Vec<&'a str> = self.successors(vm).filter(|n| !on_path.contains(n)).collect();
        for succ in next {
            if path.len() >= self.caps.depth_cap {
                if !self.truncated && self.target_reachable(succ, on_path) {
                    self.mark_truncated()?;
                }
                continue;
            }
            self.visit(succ, path, on_path)?;
        }
        Ok(())
    }
}

/// All simple entry→target paths through exploitable nodes, in
/// lexicographic order of their VM-id sequences.
pub fn enumerate_paths(harm: &Harm, caps: PathCaps) -> Result<PathSet, MetricsError> {
    let mut en = Enumerator {
        harm,
        caps,
        paths: Vec::new(),
        truncated: false,
    };
    let entries: Vec<&str> = harm
        .entry_points
        .iter()
        .map(String::as_str)
        .filter(|vm| en.viable(vm))
        .collect();

    for entry in entries {
        let outcome = if caps.depth_cap == 0 {
            if en.target_reachable(entry, &BTreeSet::new()) {
                en.mark_truncated()
            } else {
                Ok(())
            }
        } else {
            en.visit(entry, &mut Vec::new(), &mut BTreeSet::new())
        };
        if outcome.is_err() {
            break;
        }
    }

    if en.truncated && caps.strict {
        return Err(MetricsError::PathExplosion {
            found: en.paths.len(),
            depth_cap: caps.depth_cap,
            path_cap: caps.path_cap,
        });
    }
    Ok(PathSet {
        paths: en.paths,
        truncated: en.truncated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemMetrics {
    pub system_risk: f64,
    pub attack_cost: f64,
    pub prob_attack_success: f64,
    pub mtta: f64,
}

impl SystemMetrics {
    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::SystemRisk => self.system_risk,
            Metric::AttackCost => self.attack_cost,
            Metric::ProbAttackSuccess => self.prob_attack_success,
            Metric::Mtta => self.mtta,
        }
    }
}

pub fn system_metrics(paths: &[AttackPath]) -> SystemMetrics {
    SystemMetrics {
        system_risk: paths.iter().map(|p| p.probability * p.impact_sum).sum(),
        attack_cost: paths.iter().map(|p| p.cost).fold(f64::INFINITY, f64::min),
        prob_attack_success: paths.iter().map(|p| p.probability).fold(0.0, f64::max),
        mtta: paths.iter().map(|p| p.mtta).fold(f64::INFINITY, f64::min),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPool {
    pub selected: BTreeSet<Metric>,
    #[serde(default)]
    pub caps: PathCaps,
    #[serde(default)]
    pub include_paths: bool,
}

impl MetricPool {
    pub fn new(selected: impl IntoIterator<Item = Metric>) -> Self {
        Self {
            selected: selected.into_iter().collect(),
            caps: PathCaps::default(),
            include_paths: false,
        }
    }

    pub fn all() -> Self {
        Self::new(Metric::ALL)
    }

    pub fn with_caps(mut self, caps: PathCaps) -> Self {
        self.caps = caps;
        self
    }

    pub fn with_paths(mut self, include: bool) -> Self {
        self.include_paths = include;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(with = "crate::num::map")]
    pub values: BTreeMap<Metric, f64>,
    pub path_count: usize,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_path: Option<Vec<AttackPath>>,
}

impl MetricReport {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.values.get(&metric).copied()
    }
}

pub fn evaluate_pool(harm: &Harm, pool: &MetricPool) -> Result<MetricReport, MetricsError> {
    if pool.selected.is_empty() {
        return Err(MetricsError::EmptyPool);
    }
    let set = enumerate_paths(harm, pool.caps)?;
    let sys = system_metrics(&set.paths);
    Ok(MetricReport {
        values: pool.selected.iter().map(|m| (*m, sys.get(*m))).collect(),
        path_count: set.paths.len(),
        truncated: set.truncated,
        per_path: pool.include_paths.then_some(set.paths),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harm::{AttackTree, Harm};
    use crate::inventory::{EdgeOrigin, Node, Reachability};

    fn node(p: f64, c: f64, i: f64) -> NodeMetrics {
        NodeMetrics {
            probability: p,
            impact: i,
            cost: c,
            mttc: if p > 0.0 { 1.0 / p } else { f64::INFINITY },
        }
    }

    /// Chain INTERNET→a→b→c with given node metrics.
    fn chain(metrics: [NodeMetrics; 3]) -> Harm {
        let names = ["a", "b", "c"];
        let mut upper = Reachability::default();
        upper.insert(Node::Internet, Node::vm("a"), EdgeOrigin::FloatingIp);
        upper.insert(Node::vm("a"), Node::vm("b"), EdgeOrigin::Firewall);
        upper.insert(Node::vm("b"), Node::vm("c"), EdgeOrigin::Firewall);
        Harm {
            vms: names.iter().map(|s| s.to_string()).collect(),
            upper,
            lower: names.iter().map(|s| (s.to_string(), AttackTree::Empty)).collect(),
            entry_points: BTreeSet::from(["a".to_string()]),
            targets: BTreeSet::from(["c".to_string()]),
            node_metrics: names.iter().map(|s| s.to_string()).zip(metrics).collect(),
            placement: BTreeMap::new(),
        }
    }

    #[test]
    fn path_aggregation_matches_hand_evaluation() {
        let agg = path_metrics(&[node(0.8, 2.0, 5.0), node(0.5, 5.0, 10.0)]);
        assert_eq!(agg.probability, 0.4);
        assert_eq!(agg.cost, 7.0);
        assert_eq!(agg.impact_sum, 15.0);
        assert_eq!(agg.mtta, 3.25);
        let rev = path_metrics(&[node(0.5, 5.0, 10.0), node(0.8, 2.0, 5.0)]);
        assert_eq!(agg, rev);
        let single = path_metrics(&[node(1.0, 0.0, 3.0)]);
        assert_eq!((single.probability, single.mtta), (1.0, 1.0));
    }

    #[test]
    fn system_metrics_single_and_empty() {
        let p = AttackPath {
            vms: vec!["a".into(), "b".into()],
            probability: 0.4,
            cost: 7.0,
            impact_sum: 15.0,
            mtta: 3.25,
        };
        let m = system_metrics(std::slice::from_ref(&p));
        assert_eq!((m.system_risk, m.attack_cost, m.prob_attack_success, m.mtta), (6.0, 7.0, 0.4, 3.25));
        let doubled = system_metrics(&[p.clone(), p]);
        assert_eq!(doubled.system_risk, 12.0);
        assert_eq!((doubled.attack_cost, doubled.prob_attack_success, doubled.mtta), (7.0, 0.4, 3.25));
        let none = system_metrics(&[]);
        assert_eq!(none.system_risk, 0.0);
        assert_eq!(none.prob_attack_success, 0.0);
        assert!(none.attack_cost.is_infinite() && none.mtta.is_infinite());
    }

    #[test]
    fn chain_has_one_path() {
        let h = chain([node(0.8, 2.0, 5.0), node(0.5, 5.0, 10.0), node(1.0, 0.0, 0.0)]);
        let set = enumerate_paths(&h, PathCaps::default()).unwrap();
        assert_eq!(set.paths.len(), 1);
        assert_eq!(set.paths[0].vms, vec!["a", "b", "c"]);
        assert!(!set.truncated);
    }

    #[test]
    fn unexploitable_node_cuts_paths() {
        let h = chain([node(0.8, 2.0, 5.0), NodeMetrics::UNEXPLOITABLE, node(1.0, 0.0, 0.0)]);
        assert!(enumerate_paths(&h, PathCaps::default()).unwrap().paths.is_empty());
    }

    #[test]
    fn no_entry_points_no_paths() {
        let mut h = chain([node(0.8, 2.0, 5.0), node(0.5, 5.0, 10.0), node(1.0, 0.0, 0.0)]);
        h.entry_points.clear();
        let set = enumerate_paths(&h, PathCaps::default()).unwrap();
        assert!(set.paths.is_empty() && !set.truncated);
    }

    #[test]
    fn depth_cap_strict_and_lossy() {
        let h = chain([node(0.8, 2.0, 5.0), node(0.5, 5.0, 10.0), node(1.0, 0.0, 0.0)]);
        let strict = PathCaps { depth_cap: 1, ..PathCaps::default() };
        let err = enumerate_paths(&h, strict).unwrap_err();
        assert_eq!(err.code(), "PATH_EXPLOSION");
        let lossy = PathCaps { depth_cap: 2, strict: false, ..PathCaps::default() };
        let set = enumerate_paths(&h, lossy).unwrap();
        assert!(set.truncated && set.paths.is_empty());
        let exact = PathCaps { depth_cap: 3, ..PathCaps::default() };
        assert!(!enumerate_paths(&h, exact).unwrap().truncated);
    }

    #[test]
    fn depth_cap_on_a_dead_end_is_not_truncation() {
        let mut h = chain([node(0.8, 2.0, 5.0), node(0.5, 5.0, 10.0), node(1.0, 0.0, 0.0)]);
        h.vms.insert("d".into());
        h.node_metrics.insert("d".into(), node(0.5, 1.0, 1.0));
        h.upper.insert(Node::vm("c"), Node::vm("d"), EdgeOrigin::Firewall);
        let caps = PathCaps { depth_cap: 3, ..PathCaps::default() };
        let set = enumerate_paths(&h, caps).unwrap();
        assert_eq!(set.paths.len(), 1);
        assert!(!set.truncated);
    }

    #[test]
    fn path_cap() {
        let mut h = chain([node(0.8, 2.0, 5.0), node(0.5, 5.0, 10.0), node(1.0, 0.0, 0.0)]);
        h.targets.insert("b".into());
        let caps = PathCaps { path_cap: 1, strict: false, ..PathCaps::default() };
        let set = enumerate_paths(&h, caps).unwrap();
        assert_eq!(set.paths.len(), 1);
        assert_eq!(set.paths[0].vms, vec!["a", "b"]);
        assert!(set.truncated);
        let strict = PathCaps { path_cap: 1, ..PathCaps::default() };
        assert!(enumerate_paths(&h, strict).is_err());
    }

    #[test]
    fn pool_selection() {
        let h = chain([node(0.8, 2.0, 5.0), node(0.5, 5.0, 10.0), node(1.0, 0.0, 0.0)]);
        let r = evaluate_pool(&h, &MetricPool::new([Metric::SystemRisk])).unwrap();
        assert_eq!(r.values.len(), 1);
        assert_eq!(r.get(Metric::SystemRisk), Some(6.0));
        assert!(r.per_path.is_none());
        assert_eq!(evaluate_pool(&h, &MetricPool::new([])).unwrap_err().code(), "EMPTY_POOL");
        let strict = MetricPool::all().with_caps(PathCaps { depth_cap: 1, ..PathCaps::default() });
        assert_eq!(evaluate_pool(&h, &strict).unwrap_err().code(), "PATH_EXPLOSION");
    }

    #[test]
    fn metric_names() {
        assert_eq!(
            parse_metric_list("risk, cost,prob,mtta").unwrap(),
            BTreeSet::from(Metric::ALL)
        );
        assert!("speed".parse::<Metric>().is_err());
        let r = MetricReport {
            values: BTreeMap::from([(Metric::AttackCost, f64::INFINITY), (Metric::SystemRisk, 0.0)]),
            path_count: 0,
            truncated: false,
            per_path: None,
        };
        let text = serde_json::to_string(&r).unwrap();
        assert_eq!(text, r#"{"values":{"system_risk":0.0,"attack_cost":"inf"},"path_count":0,"truncated":false}"#);
        assert_eq!(serde_json::from_str::<MetricReport>(&text).unwrap(), r);
    }

    #[test]
    fn improvement_direction() {
        assert_eq!(Metric::SystemRisk.improvement(5.0, 2.0), 3.0);
        assert_eq!(Metric::AttackCost.improvement(5.0, 2.0), -3.0);
        assert_eq!(Metric::Mtta.improvement(f64::INFINITY, f64::INFINITY), 0.0);
    }
}
