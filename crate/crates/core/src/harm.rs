//! Two-layer Hierarchical Attack Representation Model.
//!
//! The upper layer is the reachability graph over `{INTERNET} ∪ VMs`; the
//! lower layer holds one attack tree per VM whose leaves are CVEs. Each tree
//! folds bottom-up into the [`NodeMetrics`] used for path analysis.
//!
//! Gate rules: an OR gate is the attacker picking the easiest child
//! (max probability and impact, min cost and MTTC); an AND gate requires
//! every child (product of probabilities, sums of cost, impact and MTTC).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::inventory::{derive_reachability, CloudInventory, Edge, InventoryError, Node, Reachability, INTERNET};
use crate::num;
use crate::vuln::{leaf_metrics, CvssCatalog, LeafMetrics, VulnError, VulnMap};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HarmError {
    #[error("unknown CVE `{0}`")]
    UnknownCve(String),
    #[error("gate spec does not match the CVE list: {0}")]
    GateSpecMismatch(String),
    #[error("cannot parse gate spec: {0}")]
    GateSpecParse(String),
    #[error("no attack target given")]
    NoTarget,
    #[error("target `{0}` is not a VM in the inventory")]
    UnknownTarget(String),
    #[error("vulnerability map names unknown VM `{0}`")]
    UnknownVm(String),
    #[error(transparent)]
    Inventory(#[from] InventoryError),
    #[error("malformed HARM document: {0}")]
    Malformed(String),
}

impl HarmError {
    pub fn code(&self) -> &'static str {
        match self {
            HarmError::UnknownCve(_) => "UNKNOWN_CVE",
            HarmError::GateSpecMismatch(_) => "GATE_SPEC_MISMATCH",
            HarmError::GateSpecParse(_) => "GATE_SPEC_PARSE",
            HarmError::NoTarget => "NO_TARGET",
            HarmError::UnknownTarget(_) => "UNKNOWN_TARGET",
            HarmError::UnknownVm(_) => "UNKNOWN_VM",
            HarmError::Inventory(e) => e.code(),
            HarmError::Malformed(_) => "MALFORMED_HARM",
        }
    }
}

impl From<VulnError> for HarmError {
    fn from(e: VulnError) -> Self {
        match e {
            VulnError::UnknownCve(id) => HarmError::UnknownCve(id),
            other => HarmError::Malformed(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum GateKind {
    And,
    Or,
}

impl fmt::Display for GateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GateKind::And => "AND",
            GateKind::Or => "OR",
        })
    }
}

/// Expert-supplied AND/OR structure over a VM's CVEs, written as e.g.
/// `AND(CVE-2016-0002, OR(CVE-2017-0144, CVE-2017-0199))`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GateExpr {
    Cve(String),
    Gate(GateKind, Vec<GateExpr>),
}

impl GateExpr {
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            GateExpr::Cve(id) => out.push(id),
            GateExpr::Gate(_, children) => children.iter().for_each(|c| c.collect_leaves(out)),
        }
    }
}

impl fmt::Display for GateExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateExpr::Cve(id) => f.write_str(id),
            GateExpr::Gate(kind, children) => {
                write!(f, "{kind}(")?;
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl FromStr for GateExpr {
    type Err = HarmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parser = GateParser { src: s, pos: 0 };
        let expr = parser.expr()?;
        parser.skip_ws();
        if parser.pos != s.len() {
            return Err(parser.fail("trailing input"));
        }
        Ok(expr)
    }
}

impl Serialize for GateExpr {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for GateExpr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

struct GateParser<'a> {
    src: &'a str,
    pos: usize,
}

impl GateParser<'_> {
    fn fail(&self, what: &str) -> HarmError {
        HarmError::GateSpecParse(format!("{what} at offset {} in `{}`", self.pos, self.src))
    }

    fn skip_ws(&mut self) {
        while self.src[self.pos..].starts_with(char::is_whitespace) {
            self.pos += self.src[self.pos..].chars().next().map_or(1, char::len_utf8);
        }
    }

    fn ident(&mut self) -> &str {
        let start = self.pos;
        let len = self.src[start..]
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.'))
            .unwrap_or(self.src.len() - start);
        self.pos += len;
        &self.src[start..start + len]
    }

    fn expr(&mut self) -> Result<GateExpr, HarmError> {
        self.skip_ws();
        let word = self.ident().to_string();
        if word.is_empty() {
            return Err(self.fail("expected a CVE id or gate"));
        }
        self.skip_ws();
        if !self.src[self.pos..].starts_with('(') {
            return Ok(GateExpr::Cve(word));
        }
        let kind = match word.to_ascii_uppercase().as_str() {
            "AND" => GateKind::And,
            "OR" => GateKind::Or,
            _ => return Err(self.fail("unknown gate")),
        };
        self.pos += 1;
        let mut children = vec![self.expr()?];
        loop {
            self.skip_ws();
            match self.src[self.pos..].chars().next() {
                Some(',') => {
                    self.pos += 1;
                    children.push(self.expr()?);
                }
                Some(')') => {
                    self.pos += 1;
                    return Ok(GateExpr::Gate(kind, children));
                }
                _ => return Err(self.fail("expected `,` or `)`")),
            }
        }
    }
}

/// Lower-layer attack tree of one VM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum AttackTree {
    Leaf { cve_id: String, metrics: LeafMetrics },
    Gate { kind: GateKind, children: Vec<AttackTree> },
    /// VM with no known vulnerabilities.
    Empty,
}

impl AttackTree {
    pub fn leaf_ids(&self) -> Vec<&str> {
        match self {
            AttackTree::Leaf { cve_id, .. } => vec![cve_id],
            AttackTree::Gate { children, .. } => children.iter().flat_map(|c| c.leaf_ids()).collect(),
            AttackTree::Empty => Vec::new(),
        }
    }

    /// Same gates and CVE leaves, ignoring leaf metric values.
    pub fn same_shape(&self, other: &AttackTree) -> bool {
        match (self, other) {
            (AttackTree::Leaf { cve_id: a, .. }, AttackTree::Leaf { cve_id: b, .. }) => a == b,
            (
                AttackTree::Gate { kind: ka, children: ca },
                AttackTree::Gate { kind: kb, children: cb },
            ) => ka == kb && ca.len() == cb.len() && ca.iter().zip(cb).all(|(a, b)| a.same_shape(b)),
            (AttackTree::Empty, AttackTree::Empty) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeMetrics {
    pub probability: f64,
    pub impact: f64,
    #[serde(with = "crate::num")]
    pub cost: f64,
    #[serde(with = "crate::num")]
    pub mttc: f64,
}

impl NodeMetrics {
    /// Metrics of an unexploitable node.
    pub const UNEXPLOITABLE: NodeMetrics = NodeMetrics {
        probability: 0.0,
        impact: 0.0,
        cost: f64::INFINITY,
        mttc: f64::INFINITY,
    };

    pub fn is_exploitable(&self) -> bool {
        self.probability > 0.0
    }
}

impl From<LeafMetrics> for NodeMetrics {
    fn from(m: LeafMetrics) -> Self {
        NodeMetrics {
            probability: m.probability,
            impact: m.impact,
            cost: m.cost,
            mttc: m.mttc,
        }
    }
}

fn dedup_preserving_order(ids: &[String]) -> Vec<&str> {
    let mut seen = BTreeSet::new();
    ids.iter()
        .map(String::as_str)
        .filter(|id| seen.insert(*id))
        .collect()
}

/// Build a VM's attack tree. Without a spec every CVE hangs off a single OR
/// gate; with a spec the expression must use each CVE exactly once.
pub fn build_attack_tree(
    catalog: &CvssCatalog,
    cve_ids: &[String],
    gate_spec: Option<&GateExpr>,
) -> Result<AttackTree, HarmError> {
    let ids = dedup_preserving_order(cve_ids);
    for id in &ids {
        catalog.lookup(id)?;
    }
    let leaf = |id: &str| -> Result<AttackTree, HarmError> {
        Ok(AttackTree::Leaf {
            cve_id: id.to_string(),
            metrics: leaf_metrics(catalog.lookup(id)?),
        })
    };

    match gate_spec {
        None if ids.is_empty() => Ok(AttackTree::Empty),
        None => Ok(AttackTree::Gate {
            kind: GateKind::Or,
            children: ids.iter().map(|id| leaf(id)).collect::<Result<_, _>>()?,
        }),
        Some(spec) => {
            let leaves = spec.leaves();
            let spec_set: BTreeSet<&str> = leaves.iter().copied().collect();
            let list_set: BTreeSet<&str> = ids.iter().copied().collect();
            if spec_set.len() != leaves.len() {
                return Err(HarmError::GateSpecMismatch(format!("`{spec}` repeats a CVE")));
            }
            if let Some(extra) = spec_set.difference(&list_set).next() {
                return Err(HarmError::GateSpecMismatch(format!("`{spec}` references {extra} which is not on the VM")));
            }
            if let Some(missing) = list_set.difference(&spec_set).next() {
                return Err(HarmError::GateSpecMismatch(format!("`{spec}` omits {missing}")));
            }
            fn go(
                e: &GateExpr,
                leaf: &dyn Fn(&str) -> Result<AttackTree, HarmError>,
            ) -> Result<AttackTree, HarmError> {
                match e {
                    GateExpr::Cve(id) => leaf(id),
                    GateExpr::Gate(kind, children) => Ok(AttackTree::Gate {
                        kind: *kind,
                        children: children.iter().map(|c| go(c, leaf)).collect::<Result<_, _>>()?,
                    }),
                }
            }
            go(spec, &leaf)
        }
    }
}

pub fn fold_attack_tree(tree: &AttackTree) -> NodeMetrics {
    match tree {
        AttackTree::Leaf { metrics, .. } => (*metrics).into(),
        AttackTree::Empty => NodeMetrics::UNEXPLOITABLE,
        AttackTree::Gate { kind, children } => {
            let folded = children.iter().map(fold_attack_tree);
            match kind {
                GateKind::Or => folded
                    .reduce(|a, b| NodeMetrics {
                        probability: a.probability.max(b.probability),
                        impact: a.impact.max(b.impact),
                        cost: a.cost.min(b.cost),
                        mttc: a.mttc.min(b.mttc),
                    })
                    .unwrap_or(NodeMetrics::UNEXPLOITABLE),
                GateKind::And => folded
                    .reduce(|a, b| NodeMetrics {
                        probability: a.probability * b.probability,
                        impact: a.impact + b.impact,
                        cost: a.cost + b.cost,
                        mttc: a.mttc + b.mttc,
                    })
                    .unwrap_or(NodeMetrics::UNEXPLOITABLE),
            }
        }
    }
}

/// Per-VM AND/OR structure supplied by an analyst; VMs without an entry get
/// a single OR gate over their CVEs.
pub type GateSpecs = BTreeMap<String, GateExpr>;

#[derive(Debug, Clone, PartialEq)]
pub struct Harm {
    /// Every VM id; INTERNET is implicit.
    pub vms: BTreeSet<String>,
    pub upper: Reachability,
    pub lower: BTreeMap<String, AttackTree>,
    pub entry_points: BTreeSet<String>,
    pub targets: BTreeSet<String>,
    pub node_metrics: BTreeMap<String, NodeMetrics>,
    /// VM → physical host, used to cluster the DOT rendering.
    pub placement: BTreeMap<String, String>,
}

pub fn build_harm(
    inv: &CloudInventory,
    vulns: &VulnMap,
    catalog: &CvssCatalog,
    gate_specs: &GateSpecs,
    targets: &BTreeSet<String>,
) -> Result<Harm, HarmError> {
    if targets.is_empty() {
        return Err(HarmError::NoTarget);
    }
    if let Some(t) = targets.iter().find(|t| inv.vm(t).is_none()) {
        return Err(HarmError::UnknownTarget(t.clone()));
    }
    if let Some(vm) = vulns.keys().find(|vm| inv.vm(vm).is_none()) {
        return Err(HarmError::UnknownVm(vm.clone()));
    }

    let upper = derive_reachability(inv)?;
    let mut lower = BTreeMap::new();
    let mut node_metrics = BTreeMap::new();
    for vm in &inv.vms {
        let cves = vulns.get(&vm.id).map(Vec::as_slice).unwrap_or(&[]);
        let tree = build_attack_tree(catalog, cves, gate_specs.get(&vm.id))?;
        node_metrics.insert(vm.id.clone(), fold_attack_tree(&tree));
        lower.insert(vm.id.clone(), tree);
    }
    let entry_points = upper
        .successors(&Node::Internet)
        .filter_map(|n| n.as_vm().map(str::to_string))
        .collect();

    Ok(Harm {
        vms: inv.vms.iter().map(|vm| vm.id.clone()).collect(),
        upper,
        lower,
        entry_points,
        targets: targets.clone(),
        node_metrics,
        placement: inv.vms.iter().map(|vm| (vm.id.clone(), vm.host_id.clone())).collect(),
    })
}

impl Harm {
    /// Upper-layer nodes including INTERNET, sorted by id.
    pub fn node_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.vms.iter().cloned().collect();
        ids.push(INTERNET.to_string());
        ids.sort();
        ids
    }

    pub fn metrics(&self, vm: &str) -> NodeMetrics {
        self.node_metrics
            .get(vm)
            .copied()
            .unwrap_or(NodeMetrics::UNEXPLOITABLE)
    }

    /// Copy with one upper-layer edge removed (entry points follow).
    pub fn without_edge(&self, from: &Node, to: &Node) -> Harm {
        let mut h = self.clone();
        h.upper.remove(from, to);
        if *from == Node::Internet {
            if let Some(vm) = to.as_vm() {
                h.entry_points.remove(vm);
            }
        }
        h
    }

    /// Same nodes, edges, trees, entry points, targets and placement; leaf
    /// and node metrics are compared to `rel` relative tolerance.
    pub fn structurally_eq(&self, other: &Harm, rel: f64) -> bool {
        let metrics_close = |a: &NodeMetrics, b: &NodeMetrics| {
            num::approx_eq(a.probability, b.probability, rel)
                && num::approx_eq(a.impact, b.impact, rel)
                && num::approx_eq(a.cost, b.cost, rel)
                && num::approx_eq(a.mttc, b.mttc, rel)
        };
        self.vms == other.vms
            && self.upper == other.upper
            && self.entry_points == other.entry_points
            && self.targets == other.targets
            && self.placement == other.placement
            && self.lower.len() == other.lower.len()
            && self
                .lower
                .iter()
                .all(|(vm, t)| other.lower.get(vm).is_some_and(|o| t.same_shape(o)))
            && self.node_metrics.len() == other.node_metrics.len()
            && self
                .node_metrics
                .iter()
                .all(|(vm, m)| other.node_metrics.get(vm).is_some_and(|o| metrics_close(m, o)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExportFormat {
    CanonicalJson,
    Dot,
}

impl FromStr for ExportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "json" | "canonical-json" => Ok(ExportFormat::CanonicalJson),
            "dot" => Ok(ExportFormat::Dot),
            other => Err(format!("unknown export format `{other}`")),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct UpperDoc {
    nodes: Vec<String>,
    edges: Vec<Edge>,
}

#[derive(Serialize, Deserialize)]
struct HarmDoc {
    upper: UpperDoc,
    lower: BTreeMap<String, AttackTree>,
    entry_points: BTreeSet<String>,
    targets: BTreeSet<String>,
    node_metrics: BTreeMap<String, NodeMetrics>,
    #[serde(default)]
    placement: BTreeMap<String, String>,
}

/// Round every floating-point number in a JSON tree to 6 significant digits.
pub fn canonicalize_floats(value: &mut Value) {
    match value {
        Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64() {
                if let Some(r) = serde_json::Number::from_f64(num::round_sig(x, 6)) {
                    *n = r;
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(canonicalize_floats),
        Value::Object(map) => map.values_mut().for_each(canonicalize_floats),
        _ => {}
    }
}

impl Harm {
    pub fn to_canonical_value(&self) -> Value {
        let mut edges: Vec<Edge> = self.upper.edges().collect();
        edges.sort_by_key(|e| (e.from.to_string(), e.to.to_string()));
        let doc = HarmDoc {
            upper: UpperDoc {
                nodes: self.node_ids(),
                edges,
            },
            lower: self.lower.clone(),
            entry_points: self.entry_points.clone(),
            targets: self.targets.clone(),
            node_metrics: self.node_metrics.clone(),
            placement: self.placement.clone(),
        };
        let mut value = serde_json::to_value(doc).expect("HARM serializes");
        canonicalize_floats(&mut value);
        value
    }

    pub fn to_canonical_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_canonical_value()).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn from_canonical_json(doc: &str) -> Result<Harm, HarmError> {
        let doc: HarmDoc = serde_json::from_str(doc).map_err(|e| HarmError::Malformed(e.to_string()))?;
        let vms: BTreeSet<String> = doc.upper.nodes.into_iter().filter(|n| n != INTERNET).collect();
        for edge in &doc.upper.edges {
            for end in [&edge.from, &edge.to] {
                if let Node::Vm(id) = end {
                    if !vms.contains(id) {
                        return Err(HarmError::Malformed(format!("edge endpoint {id} is not a node")));
                    }
                }
            }
        }
        Ok(Harm {
            vms,
            upper: doc.upper.edges.into_iter().collect(),
            lower: doc.lower,
            entry_points: doc.entry_points,
            targets: doc.targets,
            node_metrics: doc.node_metrics,
            placement: doc.placement,
        })
    }

    pub fn to_dot(&self) -> String {
        let quote = |s: &str| format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""));
        let mut out = String::from("digraph harm {\n  rankdir=LR;\n");
        out.push_str(&format!("  {} [shape=doublecircle];\n", quote(INTERNET)));

        let mut by_host: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for vm in &self.vms {
            let host = self.placement.get(vm).map(String::as_str).unwrap_or("unplaced");
            by_host.entry(host).or_default().push(vm);
        }
        for (host, vms) in by_host {
            out.push_str(&format!("  subgraph {} {{\n", quote(&format!("cluster_{host}"))));
            out.push_str(&format!("    label={};\n", quote(host)));
            for vm in vms {
                let m = self.metrics(vm);
                let mut attrs = vec![
                    format!("label={}", quote(&format!("{vm}\\np={}", num::round_sig(m.probability, 6)))),
                    "shape=box".to_string(),
                ];
                if self.targets.contains(vm) {
                    attrs.push("peripheries=2".into());
                }
                if !m.is_exploitable() {
                    attrs.push("style=dashed".into());
                }
                out.push_str(&format!("    {} [{}];\n", quote(vm), attrs.join(", ")));
            }
            out.push_str("  }\n");
        }
        let mut edges: Vec<(String, String)> =
            self.upper.pairs().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        edges.sort();
        for (a, b) in edges {
            out.push_str(&format!("  {} -> {};\n", quote(&a), quote(&b)));
        }
        out.push_str("}\n");
        out
    }

    pub fn export(&self, format: ExportFormat) -> String {
        match format {
            ExportFormat::CanonicalJson => self.to_canonical_json(),
            ExportFormat::Dot => self.to_dot(),
        }
    }
}
