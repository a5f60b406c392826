//! Cloud data model and VM reachability.
//!
//! An inventory snapshot is a plain value. Transformations (MTD actions,
//! provider reconciliation) produce a new snapshot instead of editing one
//! in place.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Name of the synthetic Internet node in the upper HARM layer.
pub const INTERNET: &str = "INTERNET";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InventoryError {
    #[error("firewall rule {rule} references unknown VM `{vm}`")]
    ReferencesUnknownVm { rule: usize, vm: String },
    #[error("no free address left in {0}")]
    SubnetExhausted(Ipv4Net),
}

impl InventoryError {
    pub fn code(&self) -> &'static str {
        match self {
            InventoryError::ReferencesUnknownVm { .. } => "REFERENCES_UNKNOWN_VM",
            InventoryError::SubnetExhausted(_) => "SUBNET_EXHAUSTED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Flavor {
    pub name: String,
    pub vcpus: u32,
    pub ram_gb: f64,
    pub disk_gb: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Host {
    pub id: String,
    pub zone: String,
    pub capacity_vms: u32,
    #[serde(default)]
    pub resident_vm_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vm {
    pub id: String,
    pub enterprise: String,
    pub os_variant: String,
    pub flavor: String,
    pub host_id: String,
    pub internal_ip: Ipv4Addr,
    #[serde(default)]
    pub floating_ip: Option<Ipv4Addr>,
    #[serde(default)]
    pub is_target: bool,
}

impl Vm {
    /// The /24 the VM's internal address lives in.
    pub fn network(&self) -> Ipv4Net {
        host_network(self.internal_ip)
    }
}

/// The /24 network containing `ip`.
pub fn host_network(ip: Ipv4Addr) -> Ipv4Net {
    Ipv4Net::new(ip, 24).expect("24 is a valid prefix").trunc()
}

/// One side of a firewall rule.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Internet,
    Subnet(Ipv4Net),
    Vm(String),
}

impl Endpoint {
    pub fn vm(id: impl Into<String>) -> Self {
        Endpoint::Vm(id.into())
    }

    pub fn matches(&self, vm: &Vm) -> bool {
        match self {
            Endpoint::Internet => false,
            Endpoint::Subnet(net) => net.contains(&vm.internal_ip),
            Endpoint::Vm(id) => *id == vm.id,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Internet => f.write_str(INTERNET),
            Endpoint::Subnet(net) => write!(f, "{net}"),
            Endpoint::Vm(id) => f.write_str(id),
        }
    }
}

impl FromStr for Endpoint {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == INTERNET {
            return Ok(Endpoint::Internet);
        }
        if s.contains('/') {
            if let Ok(net) = s.parse::<Ipv4Net>() {
                return Ok(Endpoint::Subnet(net.trunc()));
            }
        }
        Ok(Endpoint::Vm(s.to_string()))
    }
}

impl Serialize for Endpoint {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Endpoint {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(s.parse().expect("endpoint parsing is infallible"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleAction {
    #[default]
    Allow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FirewallRule {
    pub src: Endpoint,
    pub dst: Endpoint,
    #[serde(default)]
    pub action: RuleAction,
}

impl FirewallRule {
    pub fn allow(src: Endpoint, dst: Endpoint) -> Self {
        Self {
            src,
            dst,
            action: RuleAction::Allow,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SystemConstraints {
    #[serde(default)]
    pub allowed_zones: BTreeSet<String>,
    #[serde(default)]
    pub allowed_os_variants: BTreeSet<String>,
    #[serde(default)]
    pub per_host_capacity: BTreeMap<String, u32>,
    #[serde(default)]
    pub colocation_edges_enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudInventory {
    #[serde(default)]
    pub version: u64,
    #[serde(default)]
    pub flavors: Vec<Flavor>,
    pub hosts: Vec<Host>,
    pub vms: Vec<Vm>,
    #[serde(default)]
    pub rules: Vec<FirewallRule>,
    #[serde(default)]
    pub constraints: SystemConstraints,
}

impl CloudInventory {
    pub fn from_json(doc: &str) -> serde_json::Result<Self> {
        serde_json::from_str(doc)
    }

    pub fn vm(&self, id: &str) -> Option<&Vm> {
        self.vms.iter().find(|vm| vm.id == id)
    }

    pub fn vm_mut(&mut self, id: &str) -> Option<&mut Vm> {
        self.vms.iter_mut().find(|vm| vm.id == id)
    }

    pub fn host(&self, id: &str) -> Option<&Host> {
        self.hosts.iter().find(|h| h.id == id)
    }

    pub fn host_mut(&mut self, id: &str) -> Option<&mut Host> {
        self.hosts.iter_mut().find(|h| h.id == id)
    }

    pub fn flavor(&self, name: &str) -> Option<&Flavor> {
        self.flavors.iter().find(|f| f.name == name)
    }

    /// Capacity after applying any per-host override from the constraints.
    pub fn effective_capacity(&self, host: &Host) -> u32 {
        self.constraints
            .per_host_capacity
            .get(&host.id)
            .copied()
            .unwrap_or(host.capacity_vms)
    }

    /// Number of additional VMs `host_id` can take, or `None` for an unknown host.
    pub fn free_capacity(&self, host_id: &str) -> Option<u32> {
        let host = self.host(host_id)?;
        let used = host.resident_vm_ids.len() as u32;
        Some(self.effective_capacity(host).saturating_sub(used))
    }

    pub fn targets(&self) -> BTreeSet<String> {
        self.vms
            .iter()
            .filter(|vm| vm.is_target)
            .map(|vm| vm.id.clone())
            .collect()
    }

    pub fn zones(&self) -> BTreeSet<String> {
        self.hosts.iter().map(|h| h.zone.clone()).collect()
    }

    /// Lowest unused host address in `net` (a /24), skipping the network
    /// and broadcast addresses and every internal or floating address
    /// already present in the inventory or in `reserved`.
    pub fn allocate_ip(
        &self,
        net: Ipv4Net,
        reserved: &BTreeSet<Ipv4Addr>,
    ) -> Result<Ipv4Addr, InventoryError> {
        let used: BTreeSet<Ipv4Addr> = self
            .vms
            .iter()
            .flat_map(|vm| std::iter::once(vm.internal_ip).chain(vm.floating_ip))
            .collect();
        net.hosts()
            .find(|ip| !used.contains(ip) && !reserved.contains(ip))
            .ok_or(InventoryError::SubnetExhausted(net))
    }

    /// Ids `<base>-r<k>` for the `count` smallest unused `k >= 1`.
    pub fn next_replica_ids(&self, base: &str, count: u32) -> Vec<String> {
        let taken: BTreeSet<&str> = self.vms.iter().map(|vm| vm.id.as_str()).collect();
        (1u32..)
            .map(|k| format!("{base}-r{k}"))
            .filter(|id| !taken.contains(id.as_str()))
            .take(count as usize)
            .collect()
    }
}

/// Machine-readable invariant violation codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    DuplicateVmId,
    DuplicateHostId,
    DuplicateIp,
    DuplicateFloatingIp,
    ReservedId,
    UnknownHost,
    HostVmMismatch,
    DuplicateResident,
    ResidentUnknownVm,
    CapacityExceeded,
    InvalidFlavor,
    UnknownFlavor,
    SelfLoopRule,
    ReferencesUnknownVm,
    UnknownOverrideHost,
    NoTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, code: ViolationCode) -> usize {
        self.violations.iter().filter(|v| v.code == code).count()
    }

    fn push(&mut self, code: ViolationCode, detail: String) {
        self.violations.push(Violation { code, detail });
    }
}

pub fn validate_inventory(inv: &CloudInventory) -> ValidationReport {
    use ViolationCode::*;
    let mut report = ValidationReport::default();

    for flavor in &inv.flavors {
        let positive = |x: f64| x > 0.0;
        if flavor.vcpus == 0 || !positive(flavor.ram_gb) || !positive(flavor.disk_gb) {
            report.push(InvalidFlavor, format!("flavor {} has a non-positive capacity", flavor.name));
        }
    }

    let mut host_ids = BTreeSet::new();
    for host in &inv.hosts {
        if !host_ids.insert(host.id.as_str()) {
            report.push(DuplicateHostId, format!("host {} defined twice", host.id));
        }
        if host.capacity_vms == 0 {
            report.push(CapacityExceeded, format!("host {} has zero capacity", host.id));
        }
    }

    let mut vm_ids = BTreeSet::new();
    let mut ips = BTreeSet::new();
    let mut floating = BTreeSet::new();
    for vm in &inv.vms {
        if !vm_ids.insert(vm.id.as_str()) {
            report.push(DuplicateVmId, format!("vm {} defined twice", vm.id));
        }
        if vm.id == INTERNET {
            report.push(ReservedId, format!("vm id {INTERNET} is reserved"));
        }
        if !ips.insert(vm.internal_ip) {
            report.push(DuplicateIp, format!("internal ip {} reused by {}", vm.internal_ip, vm.id));
        }
        if let Some(fip) = vm.floating_ip {
            if !floating.insert(fip) {
                report.push(DuplicateFloatingIp, format!("floating ip {fip} reused by {}", vm.id));
            }
        }
        if !inv.flavors.is_empty() && inv.flavor(&vm.flavor).is_none() {
            report.push(UnknownFlavor, format!("vm {} uses unknown flavor {}", vm.id, vm.flavor));
        }
        match inv.host(&vm.host_id) {
            None => report.push(UnknownHost, format!("vm {} placed on unknown host {}", vm.id, vm.host_id)),
            Some(host) if !host.resident_vm_ids.contains(&vm.id) => report.push(
                HostVmMismatch,
                format!("vm {} claims host {} which does not list it", vm.id, vm.host_id),
            ),
            Some(_) => {}
        }
    }

    for host in &inv.hosts {
        let mut seen = BTreeSet::new();
        for id in &host.resident_vm_ids {
            if !seen.insert(id.as_str()) {
                report.push(DuplicateResident, format!("host {} lists {} twice", host.id, id));
            }
            match inv.vm(id) {
                None => report.push(ResidentUnknownVm, format!("host {} lists unknown vm {}", host.id, id)),
                Some(vm) if vm.host_id != host.id => report.push(
                    HostVmMismatch,
                    format!("host {} lists {} which lives on {}", host.id, id, vm.host_id),
                ),
                Some(_) => {}
            }
        }
        let capacity = inv.effective_capacity(host);
        if host.resident_vm_ids.len() as u32 > capacity {
            report.push(
                CapacityExceeded,
                format!(
                    "host {} holds {} VMs but admits {}",
                    host.id,
                    host.resident_vm_ids.len(),
                    capacity
                ),
            );
        }
    }

    for (idx, rule) in inv.rules.iter().enumerate() {
        if let (Endpoint::Vm(a), Endpoint::Vm(b)) = (&rule.src, &rule.dst) {
            if a == b {
                report.push(SelfLoopRule, format!("rule {idx} connects {a} to itself"));
            }
        }
        for end in [&rule.src, &rule.dst] {
            if let Endpoint::Vm(id) = end {
                if !vm_ids.contains(id.as_str()) {
                    report.push(ReferencesUnknownVm, format!("rule {idx} names unknown vm {id}"));
                }
            }
        }
    }

    for host_id in inv.constraints.per_host_capacity.keys() {
        if !host_ids.contains(host_id.as_str()) {
            report.push(UnknownOverrideHost, format!("capacity override for unknown host {host_id}"));
        }
    }

    if !inv.vms.iter().any(|vm| vm.is_target) {
        report.push(NoTarget, "no VM is marked as a target".to_string());
    }

    report
}

/// Node of the upper HARM layer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Internet,
    Vm(String),
}

impl Node {
    pub fn vm(id: impl Into<String>) -> Self {
        Node::Vm(id.into())
    }

    pub fn as_vm(&self) -> Option<&str> {
        match self {
            Node::Internet => None,
            Node::Vm(id) => Some(id),
        }
    }
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Internet => f.write_str(INTERNET),
            Node::Vm(id) => f.write_str(id),
        }
    }
}

impl Serialize for Node {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Node {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(if s == INTERNET { Node::Internet } else { Node::Vm(s) })
    }
}

/// Why an upper-layer edge exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeOrigin {
    /// INTERNET to a VM holding a floating IP.
    FloatingIp,
    Firewall,
    CoResident,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub from: Node,
    pub to: Node,
    pub origin: EdgeOrigin,
}

/// Directed reachability relation over `{INTERNET} ∪ VM ids`.
///
/// Each ordered pair appears at most once; when several mechanisms produce
/// the same pair the first origin in `EdgeOrigin` order is kept.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Reachability {
    edges: BTreeMap<(Node, Node), EdgeOrigin>,
}

impl Reachability {
    pub fn insert(&mut self, from: Node, to: Node, origin: EdgeOrigin) {
        if from == to {
            return;
        }
        self.edges
            .entry((from, to))
            .and_modify(|o| *o = (*o).min(origin))
            .or_insert(origin);
    }

    pub fn remove(&mut self, from: &Node, to: &Node) -> bool {
        self.edges.remove(&(from.clone(), to.clone())).is_some()
    }

    pub fn contains(&self, from: &Node, to: &Node) -> bool {
        self.edges.contains_key(&(from.clone(), to.clone()))
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&Node, &Node)> {
        self.edges.keys().map(|(a, b)| (a, b))
    }

    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.edges.iter().map(|((from, to), origin)| Edge {
            from: from.clone(),
            to: to.clone(),
            origin: *origin,
        })
    }

    /// Successors in sorted order.
    pub fn successors<'a>(&'a self, node: &'a Node) -> impl Iterator<Item = &'a Node> + 'a {
        self.edges
            .range((node.clone(), Node::Internet)..)
            .take_while(move |((from, _), _)| from == node)
            .map(|((_, to), _)| to)
    }

    /// Sorted VM successors of the VM `vm`.
    pub fn successors_of_vm<'a>(&'a self, vm: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.edges
            .range((Node::vm(vm), Node::Internet)..)
            .take_while(move |((from, _), _)| from.as_vm() == Some(vm))
            .filter_map(|((_, to), _)| to.as_vm())
    }

    /// VM → reachable VMs, with INTERNET dropped.
    pub fn vm_links(&self) -> BTreeMap<String, BTreeSet<String>> {
        let mut links: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (from, to) in self.pairs() {
            if let (Node::Vm(a), Node::Vm(b)) = (from, to) {
                links.entry(a.clone()).or_default().insert(b.clone());
            }
        }
        links
    }
}

impl FromIterator<Edge> for Reachability {
    fn from_iter<I: IntoIterator<Item = Edge>>(iter: I) -> Self {
        let mut r = Reachability::default();
        for e in iter {
            r.insert(e.from, e.to, e.origin);
        }
        r
    }
}

pub fn derive_reachability(inv: &CloudInventory) -> Result<Reachability, InventoryError> {
    let vm_ids: BTreeSet<&str> = inv.vms.iter().map(|vm| vm.id.as_str()).collect();
    for (idx, rule) in inv.rules.iter().enumerate() {
        for end in [&rule.src, &rule.dst] {
            if let Endpoint::Vm(id) = end {
                if !vm_ids.contains(id.as_str()) {
                    return Err(InventoryError::ReferencesUnknownVm {
                        rule: idx,
                        vm: id.clone(),
                    });
                }
            }
        }
    }

    let mut reach = Reachability::default();
    for vm in inv.vms.iter().filter(|vm| vm.floating_ip.is_some()) {
        reach.insert(Node::Internet, Node::vm(&vm.id), EdgeOrigin::FloatingIp);
    }

    for rule in &inv.rules {
        let sources: Vec<Node> = match &rule.src {
            Endpoint::Internet => vec![Node::Internet],
            src => inv
                .vms
                .iter()
                .filter(|vm| src.matches(vm))
                .map(|vm| Node::vm(&vm.id))
                .collect(),
        };
        let sinks: Vec<&Vm> = inv.vms.iter().filter(|vm| rule.dst.matches(vm)).collect();
        for from in &sources {
            for sink in &sinks {
                reach.insert(from.clone(), Node::vm(&sink.id), EdgeOrigin::Firewall);
            }
        }
    }

    if inv.constraints.colocation_edges_enabled {
        for host in &inv.hosts {
            for a in &host.resident_vm_ids {
                for b in &host.resident_vm_ids {
                    if a != b && vm_ids.contains(a.as_str()) && vm_ids.contains(b.as_str()) {
                        reach.insert(Node::vm(a), Node::vm(b), EdgeOrigin::CoResident);
                    }
                }
            }
        }
    }

    Ok(reach)
}
