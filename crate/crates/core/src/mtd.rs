//! Model-level Shuffle, Diversity and Redundancy.
//!
//! Actions are evaluated on a [`ModelState`] (inventory + vulnerability map +
//! gate specs) and never mutate it; `apply_action` returns the next snapshot.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harm::{build_harm, GateSpecs, Harm, HarmError};
use crate::inventory::{CloudInventory, Endpoint, FirewallRule, Vm};
use crate::metrics::{evaluate_pool, Metric, MetricPool, MetricReport, MetricsError};
use crate::vuln::{CvssCatalog, OsProfileCatalog, VulnMap};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MtdAction {
    Shuffle { vm_id: String, target_host_id: String },
    Diversity { vm_id: String, new_os_variant: String },
    Redundancy { vm_id: String, replica_count: u32 },
}

impl MtdAction {
    pub fn vm_id(&self) -> &str {
        match self {
            MtdAction::Shuffle { vm_id, .. }
            | MtdAction::Diversity { vm_id, .. }
            | MtdAction::Redundancy { vm_id, .. } => vm_id,
        }
    }

    pub fn technique(&self) -> &'static str {
        match self {
            MtdAction::Shuffle { .. } => "shuffle",
            MtdAction::Diversity { .. } => "diversity",
            MtdAction::Redundancy { .. } => "redundancy",
        }
    }

    /// Compact JSON form; also the ranking tie-breaker.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("action serializes")
    }
}

impl fmt::Display for MtdAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MtdAction::Shuffle { vm_id, target_host_id } => write!(f, "shuffle {vm_id} -> {target_host_id}"),
            MtdAction::Diversity { vm_id, new_os_variant } => write!(f, "diversity {vm_id} -> {new_os_variant}"),
            MtdAction::Redundancy { vm_id, replica_count } => write!(f, "redundancy {vm_id} x{replica_count}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Constraint {
    UnknownVm,
    UnknownHost,
    SameHost,
    HostCapacity,
    ZoneNotAllowed,
    OsNotAllowed,
    NoOsProfile,
    ReplicaCount,
    SubnetExhausted,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = serde_json::to_value(self).ok();
        f.write_str(text.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MtdError {
    #[error("constraint {constraint} violated: {detail}")]
    ConstraintViolation { constraint: Constraint, detail: String },
    #[error(transparent)]
    Harm(#[from] HarmError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl MtdError {
    pub fn code(&self) -> &'static str {
        match self {
            MtdError::ConstraintViolation { .. } => "CONSTRAINT_VIOLATION",
            MtdError::Harm(e) => e.code(),
            MtdError::Metrics(e) => e.code(),
        }
    }

    fn violation(constraint: Constraint, detail: impl Into<String>) -> Self {
        MtdError::ConstraintViolation {
            constraint,
            detail: detail.into(),
        }
    }
}

/// Everything needed to rebuild a HARM for one inventory version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub inventory: CloudInventory,
    pub vulns: VulnMap,
    #[serde(default)]
    pub gate_specs: GateSpecs,
}

impl ModelState {
    pub fn new(inventory: CloudInventory, vulns: VulnMap) -> Self {
        Self {
            inventory,
            vulns,
            gate_specs: GateSpecs::new(),
        }
    }

    pub fn version(&self) -> u64 {
        self.inventory.version
    }

    /// HARM with the inventory's `is_target` VMs as targets.
    pub fn harm(&self, catalog: &CvssCatalog) -> Result<Harm, HarmError> {
        build_harm(
            &self.inventory,
            &self.vulns,
            catalog,
            &self.gate_specs,
            &self.inventory.targets(),
        )
    }
}

fn allowed(set: &BTreeSet<String>, value: &str) -> bool {
    // An empty allow-list leaves the dimension unconstrained.
    set.is_empty() || set.contains(value)
}

fn find_vm<'a>(inv: &'a CloudInventory, id: &str) -> Result<&'a Vm, MtdError> {
    inv.vm(id)
        .ok_or_else(|| MtdError::violation(Constraint::UnknownVm, format!("no VM {id}")))
}

/// Check `action` against the inventory's constraints without applying it.
pub fn check_action(
    inv: &CloudInventory,
    profiles: &OsProfileCatalog,
    action: &MtdAction,
) -> Result<(), MtdError> {
    let vm = find_vm(inv, action.vm_id())?;
    match action {
        MtdAction::Shuffle { target_host_id, .. } => {
            let host = inv.host(target_host_id).ok_or_else(|| {
                MtdError::violation(Constraint::UnknownHost, format!("no host {target_host_id}"))
            })?;
            if vm.host_id == host.id {
                return Err(MtdError::violation(
                    Constraint::SameHost,
                    format!("{} already runs on {}", vm.id, host.id),
                ));
            }
            if !allowed(&inv.constraints.allowed_zones, &host.zone) {
                return Err(MtdError::violation(
                    Constraint::ZoneNotAllowed,
                    format!("zone {} of host {} is not allowed", host.zone, host.id),
                ));
            }
            if inv.free_capacity(&host.id) == Some(0) {
                return Err(MtdError::violation(
                    Constraint::HostCapacity,
                    format!("host {} is full", host.id),
                ));
            }
        }
        MtdAction::Diversity { new_os_variant, .. } => {
            if !allowed(&inv.constraints.allowed_os_variants, new_os_variant) {
                return Err(MtdError::violation(
                    Constraint::OsNotAllowed,
                    format!("OS {new_os_variant} is not allowed"),
                ));
            }
            if profiles.get(new_os_variant).is_none() {
                return Err(MtdError::violation(
                    Constraint::NoOsProfile,
                    format!("no vulnerability profile for {new_os_variant}"),
                ));
            }
        }
        MtdAction::Redundancy { replica_count, .. } => {
            if *replica_count == 0 {
                return Err(MtdError::violation(Constraint::ReplicaCount, "replica_count must be at least 1"));
            }
            let free = inv.free_capacity(&vm.host_id).unwrap_or(0);
            if free < *replica_count {
                return Err(MtdError::violation(
                    Constraint::HostCapacity,
                    format!("host {} has room for {free} more VMs, {replica_count} requested", vm.host_id),
                ));
            }
        }
    }
    Ok(())
}

/// The state change an action causes, with no constraint checks beyond
/// what is needed to carry it out. The version is left untouched.
pub fn project_action(
    state: &ModelState,
    action: &MtdAction,
    profiles: &OsProfileCatalog,
) -> Result<ModelState, MtdError> {
    let mut next = state.clone();
    let inv = &mut next.inventory;
    let vm = find_vm(inv, action.vm_id())?.clone();
    match action {
        MtdAction::Shuffle { target_host_id, .. } => {
            if inv.host(target_host_id).is_none() {
                return Err(MtdError::violation(Constraint::UnknownHost, format!("no host {target_host_id}")));
            }
            if vm.host_id != *target_host_id {
                if let Some(old) = inv.host_mut(&vm.host_id) {
                    old.resident_vm_ids.retain(|id| *id != vm.id);
                }
                if let Some(new) = inv.host_mut(target_host_id) {
                    new.resident_vm_ids.push(vm.id.clone());
                }
                if let Some(v) = inv.vm_mut(&vm.id) {
                    v.host_id = target_host_id.clone();
                }
            }
        }
        MtdAction::Diversity { new_os_variant, .. } => {
            let profile = profiles.get(new_os_variant).ok_or_else(|| {
                MtdError::violation(Constraint::NoOsProfile, format!("no vulnerability profile for {new_os_variant}"))
            })?;
            if let Some(v) = inv.vm_mut(&vm.id) {
                v.os_variant = new_os_variant.clone();
            }
            next.vulns.insert(vm.id.clone(), profile.cve_ids.clone());
            // A hand-written gate spec names CVEs of the old OS.
            next.gate_specs.remove(&vm.id);
        }
        MtdAction::Redundancy { replica_count, .. } => {
            let ids = inv.next_replica_ids(&vm.id, *replica_count);
            let mut reserved = BTreeSet::new();
            let mut replicas = Vec::with_capacity(ids.len());
            for id in ids {
                let ip = inv
                    .allocate_ip(vm.network(), &reserved)
                    .map_err(|e| MtdError::violation(Constraint::SubnetExhausted, e.to_string()))?;
                reserved.insert(ip);
                replicas.push(Vm {
                    id,
                    internal_ip: ip,
                    floating_ip: None,
                    ..vm.clone()
                });
            }
            let copied = replica_rules(&inv.rules, &vm, &replicas);
            inv.rules.extend(copied);
            if let Some(host) = inv.host_mut(&vm.host_id) {
                host.resident_vm_ids.extend(replicas.iter().map(|r| r.id.clone()));
            }
            let cves = next.vulns.get(&vm.id).cloned();
            let spec = next.gate_specs.get(&vm.id).cloned();
            for r in &replicas {
                if let Some(cves) = &cves {
                    next.vulns.insert(r.id.clone(), cves.clone());
                }
                if let Some(spec) = &spec {
                    next.gate_specs.insert(r.id.clone(), spec.clone());
                }
            }
            inv.vms.extend(replicas);
        }
    }
    Ok(next)
}

/// Rules giving every replica the template's inbound and outbound firewall
/// edges. A subnet rule only needs a copy when the replica's fresh address
/// falls outside the subnet.
fn replica_rules(rules: &[FirewallRule], template: &Vm, replicas: &[Vm]) -> Vec<FirewallRule> {
    let mut out = Vec::new();
    for replica in replicas {
        for rule in rules {
            if rule.src.matches(template) && !rule.src.matches(replica) {
                out.push(FirewallRule::allow(Endpoint::vm(&replica.id), rule.dst.clone()));
            }
            if rule.dst.matches(template) && !rule.dst.matches(replica) {
                out.push(FirewallRule::allow(rule.src.clone(), Endpoint::vm(&replica.id)));
            }
        }
    }
    out
}

/// Check, transform, and bump the version. The input is left untouched.
pub fn apply_action(
    state: &ModelState,
    action: &MtdAction,
    profiles: &OsProfileCatalog,
) -> Result<ModelState, MtdError> {
    check_action(&state.inventory, profiles, action)?;
    let mut next = project_action(state, action, profiles)?;
    next.inventory.version = state.inventory.version + 1;
    Ok(next)
}

/// Every constraint-satisfying action, ordered by VM id then technique.
pub fn candidate_actions(inv: &CloudInventory, profiles: &OsProfileCatalog) -> Vec<MtdAction> {
    let mut vms: Vec<&Vm> = inv.vms.iter().collect();
    vms.sort_by(|a, b| a.id.cmp(&b.id));
    let mut hosts: Vec<_> = inv.hosts.iter().collect();
    hosts.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = Vec::new();
    for vm in vms {
        for host in &hosts {
            if host.id != vm.host_id
                && allowed(&inv.constraints.allowed_zones, &host.zone)
                && inv.free_capacity(&host.id).unwrap_or(0) > 0
            {
                out.push(MtdAction::Shuffle {
                    vm_id: vm.id.clone(),
                    target_host_id: host.id.clone(),
                });
            }
        }
        for os in profiles.variants() {
            if os != vm.os_variant && allowed(&inv.constraints.allowed_os_variants, os) {
                out.push(MtdAction::Diversity {
                    vm_id: vm.id.clone(),
                    new_os_variant: os.to_string(),
                });
            }
        }
        let free = inv.free_capacity(&vm.host_id).unwrap_or(0);
        for r in 1..=2u32.min(free) {
            out.push(MtdAction::Redundancy {
                vm_id: vm.id.clone(),
                replica_count: r,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub before: MetricReport,
    pub after: MetricReport,
    /// after − before per selected metric; equal values give exactly 0.
    #[serde(with = "crate::num::map")]
    pub change: BTreeMap<Metric, f64>,
}

impl MetricDelta {
    pub fn new(before: MetricReport, after: MetricReport) -> Self {
        let change = before
            .values
            .iter()
            .filter_map(|(m, b)| {
                let a = after.values.get(m)?;
                Some((*m, if a == b { 0.0 } else { a - b }))
            })
            .collect();
        Self { before, after, change }
    }

    /// Defender gain on `metric`; positive is better.
    pub fn improvement(&self, metric: Metric) -> f64 {
        match (self.before.get(metric), self.after.get(metric)) {
            (Some(b), Some(a)) => metric.improvement(b, a),
            _ => 0.0,
        }
    }
}

/// Metric change an action would cause. `harm` must be the HARM of `state`.
pub fn whatif(
    harm: &Harm,
    state: &ModelState,
    catalog: &CvssCatalog,
    profiles: &OsProfileCatalog,
    action: &MtdAction,
    pool: &MetricPool,
) -> Result<MetricDelta, MtdError> {
    let before = evaluate_pool(harm, pool)?;
    let next = apply_action(state, action, profiles)?;
    let after = evaluate_pool(&next.harm(catalog)?, pool)?;
    Ok(MetricDelta::new(before, after))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAction {
    pub action: MtdAction,
    #[serde(with = "crate::num")]
    pub improvement: f64,
    pub delta: MetricDelta,
}

/// Sort candidates by improvement of `objective`, best first. Ties go to the
/// lexicographically smaller action JSON.
pub fn rank_actions(
    candidates: &[MtdAction],
    harm: &Harm,
    state: &ModelState,
    catalog: &CvssCatalog,
    profiles: &OsProfileCatalog,
    pool: &MetricPool,
    objective: Metric,
) -> Result<Vec<RankedAction>, MtdError> {
    let mut pool = pool.clone();
    pool.selected.insert(objective);
    let mut ranked = candidates
        .iter()
        .map(|a| {
            let delta = whatif(harm, state, catalog, profiles, a, &pool)?;
            Ok(RankedAction {
                action: a.clone(),
                improvement: delta.improvement(objective),
                delta,
            })
        })
        .collect::<Result<Vec<_>, MtdError>>()?;
    ranked.sort_by(|a, b| {
        b.improvement
            .total_cmp(&a.improvement)
            .then_with(|| a.action.to_json().cmp(&b.action.to_json()))
    });
    Ok(ranked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inventory::{derive_reachability, validate_inventory, Host, SystemConstraints};
    use crate::vuln::{CvssRecord, OsVulnProfile};

    fn vm(id: &str, host: &str, ip: &str) -> Vm {
        Vm {
            id: id.into(),
            enterprise: "EP1".into(),
            os_variant: "Ubuntu14.04".into(),
            flavor: "m1.generic".into(),
            host_id: host.into(),
            internal_ip: ip.parse().unwrap(),
            floating_ip: None,
            is_target: false,
        }
    }

    /// INTERNET → vm1 → vm2 → vm3 with vm1, vm2 on c0 and vm3 on c1.
    fn chain() -> (ModelState, CvssCatalog, OsProfileCatalog) {
        let mut vm1 = vm("vm1", "c0", "10.10.0.11");
        vm1.floating_ip = Some("203.0.113.11".parse().unwrap());
        let vm2 = vm("vm2", "c0", "10.10.0.12");
        let mut vm3 = vm("vm3", "c1", "10.10.0.13");
        vm3.is_target = true;
        let inv = CloudInventory {
            version: 1,
            flavors: vec![],
            hosts: vec![
                Host {
                    id: "c0".into(),
                    zone: "Nova".into(),
                    capacity_vms: 4,
                    resident_vm_ids: vec!["vm1".into(), "vm2".into()],
                },
                Host {
                    id: "c1".into(),
                    zone: "Nova".into(),
                    capacity_vms: 2,
                    resident_vm_ids: vec!["vm3".into()],
                },
            ],
            vms: vec![vm1, vm2, vm3],
            rules: vec![
                FirewallRule::allow(Endpoint::vm("vm1"), Endpoint::vm("vm2")),
                FirewallRule::allow(Endpoint::vm("vm2"), Endpoint::vm("vm3")),
            ],
            constraints: SystemConstraints::default(),
        };
        let catalog = CvssCatalog::new([
            CvssRecord::new("CVE-2000-1001", 8.0, Some(5.0)),
            CvssRecord::new("CVE-2000-1002", 5.0, Some(10.0)),
            CvssRecord::new("CVE-2000-1003", 10.0, Some(0.0)),
        ])
        .unwrap();
        let vulns = VulnMap::from([
            ("vm1".into(), vec!["CVE-2000-1001".into()]),
            ("vm2".into(), vec!["CVE-2000-1002".into()]),
            ("vm3".into(), vec!["CVE-2000-1003".into()]),
        ]);
        let profiles = OsProfileCatalog::new(
            [
                OsVulnProfile {
                    os_variant: "CentOS7".into(),
                    cve_ids: vec!["CVE-2000-1002".into(), "CVE-2000-1003".into()],
                    license_cost: 0.0,
                },
                OsVulnProfile {
                    os_variant: "Hardened".into(),
                    cve_ids: vec![],
                    license_cost: 10.0,
                },
            ],
            Some(&catalog),
        )
        .unwrap();
        (ModelState::new(inv, vulns), catalog, profiles)
    }

    #[test]
    fn action_json_is_tagged_by_kind() {
        let a = MtdAction::Shuffle {
            vm_id: "vm1".into(),
            target_host_id: "c1".into(),
        };
        assert_eq!(a.to_json(), r#"{"kind":"shuffle","vm_id":"vm1","target_host_id":"c1"}"#);
        let back: MtdAction = serde_json::from_str(r#"{"kind":"redundancy","vm_id":"x","replica_count":2}"#).unwrap();
        assert_eq!(back, MtdAction::Redundancy { vm_id: "x".into(), replica_count: 2 });
        assert!(serde_json::from_str::<MtdAction>(r#"{"kind":"teleport","vm_id":"x"}"#).is_err());
    }

    #[test]
    fn shuffle_moves_host_only() {
        let (state, _, profiles) = chain();
        let a = MtdAction::Shuffle { vm_id: "vm2".into(), target_host_id: "c1".into() };
        let next = apply_action(&state, &a, &profiles).unwrap();
        assert_eq!(next.version(), 2);
        assert_eq!(state.version(), 1);
        assert_eq!(next.inventory.vm("vm2").unwrap().host_id, "c1");
        assert!(next.inventory.host("c1").unwrap().resident_vm_ids.contains(&"vm2".to_string()));
        assert!(!next.inventory.host("c0").unwrap().resident_vm_ids.contains(&"vm2".to_string()));
        assert_eq!(derive_reachability(&next.inventory), derive_reachability(&state.inventory));
        assert_eq!(next.vulns, state.vulns);
        assert!(validate_inventory(&next.inventory).is_valid());
    }

    #[test]
    fn shuffle_rejections() {
        let (state, _, profiles) = chain();
        let same = MtdAction::Shuffle { vm_id: "vm1".into(), target_host_id: "c0".into() };
        let err = apply_action(&state, &same, &profiles).unwrap_err();
        assert_eq!(err.code(), "CONSTRAINT_VIOLATION");
        assert!(matches!(err, MtdError::ConstraintViolation { constraint: Constraint::SameHost, .. }));

        let mut full = state.clone();
        full.inventory.constraints.per_host_capacity.insert("c1".into(), 1);
        let a = MtdAction::Shuffle { vm_id: "vm1".into(), target_host_id: "c1".into() };
        assert!(matches!(
            apply_action(&full, &a, &profiles),
            Err(MtdError::ConstraintViolation { constraint: Constraint::HostCapacity, .. })
        ));

        let mut zoned = state.clone();
        zoned.inventory.constraints.allowed_zones = ["Other".to_string()].into();
        assert!(matches!(
            apply_action(&zoned, &a, &profiles),
            Err(MtdError::ConstraintViolation { constraint: Constraint::ZoneNotAllowed, .. })
        ));
    }

    #[test]
    fn diversity_replaces_cves_and_keeps_placement() {
        let (state, _, profiles) = chain();
        let a = MtdAction::Diversity { vm_id: "vm2".into(), new_os_variant: "CentOS7".into() };
        let next = apply_action(&state, &a, &profiles).unwrap();
        let before = state.inventory.vm("vm2").unwrap();
        let after = next.inventory.vm("vm2").unwrap();
        assert_eq!(after.os_variant, "CentOS7");
        assert_eq!(after.host_id, before.host_id);
        assert_eq!(after.internal_ip, before.internal_ip);
        assert_eq!(next.vulns["vm2"], vec!["CVE-2000-1002", "CVE-2000-1003"]);
    }

    #[test]
    fn diversity_requires_allowed_os_with_profile() {
        let (mut state, _, profiles) = chain();
        let a = MtdAction::Diversity { vm_id: "vm2".into(), new_os_variant: "Win10".into() };
        assert!(matches!(
            apply_action(&state, &a, &profiles),
            Err(MtdError::ConstraintViolation { constraint: Constraint::NoOsProfile, .. })
        ));
        state.inventory.constraints.allowed_os_variants = ["Ubuntu14.04".to_string()].into();
        let b = MtdAction::Diversity { vm_id: "vm2".into(), new_os_variant: "CentOS7".into() };
        assert!(matches!(
            apply_action(&state, &b, &profiles),
            Err(MtdError::ConstraintViolation { constraint: Constraint::OsNotAllowed, .. })
        ));
    }

    #[test]
    fn redundancy_copies_links_and_allocates_fresh_ips() {
        let (state, _, profiles) = chain();
        let a = MtdAction::Redundancy { vm_id: "vm2".into(), replica_count: 2 };
        let next = apply_action(&state, &a, &profiles).unwrap();
        assert_eq!(next.inventory.vms.len(), 5);
        let r1 = next.inventory.vm("vm2-r1").unwrap();
        let r2 = next.inventory.vm("vm2-r2").unwrap();
        assert_eq!(r1.internal_ip.to_string(), "10.10.0.1");
        assert_eq!(r2.internal_ip.to_string(), "10.10.0.2");
        assert_eq!(r1.host_id, "c0");
        assert_eq!(r1.os_variant, "Ubuntu14.04");
        assert_eq!(next.vulns["vm2-r1"], state.vulns["vm2"]);
        assert!(validate_inventory(&next.inventory).is_valid());

        let reach = derive_reachability(&next.inventory).unwrap();
        let links = reach.vm_links();
        assert_eq!(links["vm1"], ["vm2", "vm2-r1", "vm2-r2"].map(String::from).into());
        assert_eq!(links["vm2-r1"], links["vm2"]);
    }

    #[test]
    fn redundancy_respects_capacity() {
        let (state, _, profiles) = chain();
        let a = MtdAction::Redundancy { vm_id: "vm3".into(), replica_count: 2 };
        assert!(matches!(
            apply_action(&state, &a, &profiles),
            Err(MtdError::ConstraintViolation { constraint: Constraint::HostCapacity, .. })
        ));
        let z = MtdAction::Redundancy { vm_id: "vm3".into(), replica_count: 0 };
        assert!(matches!(
            apply_action(&state, &z, &profiles),
            Err(MtdError::ConstraintViolation { constraint: Constraint::ReplicaCount, .. })
        ));
    }

    #[test]
    fn candidates_follow_constraints() {
        let (state, _, profiles) = chain();
        let cands = candidate_actions(&state.inventory, &profiles);
        // vm1, vm2: shuffle to c1, 2 OS, r=1,2. vm3: shuffle to c0, 2 OS, r=1.
        assert_eq!(cands.len(), 5 + 5 + 4);
        let unique: BTreeSet<_> = cands.iter().collect();
        assert_eq!(unique.len(), cands.len());
        for c in &cands {
            check_action(&state.inventory, &profiles, c).unwrap();
        }
    }

    #[test]
    fn whatif_leaves_state_untouched() {
        let (state, catalog, profiles) = chain();
        let harm = state.harm(&catalog).unwrap();
        let copy = state.clone();
        let a = MtdAction::Redundancy { vm_id: "vm2".into(), replica_count: 1 };
        let d = whatif(&harm, &state, &catalog, &profiles, &a, &MetricPool::all()).unwrap();
        assert_eq!(state, copy);
        assert_eq!(d.before.path_count, 1);
        assert_eq!(d.after.path_count, 2);
        assert_eq!(d.before, evaluate_pool(&harm, &MetricPool::all()).unwrap());
    }

    #[test]
    fn hardened_entry_zeroes_risk_and_ranks_first() {
        let (state, catalog, profiles) = chain();
        let harm = state.harm(&catalog).unwrap();
        let cands = vec![
            MtdAction::Diversity { vm_id: "vm1".into(), new_os_variant: "CentOS7".into() },
            MtdAction::Diversity { vm_id: "vm1".into(), new_os_variant: "Hardened".into() },
        ];
        let ranked =
            rank_actions(&cands, &harm, &state, &catalog, &profiles, &MetricPool::all(), Metric::SystemRisk).unwrap();
        assert_eq!(ranked[0].action, cands[1]);
        assert_eq!(ranked[0].delta.after.get(Metric::SystemRisk), Some(0.0));
        assert_eq!(ranked[0].delta.after.get(Metric::ProbAttackSuccess), Some(0.0));
    }

    #[test]
    fn shuffle_ties_sort_lexicographically() {
        let (state, catalog, profiles) = chain();
        let harm = state.harm(&catalog).unwrap();
        let cands = vec![
            MtdAction::Shuffle { vm_id: "vm3".into(), target_host_id: "c0".into() },
            MtdAction::Shuffle { vm_id: "vm1".into(), target_host_id: "c1".into() },
        ];
        let ranked =
            rank_actions(&cands, &harm, &state, &catalog, &profiles, &MetricPool::all(), Metric::Mtta).unwrap();
        assert!(ranked.iter().all(|r| r.delta.change.values().all(|v| *v == 0.0)));
        assert_eq!(ranked[0].action, cands[1]);
    }
}
