//! Random instance generators and brute-force oracles shared by the
//! integration tests. Nothing here calls into the enumeration or metric code
//! under test.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use harmcloud_core::harm::{AttackTree, GateKind, Harm, NodeMetrics};
use harmcloud_core::inventory::{
    CloudInventory, EdgeOrigin, Endpoint, FirewallRule, Flavor, Host, Node, Reachability, SystemConstraints, Vm,
};
use harmcloud_core::mtd::ModelState;
use harmcloud_core::vuln::{CvssCatalog, CvssRecord, OsProfileCatalog, OsVulnProfile, VulnMap};
use rand::seq::SliceRandom;
use rand::Rng;

pub fn vm_name(i: usize) -> String {
    format!("v{i:02}")
}

/// Random upper-layer graph over `n` VMs with per-pair edge probability
/// `density`. Node metrics are drawn directly, a fifth of them zero.
pub fn random_graph_harm(rng: &mut impl Rng, n: usize, density: f64) -> Harm {
    let vms: Vec<String> = (0..n).map(vm_name).collect();
    let mut upper = Reachability::default();
    let mut entry_points = BTreeSet::new();
    for (i, a) in vms.iter().enumerate() {
        if rng.gen_bool(density) {
            upper.insert(Node::Internet, Node::vm(a), EdgeOrigin::FloatingIp);
            entry_points.insert(a.clone());
        }
        for (j, b) in vms.iter().enumerate() {
            if i != j && rng.gen_bool(density) {
                upper.insert(Node::vm(a), Node::vm(b), EdgeOrigin::Firewall);
            }
        }
    }
    let mut targets: BTreeSet<String> = vms.iter().filter(|_| rng.gen_bool(0.25)).cloned().collect();
    if targets.is_empty() {
        targets.insert(vms.choose(rng).unwrap().clone());
    }
    let node_metrics: BTreeMap<String, NodeMetrics> = vms
        .iter()
        .map(|v| {
            let m = if rng.gen_bool(0.2) {
                NodeMetrics::UNEXPLOITABLE
            } else {
                let p = rng.gen_range(1..=10) as f64 / 10.0;
                NodeMetrics {
                    probability: p,
                    impact: rng.gen_range(0..=100) as f64 / 10.0,
                    cost: 10.0 - 10.0 * p,
                    mttc: 1.0 / p,
                }
            };
            (v.clone(), m)
        })
        .collect();
    Harm {
        vms: vms.iter().cloned().collect(),
        upper,
        lower: vms.iter().map(|v| (v.clone(), AttackTree::Empty)).collect(),
        entry_points,
        targets,
        node_metrics,
        placement: vms.iter().map(|v| (v.clone(), "h0".to_string())).collect(),
    }
}

/// Every qualifying simple path of `h`, found by growing all prefixes
/// breadth-first. Returned as a set of VM-id sequences.
pub fn oracle_paths(h: &Harm) -> BTreeSet<Vec<String>> {
    let viable = |v: &str| h.node_metrics.get(v).is_some_and(|m| m.probability > 0.0);
    let edges: BTreeSet<(String, String)> = h
        .upper
        .pairs()
        .filter_map(|(a, b)| Some((a.as_vm()?.to_string(), b.as_vm()?.to_string())))
        .collect();
    let mut frontier: Vec<Vec<String>> = h
        .entry_points
        .iter()
        .filter(|e| viable(e))
        .map(|e| vec![e.clone()])
        .collect();
    let mut out = BTreeSet::new();
    while let Some(prefix) = frontier.pop() {
        let last = prefix.last().unwrap();
        if h.targets.contains(last) {
            out.insert(prefix.clone());
        }
        for (a, b) in &edges {
            if a == last && viable(b) && !prefix.contains(b) {
                let mut next = prefix.clone();
                next.push(b.clone());
                frontier.push(next);
            }
        }
    }
    out
}

pub struct Instance {
    pub state: ModelState,
    pub catalog: CvssCatalog,
}

pub fn cve(i: usize) -> String {
    format!("CVE-2099-{:04}", 1000 + i)
}

/// Random inventory plus scan data: up to `max_vms` VMs on one roomy host,
/// VM-to-VM allow rules at `density`, up to `max_cves` CVEs per VM drawn
/// from a pool whose base scores include zero.
pub fn random_instance(rng: &mut impl Rng, max_vms: usize, max_cves: usize, density: f64) -> Instance {
    random_instance_with(rng, max_vms, max_cves, density, false)
}

/// As [`random_instance`]; with `acyclic` every rule points from a lower to a
/// higher VM index.
pub fn random_instance_with(
    rng: &mut impl Rng,
    max_vms: usize,
    max_cves: usize,
    density: f64,
    acyclic: bool,
) -> Instance {
    let n = rng.gen_range(2..=max_vms);
    let pool = 12;
    let records: Vec<CvssRecord> = (0..pool)
        .map(|i| {
            let base = if i == 0 { 0.0 } else { rng.gen_range(0..=100) as f64 / 10.0 };
            let impact = if rng.gen_bool(0.2) { None } else { Some(rng.gen_range(0..=100) as f64 / 10.0) };
            CvssRecord::new(cve(i), base, impact)
        })
        .collect();
    let catalog = CvssCatalog::new(records).unwrap();

    let ids: Vec<String> = (0..n).map(vm_name).collect();
    let vms: Vec<Vm> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| Vm {
            id: id.clone(),
            enterprise: "EP".into(),
            os_variant: "OsA".into(),
            flavor: "m1.small".into(),
            host_id: "h0".into(),
            internal_ip: Ipv4Addr::new(10, 0, 0, 10 + i as u8),
            floating_ip: (i == 0 || rng.gen_bool(0.3)).then(|| Ipv4Addr::new(198, 51, 100, 10 + i as u8)),
            is_target: false,
        })
        .collect();
    let mut inventory = CloudInventory {
        version: 0,
        flavors: vec![Flavor {
            name: "m1.small".into(),
            vcpus: 1,
            ram_gb: 1.0,
            disk_gb: 10.0,
        }],
        hosts: vec![Host {
            id: "h0".into(),
            zone: "Z".into(),
            capacity_vms: 64,
            resident_vm_ids: ids.clone(),
        }],
        vms,
        rules: Vec::new(),
        constraints: SystemConstraints::default(),
    };
    for (i, a) in ids.iter().enumerate() {
        for (j, b) in ids.iter().enumerate() {
            if i != j && (!acyclic || i < j) && rng.gen_bool(density) {
                inventory.rules.push(FirewallRule::allow(Endpoint::vm(a), Endpoint::vm(b)));
            }
        }
    }
    let target = rng.gen_range(0..n);
    inventory.vms[target].is_target = true;
    if rng.gen_bool(0.3) {
        let other = rng.gen_range(0..n);
        inventory.vms[other].is_target = true;
    }

    let mut vulns = VulnMap::new();
    for id in &ids {
        let k = rng.gen_range(0..=max_cves);
        let mut chosen: Vec<usize> = (0..pool).collect();
        chosen.shuffle(rng);
        vulns.insert(id.clone(), chosen[..k].iter().map(|&i| cve(i)).collect());
    }
    Instance {
        state: ModelState::new(inventory, vulns),
        catalog,
    }
}

/// Metric values computed straight from the catalog and the rule list.
#[derive(Debug, Clone, Copy)]
pub struct OracleMetrics {
    pub system_risk: f64,
    pub attack_cost: f64,
    pub prob_attack_success: f64,
    pub mtta: f64,
    pub paths: usize,
}

pub fn oracle_metrics(inst: &Instance) -> OracleMetrics {
    let inv = &inst.state.inventory;
    // Per VM, over its CVEs under a single OR gate.
    let node = |vm: &str| -> (f64, f64, f64, f64) {
        let cves = inst.state.vulns.get(vm).cloned().unwrap_or_default();
        let mut p: f64 = 0.0;
        let mut imp: f64 = 0.0;
        let mut cost = f64::INFINITY;
        let mut mttc = f64::INFINITY;
        for c in &cves {
            let r = inst.catalog.lookup(c).unwrap();
            let pr = r.base_score / 10.0;
            p = p.max(pr);
            imp = imp.max(r.impact_subscore.unwrap_or(r.base_score));
            cost = cost.min(10.0 - r.base_score);
            mttc = mttc.min(if pr > 0.0 { 1.0 / pr } else { f64::INFINITY });
        }
        if cves.is_empty() {
            (0.0, 0.0, f64::INFINITY, f64::INFINITY)
        } else {
            (p, imp, cost, mttc)
        }
    };
    let edge = |a: &str, b: &str| {
        inv.rules.iter().any(|r| matches!((&r.src, &r.dst), (Endpoint::Vm(s), Endpoint::Vm(d)) if s == a && d == b))
    };
    let ids: Vec<&str> = inv.vms.iter().map(|v| v.id.as_str()).collect();
    let mut all = Vec::new();
    fn grow<'a>(
        path: &mut Vec<&'a str>,
        ids: &[&'a str],
        edge: &dyn Fn(&str, &str) -> bool,
        ok: &dyn Fn(&str) -> bool,
        out: &mut Vec<Vec<&'a str>>,
    ) {
        out.push(path.clone());
        for &n in ids {
            if !path.contains(&n) && ok(n) && edge(path.last().unwrap(), n) {
                path.push(n);
                grow(path, ids, edge, ok, out);
                path.pop();
            }
        }
    }
    let ok = |v: &str| node(v).0 > 0.0;
    for vm in &inv.vms {
        if vm.floating_ip.is_some() && ok(&vm.id) {
            grow(&mut vec![vm.id.as_str()], &ids, &edge, &ok, &mut all);
        }
    }
    let mut m = OracleMetrics {
        system_risk: 0.0,
        attack_cost: f64::INFINITY,
        prob_attack_success: 0.0,
        mtta: f64::INFINITY,
        paths: 0,
    };
    for path in all.iter().filter(|p| inv.vm(p.last().unwrap()).unwrap().is_target) {
        let ns: Vec<_> = path.iter().map(|v| node(v)).collect();
        let p: f64 = ns.iter().map(|n| n.0).product();
        let imp: f64 = ns.iter().map(|n| n.1).sum();
        let cost: f64 = ns.iter().map(|n| n.2).sum();
        let mtta: f64 = ns.iter().map(|n| n.3).sum();
        m.system_risk += p * imp;
        m.attack_cost = m.attack_cost.min(cost);
        m.prob_attack_success = m.prob_attack_success.max(p);
        m.mtta = m.mtta.min(mtta);
        m.paths += 1;
    }
    m
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    if a == b {
        return true;
    }
    if !a.is_finite() || !b.is_finite() {
        return false;
    }
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

/// OR-only tree over leaf metrics given as (p, impact).
pub fn or_tree(leaves: &[(f64, f64)]) -> AttackTree {
    AttackTree::Gate {
        kind: GateKind::Or,
        children: leaves
            .iter()
            .enumerate()
            .map(|(i, &(p, imp))| AttackTree::Leaf {
                cve_id: cve(i),
                metrics: harmcloud_core::vuln::LeafMetrics {
                    probability: p,
                    impact: imp,
                    cost: 10.0 - 10.0 * p,
                    mttc: if p > 0.0 { 1.0 / p } else { f64::INFINITY },
                },
            })
            .collect(),
    }
}

/// Spread the instance's VMs over three hosts in two zones and attach three
/// OS profiles (one sometimes empty) drawn from the instance's CVE pool.
pub fn multi_host(inst: &mut Instance, rng: &mut impl Rng) -> OsProfileCatalog {
    let n = inst.state.inventory.vms.len() as u32;
    let caps = [n, rng.gen_range(1..=n.max(1)), rng.gen_range(1..=3)];
    let inv = &mut inst.state.inventory;
    inv.hosts = ["h0", "h1", "h2"]
        .iter()
        .zip(caps)
        .enumerate()
        .map(|(i, (id, cap))| Host {
            id: id.to_string(),
            zone: if i < 2 { "Z1" } else { "Z2" }.into(),
            capacity_vms: cap,
            resident_vm_ids: Vec::new(),
        })
        .collect();
    for vm in inv.vms.iter_mut() {
        let mut order = [0usize, 1, 2];
        order.shuffle(rng);
        let h = order
            .into_iter()
            .find(|&h| (inv.hosts[h].resident_vm_ids.len() as u32) < inv.hosts[h].capacity_vms)
            .unwrap();
        vm.host_id = inv.hosts[h].id.clone();
        inv.hosts[h].resident_vm_ids.push(vm.id.clone());
    }
    let profiles = ["OsA", "OsB", "OsC"].iter().map(|os| {
        let k = if *os == "OsC" && rng.gen_bool(0.5) { 0 } else { rng.gen_range(0..=3) };
        OsVulnProfile {
            os_variant: os.to_string(),
            cve_ids: (0..k).map(|_| cve(rng.gen_range(0..12))).collect::<BTreeSet<_>>().into_iter().collect(),
            license_cost: 0.0,
        }
    });
    OsProfileCatalog::new(profiles, Some(&inst.catalog)).unwrap()
}
