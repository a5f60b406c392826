//! Simulated OpenStack + vulnerability scanner backend.
//!
//! Every call consumes its configured response time (RT) on a simulated
//! clock. Operational calls are acknowledged after RT and take effect at
//! request time + OT; until then listings show the affected servers as in
//! progress. All state sits behind one mutex, so operations are totally
//! ordered.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;
use std::time::Duration;

use chrono::{DateTime, TimeZone, Utc};
use ipnet::Ipv4Net;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inventory::{CloudInventory, Endpoint, Flavor, FirewallRule, Vm};
use crate::vuln::{OsProfileCatalog, ScanReport, VulnMap};

pub const DEFAULT_TOKEN_TTL_MS: u64 = 3_600_000;
/// RT of operational calls; the measured figures only cover their OT.
pub const OPERATIONAL_RT_MS: u64 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallKind {
    KeystoneAuth,
    ListServers,
    ListNetworks,
    ListImages,
    RebuildServer,
    CreateServers,
    LiveMigrate,
    ScannerAuth,
    ScannerVulns,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CallClass {
    Informative,
    Operational,
}

impl CallKind {
    pub const ALL: [CallKind; 9] = [
        CallKind::KeystoneAuth,
        CallKind::ListServers,
        CallKind::ListNetworks,
        CallKind::ListImages,
        CallKind::RebuildServer,
        CallKind::CreateServers,
        CallKind::LiveMigrate,
        CallKind::ScannerAuth,
        CallKind::ScannerVulns,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CallKind::KeystoneAuth => "keystone_auth",
            CallKind::ListServers => "list_servers",
            CallKind::ListNetworks => "list_networks",
            CallKind::ListImages => "list_images",
            CallKind::RebuildServer => "rebuild_server",
            CallKind::CreateServers => "create_servers",
            CallKind::LiveMigrate => "live_migrate",
            CallKind::ScannerAuth => "scanner_auth",
            CallKind::ScannerVulns => "scanner_vulns",
        }
    }

    pub fn class(&self) -> CallClass {
        match self {
            CallKind::RebuildServer | CallKind::CreateServers | CallKind::LiveMigrate => CallClass::Operational,
            _ => CallClass::Informative,
        }
    }

    pub fn is_scanner(&self) -> bool {
        matches!(self, CallKind::ScannerAuth | CallKind::ScannerVulns)
    }
}

impl fmt::Display for CallKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CallKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CallKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latency {
    pub rt_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ot_ms: Option<u64>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LatencyError {
    #[error("malformed latency profile: {0}")]
    Malformed(String),
    #[error("{0} is informative but has an ot_ms")]
    OtOnInformative(CallKind),
    #[error("{0} has ot_ms below rt_ms")]
    OtBelowRt(CallKind),
}

impl LatencyError {
    pub fn code(&self) -> &'static str {
        "MALFORMED_LATENCY"
    }
}

/// Per-call-kind RT and, for operational kinds, OT.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyProfile(BTreeMap<CallKind, Latency>);

impl Default for LatencyProfile {
    /// The measured testbed figures.
    fn default() -> Self {
        let informative = |rt| Latency { rt_ms: rt, ot_ms: None };
        let operational = |ot| Latency {
            rt_ms: OPERATIONAL_RT_MS,
            ot_ms: Some(ot),
        };
        Self(BTreeMap::from([
            (CallKind::KeystoneAuth, informative(356)),
            (CallKind::ListServers, informative(1997)),
            (CallKind::ListNetworks, informative(209)),
            (CallKind::ListImages, informative(559)),
            (CallKind::RebuildServer, operational(18081)),
            (CallKind::CreateServers, operational(12091)),
            (CallKind::LiveMigrate, operational(7216)),
            (CallKind::ScannerAuth, informative(471)),
            (CallKind::ScannerVulns, informative(4038)),
        ]))
    }
}

impl LatencyProfile {
    /// Parse a profile; kinds missing from the document keep their defaults.
    pub fn from_json(doc: &str) -> Result<Self, LatencyError> {
        let given: BTreeMap<CallKind, Latency> =
            serde_json::from_str(doc).map_err(|e| LatencyError::Malformed(e.to_string()))?;
        let mut profile = Self::default();
        profile.0.extend(given);
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<(), LatencyError> {
        for (kind, lat) in &self.0 {
            match (kind.class(), lat.ot_ms) {
                (CallClass::Informative, Some(_)) => return Err(LatencyError::OtOnInformative(*kind)),
                (CallClass::Operational, Some(ot)) if ot < lat.rt_ms => return Err(LatencyError::OtBelowRt(*kind)),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn get(&self, kind: CallKind) -> Latency {
        self.0.get(&kind).copied().unwrap_or(Latency { rt_ms: 0, ot_ms: None })
    }

    pub fn rt(&self, kind: CallKind) -> u64 {
        self.get(kind).rt_ms
    }

    /// OT of an operational kind; falls back to RT when unset.
    pub fn ot(&self, kind: CallKind) -> u64 {
        let lat = self.get(kind);
        lat.ot_ms.unwrap_or(lat.rt_ms)
    }

    pub fn set(&mut self, kind: CallKind, latency: Latency) {
        self.0.insert(kind, latency);
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "code", content = "message", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProviderError {
    #[error("authentication failed")]
    AuthFailed,
    #[error("token expired")]
    TokenExpired,
    #[error("token not recognised")]
    TokenInvalid,
    #[error("unknown VM `{0}`")]
    UnknownVm(String),
    #[error("unknown image `{0}`")]
    UnknownImage(String),
    #[error("unknown host `{0}`")]
    UnknownHost(String),
    #[error("unknown reference: {0}")]
    UnknownRefs(String),
    #[error("capacity exceeded: {0}")]
    CapacityExceeded(String),
    #[error("VM `{0}` already runs on the target host")]
    SameHost(String),
    #[error("VM `{0}` has an operation in progress")]
    VmBusy(String),
    #[error("endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("cannot parse response: {0}")]
    ParseError(String),
}

impl ProviderError {
    pub fn code(&self) -> &'static str {
        match self {
            ProviderError::AuthFailed => "AUTH_FAILED",
            ProviderError::TokenExpired => "TOKEN_EXPIRED",
            ProviderError::TokenInvalid => "TOKEN_INVALID",
            ProviderError::UnknownVm(_) => "UNKNOWN_VM",
            ProviderError::UnknownImage(_) => "UNKNOWN_IMAGE",
            ProviderError::UnknownHost(_) => "UNKNOWN_HOST",
            ProviderError::UnknownRefs(_) => "UNKNOWN_REFS",
            ProviderError::CapacityExceeded(_) => "CAPACITY_EXCEEDED",
            ProviderError::SameHost(_) => "SAME_HOST",
            ProviderError::VmBusy(_) => "VM_BUSY",
            ProviderError::EndpointUnreachable(_) => "ENDPOINT_UNREACHABLE",
            ProviderError::ParseError(_) => "PARSE_ERROR",
        }
    }

    /// True when the provider refused a well-formed request.
    pub fn is_rejection(&self) -> bool {
        matches!(
            self,
            ProviderError::UnknownVm(_)
                | ProviderError::UnknownImage(_)
                | ProviderError::UnknownHost(_)
                | ProviderError::UnknownRefs(_)
                | ProviderError::CapacityExceeded(_)
                | ProviderError::SameHost(_)
                | ProviderError::VmBusy(_)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Credentials {
    pub user: String,
    pub password: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionToken {
    pub value: String,
    pub issued_at_ms: u64,
    pub ttl_ms: u64,
    /// Service name (nova, neutron, glance) → endpoint path. Empty for
    /// scanner tokens.
    #[serde(default)]
    pub controllers: BTreeMap<String, String>,
}

impl SessionToken {
    pub fn is_valid_at(&self, now_ms: u64) -> bool {
        now_ms < self.issued_at_ms + self.ttl_ms
    }
}

/// A response plus its timing on the simulated clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timed<T> {
    pub body: T,
    pub rt_ms: u64,
    /// Sim clock when the request was issued.
    pub started_ms: u64,
}

impl<T> Timed<T> {
    pub fn finished_ms(&self) -> u64 {
        self.started_ms + self.rt_ms
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostEntry {
    pub id: String,
    pub zone: String,
    pub capacity_vms: u32,
    pub running_vms: u32,
    pub state: String,
    pub hypervisor_type: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Address {
    pub addr: Ipv4Addr,
    #[serde(rename = "type")]
    pub kind: String,
}

pub const STATUS_ACTIVE: &str = "ACTIVE";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerEntry {
    pub id: String,
    pub name: String,
    pub status: String,
    pub task_state: Option<String>,
    pub host_id: String,
    pub availability_zone: String,
    pub image_ref: Option<String>,
    pub os_variant: String,
    pub flavor: String,
    pub addresses: BTreeMap<String, Vec<Address>>,
    pub metadata: BTreeMap<String, String>,
    pub created: String,
    pub updated: String,
    pub created_ms: u64,
    pub updated_ms: u64,
}

impl ServerEntry {
    pub fn fixed_ip(&self) -> Option<Ipv4Addr> {
        self.addresses.values().flatten().find(|a| a.kind == "fixed").map(|a| a.addr)
    }

    pub fn floating_ip(&self) -> Option<Ipv4Addr> {
        self.addresses.values().flatten().find(|a| a.kind == "floating").map(|a| a.addr)
    }

    pub fn is_active(&self) -> bool {
        self.status == STATUS_ACTIVE
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerListing {
    pub servers: Vec<ServerEntry>,
    pub hosts: Vec<HostEntry>,
    pub flavors: Vec<Flavor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkEntry {
    pub id: String,
    pub cidr: Ipv4Net,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortEntry {
    pub id: String,
    pub device_id: String,
    pub network_id: String,
    pub fixed_ip: Ipv4Addr,
    pub floating_ip: Option<Ipv4Addr>,
    pub mac_address: String,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkListing {
    pub networks: Vec<NetworkEntry>,
    pub ports: Vec<PortEntry>,
    pub security_group_rules: Vec<FirewallRule>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpAck {
    pub op_id: String,
    pub status: String,
    /// Servers the operation touches (the new ones for a create).
    pub server_ids: Vec<String>,
}

pub const ACK_ACCEPTED: &str = "accepted";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreateServersRequest {
    pub image_ref: String,
    pub flavor_ref: String,
    pub network_id: String,
    pub host_id: String,
    pub max_count: u32,
    /// Server whose metadata and security group rules the new ones copy.
    pub source_vm_id: String,
}

/// Cloud-side API shared by the in-process simulator and remote clients.
pub trait CloudApi: Send + Sync {
    fn authenticate(&self, creds: &Credentials) -> Result<Timed<SessionToken>, ProviderError>;
    fn list_servers(&self, token: &str) -> Result<Timed<ServerListing>, ProviderError>;
    fn list_networks(&self, token: &str) -> Result<Timed<NetworkListing>, ProviderError>;
    fn list_images(&self, token: &str) -> Result<Timed<BTreeMap<String, String>>, ProviderError>;
    fn rebuild_server(&self, token: &str, vm_id: &str, image_ref: &str) -> Result<Timed<OpAck>, ProviderError>;
    fn create_servers(&self, token: &str, req: &CreateServersRequest) -> Result<Timed<OpAck>, ProviderError>;
    fn live_migrate(&self, token: &str, vm_id: &str, target_host_id: &str) -> Result<Timed<OpAck>, ProviderError>;
}

pub trait ScannerApi: Send + Sync {
    fn scanner_authenticate(&self, creds: &Credentials) -> Result<Timed<SessionToken>, ProviderError>;
    fn scanner_vulnerabilities(&self, token: &str) -> Result<Timed<ScanReport>, ProviderError>;
}

/// Static provider configuration (`provider.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub credentials: Credentials,
    pub scanner_credentials: Credentials,
    pub images: BTreeMap<String, String>,
    #[serde(default = "default_ttl")]
    pub token_ttl_ms: u64,
}

fn default_ttl() -> u64 {
    DEFAULT_TOKEN_TTL_MS
}

impl ProviderConfig {
    pub fn from_json(doc: &str) -> serde_json::Result<Self> {
        serde_json::from_str(doc)
    }
}

pub fn network_id(net: Ipv4Net) -> String {
    format!("net-{}-{}", net.network(), net.prefix_len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Effect {
    Rebuild {
        vm_id: String,
        os_variant: String,
        /// Scanner findings after the rebuild, when the OS profile is known.
        findings: Option<Vec<String>>,
    },
    Migrate { vm_id: String, host_id: String },
    Create { vms: Vec<Vm>, rules: Vec<FirewallRule>, findings: VulnMap },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PendingOp {
    op_id: String,
    started_ms: u64,
    completes_at_ms: u64,
    effect: Effect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Stamp {
    created_ms: u64,
    updated_ms: u64,
}

/// One entry of the provider's call trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub kind: CallKind,
    pub started_ms: u64,
    pub finished_ms: u64,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
struct State {
    inventory: CloudInventory,
    images: BTreeMap<String, String>,
    findings: VulnMap,
    scanned_at: DateTime<Utc>,
    pending: Vec<PendingOp>,
    stamps: BTreeMap<String, Stamp>,
    #[serde(skip)]
    clock_ms: u64,
    #[serde(skip)]
    tokens: BTreeMap<String, SessionToken>,
    #[serde(skip)]
    token_seq: u64,
    #[serde(skip)]
    op_seq: u64,
    #[serde(skip)]
    trace: Vec<TraceEntry>,
}


impl State {
    fn vm(&self, id: &str) -> Result<&Vm, ProviderError> {
        self.inventory.vm(id).ok_or_else(|| ProviderError::UnknownVm(id.to_string()))
    }

    fn check_token(&self, value: &str, now_ms: u64, scanner: bool) -> Result<(), ProviderError> {
        let token = self.tokens.get(value).ok_or(ProviderError::TokenInvalid)?;
        if token.controllers.is_empty() != scanner {
            return Err(ProviderError::TokenInvalid);
        }
        if !token.is_valid_at(now_ms) {
            return Err(ProviderError::TokenExpired);
        }
        Ok(())
    }

    fn next_op_id(&mut self) -> String {
        self.op_seq += 1;
        format!("op-{:06}", self.op_seq)
    }

    fn busy(&self, vm_id: &str) -> bool {
        self.pending.iter().any(|op| match &op.effect {
            Effect::Rebuild { vm_id: v, .. } | Effect::Migrate { vm_id: v, .. } => v == vm_id,
            Effect::Create { .. } => false,
        })
    }

    /// Free slots on `host_id`, counting VMs already promised to it.
    fn free_slots(&self, host_id: &str) -> Result<u32, ProviderError> {
        let free = self
            .inventory
            .free_capacity(host_id)
            .ok_or_else(|| ProviderError::UnknownHost(host_id.to_string()))?;
        let incoming: u32 = self
            .pending
            .iter()
            .map(|op| match &op.effect {
                Effect::Migrate { host_id: h, .. } if h == host_id => 1,
                Effect::Create { vms, .. } => vms.iter().filter(|vm| vm.host_id == host_id).count() as u32,
                _ => 0,
            })
            .sum();
        Ok(free.saturating_sub(incoming))
    }

    fn pending_vms(&self) -> impl Iterator<Item = (&PendingOp, &Vm)> {
        self.pending.iter().flat_map(|op| match &op.effect {
            Effect::Create { vms, .. } => vms.iter().map(move |vm| (op, vm)).collect::<Vec<_>>(),
            _ => Vec::new(),
        })
    }

    fn networks(&self) -> BTreeSet<Ipv4Net> {
        self.inventory.vms.iter().map(Vm::network).collect()
    }

    /// Apply every operation due at or before the current clock, in
    /// completion order.
    fn settle(&mut self) {
        self.pending.sort_by(|a, b| (a.completes_at_ms, &a.op_id).cmp(&(b.completes_at_ms, &b.op_id)));
        while self.pending.first().is_some_and(|op| op.completes_at_ms <= self.clock_ms) {
            let op = self.pending.remove(0);
            self.complete(op);
        }
    }

    fn complete(&mut self, op: PendingOp) {
        let at = op.completes_at_ms;
        match op.effect {
            Effect::Rebuild {
                vm_id,
                os_variant,
                findings,
            } => {
                if let Some(vm) = self.inventory.vm_mut(&vm_id) {
                    vm.os_variant = os_variant;
                }
                if let Some(cves) = findings {
                    self.findings.insert(vm_id.clone(), cves);
                }
                self.touch(&vm_id, at);
            }
            Effect::Migrate { vm_id, host_id } => {
                let Some(old) = self.inventory.vm(&vm_id).map(|vm| vm.host_id.clone()) else {
                    return;
                };
                if let Some(h) = self.inventory.host_mut(&old) {
                    h.resident_vm_ids.retain(|id| *id != vm_id);
                }
                if let Some(h) = self.inventory.host_mut(&host_id) {
                    h.resident_vm_ids.push(vm_id.clone());
                }
                if let Some(vm) = self.inventory.vm_mut(&vm_id) {
                    vm.host_id = host_id;
                }
                self.touch(&vm_id, at);
            }
            Effect::Create { vms, rules, findings } => {
                for vm in vms {
                    if let Some(h) = self.inventory.host_mut(&vm.host_id) {
                        h.resident_vm_ids.push(vm.id.clone());
                    }
                    self.stamps.insert(
                        vm.id.clone(),
                        Stamp {
                            created_ms: op.started_ms,
                            updated_ms: at,
                        },
                    );
                    self.inventory.vms.push(vm);
                }
                self.inventory.rules.extend(rules);
                self.findings.extend(findings);
            }
        }
    }

    fn touch(&mut self, vm_id: &str, at: u64) {
        self.stamps
            .entry(vm_id.to_string())
            .or_insert(Stamp { created_ms: 0, updated_ms: 0 })
            .updated_ms = at;
    }
}

pub struct ProviderSim {
    config: ProviderConfig,
    latency: LatencyProfile,
    profiles: OsProfileCatalog,
    epoch: DateTime<Utc>,
    realtime_scale: Option<f64>,
    state: Mutex<State>,
}

impl ProviderSim {
    pub fn new(config: ProviderConfig, latency: LatencyProfile, inventory: CloudInventory, scan: ScanReport) -> Self {
        let stamps = inventory
            .vms
            .iter()
            .map(|vm| (vm.id.clone(), Stamp { created_ms: 0, updated_ms: 0 }))
            .collect();
        let state = State {
            images: config.images.clone(),
            inventory,
            findings: scan.findings,
            scanned_at: scan.scanned_at,
            pending: Vec::new(),
            stamps,
            clock_ms: 0,
            tokens: BTreeMap::new(),
            token_seq: 0,
            op_seq: 0,
            trace: Vec::new(),
        };
        Self {
            config,
            latency,
            profiles: OsProfileCatalog::default(),
            epoch: Utc.with_ymd_and_hms(2019, 5, 14, 0, 0, 0).unwrap(),
            realtime_scale: None,
            state: Mutex::new(state),
        }
    }

    /// With profiles, a rebuild also replaces the scanner's findings for
    /// the VM with the profile of its new OS.
    pub fn with_os_profiles(mut self, profiles: OsProfileCatalog) -> Self {
        self.profiles = profiles;
        self
    }

    /// Also sleep `rt_ms × scale` of wall time per call.
    pub fn with_realtime_scale(mut self, scale: f64) -> Self {
        self.realtime_scale = (scale > 0.0).then_some(scale);
        self
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn latency(&self) -> &LatencyProfile {
        &self.latency
    }

    pub fn clock_ms(&self) -> u64 {
        self.state.lock().clock_ms
    }

    /// Let simulated time pass without issuing a call.
    pub fn advance_clock(&self, ms: u64) {
        let mut st = self.state.lock();
        st.clock_ms += ms;
        st.settle();
    }

    pub fn inventory(&self) -> CloudInventory {
        self.state.lock().inventory.clone()
    }

    pub fn findings(&self) -> VulnMap {
        self.state.lock().findings.clone()
    }

    pub fn has_pending(&self) -> bool {
        !self.state.lock().pending.is_empty()
    }

    pub fn set_images(&self, images: BTreeMap<String, String>) {
        self.state.lock().images = images;
    }

    /// Serialized resource state (inventory, images, findings, pending
    /// operations, timestamps). Clock, tokens and trace are excluded.
    pub fn fingerprint(&self) -> String {
        serde_json::to_string(&*self.state.lock()).expect("state serializes")
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.state.lock().trace.clone()
    }

    fn timestamp(&self, ms: u64) -> String {
        (self.epoch + chrono::Duration::milliseconds(ms as i64)).to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
    }

    fn call<T>(
        &self,
        kind: CallKind,
        f: impl FnOnce(&mut State, u64) -> Result<T, ProviderError>,
    ) -> Result<Timed<T>, ProviderError> {
        let rt = self.latency.rt(kind);
        let result = {
            let mut st = self.state.lock();
            let start = st.clock_ms;
            st.clock_ms += rt;
            st.settle();
            let r = f(&mut st, start);
            st.trace.push(TraceEntry {
                kind,
                started_ms: start,
                finished_ms: start + rt,
                ok: r.is_ok(),
            });
            r.map(|body| Timed {
                body,
                rt_ms: rt,
                started_ms: start,
            })
        };
        if let Some(scale) = self.realtime_scale {
            std::thread::sleep(Duration::from_secs_f64(rt as f64 * scale / 1000.0));
        }
        result
    }

    fn issue_token(&self, st: &mut State, now_ms: u64, scanner: bool) -> SessionToken {
        st.token_seq += 1;
        let (value, controllers) = if scanner {
            (format!("scan-{:08x}", st.token_seq), BTreeMap::new())
        } else {
            (
                format!("ks-{:08x}", st.token_seq),
                BTreeMap::from([
                    ("glance".to_string(), "/image".to_string()),
                    ("neutron".to_string(), "/network".to_string()),
                    ("nova".to_string(), "/compute".to_string()),
                ]),
            )
        };
        let token = SessionToken {
            value: value.clone(),
            issued_at_ms: now_ms,
            ttl_ms: self.config.token_ttl_ms,
            controllers,
        };
        st.tokens.insert(value, token.clone());
        token
    }

    fn server_entry(&self, st: &State, vm: &Vm, status: &str, task: Option<&str>, stamp: Stamp) -> ServerEntry {
        let mut addrs = vec![Address {
            addr: vm.internal_ip,
            kind: "fixed".into(),
        }];
        if let Some(fip) = vm.floating_ip {
            addrs.push(Address {
                addr: fip,
                kind: "floating".into(),
            });
        }
        ServerEntry {
            id: vm.id.clone(),
            name: vm.id.clone(),
            status: status.to_string(),
            task_state: task.map(str::to_string),
            host_id: vm.host_id.clone(),
            availability_zone: st.inventory.host(&vm.host_id).map(|h| h.zone.clone()).unwrap_or_default(),
            image_ref: st.images.get(&vm.os_variant).cloned(),
            os_variant: vm.os_variant.clone(),
            flavor: vm.flavor.clone(),
            addresses: BTreeMap::from([(network_id(vm.network()), addrs)]),
            metadata: BTreeMap::from([
                ("enterprise".to_string(), vm.enterprise.clone()),
                ("is_target".to_string(), vm.is_target.to_string()),
            ]),
            created: self.timestamp(stamp.created_ms),
            updated: self.timestamp(stamp.updated_ms),
            created_ms: stamp.created_ms,
            updated_ms: stamp.updated_ms,
        }
    }

    fn servers(&self, st: &State) -> ServerListing {
        let mut servers = Vec::new();
        for vm in &st.inventory.vms {
            let stamp = st.stamps.get(&vm.id).copied().unwrap_or(Stamp { created_ms: 0, updated_ms: 0 });
            let task = st.pending.iter().find_map(|op| match &op.effect {
                Effect::Rebuild { vm_id, .. } if *vm_id == vm.id => Some(("REBUILD", "rebuilding")),
                Effect::Migrate { vm_id, .. } if *vm_id == vm.id => Some(("MIGRATING", "migrating")),
                _ => None,
            });
            let (status, task) = match task {
                Some((s, t)) => (s, Some(t)),
                None => (STATUS_ACTIVE, None),
            };
            servers.push(self.server_entry(st, vm, status, task, stamp));
        }
        for (op, vm) in st.pending_vms() {
            let stamp = Stamp {
                created_ms: op.started_ms,
                updated_ms: op.started_ms,
            };
            servers.push(self.server_entry(st, vm, "BUILD", Some("spawning"), stamp));
        }
        let hosts = st
            .inventory
            .hosts
            .iter()
            .map(|h| HostEntry {
                id: h.id.clone(),
                zone: h.zone.clone(),
                capacity_vms: st.inventory.effective_capacity(h),
                running_vms: h.resident_vm_ids.len() as u32,
                state: "up".into(),
                hypervisor_type: "QEMU".into(),
            })
            .collect();
        ServerListing {
            servers,
            hosts,
            flavors: st.inventory.flavors.clone(),
        }
    }

    fn networks(&self, st: &State) -> NetworkListing {
        let networks = st
            .networks()
            .into_iter()
            .map(|net| NetworkEntry {
                id: network_id(net),
                cidr: net,
                status: STATUS_ACTIVE.into(),
            })
            .collect();
        let ports = st
            .inventory
            .vms
            .iter()
            .map(|vm| {
                let o = vm.internal_ip.octets();
                PortEntry {
                    id: format!("port-{}", vm.id),
                    device_id: vm.id.clone(),
                    network_id: network_id(vm.network()),
                    fixed_ip: vm.internal_ip,
                    floating_ip: vm.floating_ip,
                    mac_address: format!("fa:16:3e:{:02x}:{:02x}:{:02x}", o[1], o[2], o[3]),
                    status: STATUS_ACTIVE.into(),
                }
            })
            .collect();
        NetworkListing {
            networks,
            ports,
            security_group_rules: st.inventory.rules.clone(),
        }
    }

    fn accept(&self, st: &mut State, start: u64, kind: CallKind, effect: Effect, server_ids: Vec<String>) -> OpAck {
        let op_id = st.next_op_id();
        st.pending.push(PendingOp {
            op_id: op_id.clone(),
            started_ms: start,
            completes_at_ms: start + self.latency.ot(kind),
            effect,
        });
        OpAck {
            op_id,
            status: ACK_ACCEPTED.into(),
            server_ids,
        }
    }

    fn plan_create(&self, st: &State, req: &CreateServersRequest) -> Result<Effect, ProviderError> {
        let source = st.vm(&req.source_vm_id)?.clone();
        let os_variant = st
            .images
            .iter()
            .find(|(_, image)| **image == req.image_ref)
            .map(|(os, _)| os.clone())
            .ok_or_else(|| ProviderError::UnknownRefs(format!("image {}", req.image_ref)))?;
        if !st.inventory.flavors.is_empty() && st.inventory.flavor(&req.flavor_ref).is_none() {
            return Err(ProviderError::UnknownRefs(format!("flavor {}", req.flavor_ref)));
        }
        let net = st
            .networks()
            .into_iter()
            .find(|net| network_id(*net) == req.network_id)
            .ok_or_else(|| ProviderError::UnknownRefs(format!("network {}", req.network_id)))?;
        let free = st
            .free_slots(&req.host_id)
            .map_err(|_| ProviderError::UnknownRefs(format!("host {}", req.host_id)))?;
        if free < req.max_count {
            return Err(ProviderError::CapacityExceeded(format!(
                "host {} has {free} free slots, {} requested",
                req.host_id, req.max_count
            )));
        }

        let mut taken: BTreeSet<String> = st.inventory.vms.iter().map(|vm| vm.id.clone()).collect();
        let mut used: BTreeSet<Ipv4Addr> = BTreeSet::new();
        for (_, vm) in st.pending_vms() {
            taken.insert(vm.id.clone());
            used.insert(vm.internal_ip);
        }
        let mut vms = Vec::new();
        let mut k = 0u32;
        while vms.len() < req.max_count as usize {
            k += 1;
            let id = format!("{}-r{k}", source.id);
            if taken.contains(&id) {
                continue;
            }
            let ip = st
                .inventory
                .allocate_ip(net, &used)
                .map_err(|e| ProviderError::CapacityExceeded(e.to_string()))?;
            used.insert(ip);
            taken.insert(id.clone());
            vms.push(Vm {
                id,
                enterprise: source.enterprise.clone(),
                os_variant: os_variant.clone(),
                flavor: req.flavor_ref.clone(),
                host_id: req.host_id.clone(),
                internal_ip: ip,
                floating_ip: None,
                is_target: source.is_target,
            });
        }

        let mut rules = Vec::new();
        for vm in &vms {
            for rule in &st.inventory.rules {
                if rule.src.matches(&source) && !rule.src.matches(vm) {
                    rules.push(FirewallRule::allow(Endpoint::vm(&vm.id), rule.dst.clone()));
                }
                if rule.dst.matches(&source) && !rule.dst.matches(vm) {
                    rules.push(FirewallRule::allow(rule.src.clone(), Endpoint::vm(&vm.id)));
                }
            }
        }
        let findings = match st.findings.get(&source.id) {
            Some(cves) => vms.iter().map(|vm| (vm.id.clone(), cves.clone())).collect(),
            None => VulnMap::new(),
        };
        Ok(Effect::Create { vms, rules, findings })
    }
}

impl CloudApi for ProviderSim {
    fn authenticate(&self, creds: &Credentials) -> Result<Timed<SessionToken>, ProviderError> {
        self.call(CallKind::KeystoneAuth, |st, now| {
            let want = &self.config.credentials;
            let domain_ok = want.domain.is_none() || creds.domain == want.domain;
            if creds.user != want.user || creds.password != want.password || !domain_ok {
                return Err(ProviderError::AuthFailed);
            }
            Ok(self.issue_token(st, now, false))
        })
    }

    fn list_servers(&self, token: &str) -> Result<Timed<ServerListing>, ProviderError> {
        self.call(CallKind::ListServers, |st, now| {
            st.check_token(token, now, false)?;
            Ok(self.servers(st))
        })
    }

    fn list_networks(&self, token: &str) -> Result<Timed<NetworkListing>, ProviderError> {
        self.call(CallKind::ListNetworks, |st, now| {
            st.check_token(token, now, false)?;
            Ok(self.networks(st))
        })
    }

    fn list_images(&self, token: &str) -> Result<Timed<BTreeMap<String, String>>, ProviderError> {
        self.call(CallKind::ListImages, |st, now| {
            st.check_token(token, now, false)?;
            Ok(st.images.clone())
        })
    }

    fn rebuild_server(&self, token: &str, vm_id: &str, image_ref: &str) -> Result<Timed<OpAck>, ProviderError> {
        self.call(CallKind::RebuildServer, |st, now| {
            st.check_token(token, now, false)?;
            st.vm(vm_id)?;
            let os_variant = st
                .images
                .iter()
                .find(|(_, image)| *image == image_ref)
                .map(|(os, _)| os.clone())
                .ok_or_else(|| ProviderError::UnknownImage(image_ref.to_string()))?;
            if st.busy(vm_id) {
                return Err(ProviderError::VmBusy(vm_id.to_string()));
            }
            let effect = Effect::Rebuild {
                vm_id: vm_id.to_string(),
                findings: self.profiles.get(&os_variant).map(|p| p.cve_ids.clone()),
                os_variant,
            };
            Ok(self.accept(st, now, CallKind::RebuildServer, effect, vec![vm_id.to_string()]))
        })
    }

    fn create_servers(&self, token: &str, req: &CreateServersRequest) -> Result<Timed<OpAck>, ProviderError> {
        self.call(CallKind::CreateServers, |st, now| {
            st.check_token(token, now, false)?;
            let effect = self.plan_create(st, req)?;
            let ids = match &effect {
                Effect::Create { vms, .. } => vms.iter().map(|vm| vm.id.clone()).collect(),
                _ => Vec::new(),
            };
            Ok(self.accept(st, now, CallKind::CreateServers, effect, ids))
        })
    }

    fn live_migrate(&self, token: &str, vm_id: &str, target_host_id: &str) -> Result<Timed<OpAck>, ProviderError> {
        self.call(CallKind::LiveMigrate, |st, now| {
            st.check_token(token, now, false)?;
            let vm = st.vm(vm_id)?;
            if st.inventory.host(target_host_id).is_none() {
                return Err(ProviderError::UnknownHost(target_host_id.to_string()));
            }
            if vm.host_id == target_host_id {
                return Err(ProviderError::SameHost(vm_id.to_string()));
            }
            if st.busy(vm_id) {
                return Err(ProviderError::VmBusy(vm_id.to_string()));
            }
            if st.free_slots(target_host_id)? == 0 {
                return Err(ProviderError::CapacityExceeded(format!("host {target_host_id} is full")));
            }
            let effect = Effect::Migrate {
                vm_id: vm_id.to_string(),
                host_id: target_host_id.to_string(),
            };
            Ok(self.accept(st, now, CallKind::LiveMigrate, effect, vec![vm_id.to_string()]))
        })
    }
}

impl ScannerApi for ProviderSim {
    fn scanner_authenticate(&self, creds: &Credentials) -> Result<Timed<SessionToken>, ProviderError> {
        self.call(CallKind::ScannerAuth, |st, now| {
            let want = &self.config.scanner_credentials;
            if creds.user != want.user || creds.password != want.password {
                return Err(ProviderError::AuthFailed);
            }
            Ok(self.issue_token(st, now, true))
        })
    }

    fn scanner_vulnerabilities(&self, token: &str) -> Result<Timed<ScanReport>, ProviderError> {
        self.call(CallKind::ScannerVulns, |st, now| {
            st.check_token(token, now, true)?;
            Ok(ScanReport {
                scanned_at: st.scanned_at,
                findings: st.findings.clone(),
            })
        })
    }
}
