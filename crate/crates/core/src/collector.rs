//! Information collection: keystone auth, nova and neutron listings, then
//! scanner auth and the vulnerability listing. The responses are reduced to
//! an inventory, the VM reachability map and the VM → CVE map.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inventory::{derive_reachability, CloudInventory, Host, InventoryError, SystemConstraints, Vm};
use crate::orchestrator::{ApiCallRecord, Session};
use crate::provider::{
    CallKind, CloudApi, CreateServersRequest, Credentials, NetworkListing, OpAck, ProviderError, ScannerApi,
    ServerListing, SessionToken, Timed,
};
use crate::vuln::{CvssCatalog, ScanReport, VulnMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CollectError {
    #[error("{kind} failed: {error}")]
    Call { kind: CallKind, error: ProviderError },
    #[error("scanner reports unknown CVE `{cve}` on {vm}")]
    UnknownCve { vm: String, cve: String },
    #[error(transparent)]
    Inventory(#[from] InventoryError),
}

impl CollectError {
    pub fn code(&self) -> &'static str {
        match self {
            CollectError::Call { error, .. } => error.code(),
            CollectError::UnknownCve { .. } => "UNKNOWN_CVE",
            CollectError::Inventory(e) => e.code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionResult {
    pub vms_links: BTreeMap<String, BTreeSet<String>>,
    pub vms_vulns: VulnMap,
    pub hosts: Vec<Host>,
    pub raw_call_log: Vec<ApiCallRecord>,
    /// Inventory rebuilt from the listings, with the supplied constraints.
    pub inventory: CloudInventory,
    pub scanned_at: DateTime<Utc>,
    /// Cloud session left open for later deployments.
    pub session: Session,
}

impl CollectionResult {
    /// Equality ignoring the call log and the session token.
    pub fn same_content(&self, other: &CollectionResult) -> bool {
        self.vms_links == other.vms_links
            && self.vms_vulns == other.vms_vulns
            && self.hosts == other.hosts
            && self.inventory == other.inventory
            && self.scanned_at == other.scanned_at
    }
}

fn step<T>(
    log: &mut Vec<ApiCallRecord>,
    kind: CallKind,
    token: Option<&str>,
    result: Result<Timed<T>, ProviderError>,
) -> Result<Timed<T>, CollectError> {
    match result {
        Ok(t) => {
            log.push(ApiCallRecord::informative(kind, &t, token.map(str::to_string)));
            Ok(t)
        }
        Err(error) => {
            log.push(ApiCallRecord::failed(kind, &error, token.map(str::to_string)));
            Err(CollectError::Call { kind, error })
        }
    }
}

/// Run the collection sequence. Servers still being built are skipped;
/// `catalog`, when given, must resolve every reported CVE.
pub fn collect_information(
    cloud: &dyn CloudApi,
    credentials: &Credentials,
    scanner: &dyn ScannerApi,
    scanner_credentials: &Credentials,
    catalog: Option<&CvssCatalog>,
    constraints: &SystemConstraints,
) -> Result<CollectionResult, CollectError> {
    let mut log = Vec::new();

    let auth = cloud.authenticate(credentials);
    let issued = auth.as_ref().ok().map(|t| t.body.value.clone());
    let token: SessionToken = step(&mut log, CallKind::KeystoneAuth, issued.as_deref(), auth)?.body;
    let tok = token.value.as_str();
    let servers = step(&mut log, CallKind::ListServers, Some(tok), cloud.list_servers(tok))?.body;
    let networks = step(&mut log, CallKind::ListNetworks, Some(tok), cloud.list_networks(tok))?.body;

    let sauth = scanner.scanner_authenticate(scanner_credentials);
    let sissued = sauth.as_ref().ok().map(|t| t.body.value.clone());
    let stoken = step(&mut log, CallKind::ScannerAuth, sissued.as_deref(), sauth)?.body;
    let report = step(
        &mut log,
        CallKind::ScannerVulns,
        Some(&stoken.value),
        scanner.scanner_vulnerabilities(&stoken.value),
    )?
    .body;

    let inventory = rebuild_inventory(&servers, &networks, constraints);
    let vms_links = derive_reachability(&inventory)?.vm_links();
    let mut vms_vulns = VulnMap::new();
    for vm in &inventory.vms {
        let cves = report.findings.get(&vm.id).cloned().unwrap_or_default();
        if let Some(cat) = catalog {
            if let Some(cve) = cves.iter().find(|c| !cat.contains(c)) {
                return Err(CollectError::UnknownCve {
                    vm: vm.id.clone(),
                    cve: cve.clone(),
                });
            }
        }
        vms_vulns.insert(vm.id.clone(), cves);
    }

    let image_refs = servers
        .servers
        .iter()
        .filter_map(|s| s.image_ref.clone().map(|img| (s.os_variant.clone(), img)))
        .collect();

    Ok(CollectionResult {
        vms_links,
        vms_vulns,
        hosts: inventory.hosts.clone(),
        raw_call_log: log,
        scanned_at: report.scanned_at,
        inventory,
        session: Session {
            credentials: credentials.clone(),
            token,
            image_refs,
        },
    })
}

/// Keep only the fields the model uses: placement and OS from nova, IP
/// bindings and rules from neutron.
pub fn rebuild_inventory(
    servers: &ServerListing,
    networks: &NetworkListing,
    constraints: &SystemConstraints,
) -> CloudInventory {
    let ports: BTreeMap<&str, _> = networks.ports.iter().map(|p| (p.device_id.as_str(), p)).collect();
    let live: Vec<_> = servers.servers.iter().filter(|s| s.status != "BUILD").collect();
    let vms: Vec<Vm> = live
        .iter()
        .filter_map(|s| {
            let (fixed, floating) = match ports.get(s.id.as_str()) {
                Some(p) => (p.fixed_ip, p.floating_ip),
                None => (s.fixed_ip()?, s.floating_ip()),
            };
            Some(Vm {
                id: s.id.clone(),
                enterprise: s.metadata.get("enterprise").cloned().unwrap_or_default(),
                os_variant: s.os_variant.clone(),
                flavor: s.flavor.clone(),
                host_id: s.host_id.clone(),
                internal_ip: fixed,
                floating_ip: floating,
                is_target: s.metadata.get("is_target").is_some_and(|v| v == "true"),
            })
        })
        .collect();
    let hosts = servers
        .hosts
        .iter()
        .map(|h| Host {
            id: h.id.clone(),
            zone: h.zone.clone(),
            capacity_vms: h.capacity_vms,
            resident_vm_ids: vms.iter().filter(|vm| vm.host_id == h.id).map(|vm| vm.id.clone()).collect(),
        })
        .collect();
    CloudInventory {
        version: 0,
        flavors: servers.flavors.clone(),
        hosts,
        vms,
        rules: networks.security_group_rules.clone(),
        constraints: constraints.clone(),
    }
}

pub const AUTH_FILE: &str = "auth.json";
pub const SERVERS_FILE: &str = "servers.json";
pub const PORTS_FILE: &str = "ports.json";
pub const IMAGES_FILE: &str = "images.json";
pub const SCANNER_SESSION_FILE: &str = "scanner_session.json";
pub const SCANNER_VULNS_FILE: &str = "scanner_vulns.json";

fn file_for(kind: CallKind) -> Option<&'static str> {
    match kind {
        CallKind::KeystoneAuth => Some(AUTH_FILE),
        CallKind::ListServers => Some(SERVERS_FILE),
        CallKind::ListNetworks => Some(PORTS_FILE),
        CallKind::ListImages => Some(IMAGES_FILE),
        CallKind::ScannerAuth => Some(SCANNER_SESSION_FILE),
        CallKind::ScannerVulns => Some(SCANNER_VULNS_FILE),
        _ => None,
    }
}

/// Replays canned responses from a directory, one file per call kind.
/// Operational calls always fail.
pub struct RecordedProvider {
    dir: PathBuf,
}

impl RecordedProvider {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn load<T: DeserializeOwned>(&self, kind: CallKind) -> Result<Timed<T>, ProviderError> {
        let name = file_for(kind).ok_or_else(|| ProviderError::EndpointUnreachable("recorded provider".into()))?;
        let path = self.dir.join(name);
        let text = fs::read_to_string(&path)
            .map_err(|e| ProviderError::EndpointUnreachable(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ProviderError::ParseError(format!("{name}: {e}")))
    }

    fn read_only() -> ProviderError {
        ProviderError::EndpointUnreachable("recorded provider is read-only".into())
    }
}

impl CloudApi for RecordedProvider {
    fn authenticate(&self, _creds: &Credentials) -> Result<Timed<SessionToken>, ProviderError> {
        self.load(CallKind::KeystoneAuth)
    }

    fn list_servers(&self, _token: &str) -> Result<Timed<ServerListing>, ProviderError> {
        self.load(CallKind::ListServers)
    }

    fn list_networks(&self, _token: &str) -> Result<Timed<NetworkListing>, ProviderError> {
        self.load(CallKind::ListNetworks)
    }

    fn list_images(&self, _token: &str) -> Result<Timed<BTreeMap<String, String>>, ProviderError> {
        self.load(CallKind::ListImages)
    }

    fn rebuild_server(&self, _: &str, _: &str, _: &str) -> Result<Timed<OpAck>, ProviderError> {
        Err(Self::read_only())
    }

    fn create_servers(&self, _: &str, _: &CreateServersRequest) -> Result<Timed<OpAck>, ProviderError> {
        Err(Self::read_only())
    }

    fn live_migrate(&self, _: &str, _: &str, _: &str) -> Result<Timed<OpAck>, ProviderError> {
        Err(Self::read_only())
    }
}

impl ScannerApi for RecordedProvider {
    fn scanner_authenticate(&self, _creds: &Credentials) -> Result<Timed<SessionToken>, ProviderError> {
        self.load(CallKind::ScannerAuth)
    }

    fn scanner_vulnerabilities(&self, _token: &str) -> Result<Timed<ScanReport>, ProviderError> {
        self.load(CallKind::ScannerVulns)
    }
}

/// Forwards to live backends and writes every informative response into a
/// directory that [`RecordedProvider`] can replay.
pub struct RecordingProxy<'a> {
    cloud: &'a dyn CloudApi,
    scanner: &'a dyn ScannerApi,
    dir: PathBuf,
    failures: Mutex<Vec<String>>,
}

impl<'a> RecordingProxy<'a> {
    pub fn new(cloud: &'a dyn CloudApi, scanner: &'a dyn ScannerApi, dir: impl AsRef<Path>) -> Self {
        Self {
            cloud,
            scanner,
            dir: dir.as_ref().to_path_buf(),
            failures: Mutex::new(Vec::new()),
        }
    }

    /// Files that could not be written.
    pub fn failures(&self) -> Vec<String> {
        self.failures.lock().clone()
    }

    fn save<T: Serialize>(&self, kind: CallKind, result: Result<Timed<T>, ProviderError>) -> Result<Timed<T>, ProviderError> {
        if let (Ok(t), Some(name)) = (&result, file_for(kind)) {
            let text = serde_json::to_string_pretty(t).expect("response serializes");
            if let Err(e) = fs::write(self.dir.join(name), text + "\n") {
                self.failures.lock().push(format!("{name}: {e}"));
            }
        }
        result
    }
}

impl CloudApi for RecordingProxy<'_> {
    fn authenticate(&self, creds: &Credentials) -> Result<Timed<SessionToken>, ProviderError> {
        self.save(CallKind::KeystoneAuth, self.cloud.authenticate(creds))
    }

    fn list_servers(&self, token: &str) -> Result<Timed<ServerListing>, ProviderError> {
        self.save(CallKind::ListServers, self.cloud.list_servers(token))
    }

    fn list_networks(&self, token: &str) -> Result<Timed<NetworkListing>, ProviderError> {
        self.save(CallKind::ListNetworks, self.cloud.list_networks(token))
    }

    fn list_images(&self, token: &str) -> Result<Timed<BTreeMap<String, String>>, ProviderError> {
        self.save(CallKind::ListImages, self.cloud.list_images(token))
    }

    fn rebuild_server(&self, token: &str, vm_id: &str, image_ref: &str) -> Result<Timed<OpAck>, ProviderError> {
        self.cloud.rebuild_server(token, vm_id, image_ref)
    }

    fn create_servers(&self, token: &str, req: &CreateServersRequest) -> Result<Timed<OpAck>, ProviderError> {
        self.cloud.create_servers(token, req)
    }

    fn live_migrate(&self, token: &str, vm_id: &str, target_host_id: &str) -> Result<Timed<OpAck>, ProviderError> {
        self.cloud.live_migrate(token, vm_id, target_host_id)
    }
}

impl ScannerApi for RecordingProxy<'_> {
    fn scanner_authenticate(&self, creds: &Credentials) -> Result<Timed<SessionToken>, ProviderError> {
        self.save(CallKind::ScannerAuth, self.scanner.scanner_authenticate(creds))
    }

    fn scanner_vulnerabilities(&self, token: &str) -> Result<Timed<ScanReport>, ProviderError> {
        self.save(CallKind::ScannerVulns, self.scanner.scanner_vulnerabilities(token))
    }
}
