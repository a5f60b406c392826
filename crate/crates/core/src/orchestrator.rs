//! Executes MTD actions against a provider and keeps the call trace.
//!
//! Diversity: `list_images`, then `rebuild_server`. Redundancy: one
//! `create_servers` with `max_count = r`. Shuffle: one `live_migrate`. After
//! the operational call the orchestrator polls `list_servers` until the
//! affected servers are active again, reads the OT off their `updated_ms`,
//! and compares the listing with the model's prediction.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mtd::{check_action, project_action, ModelState, MtdAction, MtdError};
use crate::provider::{
    network_id, CallClass, CallKind, CloudApi, CreateServersRequest, Credentials, OpAck, ProviderError,
    ServerEntry, ServerListing, SessionToken, Timed,
};
use crate::vuln::OsProfileCatalog;

/// Upper bound on status polls before a deployment is declared stuck.
pub const MAX_POLLS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CallStatus {
    Accepted,
    Abort,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiCallRecord {
    pub kind: String,
    pub class: CallClass,
    pub rt_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ot_ms: Option<u64>,
    pub status: CallStatus,
    /// Sim clock when the request went out.
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ApiCallRecord {
    pub fn informative<T>(kind: CallKind, t: &Timed<T>, token: Option<String>) -> Self {
        Self {
            kind: kind.as_str().into(),
            class: kind.class(),
            rt_ms: t.rt_ms,
            ot_ms: None,
            status: CallStatus::Accepted,
            timestamp_ms: t.started_ms,
            token,
            error: None,
        }
    }

    pub fn failed(kind: CallKind, error: &ProviderError, token: Option<String>) -> Self {
        Self {
            kind: kind.as_str().into(),
            class: kind.class(),
            rt_ms: 0,
            ot_ms: None,
            status: if error.is_rejection() {
                CallStatus::Abort
            } else {
                CallStatus::Error
            },
            timestamp_ms: 0,
            token,
            error: Some(error.code().into()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown call kind `{0}`")]
pub struct UnknownKind(pub String);

impl UnknownKind {
    pub fn code(&self) -> &'static str {
        "UNKNOWN_KIND"
    }
}

pub fn classify_call(kind: &str) -> Result<CallClass, UnknownKind> {
    kind.parse::<CallKind>()
        .map(|k| k.class())
        .map_err(|_| UnknownKind(kind.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationTiming {
    pub kind: String,
    pub technique: String,
    pub ot_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingLedger {
    pub informative_rt_ms: u64,
    pub cloud_informative_rt_ms: u64,
    pub scanner_informative_rt_ms: u64,
    pub operations: Vec<OperationTiming>,
}

fn technique_of(kind: CallKind) -> &'static str {
    match kind {
        CallKind::RebuildServer => "diversity",
        CallKind::CreateServers => "redundancy",
        CallKind::LiveMigrate => "shuffle",
        _ => "",
    }
}

/// Sum informative RTs (split by backend) and list each operational OT.
/// Records of unknown kinds are counted by their recorded class.
pub fn timing_ledger(records: &[ApiCallRecord]) -> TimingLedger {
    let mut ledger = TimingLedger::default();
    for r in records {
        let kind = r.kind.parse::<CallKind>().ok();
        match r.class {
            CallClass::Informative => {
                ledger.informative_rt_ms += r.rt_ms;
                if kind.is_some_and(|k| k.is_scanner()) {
                    ledger.scanner_informative_rt_ms += r.rt_ms;
                } else {
                    ledger.cloud_informative_rt_ms += r.rt_ms;
                }
            }
            CallClass::Operational => {
                if let Some(ot) = r.ot_ms {
                    ledger.operations.push(OperationTiming {
                        kind: r.kind.clone(),
                        technique: kind.map(technique_of).unwrap_or_default().into(),
                        ot_ms: ot,
                    });
                }
            }
        }
    }
    ledger
}

/// An authenticated cloud session plus the OS → image cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub credentials: Credentials,
    pub token: SessionToken,
    #[serde(default)]
    pub image_refs: BTreeMap<String, String>,
}

impl Session {
    pub fn open(cloud: &dyn CloudApi, credentials: &Credentials) -> Result<(Session, ApiCallRecord), ProviderError> {
        let t = cloud.authenticate(credentials)?;
        let rec = ApiCallRecord::informative(CallKind::KeystoneAuth, &t, Some(t.body.value.clone()));
        Ok((
            Session {
                credentials: credentials.clone(),
                token: t.body,
                image_refs: BTreeMap::new(),
            },
            rec,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentRecord {
    pub action: MtdAction,
    pub calls: Vec<ApiCallRecord>,
    /// `list_servers` polls issued while waiting for completion.
    pub monitoring: Vec<ApiCallRecord>,
    pub outcome: Outcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ot_ms: Option<u64>,
    /// Model version after the deployment (unchanged on failure).
    pub inventory_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DeployError {
    #[error("action rejected before deployment: {0}")]
    Constraint(MtdError),
    #[error("provider rejected the action: {0}")]
    Rejected(ProviderError),
    #[error("token still expired after re-authentication")]
    TokenExpired,
    #[error("provider call failed: {0}")]
    Provider(ProviderError),
    #[error("provider state differs from the prediction: {0}")]
    StateMismatch(String),
    #[error("operation did not finish after {0} polls")]
    Stuck(usize),
}

impl DeployError {
    pub fn code(&self) -> &'static str {
        match self {
            DeployError::Constraint(e) => e.code(),
            DeployError::Rejected(_) => "DEPLOY_REJECTED",
            DeployError::TokenExpired => "TOKEN_EXPIRED",
            DeployError::Provider(e) => e.code(),
            DeployError::StateMismatch(_) => "STATE_MISMATCH",
            DeployError::Stuck(_) => "DEPLOY_TIMEOUT",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Deployment {
    pub record: DeploymentRecord,
    /// The next model snapshot on success; `None` when the deployment failed.
    pub state: Option<ModelState>,
    pub error: Option<DeployError>,
}

impl Deployment {
    pub fn succeeded(&self) -> bool {
        self.record.outcome == Outcome::Success
    }
}

struct Run<'a> {
    cloud: &'a dyn CloudApi,
    session: &'a mut Session,
    calls: Vec<ApiCallRecord>,
    monitoring: Vec<ApiCallRecord>,
}

type ProviderCall<'f, T> = dyn Fn(&dyn CloudApi, &str) -> Result<Timed<T>, ProviderError> + 'f;

impl Run<'_> {
    /// Issue one call, re-authenticating once on an expired token.
    fn call<T>(
        &mut self,
        kind: CallKind,
        monitoring: bool,
        f: &ProviderCall<'_, T>,
    ) -> Result<Timed<T>, DeployError> {
        let mut retried = false;
        loop {
            let token = self.session.token.value.clone();
            match f(self.cloud, &token) {
                Ok(t) => {
                    let mut rec = ApiCallRecord::informative(kind, &t, Some(token));
                    rec.class = kind.class();
                    if monitoring {
                        self.monitoring.push(rec);
                    } else {
                        self.calls.push(rec);
                    }
                    return Ok(t);
                }
                Err(ProviderError::TokenExpired) if !retried => {
                    retried = true;
                    match Session::open(self.cloud, &self.session.credentials.clone()) {
                        Ok((fresh, rec)) => {
                            self.calls.push(rec);
                            self.session.token = fresh.token;
                        }
                        Err(e) => {
                            self.calls.push(ApiCallRecord::failed(CallKind::KeystoneAuth, &e, None));
                            return Err(DeployError::Provider(e));
                        }
                    }
                }
                Err(e) => {
                    let rec = ApiCallRecord::failed(kind, &e, Some(token));
                    self.calls.push(rec);
                    return Err(match e {
                        ProviderError::TokenExpired => DeployError::TokenExpired,
                        e if e.is_rejection() => DeployError::Rejected(e),
                        e => DeployError::Provider(e),
                    });
                }
            }
        }
    }

    fn image_for(&mut self, os: &str, refresh: bool) -> Result<String, DeployError> {
        if refresh || !self.session.image_refs.contains_key(os) {
            let images = self.call(CallKind::ListImages, false, &|c, t| c.list_images(t))?;
            self.session.image_refs = images.body;
        }
        self.session
            .image_refs
            .get(os)
            .cloned()
            .ok_or_else(|| DeployError::Rejected(ProviderError::UnknownImage(os.to_string())))
    }

    fn operate(&mut self, action: &MtdAction, model: &ModelState) -> Result<Timed<OpAck>, DeployError> {
        let vm = model
            .inventory
            .vm(action.vm_id())
            .ok_or_else(|| DeployError::Rejected(ProviderError::UnknownVm(action.vm_id().into())))?
            .clone();
        match action {
            MtdAction::Diversity { new_os_variant, .. } => {
                let image = self.image_for(new_os_variant, true)?;
                self.call(CallKind::RebuildServer, false, &|c, t| c.rebuild_server(t, &vm.id, &image))
            }
            MtdAction::Redundancy { replica_count, .. } => {
                let image = self.image_for(&vm.os_variant, false)?;
                let req = CreateServersRequest {
                    image_ref: image,
                    flavor_ref: vm.flavor.clone(),
                    network_id: network_id(vm.network()),
                    host_id: vm.host_id.clone(),
                    max_count: *replica_count,
                    source_vm_id: vm.id.clone(),
                };
                self.call(CallKind::CreateServers, false, &|c, t| c.create_servers(t, &req))
            }
            MtdAction::Shuffle { target_host_id, .. } => {
                self.call(CallKind::LiveMigrate, false, &|c, t| c.live_migrate(t, &vm.id, target_host_id))
            }
        }
    }

    /// Poll until every server in `ids` is listed and active.
    fn wait(&mut self, ids: &[String]) -> Result<ServerListing, DeployError> {
        for _ in 0..MAX_POLLS {
            let listing = self.call(CallKind::ListServers, true, &|c, t| c.list_servers(t))?.body;
            let done = ids
                .iter()
                .all(|id| listing.servers.iter().any(|s| s.id == *id && s.is_active()));
            if done {
                return Ok(listing);
            }
        }
        Err(DeployError::Stuck(MAX_POLLS))
    }
}

/// Provider-visible fields of one server, as the model predicts them.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct ServerView {
    id: String,
    host_id: String,
    os_variant: String,
    flavor: String,
    internal_ip: Option<Ipv4Addr>,
    floating_ip: Option<Ipv4Addr>,
    enterprise: String,
    is_target: bool,
}

fn view_of_entry(s: &ServerEntry) -> ServerView {
    ServerView {
        id: s.id.clone(),
        host_id: s.host_id.clone(),
        os_variant: s.os_variant.clone(),
        flavor: s.flavor.clone(),
        internal_ip: s.fixed_ip(),
        floating_ip: s.floating_ip(),
        enterprise: s.metadata.get("enterprise").cloned().unwrap_or_default(),
        is_target: s.metadata.get("is_target").is_some_and(|v| v == "true"),
    }
}

fn predicted_views(state: &ModelState) -> Vec<ServerView> {
    let mut v: Vec<_> = state
        .inventory
        .vms
        .iter()
        .map(|vm| ServerView {
            id: vm.id.clone(),
            host_id: vm.host_id.clone(),
            os_variant: vm.os_variant.clone(),
            flavor: vm.flavor.clone(),
            internal_ip: Some(vm.internal_ip),
            floating_ip: vm.floating_ip,
            enterprise: vm.enterprise.clone(),
            is_target: vm.is_target,
        })
        .collect();
    v.sort();
    v
}

/// Compare a server listing with the model state. Returns a description
/// of the first difference.
pub fn reconcile(listing: &ServerListing, state: &ModelState) -> Result<(), String> {
    let mut seen: Vec<_> = listing.servers.iter().map(view_of_entry).collect();
    seen.sort();
    let want = predicted_views(state);
    if seen == want {
        return Ok(());
    }
    for w in &want {
        match seen.iter().find(|s| s.id == w.id) {
            None => return Err(format!("{} missing from provider listing", w.id)),
            Some(s) if s != w => return Err(format!("{}: provider has {s:?}, model predicts {w:?}", w.id)),
            _ => {}
        }
    }
    let extra = seen.iter().find(|s| !want.iter().any(|w| w.id == s.id));
    Err(format!(
        "provider lists unexpected server {}",
        extra.map(|s| s.id.as_str()).unwrap_or("?")
    ))
}

/// Deploy `action` without checking model constraints first; the provider
/// is the only judge. Provider and model are left at their prior versions
/// when the provider refuses.
pub fn deploy_action(
    cloud: &dyn CloudApi,
    session: &mut Session,
    model: &ModelState,
    profiles: &OsProfileCatalog,
    action: &MtdAction,
) -> Deployment {
    let fail = |calls, monitoring, error: DeployError| Deployment {
        record: DeploymentRecord {
            action: action.clone(),
            calls,
            monitoring,
            outcome: Outcome::Failed,
            ot_ms: None,
            inventory_version: model.version(),
            error: Some(error.code().to_string()),
        },
        state: None,
        error: Some(error),
    };

    let prediction = match project_action(model, action, profiles) {
        Ok(p) => p,
        Err(e) => return fail(Vec::new(), Vec::new(), DeployError::Constraint(e)),
    };

    let mut run = Run {
        cloud,
        session,
        calls: Vec::new(),
        monitoring: Vec::new(),
    };
    let ack = match run.operate(action, model) {
        Ok(a) => a,
        Err(e) => return fail(run.calls, run.monitoring, e),
    };
    let listing = match run.wait(&ack.body.server_ids) {
        Ok(l) => l,
        Err(e) => return fail(run.calls, run.monitoring, e),
    };

    let ot = ack
        .body
        .server_ids
        .iter()
        .filter_map(|id| listing.servers.iter().find(|s| s.id == *id))
        .map(|s| s.updated_ms.saturating_sub(ack.started_ms))
        .max();
    if let Some(op) = run.calls.last_mut() {
        op.ot_ms = ot;
    }

    if let Err(diff) = reconcile(&listing, &prediction) {
        return fail(run.calls, run.monitoring, DeployError::StateMismatch(diff));
    }

    let mut next = prediction;
    next.inventory.version = model.version() + 1;
    Deployment {
        record: DeploymentRecord {
            action: action.clone(),
            calls: run.calls,
            monitoring: run.monitoring,
            outcome: Outcome::Success,
            ot_ms: ot,
            inventory_version: next.version(),
            error: None,
        },
        state: Some(next),
        error: None,
    }
}

/// Check model constraints, then deploy. Constraint violations issue no
/// provider calls.
pub fn deploy_checked(
    cloud: &dyn CloudApi,
    session: &mut Session,
    model: &ModelState,
    profiles: &OsProfileCatalog,
    action: &MtdAction,
) -> Deployment {
    if let Err(e) = check_action(&model.inventory, profiles, action) {
        let error = DeployError::Constraint(e);
        return Deployment {
            record: DeploymentRecord {
                action: action.clone(),
                calls: Vec::new(),
                monitoring: Vec::new(),
                outcome: Outcome::Failed,
                ot_ms: None,
                inventory_version: model.version(),
                error: Some(error.code().to_string()),
            },
            state: None,
            error: Some(error),
        };
    }
    deploy_action(cloud, session, model, profiles, action)
}
