//! The backend engine: one snapshot store, one provider connection, and the
//! analysis and deployment operations the service and CLI expose.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use harmcloud_core::collector::{collect_information, CollectionResult};
use harmcloud_core::fixtures::FixtureSet;
use harmcloud_core::harm::Harm;
use harmcloud_core::metrics::{enumerate_paths, evaluate_pool, Metric, MetricPool, MetricReport, PathCaps, PathSet};
use harmcloud_core::mtd::{candidate_actions, rank_actions, whatif, MetricDelta, ModelState, MtdAction, RankedAction};
use harmcloud_core::orchestrator::{deploy_checked, ApiCallRecord, DeploymentRecord, Session};
use harmcloud_core::provider::{CloudApi, Credentials, ProviderSim, ScannerApi};
use harmcloud_core::vuln::{CvssCatalog, OsProfileCatalog, ScanReport};
use harmcloud_core::Error;
use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use crate::store::{Provenance, Snapshot, SnapshotStore};

/// A failed apply, with the partial record when the provider was contacted.
#[derive(Debug)]
pub struct ApplyFailure {
    pub error: Error,
    pub record: Option<Box<DeploymentRecord>>,
}

impl From<Error> for ApplyFailure {
    fn from(error: Error) -> Self {
        Self { error, record: None }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RescanOutcome {
    pub version: u64,
    pub calls: Vec<ApiCallRecord>,
}

pub struct Engine {
    catalog: CvssCatalog,
    profiles: OsProfileCatalog,
    cloud: Arc<dyn CloudApi>,
    scanner: Arc<dyn ScannerApi>,
    credentials: Credentials,
    scanner_credentials: Credentials,
    session: Mutex<Option<Session>>,
    store: RwLock<SnapshotStore>,
    /// Held for the whole of an apply or rescan; a second writer fails fast.
    writer: Mutex<()>,
}

impl Engine {
    /// Engine over an in-process provider simulator. With a store directory
    /// that already holds history, the simulator is seeded from its current
    /// snapshot so model and provider agree.
    pub fn from_fixtures(fx: &FixtureSet, store_dir: Option<&Path>) -> Result<Self, Error> {
        let store = open_store(fx, store_dir)?;
        let seed = &store.current().state;
        let scan = ScanReport {
            scanned_at: fx.scan.scanned_at,
            findings: seed.vulns.clone(),
        };
        let sim = Arc::new(
            ProviderSim::new(fx.provider.clone(), fx.latency.clone(), seed.inventory.clone(), scan)
                .with_os_profiles(fx.profiles.clone()),
        );
        Ok(Self::assemble(fx, sim.clone(), sim, store))
    }

    /// Engine over an external provider (for instance the HTTP client).
    pub fn with_provider(
        fx: &FixtureSet,
        cloud: Arc<dyn CloudApi>,
        scanner: Arc<dyn ScannerApi>,
        store_dir: Option<&Path>,
    ) -> Result<Self, Error> {
        let store = open_store(fx, store_dir)?;
        Ok(Self::assemble(fx, cloud, scanner, store))
    }

    fn assemble(fx: &FixtureSet, cloud: Arc<dyn CloudApi>, scanner: Arc<dyn ScannerApi>, store: SnapshotStore) -> Self {
        Self {
            catalog: fx.catalog.clone(),
            profiles: fx.profiles.clone(),
            cloud,
            scanner,
            credentials: fx.provider.credentials.clone(),
            scanner_credentials: fx.provider.scanner_credentials.clone(),
            session: Mutex::new(None),
            store: RwLock::new(store),
            writer: Mutex::new(()),
        }
    }

    pub fn catalog(&self) -> &CvssCatalog {
        &self.catalog
    }

    pub fn profiles(&self) -> &OsProfileCatalog {
        &self.profiles
    }

    pub fn version(&self) -> u64 {
        self.store.read().version()
    }

    /// Current snapshot, or a historical one.
    pub fn snapshot(&self, version: Option<u64>) -> Result<Snapshot, Error> {
        let store = self.store.read();
        match version {
            None => Ok(store.current().clone()),
            Some(v) => store.get(v).cloned().ok_or(Error::UnknownVersion(v)),
        }
    }

    pub fn history(&self) -> Vec<Snapshot> {
        self.store.read().history().to_vec()
    }

    pub fn deployments(&self) -> Vec<DeploymentRecord> {
        self.store.read().deployments().into_iter().cloned().collect()
    }

    pub fn harm(&self, version: Option<u64>) -> Result<(u64, Harm), Error> {
        let snap = self.snapshot(version)?;
        Ok((snap.version, snap.state.harm(&self.catalog)?))
    }

    pub fn metrics(&self, pool: &MetricPool, version: Option<u64>) -> Result<(u64, MetricReport), Error> {
        let (v, harm) = self.harm(version)?;
        Ok((v, evaluate_pool(&harm, pool)?))
    }

    pub fn paths(&self, caps: PathCaps, version: Option<u64>) -> Result<(u64, PathSet), Error> {
        let (v, harm) = self.harm(version)?;
        Ok((v, enumerate_paths(&harm, caps)?))
    }

    /// Every candidate with its delta, best first for `objective`. Path
    /// enumeration runs lossy so a large model still answers.
    pub fn actions(&self, pool: &MetricPool, objective: Metric) -> Result<(u64, Vec<RankedAction>), Error> {
        let snap = self.snapshot(None)?;
        let harm = snap.state.harm(&self.catalog)?;
        let pool = pool.clone().with_caps(PathCaps { strict: false, ..pool.caps });
        let cands = candidate_actions(&snap.state.inventory, &self.profiles);
        let ranked = rank_actions(&cands, &harm, &snap.state, &self.catalog, &self.profiles, &pool, objective)?;
        Ok((snap.version, ranked))
    }

    pub fn whatif(&self, action: &MtdAction, pool: &MetricPool) -> Result<(u64, MetricDelta), Error> {
        let snap = self.snapshot(None)?;
        let harm = snap.state.harm(&self.catalog)?;
        let delta = whatif(&harm, &snap.state, &self.catalog, &self.profiles, action, pool)?;
        Ok((snap.version, delta))
    }

    /// Deploy `action` on top of version `base` (the current one when
    /// `None`). A concurrent or stale apply gets VERSION_CONFLICT.
    pub fn apply(&self, action: &MtdAction, base: Option<u64>) -> Result<DeploymentRecord, ApplyFailure> {
        let base = base.unwrap_or_else(|| self.version());
        let Some(_guard) = self.writer.try_lock() else {
            return Err(Error::VersionConflict(format!("another write is in progress on version {base}")).into());
        };
        let current = self.snapshot(None)?;
        if current.version != base {
            return Err(Error::VersionConflict(format!(
                "applied against version {base}, current is {}",
                current.version
            ))
            .into());
        }

        let mut session = self.session()?;
        let d = deploy_checked(self.cloud.as_ref(), &mut session, &current.state, &self.profiles, action);
        *self.session.lock() = Some(session);
        let Some(next) = d.state else {
            let error = d.error.map(Error::from).unwrap_or_else(|| Error::Store("deployment failed".into()));
            let record = (!d.record.calls.is_empty()).then(|| Box::new(d.record));
            return Err(ApplyFailure { error, record });
        };

        let snap = Snapshot::build(
            next,
            current.version + 1,
            &self.catalog,
            Provenance::Action {
                action: action.clone(),
                record: Box::new(d.record.clone()),
            },
        )?;
        self.store.write().append(snap)?;
        Ok(d.record)
    }

    /// Collect from the provider and append the result as a new snapshot.
    pub fn rescan(&self) -> Result<RescanOutcome, Error> {
        let Some(_guard) = self.writer.try_lock() else {
            return Err(Error::VersionConflict("another write is in progress".into()));
        };
        let current = self.snapshot(None)?;
        let raw = self.collect(&current.state)?;
        let gate_specs: BTreeMap<_, _> = current
            .state
            .gate_specs
            .iter()
            .filter(|(vm, _)| raw.inventory.vm(vm).is_some())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let state = ModelState {
            inventory: raw.inventory,
            vulns: raw.vms_vulns,
            gate_specs,
        };
        *self.session.lock() = Some(raw.session);
        let version = current.version + 1;
        let snap = Snapshot::build(state, version, &self.catalog, Provenance::Rescan)?;
        self.store.write().append(snap)?;
        Ok(RescanOutcome {
            version,
            calls: raw.raw_call_log,
        })
    }

    /// One collection run against the provider; the store is not touched.
    pub fn collect(&self, basis: &ModelState) -> Result<CollectionResult, Error> {
        Ok(collect_information(
            self.cloud.as_ref(),
            &self.credentials,
            self.scanner.as_ref(),
            &self.scanner_credentials,
            Some(&self.catalog),
            &basis.inventory.constraints,
        )?)
    }

    fn session(&self) -> Result<Session, Error> {
        if let Some(s) = self.session.lock().clone() {
            return Ok(s);
        }
        let (s, _) = Session::open(self.cloud.as_ref(), &self.credentials)?;
        Ok(s)
    }
}

fn open_store(fx: &FixtureSet, dir: Option<&Path>) -> Result<SnapshotStore, Error> {
    let state = fx.model_state();
    let initial = || Snapshot::build(state.clone(), state.version(), &fx.catalog, Provenance::Initial);
    match dir {
        Some(d) => SnapshotStore::open(d, initial),
        None => Ok(SnapshotStore::in_memory(initial()?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn apply_then_history() {
        let fx = FixtureSet::bundled();
        let eng = Engine::from_fixtures(&fx, None).unwrap();
        let v0 = eng.version();
        let a = MtdAction::Shuffle {
            vm_id: "vm6-EP2".into(),
            target_host_id: "h3".into(),
        };
        let rec = eng.apply(&a, Some(v0)).unwrap();
        assert_eq!(rec.ot_ms, Some(7216));
        assert_eq!(eng.version(), v0 + 1);
        assert_eq!(eng.deployments().len(), 1);
        let stale = eng.apply(&a, Some(v0)).unwrap_err();
        assert_eq!(stale.error.code(), "VERSION_CONFLICT");
    }

    #[test]
    fn constraint_violation_keeps_version() {
        let fx = FixtureSet::bundled();
        let eng = Engine::from_fixtures(&fx, None).unwrap();
        let v0 = eng.version();
        let a = MtdAction::Diversity {
            vm_id: "vm6-EP2".into(),
            new_os_variant: "Plan9".into(),
        };
        let err = eng.apply(&a, None).unwrap_err();
        assert_eq!(err.error.code(), "CONSTRAINT_VIOLATION");
        assert!(err.record.is_none());
        assert_eq!(eng.version(), v0);
    }

    #[test]
    fn rescan_after_apply_agrees_with_model() {
        let fx = FixtureSet::bundled();
        let eng = Engine::from_fixtures(&fx, None).unwrap();
        let a = MtdAction::Redundancy {
            vm_id: "vm6-EP2".into(),
            replica_count: 2,
        };
        eng.apply(&a, None).unwrap();
        let before = eng.snapshot(None).unwrap();
        let out = eng.rescan().unwrap();
        assert_eq!(out.calls.len(), 5);
        let after = eng.snapshot(None).unwrap();
        assert_eq!(after.version, before.version + 1);
        assert_eq!(after.metrics.values, before.metrics.values);
        assert_eq!(after.harm["upper"], before.harm["upper"]);
    }

    #[test]
    fn reopened_store_reseeds_the_simulator() {
        let fx = FixtureSet::bundled();
        let dir = tempfile::tempdir().unwrap();
        {
            let eng = Engine::from_fixtures(&fx, Some(dir.path())).unwrap();
            let a = MtdAction::Shuffle {
                vm_id: "vm6-EP2".into(),
                target_host_id: "h3".into(),
            };
            eng.apply(&a, None).unwrap();
        }
        let eng = Engine::from_fixtures(&fx, Some(dir.path())).unwrap();
        assert_eq!(eng.history().len(), 2);
        // The simulator already has vm6-EP2 on h3, so shuffling back works.
        let back = MtdAction::Shuffle {
            vm_id: "vm6-EP2".into(),
            target_host_id: "h2".into(),
        };
        eng.apply(&back, None).unwrap();
    }
}
