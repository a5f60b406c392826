//! Append-only snapshot history, optionally mirrored to a directory with one
//! JSON file per version.

use std::fs;
use std::path::{Path, PathBuf};

use harmcloud_core::metrics::{evaluate_pool, MetricPool, MetricReport, PathCaps};
use harmcloud_core::mtd::{ModelState, MtdAction};
use harmcloud_core::orchestrator::DeploymentRecord;
use harmcloud_core::vuln::CvssCatalog;
use harmcloud_core::Error;
use serde::{Deserialize, Serialize};

/// Where a snapshot came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Provenance {
    Initial,
    Action { action: MtdAction, record: Box<DeploymentRecord> },
    Rescan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u64,
    pub state: ModelState,
    /// Canonical HARM document of `state`.
    pub harm: serde_json::Value,
    /// All four metrics under default caps in lossy mode.
    pub metrics: MetricReport,
    pub provenance: Provenance,
}

impl Snapshot {
    pub fn build(mut state: ModelState, version: u64, catalog: &CvssCatalog, provenance: Provenance) -> Result<Self, Error> {
        state.inventory.version = version;
        let harm = state.harm(catalog)?;
        let metrics = evaluate_pool(&harm, &MetricPool::all().with_caps(PathCaps::lossy()))?;
        Ok(Self {
            version,
            harm: harm.to_canonical_value(),
            state,
            metrics,
            provenance,
        })
    }
}

#[derive(Debug, Default)]
pub struct SnapshotStore {
    history: Vec<Snapshot>,
    dir: Option<PathBuf>,
}

fn file_name(version: u64) -> String {
    format!("v{version:08}.json")
}

fn store_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Store(format!("{}: {e}", path.display()))
}

impl SnapshotStore {
    pub fn in_memory(initial: Snapshot) -> Self {
        Self {
            history: vec![initial],
            dir: None,
        }
    }

    /// Open `dir`, loading every snapshot already there. An empty or missing
    /// directory is seeded with `initial()`.
    pub fn open(dir: impl Into<PathBuf>, initial: impl FnOnce() -> Result<Snapshot, Error>) -> Result<Self, Error> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| store_err(&dir, e))?;
        let mut names: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| store_err(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with('v') && n.ends_with(".json"))
            })
            .collect();
        names.sort();
        let mut history = Vec::with_capacity(names.len());
        for path in names {
            let doc = fs::read_to_string(&path).map_err(|e| store_err(&path, e))?;
            let snap: Snapshot = serde_json::from_str(&doc).map_err(|e| store_err(&path, e))?;
            if history.last().is_some_and(|prev: &Snapshot| prev.version >= snap.version) {
                return Err(store_err(&path, "versions out of order"));
            }
            history.push(snap);
        }
        let mut store = Self { history, dir: Some(dir) };
        if store.history.is_empty() {
            let first = initial()?;
            store.write(&first)?;
            store.history.push(first);
        }
        Ok(store)
    }

    fn write(&self, snap: &Snapshot) -> Result<(), Error> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let path = dir.join(file_name(snap.version));
        if path.exists() {
            return Err(store_err(&path, "snapshot already written"));
        }
        let doc = serde_json::to_string_pretty(snap).map_err(|e| store_err(&path, e))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, doc + "\n").map_err(|e| store_err(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| store_err(&path, e))
    }

    pub fn current(&self) -> &Snapshot {
        self.history.last().expect("store is never empty")
    }

    pub fn version(&self) -> u64 {
        self.current().version
    }

    pub fn get(&self, version: u64) -> Option<&Snapshot> {
        self.history.iter().find(|s| s.version == version)
    }

    pub fn history(&self) -> &[Snapshot] {
        &self.history
    }

    pub fn append(&mut self, snap: Snapshot) -> Result<(), Error> {
        if snap.version <= self.version() {
            return Err(Error::VersionConflict(format!(
                "snapshot {} does not follow {}",
                snap.version,
                self.version()
            )));
        }
        self.write(&snap)?;
        self.history.push(snap);
        Ok(())
    }

    /// Deployment records in the order they were applied.
    pub fn deployments(&self) -> Vec<&DeploymentRecord> {
        self.history
            .iter()
            .filter_map(|s| match &s.provenance {
                Provenance::Action { record, .. } => Some(record.as_ref()),
                _ => None,
            })
            .collect()
    }
}
