//! Loading a fixture directory (or the copy compiled into the binary).
//!
//! A directory may carry a `manifest.json` mapping roles to file names:
//! `{"inventory": "...", "scan_report": "...", "catalog": "...",
//! "gate_specs": "...", "os_profiles": "...", "latency": "...",
//! "provider": "..."}`. Roles without a manifest entry use the default file
//! name. Latency and provider settings fall back to the bundled copies when
//! the directory has none; gate specs and OS profiles fall back to empty.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::harm::GateSpecs;
use crate::inventory::CloudInventory;
use crate::mtd::ModelState;
use crate::provider::{LatencyProfile, ProviderConfig, ProviderSim};
use crate::vuln::{parse_scan_report, CvssCatalog, OsProfileCatalog, ScanReport};

pub const INVENTORY_FILE: &str = "table1_inventory.json";
pub const CATALOG_FILE: &str = "nvd_catalog.json";
pub const SCAN_FILE: &str = "table1_scan.json";
pub const GATE_SPECS_FILE: &str = "table1_gate_specs.json";
pub const OS_PROFILES_FILE: &str = "os_profiles.json";
pub const LATENCY_FILE: &str = "table2_latency.json";
pub const PROVIDER_FILE: &str = "provider.json";

const BUNDLED_INVENTORY: &str = include_str!("../../../fixtures/table1_inventory.json");
const BUNDLED_CATALOG: &str = include_str!("../../../fixtures/nvd_catalog.json");
const BUNDLED_SCAN: &str = include_str!("../../../fixtures/table1_scan.json");
const BUNDLED_GATE_SPECS: &str = include_str!("../../../fixtures/table1_gate_specs.json");
const BUNDLED_OS_PROFILES: &str = include_str!("../../../fixtures/os_profiles.json");
const BUNDLED_LATENCY: &str = include_str!("../../../fixtures/table2_latency.json");
const BUNDLED_PROVIDER: &str = include_str!("../../../fixtures/provider.json");

const CHAIN_INVENTORY: &str = include_str!("../../../fixtures/chain/chain_inventory.json");
const CHAIN_CATALOG: &str = include_str!("../../../fixtures/chain/chain_catalog.json");
const CHAIN_SCAN: &str = include_str!("../../../fixtures/chain/chain_scan.json");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FixtureError {
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("invalid {role} fixture: {message}")]
    Parse { role: &'static str, message: String },
}

impl FixtureError {
    pub fn code(&self) -> &'static str {
        match self {
            FixtureError::Io { .. } => "FIXTURE_IO",
            FixtureError::Parse { .. } => "FIXTURE_PARSE",
        }
    }
}

#[derive(Debug, Default, Deserialize)]
struct Manifest {
    inventory: Option<String>,
    scan_report: Option<String>,
    catalog: Option<String>,
    gate_specs: Option<String>,
    os_profiles: Option<String>,
    latency: Option<String>,
    provider: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSet {
    pub inventory: CloudInventory,
    pub catalog: CvssCatalog,
    pub scan: ScanReport,
    pub gate_specs: GateSpecs,
    pub profiles: OsProfileCatalog,
    pub latency: LatencyProfile,
    pub provider: ProviderConfig,
}

struct Sources {
    inventory: String,
    catalog: String,
    scan: String,
    gate_specs: Option<String>,
    os_profiles: Option<String>,
    latency: String,
    provider: String,
}

fn parse_err(role: &'static str) -> impl Fn(String) -> FixtureError {
    move |message| FixtureError::Parse { role, message }
}

impl FixtureSet {
    /// The running example compiled into the crate.
    pub fn bundled() -> Self {
        Self::parse(Sources {
            inventory: BUNDLED_INVENTORY.into(),
            catalog: BUNDLED_CATALOG.into(),
            scan: BUNDLED_SCAN.into(),
            gate_specs: Some(BUNDLED_GATE_SPECS.into()),
            os_profiles: Some(BUNDLED_OS_PROFILES.into()),
            latency: BUNDLED_LATENCY.into(),
            provider: BUNDLED_PROVIDER.into(),
        })
        .expect("bundled fixtures are valid")
    }

    /// The three-VM chain INTERNET → vm1 → vm2 → vm3.
    pub fn bundled_chain() -> Self {
        Self::parse(Sources {
            inventory: CHAIN_INVENTORY.into(),
            catalog: CHAIN_CATALOG.into(),
            scan: CHAIN_SCAN.into(),
            gate_specs: None,
            os_profiles: None,
            latency: BUNDLED_LATENCY.into(),
            provider: BUNDLED_PROVIDER.into(),
        })
        .expect("bundled chain fixture is valid")
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, FixtureError> {
        let dir = dir.as_ref();
        let read = |path: PathBuf| {
            fs::read_to_string(&path).map_err(|e| FixtureError::Io {
                path,
                message: e.to_string(),
            })
        };
        let manifest_path = dir.join("manifest.json");
        let manifest: Manifest = if manifest_path.exists() {
            serde_json::from_str(&read(manifest_path)?).map_err(|e| parse_err("manifest")(e.to_string()))?
        } else {
            Manifest::default()
        };
        let path = |given: &Option<String>, default: &str| dir.join(given.as_deref().unwrap_or(default));
        let optional = |given: &Option<String>, default: &str| -> Result<Option<String>, FixtureError> {
            let p = path(given, default);
            if given.is_some() || p.exists() {
                read(p).map(Some)
            } else {
                Ok(None)
            }
        };

        Self::parse(Sources {
            inventory: read(path(&manifest.inventory, INVENTORY_FILE))?,
            catalog: read(path(&manifest.catalog, CATALOG_FILE))?,
            scan: read(path(&manifest.scan_report, SCAN_FILE))?,
            gate_specs: optional(&manifest.gate_specs, GATE_SPECS_FILE)?,
            os_profiles: optional(&manifest.os_profiles, OS_PROFILES_FILE)?,
            latency: optional(&manifest.latency, LATENCY_FILE)?.unwrap_or_else(|| BUNDLED_LATENCY.into()),
            provider: optional(&manifest.provider, PROVIDER_FILE)?.unwrap_or_else(|| BUNDLED_PROVIDER.into()),
        })
    }

    fn parse(src: Sources) -> Result<Self, FixtureError> {
        let inventory = CloudInventory::from_json(&src.inventory).map_err(|e| parse_err("inventory")(e.to_string()))?;
        let catalog = CvssCatalog::from_json(&src.catalog).map_err(|e| parse_err("catalog")(e.to_string()))?;
        let scan = parse_scan_report(&src.scan, Some(&catalog), Some(&inventory))
            .map_err(|e| parse_err("scan report")(e.to_string()))?;
        let gate_specs = match &src.gate_specs {
            Some(doc) => serde_json::from_str(doc).map_err(|e| parse_err("gate specs")(e.to_string()))?,
            None => GateSpecs::new(),
        };
        let profiles = match &src.os_profiles {
            Some(doc) => {
                OsProfileCatalog::from_json(doc, Some(&catalog)).map_err(|e| parse_err("os profiles")(e.to_string()))?
            }
            None => OsProfileCatalog::default(),
        };
        let latency = LatencyProfile::from_json(&src.latency).map_err(|e| parse_err("latency")(e.to_string()))?;
        let provider = ProviderConfig::from_json(&src.provider).map_err(|e| parse_err("provider")(e.to_string()))?;
        Ok(Self {
            inventory,
            catalog,
            scan,
            gate_specs,
            profiles,
            latency,
            provider,
        })
    }

    /// Model state as the fixtures describe it, before any collection run.
    pub fn model_state(&self) -> ModelState {
        ModelState {
            inventory: self.inventory.clone(),
            vulns: self.scan.findings.clone(),
            gate_specs: self.gate_specs.clone(),
        }
    }

    /// A provider simulator seeded with this fixture set.
    pub fn provider_sim(&self) -> ProviderSim {
        ProviderSim::new(
            self.provider.clone(),
            self.latency.clone(),
            self.inventory.clone(),
            self.scan.clone(),
        )
        .with_os_profiles(self.profiles.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_sets_parse() {
        let t1 = FixtureSet::bundled();
        assert_eq!(t1.inventory.vms.len(), 17);
        assert_eq!(t1.catalog.len(), 20);
        assert_eq!(t1.profiles.variants().count(), 3);
        assert!(t1.gate_specs.contains_key("DB"));
        let chain = FixtureSet::bundled_chain();
        assert_eq!(chain.inventory.vms.len(), 3);
        assert!(chain.gate_specs.is_empty());
    }

    #[test]
    fn directory_load_matches_bundled() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
        assert_eq!(FixtureSet::load(&root).unwrap(), FixtureSet::bundled());
        assert_eq!(FixtureSet::load(root.join("chain")).unwrap(), FixtureSet::bundled_chain());
    }

    #[test]
    fn missing_directory_is_an_io_error() {
        let err = FixtureSet::load("/nonexistent/fixtures").unwrap_err();
        assert_eq!(err.code(), "FIXTURE_IO");
    }

    #[test]
    fn bad_json_names_the_role() {
        let dir = tempfile::tempdir().unwrap();
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/chain");
        for f in ["chain_catalog.json", "chain_scan.json", "manifest.json"] {
            fs::copy(root.join(f), dir.path().join(f)).unwrap();
        }
        fs::write(dir.path().join("chain_inventory.json"), "{not json").unwrap();
        match FixtureSet::load(dir.path()) {
            Err(FixtureError::Parse { role, .. }) => assert_eq!(role, "inventory"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
