//! CVSS records, scan reports and OS vulnerability profiles.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inventory::CloudInventory;

/// VM id → CVE ids found on it.
pub type VulnMap = BTreeMap<String, Vec<String>>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VulnError {
    #[error("unknown CVE `{0}`")]
    UnknownCve(String),
    #[error("malformed scan report: {0}")]
    MalformedReport(String),
    #[error("scan report names unknown VM `{0}`")]
    UnknownVm(String),
    #[error("invalid CVSS record {cve_id}: {reason}")]
    InvalidRecord { cve_id: String, reason: String },
    #[error("malformed catalog: {0}")]
    MalformedCatalog(String),
}

impl VulnError {
    pub fn code(&self) -> &'static str {
        match self {
            VulnError::UnknownCve(_) => "UNKNOWN_CVE",
            VulnError::MalformedReport(_) => "MALFORMED_REPORT",
            VulnError::UnknownVm(_) => "UNKNOWN_VM",
            VulnError::InvalidRecord { .. } => "INVALID_RECORD",
            VulnError::MalformedCatalog(_) => "MALFORMED_CATALOG",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Severity {
    Low,
    Medium,
    High,
    Critical,
}

impl Severity {
    /// CVSS v3 qualitative band for a base score.
    pub fn from_base_score(score: f64) -> Self {
        if score >= 9.0 {
            Severity::Critical
        } else if score >= 7.0 {
            Severity::High
        } else if score >= 4.0 {
            Severity::Medium
        } else {
            Severity::Low
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvssRecord {
    pub cve_id: String,
    pub base_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub impact_subscore: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exploitability_subscore: Option<f64>,
    pub severity: Severity,
}

impl CvssRecord {
    pub fn new(cve_id: impl Into<String>, base_score: f64, impact: Option<f64>) -> Self {
        Self {
            cve_id: cve_id.into(),
            base_score,
            impact_subscore: impact,
            exploitability_subscore: None,
            severity: Severity::from_base_score(base_score),
        }
    }

    pub fn validate(&self) -> Result<(), VulnError> {
        let bad = |reason: String| VulnError::InvalidRecord {
            cve_id: self.cve_id.clone(),
            reason,
        };
        if !is_cve_id(&self.cve_id) {
            return Err(bad("id does not match CVE-YYYY-NNNN".into()));
        }
        let scores = [
            ("base_score", Some(self.base_score)),
            ("impact_subscore", self.impact_subscore),
            ("exploitability_subscore", self.exploitability_subscore),
        ];
        for (name, score) in scores {
            if let Some(s) = score {
                if !(0.0..=10.0).contains(&s) {
                    return Err(bad(format!("{name} {s} outside [0, 10]")));
                }
            }
        }
        Ok(())
    }
}

/// `CVE-` + four digits + `-` + four or more digits.
pub fn is_cve_id(id: &str) -> bool {
    let Some(rest) = id.strip_prefix("CVE-") else {
        return false;
    };
    let Some((year, seq)) = rest.split_once('-') else {
        return false;
    };
    year.len() == 4
        && year.bytes().all(|b| b.is_ascii_digit())
        && seq.len() >= 4
        && seq.bytes().all(|b| b.is_ascii_digit())
}

/// Exact-match CVE lookup table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CvssCatalog {
    records: BTreeMap<String, CvssRecord>,
}

impl CvssCatalog {
    pub fn new(records: impl IntoIterator<Item = CvssRecord>) -> Result<Self, VulnError> {
        let mut map = BTreeMap::new();
        for rec in records {
            rec.validate()?;
            if map.insert(rec.cve_id.clone(), rec).is_some() {
                return Err(VulnError::MalformedCatalog("duplicate CVE id".into()));
            }
        }
        Ok(Self { records: map })
    }

    /// Parse the JSON array form.
    pub fn from_json(doc: &str) -> Result<Self, VulnError> {
        let records: Vec<CvssRecord> =
            serde_json::from_str(doc).map_err(|e| VulnError::MalformedCatalog(e.to_string()))?;
        Self::new(records)
    }

    pub fn lookup(&self, cve_id: &str) -> Result<&CvssRecord, VulnError> {
        self.records
            .get(cve_id)
            .ok_or_else(|| VulnError::UnknownCve(cve_id.to_string()))
    }

    pub fn contains(&self, cve_id: &str) -> bool {
        self.records.contains_key(cve_id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &CvssRecord> {
        self.records.values()
    }

    pub fn to_json(&self) -> String {
        let records: Vec<&CvssRecord> = self.records.values().collect();
        serde_json::to_string_pretty(&records).expect("records serialize")
    }
}

/// Free-function form of [`CvssCatalog::lookup`].
pub fn lookup_cve<'a>(catalog: &'a CvssCatalog, cve_id: &str) -> Result<&'a CvssRecord, VulnError> {
    catalog.lookup(cve_id)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeafMetrics {
    pub probability: f64,
    pub impact: f64,
    pub cost: f64,
    #[serde(with = "crate::num")]
    pub mttc: f64,
}

pub fn leaf_metrics(rec: &CvssRecord) -> LeafMetrics {
    let probability = rec.base_score / 10.0;
    LeafMetrics {
        probability,
        impact: rec.impact_subscore.unwrap_or(rec.base_score),
        cost: 10.0 - rec.base_score,
        mttc: if probability > 0.0 {
            1.0 / probability
        } else {
            f64::INFINITY
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub scanned_at: DateTime<Utc>,
    #[serde(default)]
    pub findings: VulnMap,
}

impl ScanReport {
    pub fn empty(scanned_at: DateTime<Utc>) -> Self {
        Self {
            scanned_at,
            findings: VulnMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scan report serializes")
    }

    /// Equality that ignores the order of CVE ids per VM.
    pub fn same_findings(&self, other: &ScanReport) -> bool {
        let norm = |r: &ScanReport| -> BTreeMap<String, BTreeSet<String>> {
            r.findings
                .iter()
                .map(|(vm, cves)| (vm.clone(), cves.iter().cloned().collect()))
                .collect()
        };
        self.scanned_at == other.scanned_at && norm(self) == norm(other)
    }
}

/// Parse a scan report document. When `catalog` is supplied every CVE must
/// resolve; when `inventory` is supplied every VM must exist in it.
/// Unrecognised keys (e.g. scanner threat annotations) are ignored.
pub fn parse_scan_report(
    doc: &str,
    catalog: Option<&CvssCatalog>,
    inventory: Option<&CloudInventory>,
) -> Result<ScanReport, VulnError> {
    let report: ScanReport =
        serde_json::from_str(doc).map_err(|e| VulnError::MalformedReport(e.to_string()))?;
    if let Some(inv) = inventory {
        if let Some(vm) = report.findings.keys().find(|vm| inv.vm(vm).is_none()) {
            return Err(VulnError::UnknownVm(vm.clone()));
        }
    }
    if let Some(cat) = catalog {
        for cve in report.findings.values().flatten() {
            cat.lookup(cve)?;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OsVulnProfile {
    pub os_variant: String,
    pub cve_ids: Vec<String>,
    #[serde(default)]
    pub license_cost: f64,
}

/// OS variant → vulnerability profile, unique per variant.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OsProfileCatalog {
    profiles: BTreeMap<String, OsVulnProfile>,
}

impl OsProfileCatalog {
    pub fn new(
        profiles: impl IntoIterator<Item = OsVulnProfile>,
        catalog: Option<&CvssCatalog>,
    ) -> Result<Self, VulnError> {
        let mut map = BTreeMap::new();
        for p in profiles {
            if p.license_cost < 0.0 {
                return Err(VulnError::MalformedCatalog(format!(
                    "negative license cost for {}",
                    p.os_variant
                )));
            }
            if let Some(cat) = catalog {
                for cve in &p.cve_ids {
                    cat.lookup(cve)?;
                }
            }
            let key = p.os_variant.clone();
            if map.insert(key.clone(), p).is_some() {
                return Err(VulnError::MalformedCatalog(format!("duplicate profile {key}")));
            }
        }
        Ok(Self { profiles: map })
    }

    pub fn from_json(doc: &str, catalog: Option<&CvssCatalog>) -> Result<Self, VulnError> {
        let profiles: Vec<OsVulnProfile> =
            serde_json::from_str(doc).map_err(|e| VulnError::MalformedCatalog(e.to_string()))?;
        Self::new(profiles, catalog)
    }

    pub fn get(&self, os_variant: &str) -> Option<&OsVulnProfile> {
        self.profiles.get(os_variant)
    }

    pub fn variants(&self) -> impl Iterator<Item = &str> {
        self.profiles.keys().map(String::as_str)
    }

    pub fn insert(&mut self, profile: OsVulnProfile) {
        self.profiles.insert(profile.os_variant.clone(), profile);
    }
}
