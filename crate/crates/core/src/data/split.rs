//! Semi-supervised protocol splits.
//!
//! All fractions are taken over ascending subject IDs and round down to
//! whole subjects. The dev set is the last 20% (rounded down) of the
//! labeled subjects of each dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::manifest::{AttackType, Label, ManifestRecord};

pub const DEV_PERCENT: u32 = 20;
/// Protocol 5 reserves this share of subjects (at least one) for live test samples.
pub const P5_TEST_LIVE_PERCENT: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtraMode {
    None,
    LiveOnly,
    LiveSpoof,
}

impl std::str::FromStr for ExtraMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(ExtraMode::None),
            "live_only" | "live-only" => Ok(ExtraMode::LiveOnly),
            "live_spoof" | "live-spoof" => Ok(ExtraMode::LiveSpoof),
            other => Err(format!(
                "unknown extra mode `{other}` (none, live_only, live_spoof)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol")]
pub enum Protocol {
    /// Sessions 1–2 train, session 3 test; the first `labeled_pct`% of
    /// subjects are labeled.
    #[serde(rename = "1")]
    P1 { labeled_pct: u32 },
    /// All of sessions 1–2 labeled; the first `extra_pct`% of session-3
    /// subjects join as unlabeled data, the rest of session 3 is the test set.
    #[serde(rename = "2")]
    P2 { extra: ExtraMode, extra_pct: u32 },
    /// One dataset unlabeled, one dataset held out for test, the rest labeled.
    #[serde(rename = "3")]
    P3 {
        unlabeled_dataset: String,
        test_dataset: String,
    },
    /// Every training dataset split by subject: `labeled_pct`% labeled.
    #[serde(rename = "4")]
    P4 {
        labeled_pct: u32,
        test_dataset: String,
    },
    /// Live plus five attack types labeled, one attack type unlabeled, one
    /// held out for test.
    #[serde(rename = "5")]
    P5 {
        unlabeled_attack: AttackType,
        test_attack: AttackType,
    },
}

impl Protocol {
    pub fn number(&self) -> u8 {
        match self {
            Protocol::P1 { .. } => 1,
            Protocol::P2 { .. } => 2,
            Protocol::P3 { .. } => 3,
            Protocol::P4 { .. } => 4,
            Protocol::P5 { .. } => 5,
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::P1 { labeled_pct } => write!(f, "protocol=1 labeled_pct={labeled_pct}"),
            Protocol::P2 { extra, extra_pct } => {
                write!(f, "protocol=2 extra={extra:?} extra_pct={extra_pct}")
            }
            Protocol::P3 {
                unlabeled_dataset,
                test_dataset,
            } => write!(
                f,
                "protocol=3 unlabeled_dataset={unlabeled_dataset} test_dataset={test_dataset}"
            ),
            Protocol::P4 {
                labeled_pct,
                test_dataset,
            } => write!(
                f,
                "protocol=4 labeled_pct={labeled_pct} test_dataset={test_dataset}"
            ),
            Protocol::P5 {
                unlabeled_attack,
                test_attack,
            } => write!(
                f,
                "protocol=5 unlabeled_attack={unlabeled_attack} test_attack={test_attack}"
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub protocol: Protocol,
    /// Recorded for provenance; the split rules themselves are deterministic.
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitResult {
    pub labeled_train: Vec<ManifestRecord>,
    pub unlabeled_train: Vec<ManifestRecord>,
    pub dev: Vec<ManifestRecord>,
    pub test: Vec<ManifestRecord>,
}

impl SplitResult {
    pub fn parts(&self) -> [(&'static str, &[ManifestRecord]); 4] {
        [
            ("labeled.train", &self.labeled_train),
            ("unlabeled.train", &self.unlabeled_train),
            ("dev", &self.dev),
            ("test", &self.test),
        ]
    }

    pub fn len(&self) -> usize {
        self.parts().iter().map(|(_, r)| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn err(protocol: u8, message: impl Into<String>) -> Error {
    Error::Protocol {
        protocol,
        message: message.into(),
    }
}

fn check_pct(protocol: u8, name: &str, pct: u32) -> Result<()> {
    if pct > 100 {
        return Err(err(protocol, format!("{name} {pct} exceeds 100")));
    }
    Ok(())
}

/// `floor(pct · n / 100)`.
pub fn prefix_count(n: usize, pct: u32) -> usize {
    n * pct as usize / 100
}

/// Ascending subject IDs per dataset.
fn subjects_by_dataset<'a>(
    records: impl IntoIterator<Item = &'a ManifestRecord>,
) -> BTreeMap<&'a str, Vec<u32>> {
    let mut sets: BTreeMap<&str, BTreeSet<u32>> = BTreeMap::new();
    for r in records {
        sets.entry(&r.dataset_id).or_default().insert(r.subject_id);
    }
    sets.into_iter()
        .map(|(k, v)| (k, v.into_iter().collect()))
        .collect()
}

/// Per-dataset first `pct`% of subjects.
fn prefix_subjects(pool: &[ManifestRecord], pct: u32) -> BTreeSet<(String, u32)> {
    let mut out = BTreeSet::new();
    for (ds, subjects) in subjects_by_dataset(pool) {
        for &s in &subjects[..prefix_count(subjects.len(), pct)] {
            out.insert((ds.to_string(), s));
        }
    }
    out
}

/// Split a labeled pool into (labeled_train, dev).
fn carve_dev(labeled: Vec<ManifestRecord>) -> (Vec<ManifestRecord>, Vec<ManifestRecord>) {
    let mut dev_subjects = BTreeSet::new();
    for (ds, subjects) in subjects_by_dataset(&labeled) {
        let n_dev = prefix_count(subjects.len(), DEV_PERCENT);
        for &s in &subjects[subjects.len() - n_dev..] {
            dev_subjects.insert((ds.to_string(), s));
        }
    }
    labeled
        .into_iter()
        .partition(|r| !dev_subjects.contains(&(r.dataset_id.clone(), r.subject_id)))
}

fn key(r: &ManifestRecord) -> (String, u32) {
    (r.dataset_id.clone(), r.subject_id)
}

fn require_sessions(protocol: u8, manifest: &[ManifestRecord]) -> Result<()> {
    for s in 1..=3u8 {
        if !manifest.iter().any(|r| r.session == s) {
            return Err(err(
                protocol,
                format!("manifest has no session {s} records; sessions 1-3 are required"),
            ));
        }
    }
    Ok(())
}

fn require_datasets(
    protocol: u8,
    manifest: &[ManifestRecord],
    named: &[&str],
) -> Result<BTreeSet<String>> {
    let ids: BTreeSet<String> = manifest.iter().map(|r| r.dataset_id.clone()).collect();
    if ids.len() < 3 {
        return Err(err(
            protocol,
            format!(
                "needs at least 3 dataset ids, manifest has {}: {ids:?}",
                ids.len()
            ),
        ));
    }
    for name in named {
        if !ids.contains(*name) {
            return Err(err(
                protocol,
                format!("dataset `{name}` not in manifest (has {ids:?})"),
            ));
        }
    }
    if named.len() == 2 && named[0] == named[1] {
        return Err(err(protocol, "unlabeled and test datasets must differ"));
    }
    Ok(ids)
}

pub fn split(manifest: &[ManifestRecord], spec: &SplitSpec) -> Result<SplitResult> {
    let p = spec.protocol.number();
    let mut result = SplitResult::default();
    let labeled: Vec<ManifestRecord>;
    match &spec.protocol {
        Protocol::P1 { labeled_pct } => {
            check_pct(p, "labeled_pct", *labeled_pct)?;
            require_sessions(p, manifest)?;
            let pool: Vec<_> = manifest
                .iter()
                .filter(|r| r.session <= 2)
                .cloned()
                .collect();
            let keep = prefix_subjects(&pool, *labeled_pct);
            let (l, u): (Vec<_>, Vec<_>) = pool.into_iter().partition(|r| keep.contains(&key(r)));
            labeled = l;
            result.unlabeled_train = u;
            result.test = manifest
                .iter()
                .filter(|r| r.session == 3)
                .cloned()
                .collect();
        }
        Protocol::P2 { extra, extra_pct } => {
            check_pct(p, "extra_pct", *extra_pct)?;
            require_sessions(p, manifest)?;
            labeled = manifest
                .iter()
                .filter(|r| r.session <= 2)
                .cloned()
                .collect();
            let session3: Vec<_> = manifest
                .iter()
                .filter(|r| r.session == 3)
                .cloned()
                .collect();
            let extra_subjects = match extra {
                ExtraMode::None => BTreeSet::new(),
                _ => prefix_subjects(&session3, *extra_pct),
            };
            for r in session3 {
                if !extra_subjects.contains(&key(&r)) {
                    result.test.push(r);
                } else if *extra == ExtraMode::LiveSpoof || r.label == Label::Live {
                    result.unlabeled_train.push(r);
                }
            }
        }
        Protocol::P3 {
            unlabeled_dataset,
            test_dataset,
        } => {
            require_datasets(p, manifest, &[unlabeled_dataset, test_dataset])?;
            let mut l = Vec::new();
            for r in manifest {
                if r.dataset_id == *test_dataset {
                    result.test.push(r.clone());
                } else if r.dataset_id == *unlabeled_dataset {
                    result.unlabeled_train.push(r.clone());
                } else {
                    l.push(r.clone());
                }
            }
            labeled = l;
        }
        Protocol::P4 {
            labeled_pct,
            test_dataset,
        } => {
            check_pct(p, "labeled_pct", *labeled_pct)?;
            require_datasets(p, manifest, &[test_dataset])?;
            let (test, pool): (Vec<_>, Vec<_>) = manifest
                .iter()
                .cloned()
                .partition(|r| r.dataset_id == *test_dataset);
            result.test = test;
            let keep = prefix_subjects(&pool, *labeled_pct);
            let (l, u): (Vec<_>, Vec<_>) = pool.into_iter().partition(|r| keep.contains(&key(r)));
            labeled = l;
            result.unlabeled_train = u;
        }
        Protocol::P5 {
            unlabeled_attack,
            test_attack,
        } => {
            if *unlabeled_attack == AttackType::None || *test_attack == AttackType::None {
                return Err(err(
                    p,
                    "unlabeled and test attack types must be attacks, not `none`",
                ));
            }
            if unlabeled_attack == test_attack {
                return Err(err(p, "unlabeled and test attack types must differ"));
            }
            let present: BTreeSet<AttackType> = manifest.iter().map(|r| r.attack_type).collect();
            let missing: Vec<_> = AttackType::ATTACKS
                .iter()
                .filter(|a| !present.contains(a))
                .collect();
            if !missing.is_empty() || !present.contains(&AttackType::None) {
                return Err(err(
                    p,
                    format!("needs live records and all 7 attack types; missing attack types {missing:?}"),
                ));
            }
            let mut test_subjects = BTreeSet::new();
            for (ds, subjects) in
                subjects_by_dataset(manifest.iter().filter(|r| r.label == Label::Live))
            {
                let n = prefix_count(subjects.len(), P5_TEST_LIVE_PERCENT).max(1);
                for &s in &subjects[subjects.len() - n..] {
                    test_subjects.insert((ds.to_string(), s));
                }
            }
            let mut l = Vec::new();
            for r in manifest {
                let held_out = test_subjects.contains(&key(r));
                if r.attack_type == *test_attack || (r.label == Label::Live && held_out) {
                    result.test.push(r.clone());
                } else if r.attack_type == *unlabeled_attack {
                    result.unlabeled_train.push(r.clone());
                } else if !held_out {
                    l.push(r.clone());
                }
            }
            labeled = l;
        }
    }
    if labeled.is_empty() {
        return Err(err(p, "labeled training set is empty"));
    }
    let (labeled_train, dev) = carve_dev(labeled);
    result.labeled_train = labeled_train;
    result.dev = dev;
    Ok(result)
}

/// Provenance lines for split manifest headers.
pub fn provenance(spec: &SplitSpec, part: &str) -> Vec<String> {
    vec![format!(
        "split {} seed={} part={part}",
        spec.protocol, spec.seed
    )]
}
