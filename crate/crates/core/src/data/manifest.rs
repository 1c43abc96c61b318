use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "# epcr-manifest v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Live,
    Spoof,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Live => "live",
            Label::Spoof => "spoof",
        }
    }

    /// Pixel-wise supervision target: 0 live, 1 spoof.
    pub fn target(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "live" => Ok(Label::Live),
            "spoof" => Ok(Label::Spoof),
            other => Err(format!("unknown label `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackType {
    None,
    Print,
    Replay,
    FlexibleMask,
    PaperMask,
    RigidMask,
    FakeHead,
    Glasses,
}

impl AttackType {
    /// Every presentation attack type (excludes `None`).
    pub const ATTACKS: [AttackType; 7] = [
        AttackType::Print,
        AttackType::Replay,
        AttackType::FlexibleMask,
        AttackType::PaperMask,
        AttackType::RigidMask,
        AttackType::FakeHead,
        AttackType::Glasses,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackType::None => "none",
            AttackType::Print => "print",
            AttackType::Replay => "replay",
            AttackType::FlexibleMask => "flexiblemask",
            AttackType::PaperMask => "papermask",
            AttackType::RigidMask => "rigidmask",
            AttackType::FakeHead => "fakehead",
            AttackType::Glasses => "glasses",
        }
    }

    pub fn label(self) -> Label {
        if self == AttackType::None {
            Label::Live
        } else {
            Label::Spoof
        }
    }
}

impl fmt::Display for AttackType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        std::iter::once(AttackType::None)
            .chain(AttackType::ATTACKS)
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown attack type `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub path: String,
    pub subject_id: u32,
    pub session: u8,
    pub label: Label,
    pub attack_type: AttackType,
    pub dataset_id: String,
}

impl ManifestRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.path.is_empty() || self.path.contains(char::is_whitespace) {
            return Err(format!(
                "path `{}` must be non-empty without whitespace",
                self.path
            ));
        }
        if self.dataset_id.is_empty() || self.dataset_id.contains(char::is_whitespace) {
            return Err(format!(
                "dataset `{}` must be non-empty without whitespace",
                self.dataset_id
            ));
        }
        if self.subject_id == 0 {
            return Err("subject ids start at 1".into());
        }
        if self.attack_type.label() != self.label {
            return Err(format!(
                "label {} inconsistent with attack type {}",
                self.label, self.attack_type
            ));
        }
        Ok(())
    }

    fn to_line(&self) -> String {
        format!(
            "path={} subject={} session={} label={} attack={} dataset={}",
            self.path, self.subject_id, self.session, self.label, self.attack_type, self.dataset_id
        )
    }

    fn from_line(line: &str) -> Result<Self, String> {
        let mut path = None;
        let mut subject_id = None;
        let mut session = None;
        let mut label = None;
        let mut attack_type = None;
        let mut dataset_id = None;
        for field in line.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| format!("field `{field}` is not key=value"))?;
            let dup = match key {
                "path" => path.replace(value.to_string()).is_some(),
                "subject" => subject_id
                    .replace(value.parse::<u32>().map_err(|e| format!("subject: {e}"))?)
                    .is_some(),
                "session" => session
                    .replace(value.parse::<u8>().map_err(|e| format!("session: {e}"))?)
                    .is_some(),
                "label" => label.replace(value.parse::<Label>()?).is_some(),
                "attack" => attack_type.replace(value.parse::<AttackType>()?).is_some(),
                "dataset" => dataset_id.replace(value.to_string()).is_some(),
                other => return Err(format!("unknown field `{other}`")),
            };
            if dup {
                return Err(format!("duplicate field `{key}`"));
            }
        }
        let missing = |name: &str| format!("missing field `{name}`");
        let record = ManifestRecord {
            path: path.ok_or_else(|| missing("path"))?,
            subject_id: subject_id.ok_or_else(|| missing("subject"))?,
            session: session.ok_or_else(|| missing("session"))?,
            label: label.ok_or_else(|| missing("label"))?,
            attack_type: attack_type.ok_or_else(|| missing("attack"))?,
            dataset_id: dataset_id.ok_or_else(|| missing("dataset"))?,
        };
        record.validate()?;
        Ok(record)
    }
}

/// Render a manifest. `comments` become extra `# ` lines after the header.
pub fn format_manifest(records: &[ManifestRecord], comments: &[String]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for c in comments {
        for line in c.lines() {
            out.push_str("# ");
            out.push_str(line);
            out.push('\n');
        }
    }
    for r in records {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestRecord>> {
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, first)) if first.trim_end() == MANIFEST_HEADER => {}
        Some((_, first)) => {
            return Err(err(
                1,
                format!("expected header `{MANIFEST_HEADER}`, found `{first}`"),
            ))
        }
        None => return Err(err(1, "empty manifest".into())),
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let record = ManifestRecord::from_line(line).map_err(|m| err(i + 1, m))?;
        if !seen.insert((record.dataset_id.clone(), record.path.clone())) {
            return Err(err(
                i + 1,
                format!("duplicate record {}/{}", record.dataset_id, record.path),
            ));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path, comments: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for r in records {
        r.validate().map_err(Error::InvalidArgument)?;
        if !seen.insert((&r.dataset_id, &r.path)) {
            return Err(Error::InvalidArgument(format!(
                "duplicate record {}/{}",
                r.dataset_id, r.path
            )));
        }
    }
    std::fs::write(path, format_manifest(records, comments)).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}
