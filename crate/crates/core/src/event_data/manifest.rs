//! Dataset manifest: a TOML file next to the stay files.
//!
//! ```toml
//! schema_version = 1
//! vocabulary = "vocab.json"
//! stays = ["stays/s00000.tsv", "stays/s00001.tsv"]
//!
//! [bounds."Heart Rate"]
//! lower = 41.0
//! upper = 152.0
//! ```
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::parse::{parse_stay_file_with, serialize_stay, ParseOptions};
use super::types::StayRecord;
use super::vocab::Vocabulary;
use super::EventDataError;

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

/// Cleaning bounds for one variable (1st and 99th percentile).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableBounds {
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub vocabulary: PathBuf,
    pub stays: Vec<PathBuf>,
    #[serde(default)]
    pub bounds: BTreeMap<String, VariableBounds>,
}

/// A fully loaded and validated dataset.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub vocab: Vocabulary,
    pub stays: Vec<StayRecord>,
}

impl DatasetManifest {
    pub fn from_toml(text: &str) -> Result<Self, EventDataError> {
        let m: DatasetManifest =
            toml::from_str(text).map_err(|e| EventDataError::Format(e.to_string()))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(EventDataError::Format(format!(
                "unsupported manifest schema_version {} (expected {SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        Ok(m)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }
}

/// Reads `path` (a manifest file, or a directory containing
/// `manifest.toml`), parses every stay and checks the manifest invariants.
pub fn load_dataset(path: &Path, opts: ParseOptions) -> Result<Dataset, EventDataError> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let root = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| EventDataError::Format(format!("{}: {e}", manifest_path.display())))?;
    let manifest = DatasetManifest::from_toml(&text)?;
    let vocab = Vocabulary::load(&root.join(&manifest.vocabulary))?;

    let mut stays = Vec::with_capacity(manifest.stays.len());
    let mut ids = BTreeSet::new();
    for rel in &manifest.stays {
        let file = root.join(rel);
        let bytes = std::fs::read(&file)
            .map_err(|e| EventDataError::Format(format!("{}: {e}", file.display())))?;
        let stay = parse_stay_file_with(&bytes, opts).map_err(|e| e.in_file(&file))?;
        if !ids.insert(stay.stay_id.clone()) {
            return Err(EventDataError::DuplicateStay(stay.stay_id));
        }
        stays.push(stay);
    }
    for stay in &stays {
        for e in &stay.events {
            if e.value.is_some() && !manifest.bounds.contains_key(&e.event_name) {
                return Err(EventDataError::MissingBounds(e.event_name.clone()));
            }
        }
    }
    Ok(Dataset {
        manifest,
        vocab,
        stays,
    })
}

/// Writes stays, vocabulary and manifest under `dir`.
pub fn write_dataset(
    dir: &Path,
    stays: &[StayRecord],
    vocab: &Vocabulary,
    bounds: BTreeMap<String, VariableBounds>,
) -> Result<DatasetManifest, EventDataError> {
    std::fs::create_dir_all(dir.join("stays"))?;
    vocab.save(&dir.join("vocab.json"))?;
    let mut files = Vec::with_capacity(stays.len());
    for stay in stays {
        let rel = PathBuf::from("stays").join(format!("{}.tsv", stay.stay_id));
        std::fs::write(dir.join(&rel), serialize_stay(stay))?;
        files.push(rel);
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        vocabulary: PathBuf::from("vocab.json"),
        stays: files,
        bounds,
    };
    std::fs::write(dir.join(MANIFEST_FILE), manifest.to_toml())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_data::{build_vocabulary, parse_stay_file};

    const STAY: &str =
        "STAY\ts1\t50\tF\t\nHR\t80\tbpm\t0.1\t\t\tchart\nIntubation\t\t\t0.2\t\t\tprocedure\n";

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let stay = parse_stay_file(STAY.as_bytes()).unwrap();
        let vocab = build_vocabulary([&stay]);
        let bounds = BTreeMap::from([(
            "HR".to_string(),
            VariableBounds {
                lower: 30.0,
                upper: 200.0,
            },
        )]);
        write_dataset(dir.path(), &[stay.clone()], &vocab, bounds).unwrap();
        let ds = load_dataset(dir.path(), ParseOptions::default()).unwrap();
        assert_eq!(ds.stays, vec![stay]);
        assert_eq!(ds.vocab, vocab);
    }

    #[test]
    fn missing_bounds_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let stay = parse_stay_file(STAY.as_bytes()).unwrap();
        let vocab = build_vocabulary([&stay]);
        write_dataset(dir.path(), &[stay], &vocab, BTreeMap::new()).unwrap();
        assert!(matches!(
            load_dataset(dir.path(), ParseOptions::default()),
            Err(EventDataError::MissingBounds(name)) if name == "HR"
        ));
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let text = "schema_version = 7\nvocabulary = \"v.json\"\nstays = []\n";
        assert!(DatasetManifest::from_toml(text).is_err());
    }
}
