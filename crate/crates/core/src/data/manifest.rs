use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{decode_mvol, NormalClassPolicy, Split, VolumeRecord};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub modality_vocabulary: Vec<String>,
    pub normal_class_policy: NormalClassPolicy,
    pub records: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() < 2 {
            return Err(Error::Manifest("at least two classes are required".into()));
        }
        if self.modality_vocabulary.is_empty() {
            return Err(Error::Manifest("modality vocabulary is empty".into()));
        }
        let mut seen = HashSet::new();
        for e in &self.records {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate record id `{}`", e.id)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }
}

/// A manifest with every record loaded and validated.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<VolumeRecord>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut records = Vec::with_capacity(manifest.records.len());
        for e in &manifest.records {
            let path = if e.path.is_absolute() { e.path.clone() } else { root.join(&e.path) };
            if !path.exists() {
                return Err(Error::Manifest(format!("record `{}`: missing file {}", e.id, path.display())));
            }
            let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
            let rec = decode_mvol(&bytes, &e.id, e.split, &path)?;
            rec.validate(manifest.n_classes(), &manifest.modality_vocabulary, manifest.normal_class_policy)?;
            records.push(rec);
        }
        Ok(Self { manifest, records })
    }

    pub fn from_parts(manifest: DatasetManifest, records: Vec<VolumeRecord>) -> Result<Self> {
        manifest.validate()?;
        for r in &records {
            r.validate(manifest.n_classes(), &manifest.modality_vocabulary, manifest.normal_class_policy)?;
        }
        Ok(Self { manifest, records })
    }

    pub fn split(&self, split: Split) -> Vec<&VolumeRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn split_modality(&self, split: Split, modality: &str) -> Vec<&VolumeRecord> {
        self.records
            .iter()
            .filter(|r| r.split == split && r.modality == modality)
            .collect()
    }

    pub fn n_classes(&self) -> usize {
        self.manifest.n_classes()
    }

    pub fn get(&self, id: &str) -> Option<&VolumeRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}
