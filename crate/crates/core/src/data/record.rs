use serde::{Deserialize, Serialize};

use super::Volume;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Whether an all-zero label vector is a legal "no abnormality" record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalClassPolicy {
    Implicit,
    #[default]
    Explicit,
}

/// One scan of one modality with its report and multi-hot labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeRecord {
    pub id: String,
    pub modality: String,
    pub voxels: Volume,
    pub report: String,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl VolumeRecord {
    /// Checks the record against a dataset's class count, modality
    /// vocabulary and normal-class policy.
    pub fn validate(&self, n_classes: usize, modalities: &[String], policy: NormalClassPolicy) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidRecord(format!("{}: {msg}", self.id)));
        if self.labels.len() != n_classes {
            return bad(format!("{} labels for {n_classes} classes", self.labels.len()));
        }
        if self.labels.iter().any(|&l| l > 1) {
            return bad("labels must be 0 or 1".into());
        }
        if policy == NormalClassPolicy::Explicit && self.labels.iter().all(|&l| l == 0) {
            return bad("all-zero labels need an implicit normal-class policy".into());
        }
        if !modalities.contains(&self.modality) {
            return bad(format!("modality `{}` not in vocabulary", self.modality));
        }
        if let Some(i) = self.voxels.first_non_finite() {
            return Err(Error::NonFiniteVoxel(i));
        }
        if self.voxels.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return bad("voxels outside [0, 1]".into());
        }
        Ok(())
    }

    /// Index of the first active label, or `None` for a normal record.
    pub fn primary_class(&self) -> Option<usize> {
        self.labels.iter().position(|&l| l == 1)
    }
}
