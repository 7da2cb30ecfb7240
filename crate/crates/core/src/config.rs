//! Run configuration: one JSON document covering every stage, with dotted
//! `key=value` overrides. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::contrastive::PretrainConfig;
use crate::data::PhantomSpec;
use crate::diagnostics::TsneConfig;
use crate::train::FinetuneConfig;
use crate::vision::VisionConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub pretrain: PretrainConfig,
    /// also holds the model architecture shared with pretraining
    pub finetune: FinetuneConfig,
    pub ablation: AblationConfig,
    pub tsne: TsneConfig,
}

impl RunConfig {
    /// Full-scale settings: 128^3 volumes and the published schedules.
    pub fn full_scale() -> Self {
        let mut c = Self::default();
        c.phantom.grid_size = 128;
        c.pretrain = PretrainConfig::full_scale();
        c.finetune = FinetuneConfig::full_scale();
        c
    }

    pub fn vision(&self) -> &VisionConfig {
        &self.finetune.model.vision
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    /// Defaults, overlaid with `file` (if any), then with each
    /// `dotted.key=value` override. Values parse as JSON and fall back to
    /// plain strings.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut v, doc, "")?;
        }
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn merge(base: &mut Value, doc: Value, at: &str) -> Result<()> {
    match (base, doc) {
        (Value::Object(b), Value::Object(d)) => {
            for (k, v) in d {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &path)?,
                    Some(slot) => *slot = v,
                    None => return Err(Error::Config(format!("unknown key `{path}`"))),
                }
            }
            Ok(())
        }
        (b, d) => {
            *b = d;
            Ok(())
        }
    }
}

/// Apply one `a.b.c=value` override.
pub fn apply_override(v: &mut Value, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let mut slot = v;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}
