use volalign_autodiff::Graph;

use super::{MetricsReport, ModelCheckpoint};
use crate::data::{Dataset, Split};
use crate::fusion::{prepare_samples, AblationFlags, CsaModel, ModelConfig, Sample};
use crate::text::{BagEncoder, TEXT_ENCODER_COMPONENT};
use crate::{Error, Result};

/// Sigmoid probabilities for every sample.
pub fn predict(model: &CsaModel, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
    samples
        .iter()
        .map(|s| {
            let mut g = Graph::inference();
            let f = model.net.forward(&mut g, &model.params, s)?;
            Ok(g.value(f.probs).data().iter().map(|&p| p as f64).collect())
        })
        .collect()
}

pub fn evaluate_model(model: &CsaModel, samples: &[Sample], split: &str) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let probs = predict(model, samples)?;
    let labels: Vec<Vec<u8>> = samples.iter().map(|s| s.labels.iter().map(|&l| (l > 0.5) as u8).collect()).collect();
    MetricsReport::from_predictions(split, &probs, &labels)
}

impl CsaModel {
    /// Rebuild a fine-tuned model; every stored parameter must match the
    /// layout described by the checkpoint's config.
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.kind != "finetune" {
            return Err(Error::Checkpoint(format!("expected a finetune checkpoint, found `{}`", ckpt.kind)));
        }
        let field = |k: &str| ckpt.config.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("config lacks `{k}`")));
        let config: ModelConfig = serde_json::from_value(field("model")?)?;
        let flags: AblationFlags = serde_json::from_value(field("flags")?)?;
        let modalities: Vec<String> = serde_json::from_value(field("modalities")?)?;
        let n_classes: usize = serde_json::from_value(field("n_classes")?)?;
        let build_flags = AblationFlags {
            use_pretrained: false,
            ..flags
        };
        let mut model = CsaModel::new(&config, build_flags, &modalities, n_classes, None, 0)?;
        model.flags = flags;
        let stored = ckpt.to_params()?;
        let mut text = volalign_autodiff::ParamSet::new();
        let mut assigned = 0;
        for (_, e) in stored.entries() {
            if e.component == TEXT_ENCODER_COMPONENT {
                text.insert(e.name.clone(), TEXT_ENCODER_COMPONENT, e.tensor.clone())?;
            } else {
                if model.params.id(&e.name).is_none() {
                    return Err(Error::Checkpoint(format!("unexpected parameter `{}`", e.name)));
                }
                model.params.assign(&e.name, e.tensor.clone())?;
                assigned += 1;
            }
        }
        if assigned != model.params.len() {
            return Err(Error::Checkpoint("checkpoint is missing model parameters".into()));
        }
        if !ckpt.is_frozen(TEXT_ENCODER_COMPONENT) {
            return Err(Error::Checkpoint("text encoder component is not marked frozen".into()));
        }
        model.text_encoder = BagEncoder::from_params(text, &config.text)?;
        Ok(model)
    }
}

/// Metrics of a stored model on one split of a dataset.
pub fn evaluate(ckpt: &ModelCheckpoint, dataset: &Dataset, split: Split) -> Result<MetricsReport> {
    let model = CsaModel::from_checkpoint(ckpt)?;
    let records = dataset.split(split);
    let samples = prepare_samples(&records, &model.text_encoder)?;
    evaluate_model(&model, &samples, &split.to_string())
}
