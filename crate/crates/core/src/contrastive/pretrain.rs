use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use volalign_autodiff::{Graph, Tensor};

use super::symmetric_loss_graph;
use crate::data::{Dataset, Split};
use crate::fusion::{prepare_samples, Sample};
use crate::text::TextEncoder;
use crate::train::{AdamW, AdamWConfig, GradBuffer, ModelCheckpoint};
use crate::vision::{Expert, VisionConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub temperature: f64,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 16,
            temperature: 0.07,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl PretrainConfig {
    /// Published full-scale schedule.
    pub fn full_scale() -> Self {
        Self {
            epochs: 300,
            learning_rate: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Temperature(self.temperature));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub expert: Expert,
    /// `(epoch, mean batch loss)`
    pub loss_curve: Vec<(usize, f64)>,
    pub text_sha256_before: String,
    pub text_sha256_after: String,
}

impl PretrainOutcome {
    pub fn checkpoint(&self, vision: &VisionConfig, config: &PretrainConfig) -> ModelCheckpoint {
        let cfg = serde_json::json!({
            "modality": self.expert.modality,
            "vision": vision,
            "pretrain": config,
        });
        let metrics = serde_json::json!({
            "loss_curve": self.loss_curve,
            "text_encoder_sha256": self.text_sha256_after,
        });
        ModelCheckpoint::from_params("expert", &self.expert.params, cfg, metrics)
    }

    /// CSV with columns `epoch,loss`.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("epoch,loss\n");
        for (e, l) in &self.loss_curve {
            s.push_str(&format!("{e},{l:.8}\n"));
        }
        s
    }
}

impl Expert {
    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        if ckpt.kind != "expert" {
            return Err(Error::Checkpoint(format!("expected an expert checkpoint, found `{}`", ckpt.kind)));
        }
        let field = |k: &str| ckpt.config.get(k).cloned().ok_or_else(|| Error::Checkpoint(format!("config lacks `{k}`")));
        let modality: String = serde_json::from_value(field("modality")?)?;
        let vision: VisionConfig = serde_json::from_value(field("vision")?)?;
        let mut expert = Expert::new(&modality, &vision, 0)?;
        if ckpt.blobs.len() != expert.params.len() {
            return Err(Error::Checkpoint("expert parameter count does not match its config".into()));
        }
        for b in &ckpt.blobs {
            expert.params.assign(&b.name, Tensor::new(b.shape.clone(), b.data.clone())?)?;
        }
        Ok(expert)
    }
}

fn unit_rows(samples: &[&Sample]) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    for s in samples {
        let n = s.text.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::DegenerateProjection);
        }
        out.extend(s.text.iter().map(|&v| (v as f64 / n) as f32));
    }
    Ok(out)
}

/// Contrastive training of one modality's expert against the frozen text
/// embeddings of its reports, on prepared samples of that modality.
pub fn pretrain_samples(samples: &[Sample], modality: &str, vision: &VisionConfig, cfg: &PretrainConfig, encoder: &dyn TextEncoder) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if encoder.dim() != vision.embed_dim {
        return Err(Error::Config(format!(
            "pretraining compares raw text embeddings (dim {}) with vision embeddings (dim {})",
            encoder.dim(),
            vision.embed_dim
        )));
    }
    if samples.len() < cfg.batch_size {
        return Err(Error::InsufficientData(format!(
            "{} training records of modality {modality} for batch size {}",
            samples.len(),
            cfg.batch_size
        )));
    }
    if let Some(s) = samples.iter().find(|s| s.modality != modality) {
        return Err(Error::InvalidRecord(format!("{} is not a {modality} record", s.id)));
    }
    let before = encoder.checksum();
    let mut expert = Expert::new(modality, vision, cfg.seed)?;
    let mut opt = AdamW::new(&expert.params, cfg.learning_rate, cfg.optimizer);
    let mut grads = GradBuffer::new(&expert.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0usize);
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let chosen: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
            let mut g = Graph::<f32>::new();
            let fv: Vec<_> = chosen
                .iter()
                .map(|s| {
                    let x = g.constant(Tensor::new([1, s.volume.len()], s.volume.clone())?);
                    Ok(expert.net.forward(&mut g, &expert.params, x, s.dims))
                })
                .collect::<Result<_>>()?;
            let fv = g.stack_rows(&fv);
            let ft = g.constant(Tensor::new([chosen.len(), vision.embed_dim], unit_rows(&chosen)?)?);
            let loss = symmetric_loss_graph(&mut g, fv, ft, cfg.temperature);
            let value = g.scalar(loss) as f64;
            let norms = || expert.params.norms().iter().map(|(n, v)| format!("{n}={v:.4e}")).collect::<Vec<_>>().join(", ");
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch, norms: norms() });
            }
            grads.clear();
            grads.add(&g.backward(loss));
            if !grads.all_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch, norms: norms() });
            }
            opt.step(&mut expert.params, &grads);
            sum += value;
            batches += 1;
        }
        loss_curve.push((epoch, sum / batches.max(1) as f64));
    }
    let after = encoder.checksum();
    if after != before {
        return Err(Error::FrozenMutated("text_encoder".into()));
    }
    Ok(PretrainOutcome {
        expert,
        loss_curve,
        text_sha256_before: before,
        text_sha256_after: after,
    })
}

/// Pretrain the expert of `modality` on the dataset's train records of
/// that modality.
pub fn pretrain_modality(dataset: &Dataset, modality: &str, vision: &VisionConfig, cfg: &PretrainConfig, encoder: &dyn TextEncoder) -> Result<PretrainOutcome> {
    if !dataset.manifest.modality_vocabulary.iter().any(|m| m == modality) {
        return Err(Error::UnknownModality(modality.to_string()));
    }
    let samples = prepare_samples(&dataset.split_modality(Split::Train, modality), encoder)?;
    pretrain_samples(&samples, modality, vision, cfg, encoder)
}
