use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use volalign_autodiff::{Float, Graph, ParamSet, Tensor, Var};

use super::{modulate, Cct, Gate};
use crate::data::VolumeRecord;
use crate::nn::{Init, Linear};
use crate::objectives::{kl_alignment_graph, KlDirection, ScheduleState, BCE_EPS};
use crate::text::{BagEncoder, TextEncoder, TextEncoderConfig, TextProjector, TEXT_ENCODER_COMPONENT};
use crate::vision::{prepare_input, ConvStream, EmbeddingVector, ExpertNet, FeatureGrid, ModalityExpertBank, TransformerStream, VisionConfig, TOTAL_STRIDE};
use crate::{Error, Result};

/// Architecture of the fine-tuning model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub text: TextEncoderConfig,
    pub cct_blocks: usize,
    pub cct_heads: usize,
    pub kl_temperature: f64,
    pub kl_direction: KlDirection,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vision: VisionConfig::default(),
            text: TextEncoderConfig::default(),
            cct_blocks: 2,
            cct_heads: 4,
            kl_temperature: 1.0,
            kl_direction: KlDirection::Forward,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        if self.cct_heads == 0 || self.vision.feature_channels() % self.cct_heads != 0 {
            return Err(Error::Config("cct_heads must divide the feature channel count".into()));
        }
        if !(self.kl_temperature > 0.0) {
            return Err(Error::Temperature(self.kl_temperature));
        }
        Ok(())
    }
}

/// Which components of the full model are enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationFlags {
    /// initialise conv branches from the modality experts
    pub use_pretrained: bool,
    /// add the attention stream and cross-attention fusion
    pub use_cct: bool,
    /// add report gating and the alignment loss
    pub use_csa: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::FULL
    }
}

impl AblationFlags {
    pub const BASELINE: Self = Self { use_pretrained: false, use_cct: false, use_csa: false };
    pub const PRETRAINED: Self = Self { use_pretrained: true, use_cct: false, use_csa: false };
    pub const CCT: Self = Self { use_pretrained: true, use_cct: true, use_csa: false };
    pub const FULL: Self = Self { use_pretrained: true, use_cct: true, use_csa: true };

    pub fn validate(&self) -> Result<()> {
        if self.use_csa && !self.use_cct {
            return Err(Error::Config("use_csa requires use_cct".into()));
        }
        Ok(())
    }
}

/// One prepared model input.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub modality: String,
    /// padded voxels
    pub volume: Vec<f32>,
    pub dims: [usize; 3],
    /// raw (unprojected) report embedding
    pub text: Vec<f32>,
    pub labels: Vec<f32>,
}

impl Sample {
    pub fn from_record(record: &VolumeRecord, encoder: &dyn TextEncoder) -> Result<Self> {
        let v = prepare_input(&record.voxels)?;
        Ok(Self {
            id: record.id.clone(),
            modality: record.modality.clone(),
            dims: v.dims(),
            volume: v.into_data(),
            text: encoder.encode(&record.report)?.0,
            labels: record.labels.iter().map(|&l| l as f32).collect(),
        })
    }

    /// Argmax of the label vector.
    pub fn class(&self) -> usize {
        crate::train::argmax(&self.labels)
    }
}

pub fn prepare_samples(records: &[&VolumeRecord], encoder: &dyn TextEncoder) -> Result<Vec<Sample>> {
    records.iter().map(|r| Sample::from_record(r, encoder)).collect()
}

#[derive(Clone, Debug)]
enum Branch {
    /// conv stream and its pooling head
    Pooled(ExpertNet),
    Conv(ConvStream),
}

impl Branch {
    fn conv(&self) -> &ConvStream {
        match self {
            Branch::Pooled(e) => &e.conv,
            Branch::Conv(c) => c,
        }
    }
}

/// Parameter layout of the fine-tuning model.
#[derive(Clone, Debug)]
pub struct CsaNet {
    branches: BTreeMap<String, Branch>,
    pub swin: Option<TransformerStream>,
    pub projector: Option<TextProjector>,
    pub gate: Option<Gate>,
    pub cct: Option<Cct>,
    pub head: Linear,
    pub kl_temperature: f64,
    pub kl_direction: KlDirection,
}

/// Graph nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub f_v: Var,
    pub grid_dims: [usize; 3],
    pub f_trans: Option<Var>,
    pub f_vt: Option<Var>,
    pub projected_text: Option<Var>,
    pub f_fusion: Var,
    pub logits: Var,
    pub probs: Var,
    /// every attention node (attention stream, then fusion)
    pub attention: Vec<Var>,
}

/// Loss nodes and values of one sample.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub bce: f64,
    pub kl: Option<f64>,
}

pub fn branch_component(modality: &str) -> String {
    format!("branch.{modality}")
}

impl CsaNet {
    pub fn new<F: Float>(
        ps: &mut ParamSet<F>,
        cfg: &ModelConfig,
        flags: AblationFlags,
        modalities: &[String],
        n_classes: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        flags.validate()?;
        if n_classes < 2 {
            return Err(Error::Config("at least two classes are required".into()));
        }
        let v = &cfg.vision;
        let c = v.feature_channels();
        let mut branches = BTreeMap::new();
        for m in modalities {
            let comp = branch_component(m);
            let prefix = format!("{comp}.");
            let b = if flags.use_cct {
                Branch::Conv(ConvStream::new(ps, &format!("{prefix}conv"), &comp, &v.conv_channels, rng)?)
            } else {
                Branch::Pooled(ExpertNet::new(ps, &prefix, &comp, v, rng)?)
            };
            branches.insert(m.clone(), b);
        }
        let swin = flags.use_cct.then(|| TransformerStream::new(ps, "swin", "swin", v, rng)).transpose()?;
        let projector = if flags.use_csa {
            Some(if cfg.text.dim == v.embed_dim {
                TextProjector::identity(ps, "projector", v.embed_dim)?
            } else {
                TextProjector::new(ps, "projector", cfg.text.dim, v.embed_dim, rng)?
            })
        } else {
            None
        };
        let gate = flags.use_csa.then(|| Gate::new(ps, "gate", v.embed_dim, c, rng)).transpose()?;
        let cct = flags
            .use_cct
            .then(|| Cct::new(ps, "cct", c, v.embed_dim, cfg.cct_blocks, cfg.cct_heads, rng))
            .transpose()?;
        let head = Linear::new(ps, "head", "head", v.embed_dim, n_classes, Init::Scaled(v.embed_dim), rng)?;
        Ok(Self {
            branches,
            swin,
            projector,
            gate,
            cct,
            head,
            kl_temperature: cfg.kl_temperature,
            kl_direction: cfg.kl_direction,
        })
    }

    pub fn conv_branch(&self, modality: &str) -> Result<&ConvStream> {
        self.branches
            .get(modality)
            .map(Branch::conv)
            .ok_or_else(|| Error::UnknownModality(modality.to_string()))
    }

    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, s: &Sample) -> Result<ForwardVars> {
        let branch = self
            .branches
            .get(&s.modality)
            .ok_or_else(|| Error::UnknownModality(s.modality.clone()))?;
        let x = g.constant(Tensor::new([1, s.volume.len()], s.volume.iter().map(|&v| F::from_f64_lossy(v as f64)).collect())?);
        let (f_v, grid_dims) = branch.conv().forward(g, ps, x, s.dims);
        let mut attention = Vec::new();
        let (f_trans, f_vt, projected_text, f_fusion) = match (&self.swin, &self.cct, branch) {
            (Some(swin), Some(cct), _) => {
                let out = swin.forward(g, ps, x, s.dims);
                debug_assert_eq!(out.dims, grid_dims);
                attention.extend(out.attention);
                let (f_vt, projected) = match (&self.projector, &self.gate) {
                    (Some(p), Some(gate)) => {
                        let t = g.constant(Tensor::new([1, s.text.len()], s.text.iter().map(|&v| F::from_f64_lossy(v as f64)).collect())?);
                        let pt = p.forward(g, ps, t)?;
                        let gv = gate.forward(g, ps, pt);
                        (modulate(g, out.grid, gv), Some(pt))
                    }
                    _ => (out.grid, None),
                };
                let (fusion, maps) = cct.forward(g, ps, f_v, f_vt, grid_dims);
                attention.extend(maps);
                (Some(out.grid), projected.map(|_| f_vt), projected, fusion)
            }
            (_, _, Branch::Pooled(e)) => (None, None, None, e.pool.forward(g, ps, f_v)),
            _ => return Err(Error::Config("fusion is disabled but the branch has no pooling head".into())),
        };
        let logits = self.head.forward(g, ps, f_fusion);
        let probs = g.sigmoid(logits);
        if !g.value(logits).all_finite() {
            return Err(Error::NonFinite("logits"));
        }
        Ok(ForwardVars {
            f_v,
            grid_dims,
            f_trans,
            f_vt,
            projected_text,
            f_fusion,
            logits,
            probs,
            attention,
        })
    }

    /// `lambda_c * BCE + lambda_s * KL`; rows without the alignment term
    /// use `lambda_c * BCE`.
    pub fn loss<F: Float>(&self, g: &mut Graph<F>, fwd: &ForwardVars, labels: &[f32], schedule: &ScheduleState) -> Result<LossVars> {
        use crate::objectives::{lambda_c, lambda_s};
        let bce = g.bce(fwd.probs, labels.iter().map(|&l| F::from_f64_lossy(l as f64)).collect(), F::from_f64_lossy(BCE_EPS));
        let bce_value = g.scalar(bce).to_f64_lossy();
        let weighted = g.scale(bce, F::from_f64_lossy(lambda_c(schedule)));
        match fwd.projected_text {
            Some(pt) => {
                let target: Vec<f64> = g.value(pt).data().iter().map(|v| v.to_f64_lossy()).collect();
                let kl = kl_alignment_graph(g, &target, fwd.f_fusion, self.kl_temperature, self.kl_direction)?;
                let kl_value = g.scalar(kl).to_f64_lossy();
                let kl_w = g.scale(kl, F::from_f64_lossy(lambda_s(schedule)));
                Ok(LossVars {
                    total: g.add(weighted, kl_w),
                    bce: bce_value,
                    kl: Some(kl_value),
                })
            }
            None => Ok(LossVars {
                total: weighted,
                bce: bce_value,
                kl: None,
            }),
        }
    }
}

/// Materialised intermediates of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CsaIntermediates {
    pub f_v: FeatureGrid,
    pub f_trans: Option<FeatureGrid>,
    pub f_vt: Option<FeatureGrid>,
    pub f_fusion: EmbeddingVector,
    pub logits: Vec<f32>,
    pub probabilities: Vec<f32>,
}

impl CsaIntermediates {
    pub fn from_graph<F: Float>(g: &Graph<F>, f: &ForwardVars) -> Self {
        let grid = |v: Var| FeatureGrid::from_tensor(g.value(v), f.grid_dims, TOTAL_STRIDE);
        let vec32 = |v: Var| g.value(v).data().iter().map(|x| x.to_f64_lossy() as f32).collect::<Vec<_>>();
        Self {
            f_v: grid(f.f_v),
            f_trans: f.f_trans.map(grid),
            f_vt: f.f_vt.map(grid),
            f_fusion: EmbeddingVector {
                vector: vec32(f.f_fusion),
                normalized: true,
            },
            logits: vec32(f.logits),
            probabilities: vec32(f.probs),
        }
    }
}

/// Fine-tuning model: layout, trainable parameters and the frozen text
/// encoder.
#[derive(Clone, Debug)]
pub struct CsaModel {
    pub config: ModelConfig,
    pub flags: AblationFlags,
    pub modalities: Vec<String>,
    pub n_classes: usize,
    pub net: CsaNet,
    pub params: ParamSet<f32>,
    pub text_encoder: BagEncoder,
}

impl CsaModel {
    /// Random initialisation from `seed`; conv branches (and their pooling
    /// heads when present) are copied from `bank` when the flags ask for
    /// pretrained weights.
    pub fn new(
        config: &ModelConfig,
        flags: AblationFlags,
        modalities: &[String],
        n_classes: usize,
        bank: Option<&ModalityExpertBank>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let net = CsaNet::new(&mut params, config, flags, modalities, n_classes, &mut rng)?;
        let text_encoder = BagEncoder::new(&config.text)?;
        if flags.use_pretrained {
            let bank = bank.ok_or_else(|| Error::Config("use_pretrained needs an expert bank".into()))?;
            for m in modalities {
                let expert = bank.get(m)?;
                for (_, e) in expert.params.entries() {
                    let name = format!("{}.{}", branch_component(m), e.name);
                    if params.id(&name).is_some() {
                        params.assign(&name, e.tensor.clone())?;
                    }
                }
            }
        }
        Ok(Self {
            config: config.clone(),
            flags,
            modalities: modalities.to_vec(),
            n_classes,
            net,
            params,
            text_encoder,
        })
    }

    pub fn text_checksum(&self) -> String {
        self.text_encoder.checksum()
    }

    pub fn sample(&self, record: &VolumeRecord) -> Result<Sample> {
        Sample::from_record(record, &self.text_encoder)
    }

    /// Inference pass over one prepared sample.
    pub fn forward(&self, s: &Sample) -> Result<CsaIntermediates> {
        let mut g = Graph::inference();
        let f = self.net.forward(&mut g, &self.params, s)?;
        Ok(CsaIntermediates::from_graph(&g, &f))
    }

    /// All parameters including the frozen text encoder, for checkpoints.
    pub fn all_params(&self) -> Result<ParamSet<f32>> {
        let mut ps = self.params.clone();
        for (_, e) in self.text_encoder.parameters().entries() {
            ps.insert(e.name.clone(), TEXT_ENCODER_COMPONENT, e.tensor.clone())?;
        }
        ps.set_component_frozen(TEXT_ENCODER_COMPONENT, true);
        Ok(ps)
    }
}

/// Full forward pass of a record through a fine-tuning model.
pub fn csa_forward(model: &CsaModel, record: &VolumeRecord) -> Result<CsaIntermediates> {
    model.forward(&model.sample(record)?)
}
