use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volalign_autodiff::{Float, Graph, ParamSet, Tensor, Var};

use super::{prepare_input, ConvStream, EmbeddingVector, GlobalPool, VisionConfig};
use crate::data::Volume;
use crate::{stable_hash, Error, Result};

/// Layout of one modality expert: conv stream plus pooling head.
#[derive(Clone, Debug)]
pub struct ExpertNet {
    pub conv: ConvStream,
    pub pool: GlobalPool,
}

impl ExpertNet {
    /// Registers parameters `{prefix}conv.*` and `{prefix}pool.*`.
    pub fn new<F: Float>(ps: &mut ParamSet<F>, prefix: &str, component: &str, cfg: &VisionConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        let conv = ConvStream::new(ps, &format!("{prefix}conv"), component, &cfg.conv_channels, rng)?;
        let pool = GlobalPool::new(ps, &format!("{prefix}pool"), component, cfg.feature_channels(), cfg.embed_dim, rng)?;
        Ok(Self { conv, pool })
    }

    /// Unit-norm `[1, E]` embedding of a prepared volume.
    pub fn forward<F: Float>(&self, g: &mut Graph<F>, ps: &ParamSet<F>, x: Var, dims: [usize; 3]) -> Var {
        let (f, _) = self.conv.forward(g, ps, x, dims);
        self.pool.forward(g, ps, f)
    }
}

/// Prepared volume as a constant `[1, D*H*W]` graph input.
fn volume_input<F: Float>(g: &mut Graph<F>, v: &Volume) -> Result<(Var, [usize; 3])> {
    let p = prepare_input(v)?;
    let dims = p.dims();
    let t = Tensor::new([1, p.len()], p.data().iter().map(|&x| F::from_f64_lossy(x as f64)).collect())?;
    Ok((g.constant(t), dims))
}

/// One pretrained (or freshly initialised) expert.
#[derive(Clone, Debug)]
pub struct Expert {
    pub modality: String,
    pub net: ExpertNet,
    pub params: ParamSet<f32>,
}

pub const EXPERT_COMPONENT: &str = "expert";

impl Expert {
    pub fn new(modality: &str, cfg: &VisionConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(modality.as_bytes()));
        let mut params = ParamSet::new();
        let net = ExpertNet::new(&mut params, "", EXPERT_COMPONENT, cfg, &mut rng)?;
        Ok(Self {
            modality: modality.to_string(),
            net,
            params,
        })
    }

    pub fn encode(&self, v: &Volume) -> Result<EmbeddingVector> {
        let mut g = Graph::inference();
        let (x, dims) = volume_input(&mut g, v)?;
        let y = self.net.forward(&mut g, &self.params, x, dims);
        if !g.value(y).all_finite() {
            return Err(Error::NonFinite("vision embedding"));
        }
        Ok(EmbeddingVector {
            vector: g.value(y).data().to_vec(),
            normalized: true,
        })
    }
}

/// One expert per modality; experts share architecture, not parameters.
#[derive(Clone, Debug, Default)]
pub struct ModalityExpertBank {
    pub experts: BTreeMap<String, Expert>,
}

impl ModalityExpertBank {
    /// Fresh experts for every modality, each from its own seed stream.
    pub fn initialise(modalities: &[String], cfg: &VisionConfig, seed: u64) -> Result<Self> {
        let experts = modalities
            .iter()
            .map(|m| Ok((m.clone(), Expert::new(m, cfg, seed)?)))
            .collect::<Result<_>>()?;
        Ok(Self { experts })
    }

    pub fn insert(&mut self, expert: Expert) {
        self.experts.insert(expert.modality.clone(), expert);
    }

    pub fn get(&self, modality: &str) -> Result<&Expert> {
        self.experts.get(modality).ok_or_else(|| Error::UnknownModality(modality.to_string()))
    }

    pub fn covers(&self, modalities: &[String]) -> Result<()> {
        modalities.iter().try_for_each(|m| self.get(m).map(|_| ()))
    }
}

/// Normalised `f_v` from the modality's expert.
pub fn vision_encode(volume: &Volume, modality: &str, bank: &ModalityExpertBank) -> Result<EmbeddingVector> {
    bank.get(modality)?.encode(volume)
}
