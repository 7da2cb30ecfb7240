//! A hand-wired baseline model whose class-0 evidence is a planted cube.

use volalign_core::data::{Split, Volume, VolumeRecord};
use volalign_core::diagnostics::CamVolume;
use volalign_core::fusion::{AblationFlags, CsaModel, ModelConfig};

pub const LESION: std::ops::Range<usize> = 16..32;

pub fn lesion_record() -> VolumeRecord {
    let in_lesion = |d, h, w| LESION.contains(&d) && LESION.contains(&h) && LESION.contains(&w);
    VolumeRecord {
        id: "rigged".into(),
        modality: "T1".into(),
        voxels: Volume::from_fn([32, 32, 32], |d, h, w| if in_lesion(d, h, w) { 1.0 } else { 0.0 }),
        report: "bright focal lesion".into(),
        labels: vec![1, 0],
        split: Split::Test,
    }
}

fn set(model: &mut CsaModel, name: &str, f: impl Fn(&mut [f32])) {
    let id = model.params.id(name).unwrap_or_else(|| panic!("no parameter `{name}`"));
    let t = model.params.tensor_mut(id);
    t.data_mut().fill(0.0);
    f(t.data_mut());
}

/// Every conv block thresholds the centre tap of channel 0 into channels 0
/// and 1 with opposite signs; the channel norm turns that into a sign and
/// gamma keeps only channel 0. Class 0 reads the pooled channel 0 next to a
/// constant bias unit so the normalised embedding still varies with it.
pub fn rigged_model() -> CsaModel {
    let cfg = ModelConfig::default();
    let modalities = vec!["T1".to_string()];
    let mut model = CsaModel::new(&cfg, AblationFlags::BASELINE, &modalities, 2, None, 0).unwrap();
    let channels = cfg.vision.conv_channels;
    let mut cin = 1;
    // the high level after block 0 is silu(sqrt(C/2)), the low one is negative
    let thresholds = [0.5, 1.0, 1.0, 1.0];
    for (i, &cout) in channels.iter().enumerate() {
        let p = format!("branch.T1.conv.block{i}");
        let fan = cin * 27;
        set(&mut model, &format!("{p}.weight"), |w| {
            w[13] = 1.0;
            w[fan + 13] = -1.0;
        });
        let t = thresholds[i];
        set(&mut model, &format!("{p}.bias"), |b| {
            b[0] = -t;
            b[1] = t;
        });
        set(&mut model, &format!("{p}.norm.gamma"), |g| g[0] = 1.0);
        set(&mut model, &format!("{p}.norm.beta"), |_| {});
        cin = cout;
    }
    let embed = cfg.vision.embed_dim;
    set(&mut model, "branch.T1.pool.proj.weight", |w| w[0] = 1.0);
    set(&mut model, "branch.T1.pool.proj.bias", |b| b[1] = 1.0);
    set(&mut model, "head.weight", |w| w[0] = 1.0);
    set(&mut model, "head.bias", |_| {});
    assert_eq!(model.params.tensor(model.params.id("head.weight").unwrap()).shape(), [embed, 2]);
    model
}

/// Fraction of the map's mass inside the lesion cube.
pub fn lesion_mass_fraction(cam: &CamVolume) -> f64 {
    let [d0, h0, w0] = cam.volume.dims();
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for d in 0..d0 {
        for h in 0..h0 {
            for w in 0..w0 {
                let v = cam.volume.get(d, h, w) as f64;
                total += v;
                if LESION.contains(&d) && LESION.contains(&h) && LESION.contains(&w) {
                    inside += v;
                }
            }
        }
    }
    inside / total
}
