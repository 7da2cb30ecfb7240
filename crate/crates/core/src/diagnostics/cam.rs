use volalign_autodiff::Graph;

use crate::data::{Split, Volume, VolumeRecord};
use crate::fusion::{CsaModel, Sample};
use crate::{Error, Result};

/// Modality tag of CAM volumes stored as MVOL.
pub const CAM_MODALITY: &str = "CAM";

/// Heatmap over the input volume for one class, in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CamVolume {
    pub class_index: usize,
    pub volume: Volume,
}

impl CamVolume {
    /// MVOL-ready record with a one-hot label for the target class.
    pub fn to_record(&self, id: &str, n_classes: usize, class_name: &str) -> VolumeRecord {
        let mut labels = vec![0u8; n_classes];
        if let Some(l) = labels.get_mut(self.class_index) {
            *l = 1;
        }
        VolumeRecord {
            id: id.to_string(),
            modality: CAM_MODALITY.to_string(),
            voxels: self.volume.clone(),
            report: format!("activation map for {class_name}"),
            labels,
            split: Split::Test,
        }
    }
}

fn axis_weights(x: usize, out: usize, src: usize) -> (usize, usize, f32) {
    let u = ((x as f64 + 0.5) * src as f64 / out as f64 - 0.5).clamp(0.0, (src - 1) as f64);
    let i0 = u.floor() as usize;
    let i1 = (i0 + 1).min(src - 1);
    (i0, i1, (u - i0 as f64) as f32)
}

/// Trilinear upsampling that aligns cell centres (half-pixel convention),
/// so every coarse cell covers its own block of output voxels.
pub fn upsample_cell_centred(grid: &[f32], src: [usize; 3], out: [usize; 3]) -> Volume {
    let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
    let at = |d: usize, h: usize, w: usize| grid[(d * src[1] + h) * src[2] + w];
    Volume::from_fn(out, |d, h, w| {
        let (d0, d1, td) = axis_weights(d, out[0], src[0]);
        let (h0, h1, th) = axis_weights(h, out[1], src[1]);
        let (w0, w1, tw) = axis_weights(w, out[2], src[2]);
        let plane = |d: usize| lerp(lerp(at(d, h0, w0), at(d, h0, w1), tw), lerp(at(d, h1, w0), at(d, h1, w1), tw), th);
        lerp(plane(d0), plane(d1), td)
    })
}

/// CAM of a prepared sample, cropped to `original` dims.
pub fn cam_map_sample(model: &CsaModel, sample: &Sample, original: [usize; 3], class_index: usize) -> Result<CamVolume> {
    if class_index >= model.n_classes {
        return Err(Error::ClassIndex {
            index: class_index,
            classes: model.n_classes,
        });
    }
    let mut g = Graph::<f32>::new();
    let f = model.net.forward(&mut g, &model.params, sample)?;
    let logit = g.pick(f.logits, class_index);
    let grads = g.backward(logit);
    let act = g.value(f.f_v);
    let (c, s) = act.dims2();
    let zeros = vec![0.0; c * s];
    let grad = grads.get(f.f_v).map_or(&zeros[..], |t| t.data());
    let mut map = vec![0f32; s];
    for ch in 0..c {
        let row = &grad[ch * s..(ch + 1) * s];
        let weight = row.iter().map(|&v| v as f64).sum::<f64>() / s as f64;
        for (m, a) in map.iter_mut().zip(&act.data()[ch * s..(ch + 1) * s]) {
            *m += (weight * *a as f64) as f32;
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    let full = upsample_cell_centred(&map, f.grid_dims, sample.dims);
    let cropped = Volume::from_fn(original, |d, h, w| full.get(d, h, w));
    let max = cropped.data().iter().copied().fold(0f32, f32::max);
    let volume = if max > 0.0 {
        Volume::from_fn(original, |d, h, w| cropped.get(d, h, w) / max)
    } else {
        cropped
    };
    Ok(CamVolume { class_index, volume })
}

/// Gradient-weighted activation map of the conv stream's final grid for
/// one class logit, upsampled to the record's dims and max-normalised.
pub fn cam_map(model: &CsaModel, record: &VolumeRecord, class_index: usize) -> Result<CamVolume> {
    let sample = model.sample(record)?;
    cam_map_sample(model, &sample, record.voxels.dims(), class_index)
}
