//! Procedural phantoms: noisy per-modality background with one planted
//! lesion per active class, plus a templated report naming it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{normalize_volume, write_mvol, DatasetManifest, ManifestEntry, NormalClassPolicy, Split, Volume, VolumeRecord};
use crate::{stable_hash, Error, Result};

pub const ABNORMALITY_NAMES: [&str; 9] = [
    "cyst",
    "hemangioma",
    "metastasis",
    "abscess",
    "hepatocellular carcinoma",
    "focal nodular hyperplasia",
    "cholangiocarcinoma",
    "glioma",
    "meningioma",
];

/// Indexed by the octant bit pattern (d, h, w).
pub const OCTANT_NAMES: [&str; 8] = [
    "anterior superior left",
    "anterior superior right",
    "posterior superior left",
    "posterior superior right",
    "anterior inferior left",
    "anterior inferior right",
    "posterior inferior left",
    "posterior inferior right",
];

#[derive(Clone, Copy, Debug)]
enum Profile {
    Solid,
    Shell,
    Soft,
}

/// Radii (d, h, w) in voxels at a 32-voxel grid, and the intensity profile.
const SHAPES: [([f64; 3], Profile); 9] = [
    ([3.5, 3.5, 3.5], Profile::Solid),
    ([6.0, 6.0, 6.0], Profile::Solid),
    ([6.0, 6.0, 6.0], Profile::Shell),
    ([3.0, 3.0, 7.0], Profile::Solid),
    ([2.0, 6.0, 6.0], Profile::Solid),
    ([3.0, 7.0, 3.0], Profile::Solid),
    ([7.0, 3.0, 3.0], Profile::Solid),
    ([5.0, 5.0, 5.0], Profile::Soft),
    ([4.0, 4.0, 4.0], Profile::Shell),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub grid_size: usize,
    pub n_records: usize,
    pub n_classes: usize,
    pub modalities: Vec<String>,
    /// modality -> (mean, std) of the planted lesion intensity
    pub lesion_intensity_by_modality: BTreeMap<String, (f32, f32)>,
    pub noise_std: f32,
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let modalities: Vec<String> = ["T1", "T2", "DWI"].iter().map(|s| s.to_string()).collect();
        let lesion_intensity_by_modality = [("T1", (0.85, 0.05)), ("T2", (0.1, 0.04)), ("DWI", (0.9, 0.05))]
            .into_iter()
            .map(|(m, v)| (m.to_string(), v))
            .collect();
        Self {
            grid_size: 32,
            n_records: 800,
            n_classes: 4,
            modalities,
            lesion_intensity_by_modality,
            noise_std: 0.1,
            seed: 0,
            train_fraction: 0.70,
            val_fraction: 0.15,
        }
    }
}

impl PhantomSpec {
    /// 800 records split exactly 600/100/100, 4 classes, 3 modalities, 32^3.
    pub fn standard_benchmark() -> Self {
        Self {
            train_fraction: 0.75,
            val_fraction: 0.125,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 8 {
            return Err(Error::Config(format!("grid_size {} is below 8", self.grid_size)));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("n_classes must be at least 2".into()));
        }
        if self.n_classes > ABNORMALITY_NAMES.len() {
            return Err(Error::TooManyClasses {
                requested: self.n_classes,
                available: ABNORMALITY_NAMES.len(),
            });
        }
        if self.modalities.is_empty() {
            return Err(Error::Config("at least one modality is required".into()));
        }
        for m in &self.modalities {
            match self.lesion_intensity_by_modality.get(m) {
                Some((mean, std)) if mean.is_finite() && std.is_finite() && *std >= 0.0 => {}
                Some(_) => return Err(Error::Config(format!("lesion intensity for `{m}` is invalid"))),
                None => return Err(Error::Config(format!("no lesion intensity for modality `{m}`"))),
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be a non-negative number".into()));
        }
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&v) || t + v > 1.0 {
            return Err(Error::Config("split fractions must lie in [0, 1] and sum to at most 1".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        ABNORMALITY_NAMES[..self.n_classes].iter().map(|s| s.to_string()).collect()
    }
}

fn background_intensity(modality_index: usize) -> f32 {
    [0.3, 0.55, 0.2][modality_index % 3]
}

fn record_id(index: usize, modality: &str) -> String {
    format!("case{index:05}_{modality}")
}

fn profile_weight(profile: Profile, r: f64) -> f64 {
    match profile {
        Profile::Solid => ((1.0 - r) / 0.2).clamp(0.0, 1.0),
        Profile::Shell => ((1.0 - r) / 0.15).clamp(0.0, 1.0) * ((r - 0.55) / 0.15).clamp(0.0, 1.0),
        Profile::Soft => {
            if r < 1.6 {
                (-3.0 * r * r).exp()
            } else {
                0.0
            }
        }
    }
}

/// One phantom record; a pure function of `(spec, index)`.
fn synthesize_one(spec: &PhantomSpec, index: usize) -> Result<VolumeRecord> {
    let k = spec.n_classes;
    let class = index % k;
    let mi = (index / k) % spec.modalities.len();
    let modality = &spec.modalities[mi];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ index as u64);
    let g = spec.grid_size as f64;
    let scale = g / 32.0;

    let octant = rng.gen_range(0..8usize);
    let jitter = g / 16.0;
    let center: [f64; 3] = std::array::from_fn(|axis| {
        let hi = (octant >> (2 - axis)) & 1 == 1;
        let base = if hi { 0.75 * g } else { 0.25 * g };
        base + rng.gen_range(-jitter..=jitter) - 0.5
    });
    let (radii, profile) = SHAPES[class];
    let radii: [f64; 3] = std::array::from_fn(|a| radii[a] * scale * rng.gen_range(0.85..1.15));
    let (mean, std) = spec.lesion_intensity_by_modality[modality];
    let intensity = Normal::new(mean as f64, std as f64).map_err(|e| Error::Config(e.to_string()))?.sample(&mut rng);
    let base = background_intensity(mi) as f64;
    let noise = Normal::new(0.0, spec.noise_std as f64).map_err(|e| Error::Config(e.to_string()))?;

    let n = spec.grid_size;
    let mut data = Vec::with_capacity(n * n * n);
    for d in 0..n {
        for h in 0..n {
            for w in 0..n {
                let p = [d as f64, h as f64, w as f64];
                let r = (0..3).map(|a| ((p[a] - center[a]) / radii[a]).powi(2)).sum::<f64>().sqrt();
                let wgt = profile_weight(profile, r);
                let v = base * (1.0 - wgt) + intensity * wgt + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let voxels = normalize_volume(&Volume::new([n, n, n], data)?)?;
    let mut labels = vec![0u8; k];
    labels[class] = 1;
    let report = format!(
        "{modality} sequence shows {} in {} region.",
        ABNORMALITY_NAMES[class], OCTANT_NAMES[octant]
    );
    Ok(VolumeRecord {
        id: record_id(index, modality),
        modality: modality.clone(),
        voxels,
        report,
        labels,
        split: Split::Train,
    })
}

/// Split assignment by rank of a stable hash of the id, so fractions are
/// met exactly and reproducibly.
fn assign_splits(records: &mut [VolumeRecord], train: f64, val: f64) {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by_key(|&i| (stable_hash(records[i].id.as_bytes()), i));
    let n = records.len() as f64;
    let n_train = (n * train).round() as usize;
    let n_val = (n * val).round() as usize;
    for (rank, &i) in order.iter().enumerate() {
        records[i].split = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
}

/// Generate every record in memory together with a manifest whose entries
/// point at `volumes/<id>.mvol`.
pub fn synthesize_records(spec: &PhantomSpec) -> Result<(DatasetManifest, Vec<VolumeRecord>)> {
    spec.validate()?;
    let mut records = (0..spec.n_records)
        .map(|i| synthesize_one(spec, i))
        .collect::<Result<Vec<_>>>()?;
    assign_splits(&mut records, spec.train_fraction, spec.val_fraction);
    let manifest = DatasetManifest {
        class_names: spec.class_names(),
        modality_vocabulary: spec.modalities.clone(),
        normal_class_policy: NormalClassPolicy::Explicit,
        records: records
            .iter()
            .map(|r| ManifestEntry {
                id: r.id.clone(),
                path: PathBuf::from("volumes").join(format!("{}.mvol", r.id)),
                split: r.split,
            })
            .collect(),
    };
    Ok((manifest, records))
}

/// Write the phantom dataset under `out_dir` (`manifest.json` plus
/// `volumes/*.mvol`) and return its manifest.
pub fn synthesize_dataset(spec: &PhantomSpec, out_dir: &Path) -> Result<DatasetManifest> {
    let (manifest, records) = synthesize_records(spec)?;
    let vol_dir = out_dir.join("volumes");
    std::fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    for (entry, rec) in manifest.records.iter().zip(&records) {
        write_mvol(rec, &out_dir.join(&entry.path))?;
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
