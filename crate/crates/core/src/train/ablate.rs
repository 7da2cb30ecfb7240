use serde::{Deserialize, Serialize};

use super::{evaluate_model, finetune_samples, FinetuneConfig};
use crate::data::{Dataset, Split};
use crate::fusion::{prepare_samples, AblationFlags};
use crate::text::BagEncoder;
use crate::vision::ModalityExpertBank;
use crate::{Error, Result};

/// Component grid of the ablation, from the plain conv classifier up to
/// the full model.
pub const ABLATION_ROWS: [(&str, AblationFlags); 4] = [
    ("Baseline", AblationFlags::BASELINE),
    ("+MAVLP", AblationFlags::PRETRAINED),
    ("+CCT", AblationFlags::CCT),
    ("+CSA", AblationFlags::FULL),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub row: String,
    pub flags: AblationFlags,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_acc: f64,
    /// sample standard deviation over seeds
    pub std_acc: f64,
    /// text encoder digest after each seed's run
    pub text_encoder_sha256: Vec<String>,
}

/// Fine-tune every row on the train split for each seed and report test
/// accuracy.
pub fn ablate(dataset: &Dataset, bank: &ModalityExpertBank, base: &FinetuneConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.len() < 3 {
        return Err(Error::Config("the ablation needs at least three seeds".into()));
    }
    let modalities = &dataset.manifest.modality_vocabulary;
    bank.covers(modalities)?;
    let encoder = BagEncoder::new(&base.model.text)?;
    let train = prepare_samples(&dataset.split(Split::Train), &encoder)?;
    let test = prepare_samples(&dataset.split(Split::Test), &encoder)?;
    if test.is_empty() {
        return Err(Error::InsufficientData("the ablation needs a test split".into()));
    }
    ABLATION_ROWS
        .iter()
        .map(|&(name, flags)| {
            let runs = seeds
                .iter()
                .map(|&seed| {
                    let cfg = FinetuneConfig {
                        seed,
                        ablation_flags: flags,
                        validate_every_epoch: false,
                        ..base.clone()
                    };
                    let out = finetune_samples(&train, &[], modalities, dataset.n_classes(), Some(bank), &cfg)?;
                    Ok((evaluate_model(&out.model, &test, "test")?.accuracy, out.model.text_checksum()))
                })
                .collect::<Result<Vec<(f64, String)>>>()?;
            let (accuracies, text_encoder_sha256): (Vec<f64>, Vec<String>) = runs.into_iter().unzip();
            let n = accuracies.len() as f64;
            let mean = accuracies.iter().sum::<f64>() / n;
            let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
            Ok(AblationRow {
                row: name.to_string(),
                flags,
                seeds: seeds.to_vec(),
                accuracies,
                mean_acc: mean,
                std_acc: var.sqrt(),
                text_encoder_sha256,
            })
        })
        .collect()
}

/// CSV with columns `row,mean_acc,std_acc,seeds`.
pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("row,mean_acc,std_acc,seeds\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{:.6},{}\n", r.row, r.mean_acc, r.std_acc, r.seeds.len()));
    }
    s
}
