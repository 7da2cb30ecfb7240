use serde::{Deserialize, Serialize};

use crate::fusion::Sample;
use crate::vision::Expert;
use crate::{Error, Result};

/// Text-to-volume top-1 retrieval over one pool of held-out pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub modality: String,
    pub n: usize,
    /// fraction of reports whose best-scoring volume carries an identical
    /// report
    pub top1: f64,
    /// expected `top1` of a uniformly random ranking
    pub chance: f64,
}

/// For each report, rank every volume in the pool by cosine similarity.
/// A hit is a volume whose own report is the query text; pools of
/// templated reports contain exact duplicates, and those count as hits
/// both here and in the chance rate.
pub fn retrieval_top1(expert: &Expert, pool: &[Sample], reports: &[String]) -> Result<RetrievalReport> {
    if pool.len() != reports.len() {
        return Err(Error::BatchMismatch(pool.len(), reports.len()));
    }
    if pool.is_empty() {
        return Err(Error::Empty("retrieval pool"));
    }
    let fv: Vec<Vec<f32>> = pool
        .iter()
        .map(|s| {
            let v = crate::data::Volume::new(s.dims, s.volume.clone())?;
            Ok(expert.encode(&v)?.vector)
        })
        .collect::<Result<_>>()?;
    let ft: Vec<Vec<f64>> = pool
        .iter()
        .map(|s| {
            let n = s.text.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            s.text.iter().map(|&v| v as f64 / n).collect()
        })
        .collect();
    let n = pool.len();
    let (mut hits, mut chance) = (0usize, 0.0);
    for (j, t) in ft.iter().enumerate() {
        let score = |i: usize| fv[i].iter().zip(t).map(|(a, b)| *a as f64 * b).sum::<f64>();
        let best = (0..n).fold(0, |b, i| if score(i) > score(b) { i } else { b });
        if reports[best] == reports[j] {
            hits += 1;
        }
        chance += reports.iter().filter(|r| **r == reports[j]).count() as f64 / n as f64;
    }
    Ok(RetrievalReport {
        modality: pool[0].modality.clone(),
        n,
        top1: hits as f64 / n as f64,
        chance: chance / n as f64,
    })
}
