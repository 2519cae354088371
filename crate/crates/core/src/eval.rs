//! Per-clip scoring of predicted depth sequences.

use serde::{Deserialize, Serialize};

use crate::datapipe::Clip;
use crate::depthspace::percentile;
use crate::error::{Error, Result};
use crate::metrics::{absrel, aligned_scores, positive_mask, tae_aligned, MetricRecord};
use crate::numerics::Tensor;

/// AbsRel and δ1 after one scale and shift for the whole sequence, plus TAE
/// with the same alignment when the clip has at least two frames.
pub fn evaluate(pred: &Tensor, clip: &Clip) -> Result<MetricRecord> {
    if pred.shape() != clip.depth.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} for clip {} of {:?}",
            pred.shape(),
            clip.id,
            clip.depth.shape()
        )));
    }
    let scores = aligned_scores(pred, &clip.depth)?;
    let tae = if clip.len() >= 2 {
        Some(tae_aligned(pred, &clip.depth, &clip.poses)?)
    } else {
        None
    };
    Ok(MetricRecord {
        clip_id: clip.id.clone(),
        absrel: scores.absrel,
        delta1: scores.delta1,
        tae,
        valid_fraction: scores.valid_fraction,
    })
}

/// Means over clips; TAE over the clips that have it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub clips: usize,
    pub absrel: f64,
    pub delta1: f64,
    pub tae: Option<f64>,
}

pub fn aggregate(records: &[MetricRecord]) -> Result<Aggregate> {
    if records.is_empty() {
        return Err(Error::invalid("no records to aggregate"));
    }
    let n = records.len() as f64;
    let taes: Vec<f64> = records.iter().filter_map(|r| r.tae).collect();
    Ok(Aggregate {
        clips: records.len(),
        absrel: records.iter().map(|r| r.absrel).sum::<f64>() / n,
        delta1: records.iter().map(|r| r.delta1).sum::<f64>() / n,
        tae: (!taes.is_empty()).then(|| taes.iter().sum::<f64>() / taes.len() as f64),
    })
}

/// The clip's median ground-truth depth everywhere.
pub fn median_baseline(gt: &Tensor) -> Result<Tensor> {
    let m = percentile(gt.data(), 50.0)?;
    Ok(Tensor::full(gt.shape(), m))
}

/// AbsRel of [`median_baseline`], unaligned: a constant cannot be fitted by
/// scale and shift.
pub fn baseline_absrel(gt: &Tensor) -> Result<f64> {
    absrel(&median_baseline(gt)?, gt, &positive_mask(gt))
}
