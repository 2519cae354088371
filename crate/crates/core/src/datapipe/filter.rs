//! Dataset cleaning: split clips at scene cuts, score sampled frames against
//! a reference depth model, drop segments that fail both checks.

use serde::{Deserialize, Serialize};

use super::clip::Clip;
use super::cuts::{detect_scene_cuts, segments};
use super::resize::area_resize;
use crate::depthspace::{colorize_depth, NormalizationParams};
use crate::error::{Error, Result};
use crate::metrics::aligned_scores;
use crate::numerics::rng::derive_seed;
use crate::numerics::Tensor;

/// Side of the thumbnails compared by [`similarity_score`].
pub const SIMILARITY_SIZE: usize = 16;
/// Frames scored per segment.
pub const FRAMES_PER_SEGMENT: usize = 10;

/// Single-frame depth predictor used as the filtering reference.
pub trait DepthModel {
    /// `(3, H, W)` frame to an `(H, W)` depth map, up to scale and shift.
    fn predict_depth(&self, frame: &Tensor, seed: u64) -> Result<Tensor>;
}

impl<M: DepthModel + ?Sized> DepthModel for &M {
    fn predict_depth(&self, frame: &Tensor, seed: u64) -> Result<Tensor> {
        (**self).predict_depth(frame, seed)
    }
}

fn thumbnail(depth: &Tensor) -> Result<Tensor> {
    let params = NormalizationParams::from_values(depth.data())?;
    let colour = colorize_depth(depth, &params)?;
    area_resize(&colour, SIMILARITY_SIZE, SIMILARITY_SIZE)
}

/// Pearson correlation of the colorized, downsampled depth maps `(H, W)`.
pub fn similarity_score(depth_a: &Tensor, depth_b: &Tensor) -> Result<f64> {
    if depth_a.shape() != depth_b.shape() {
        return Err(Error::shape(format!(
            "similarity of {:?} and {:?}",
            depth_a.shape(),
            depth_b.shape()
        )));
    }
    let (a, b) = (thumbnail(depth_a)?, thumbnail(depth_b)?);
    let (ma, mb) = (a.mean(), b.mean());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if !(saa > 0.0 && sbb > 0.0) {
        return Err(Error::DegenerateDepth { spread: 0.0, min: 0.0 });
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Up to `count` indices spread evenly over `0..len`, endpoints included.
pub fn linspace_indices(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut idx: Vec<usize> = (0..count)
        .map(|i| ((i * (len - 1)) as f64 / (count - 1).max(1) as f64).round() as usize)
        .collect();
    idx.dedup();
    idx
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len();
    Some(if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterThresholds {
    pub similarity: f64,
    pub delta1: f64,
    pub scene_cut: f64,
}

impl Default for FilterThresholds {
    fn default() -> Self {
        Self {
            similarity: 0.5,
            // a constant prediction already scores around 0.5 on the
            // concentrated depth of typical scenes
            delta1: 0.6,
            scene_cut: super::cuts::DEFAULT_CUT_THRESHOLD,
        }
    }
}

impl FilterThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.similarity) || !(0.0..=1.0).contains(&self.delta1) {
            return Err(Error::invalid(format!(
                "thresholds out of range: similarity {} delta1 {}",
                self.similarity, self.delta1
            )));
        }
        if !(self.scene_cut > 0.0) {
            return Err(Error::invalid("scene cut threshold must be positive"));
        }
        Ok(())
    }
}

/// One line of the filter report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub segment_id: String,
    pub median_delta1: Option<f64>,
    pub median_similarity: Option<f64>,
    pub kept: bool,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<Clip>,
    pub removed: Vec<Clip>,
    pub report: Vec<SegmentReport>,
    /// Frames the model failed on, as `(segment_id, frame, message)`.
    pub skipped: Vec<(String, usize, String)>,
}

/// Splits every clip at scene cuts and removes segments whose median aligned
/// δ1 and median similarity both fall below their thresholds.
pub fn filter_clips<M: DepthModel + ?Sized>(
    clips: &[Clip],
    model: &M,
    thresholds: &FilterThresholds,
    seed: u64,
) -> Result<FilterOutcome> {
    thresholds.validate()?;
    let mut out = FilterOutcome::default();
    for (ci, clip) in clips.iter().enumerate() {
        let cuts = if clip.len() >= 2 {
            detect_scene_cuts(&clip.frames, thresholds.scene_cut)?
        } else {
            Vec::new()
        };
        for (si, range) in segments(clip.len(), &cuts).into_iter().enumerate() {
            let indices: Vec<usize> = range.collect();
            let mut segment = clip.subset(&indices)?;
            segment.id = format!("{}#{si}", clip.id);
            let (mut d1, mut sim) = (Vec::new(), Vec::new());
            for k in linspace_indices(segment.len(), FRAMES_PER_SEGMENT) {
                let frame_seed = derive_seed(seed, ((ci as u64) << 32) | ((si as u64) << 16) | k as u64);
                let gt = segment.depth_frame(k)?;
                let pred = match segment.frame(k).and_then(|f| model.predict_depth(&f, frame_seed)) {
                    Ok(p) if p.shape() == gt.shape() => p,
                    Ok(p) => {
                        let msg = format!("model returned {:?} for {:?}", p.shape(), gt.shape());
                        out.skipped.push((segment.id.clone(), k, msg));
                        continue;
                    }
                    Err(e) => {
                        out.skipped.push((segment.id.clone(), k, e.to_string()));
                        continue;
                    }
                };
                // an unscorable frame counts as failing that check
                d1.push(aligned_scores(&pred, &gt).map(|s| s.delta1).unwrap_or(0.0));
                sim.push(similarity_score(&gt, &pred).unwrap_or(-1.0));
            }
            let (md, ms) = (median(&mut d1), median(&mut sim));
            let kept = match (md, ms) {
                (Some(d), Some(s)) => !(d < thresholds.delta1 && s < thresholds.similarity),
                _ => false,
            };
            out.report.push(SegmentReport {
                segment_id: segment.id.clone(),
                median_delta1: md,
                median_similarity: ms,
                kept,
            });
            if kept {
                out.kept.push(segment);
            } else {
                out.removed.push(segment);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::render::{generate_clip, SceneConfig};
    use crate::numerics::rng::SeededRng;

    /// Reads depth back from a lookup of the true maps.
    struct Oracle(Vec<Clip>);

    impl DepthModel for Oracle {
        fn predict_depth(&self, frame: &Tensor, _seed: u64) -> Result<Tensor> {
            for c in &self.0 {
                for k in 0..c.len() {
                    if &c.frame(k)? == frame {
                        return c.depth_frame(k);
                    }
                }
            }
            Err(Error::invalid("unknown frame"))
        }
    }

    fn shuffled(clip: &Clip, seed: u64) -> Clip {
        let mut rng = SeededRng::new(seed);
        let hw = clip.height() * clip.width();
        let mut depth = clip.depth.clone();
        for frame in depth.data_mut().chunks_mut(hw) {
            let order = rng.sample_indices(hw, hw);
            let copy = frame.to_vec();
            for (dst, src) in frame.iter_mut().zip(order) {
                *dst = copy[src];
            }
        }
        Clip { depth, ..clip.clone() }
    }

    #[test]
    fn similarity_examples() {
        let mut rng = SeededRng::new(1);
        let d = rng.uniform_tensor(&[20, 20], 1.0, 5.0);
        assert!((similarity_score(&d, &d).unwrap() - 1.0).abs() < 1e-12);
        let m = d.mean();
        let neg = d.map(|v| 2.0 * m - v);
        assert!((similarity_score(&d, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!(similarity_score(&d, &Tensor::full(&[20, 20], 2.0)).is_err());
        assert!(similarity_score(&d, &Tensor::ones(&[4, 4])).is_err());
        let mut total = 0.0;
        for _ in 0..200 {
            let a = rng.uniform_tensor(&[16, 16], 1.0, 5.0);
            let b = rng.uniform_tensor(&[16, 16], 1.0, 5.0);
            total += similarity_score(&a, &b).unwrap().abs();
        }
        assert!(total / 200.0 < 0.1);
    }

    #[test]
    fn linspace_sampling() {
        assert_eq!(linspace_indices(4, 10), vec![0, 1, 2, 3]);
        assert_eq!(linspace_indices(19, 10), vec![0, 2, 4, 6, 8, 10, 12, 14, 16, 18]);
        assert_eq!(linspace_indices(100, 10).len(), 10);
    }

    #[test]
    fn corrupted_clips_are_removed_and_clean_ones_kept() {
        let cfg = SceneConfig::default();
        let clean: Vec<Clip> = (0..3).map(|s| generate_clip(&cfg, s).unwrap()).collect();
        let oracle = Oracle(clean.clone());
        let mut corpus = clean.clone();
        corpus.push(Clip {
            id: "bad".into(),
            ..shuffled(&clean[0], 9)
        });
        let out = filter_clips(&corpus, &oracle, &FilterThresholds::default(), 0).unwrap();
        assert_eq!(out.kept.len() + out.removed.len(), out.report.len());
        let removed: Vec<&str> = out.removed.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(removed, vec!["bad#0"]);
        let again = filter_clips(&corpus, &oracle, &FilterThresholds::default(), 0).unwrap();
        assert_eq!(again.report, out.report);
        let lenient = FilterThresholds {
            similarity: 0.0,
            delta1: 0.0,
            ..FilterThresholds::default()
        };
        assert!(filter_clips(&corpus, &oracle, &lenient, 0).unwrap().removed.is_empty());
    }

    #[test]
    fn labeled_corpus_precision_and_recall() {
        let cfg = SceneConfig::default();
        let clean: Vec<Clip> = (100..120).map(|s| generate_clip(&cfg, s).unwrap()).collect();
        let oracle = Oracle(clean.clone());
        let mut corpus = clean.clone();
        corpus.extend(clean.iter().enumerate().map(|(i, c)| Clip {
            id: format!("bad{i}"),
            ..shuffled(c, i as u64)
        }));
        let out = filter_clips(&corpus, &oracle, &FilterThresholds::default(), 1).unwrap();
        let hits = out.removed.iter().filter(|c| c.id.starts_with("bad")).count() as f64;
        let precision = hits / out.removed.len().max(1) as f64;
        let recall = hits / 20.0;
        assert!(precision >= 0.9 && recall >= 0.9, "precision {precision} recall {recall}");
    }

    #[test]
    fn model_failures_are_skipped() {
        let clip = generate_clip(&SceneConfig::default(), 4).unwrap();
        let out = filter_clips(std::slice::from_ref(&clip), &Oracle(Vec::new()), &FilterThresholds::default(), 0).unwrap();
        assert_eq!(out.removed.len(), 1);
        assert_eq!(out.report[0].median_delta1, None);
        assert_eq!(out.skipped.len(), 10);
    }
}
