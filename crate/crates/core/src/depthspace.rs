//! Depth normalization, the latent codec and depth colorization.
//!
//! The latent codec is a lossless space-to-depth rearrangement with factor 2:
//! source channel `c` of a `(T, C, H, W)` clip becomes latent channels
//! `4c..4c+4` of a `(T, 4C, H/2, W/2)` latent, holding the top-left,
//! top-right, bottom-left and bottom-right pixel of each 2x2 block in that
//! order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Smallest accepted `d98 - d2` spread.
pub const MIN_DEPTH_SPREAD: f64 = 1e-8;

/// Rec. 601 luma weights used to reduce RGB frames to one channel before
/// encoding.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Linear-interpolation percentile, rank `p/100 * (n-1)` over sorted values.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("percentile of empty input"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::invalid(format!("percentile p={p} outside [0,100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, p))
}

pub(crate) fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-clip 2% / 98% depth percentiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub d2: f64,
    pub d98: f64,
}

impl NormalizationParams {
    pub fn new(d2: f64, d98: f64) -> Result<Self> {
        if !d2.is_finite() || !d98.is_finite() || d98 < d2 {
            return Err(Error::invalid(format!("invalid normalization pair ({d2}, {d98})")));
        }
        Ok(Self { d2, d98 })
    }

    pub fn from_values(values: &[f64]) -> Result<Self> {
        let mut sorted = values.to_vec();
        if sorted.is_empty() {
            return Err(Error::invalid("percentile of empty input"));
        }
        sorted.sort_by(f64::total_cmp);
        Self::new(percentile_sorted(&sorted, 2.0), percentile_sorted(&sorted, 98.0))
    }

    pub fn spread(&self) -> f64 {
        self.d98 - self.d2
    }

    fn check_spread(&self) -> Result<()> {
        if self.spread() < MIN_DEPTH_SPREAD {
            return Err(Error::DegenerateDepth {
                spread: self.spread(),
                min: MIN_DEPTH_SPREAD,
            });
        }
        Ok(())
    }

    /// `((d - d2)/(d98 - d2) - 0.5) * 2`, clamped to `[-1, 1]`.
    pub fn normalize(&self, d: f64) -> f64 {
        (((d - self.d2) / self.spread() - 0.5) * 2.0).clamp(-1.0, 1.0)
    }

    pub fn denormalize(&self, n: f64) -> f64 {
        (n / 2.0 + 0.5) * self.spread() + self.d2
    }
}

/// Normalizes a `(T, 1, H, W)` depth clip into `[-1, 1]` using percentiles
/// taken over every value of the clip jointly.
pub fn normalize_depth(depth: &Tensor) -> Result<(Tensor, NormalizationParams)> {
    if depth.rank() != 4 || depth.shape()[1] != 1 {
        return Err(Error::shape(format!(
            "depth clip must be (T,1,H,W), got {:?}",
            depth.shape()
        )));
    }
    if depth.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::invalid("depth must be finite and nonnegative"));
    }
    let params = NormalizationParams::from_values(depth.data())?;
    params.check_spread()?;
    Ok((depth.map(|d| params.normalize(d)), params))
}

pub fn denormalize_depth(normalized: &Tensor, params: &NormalizationParams) -> Tensor {
    normalized.map(|n| params.denormalize(n))
}

/// Spatially compressed clip: `(T, 4C, H/2, W/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    pub frames: Tensor,
    pub source_channels: usize,
}

impl LatentClip {
    pub const SPATIAL_FACTOR: usize = 2;

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// Space-to-depth with factor 2.
pub fn encode_latent(clip: &Tensor) -> Result<LatentClip> {
    let s = clip.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("clip must be (T,C,H,W), got {s:?}")));
    }
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("latent encoding needs even H and W, got {h}x{w}")));
    }
    let (lh, lw) = (h / 2, w / 2);
    let src = clip.data();
    let mut out = vec![0.0; src.len()];
    for f in 0..t {
        for ch in 0..c {
            let plane = &src[(f * c + ch) * h * w..(f * c + ch + 1) * h * w];
            for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let base = ((f * 4 * c) + 4 * ch + k) * lh * lw;
                for y in 0..lh {
                    for x in 0..lw {
                        out[base + y * lw + x] = plane[(2 * y + dy) * w + 2 * x + dx];
                    }
                }
            }
        }
    }
    Ok(LatentClip {
        frames: Tensor::new(vec![t, 4 * c, lh, lw], out)?,
        source_channels: c,
    })
}

/// Exact inverse of [`encode_latent`].
pub fn decode_latent(latent: &LatentClip) -> Result<Tensor> {
    let s = latent.frames.shape();
    let c = latent.source_channels;
    if s.len() != 4 || s[1] != 4 * c {
        return Err(Error::shape(format!(
            "latent must be (T,{},h,w), got {s:?}",
            4 * c
        )));
    }
    let (t, lh, lw) = (s[0], s[2], s[3]);
    let (h, w) = (2 * lh, 2 * lw);
    let src = latent.frames.data();
    let mut out = vec![0.0; src.len()];
    for f in 0..t {
        for ch in 0..c {
            let plane = &mut out[(f * c + ch) * h * w..(f * c + ch + 1) * h * w];
            for (k, (dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                let base = ((f * 4 * c) + 4 * ch + k) * lh * lw;
                for y in 0..lh {
                    for x in 0..lw {
                        plane[(2 * y + dy) * w + 2 * x + dx] = src[base + y * lw + x];
                    }
                }
            }
        }
    }
    Tensor::new(vec![t, c, h, w], out)
}

/// `(T, 3, H, W)` RGB to `(T, 1, H, W)` luma.
pub fn luma(frames: &Tensor) -> Result<Tensor> {
    let s = frames.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape(format!("frames must be (T,3,H,W), got {s:?}")));
    }
    let (t, hw) = (s[0], s[2] * s[3]);
    let d = frames.data();
    let mut out = vec![0.0; t * hw];
    for f in 0..t {
        for (c, wgt) in LUMA_WEIGHTS.iter().enumerate() {
            let plane = &d[(f * 3 + c) * hw..(f * 3 + c + 1) * hw];
            for (o, v) in out[f * hw..(f + 1) * hw].iter_mut().zip(plane) {
                *o += wgt * v;
            }
        }
    }
    Tensor::new(vec![t, 1, s[2], s[3]], out)
}

/// Video conditioning latent: luma followed by space-to-depth, so every frame
/// contributes four latent channels.
pub fn encode_video(frames: &Tensor) -> Result<LatentClip> {
    encode_latent(&luma(frames)?)
}

/// Grayscale colorization: `(d - d2)/(d98 - d2)` clamped to `[0, 1]` and
/// replicated into three channels.
pub fn colorize_depth(depth: &Tensor, params: &NormalizationParams) -> Result<Tensor> {
    if depth.rank() != 2 {
        return Err(Error::shape(format!("depth map must be (H,W), got {:?}", depth.shape())));
    }
    params.check_spread()?;
    let plane: Vec<f64> = depth
        .data()
        .iter()
        .map(|d| ((d - params.d2) / params.spread()).clamp(0.0, 1.0))
        .collect();
    let mut data = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        data.extend_from_slice(&plane);
    }
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    Tensor::new(vec![3, h, w], data)
}
