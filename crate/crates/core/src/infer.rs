//! Depth prediction for clips and single images.

use serde::{Deserialize, Serialize};

use crate::datapipe::DepthModel;
use crate::denoiser::{Denoiser, FramePositions};
use crate::depthspace::{decode_latent, encode_video, LatentClip, NormalizationParams};
use crate::error::{Error, Result};
use crate::flow::{ensemble, sample};
use crate::longvideo::sample_long;
use crate::metrics::MIN_ALIGNED_DEPTH;
use crate::numerics::rng::derive_seed;
use crate::numerics::Tensor;

/// Percentiles that map the model's normalized output into depth. Outputs
/// are affine-invariant, so any fixed positive pair works.
pub const OUTPUT_PARAMS: (f64, f64) = (1.0, 2.0);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    pub steps: usize,
    pub ensemble: usize,
    pub max_frames_per_pass: usize,
    pub seed: u64,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            steps: 3,
            ensemble: 1,
            max_frames_per_pass: 32,
            seed: 0,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.ensemble == 0 {
            return Err(Error::invalid("steps and ensemble must be positive"));
        }
        if self.max_frames_per_pass < 2 {
            return Err(Error::invalid("max_frames_per_pass must be at least 2"));
        }
        Ok(())
    }

    /// Seed of ensemble member `i`; member 0 uses the run seed itself.
    pub fn member_seed(&self, i: usize) -> u64 {
        if i == 0 {
            self.seed
        } else {
            derive_seed(self.seed, 1 << 32 | i as u64)
        }
    }
}

/// Normalized depth and the parameters that turn it into the stored output.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// `(T, 1, H, W)` depth in the prediction's own affine space.
    pub depth: Tensor,
    pub params: NormalizationParams,
}

/// A base model and, for clips longer than one pass, an interpolation model.
#[derive(Debug, Clone)]
pub struct Predictor {
    base: Denoiser,
    interp: Option<Denoiser>,
    config: InferConfig,
}

impl Predictor {
    pub fn new(base: Denoiser, interp: Option<Denoiser>, config: InferConfig) -> Result<Self> {
        config.validate()?;
        if base.config().is_interpolation() {
            return Err(Error::invalid("the base model is an interpolation model"));
        }
        if interp.as_ref().is_some_and(|m| !m.config().is_interpolation()) {
            return Err(Error::invalid("the interpolation model is a base model"));
        }
        Ok(Self { base, interp, config })
    }

    pub fn config(&self) -> &InferConfig {
        &self.config
    }

    pub fn base(&self) -> &Denoiser {
        &self.base
    }

    pub fn interp(&self) -> Option<&Denoiser> {
        self.interp.as_ref()
    }

    /// Frame height and width must be multiples of this.
    pub fn size_unit(&self) -> usize {
        LatentClip::SPATIAL_FACTOR << (self.base.config().depth_levels - 1)
    }

    fn video_latent(&self, frames: &Tensor) -> Result<Tensor> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 || s[0] == 0 {
            return Err(Error::shape(format!("frames must be (T,3,H,W) with T > 0, got {s:?}")));
        }
        let unit = self.size_unit();
        if !s[2].is_multiple_of(unit) || !s[3].is_multiple_of(unit) {
            return Err(Error::shape(format!("frame size {}x{} is not a multiple of {unit}", s[2], s[3])));
        }
        Ok(encode_video(frames)?.frames)
    }

    /// Normalized-space latents of one member.
    fn member_latent(&self, z_c: &Tensor, seed: u64) -> Result<Tensor> {
        let t = z_c.shape()[0];
        if t <= self.config.max_frames_per_pass {
            return sample(&self.base, z_c, self.config.steps, seed, &FramePositions::contiguous(t));
        }
        let interp = self.interp.as_ref().ok_or_else(|| {
            Error::invalid(format!(
                "{t} frames exceed {} per pass and no interpolation model is loaded",
                self.config.max_frames_per_pass
            ))
        })?;
        sample_long(&self.base, interp, z_c, self.config.max_frames_per_pass, self.config.steps, seed)
    }

    /// Normalized depth `(T, 1, H, W)` of each ensemble member.
    pub fn members(&self, frames: &Tensor) -> Result<Vec<Tensor>> {
        let z_c = self.video_latent(frames)?;
        (0..self.config.ensemble)
            .map(|i| {
                let z = self.member_latent(&z_c, self.config.member_seed(i))?;
                decode_latent(&LatentClip {
                    frames: z,
                    source_channels: 1,
                })
            })
            .collect()
    }

    /// Median of the aligned members, mapped to depth with
    /// [`OUTPUT_PARAMS`] and floored at a small positive value.
    pub fn predict(&self, frames: &Tensor) -> Result<Prediction> {
        let normalized = ensemble(&self.members(frames)?)?;
        let params = NormalizationParams::new(OUTPUT_PARAMS.0, OUTPUT_PARAMS.1)?;
        let depth = normalized.map(|n| params.denormalize(n).max(MIN_ALIGNED_DEPTH));
        Ok(Prediction { depth, params })
    }
}

impl DepthModel for Predictor {
    fn predict_depth(&self, frame: &Tensor, seed: u64) -> Result<Tensor> {
        let s = frame.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape(format!("frame must be (3,H,W), got {s:?}")));
        }
        let single = Self {
            config: InferConfig { seed, ..self.config },
            ..self.clone()
        };
        let p = single.predict(&frame.reshape(&[1, 3, s[1], s[2]])?)?;
        p.depth.reshape(&s[1..])
    }
}
