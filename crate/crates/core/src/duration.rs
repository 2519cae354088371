//! Mixed-duration training: frame dropout, resolution buckets and packing
//! fragments of equal shape into one batch.

use std::collections::BTreeMap;

use crate::datapipe::resize::{area_resize, center_crop_box, crop, nearest_resize};
use crate::datapipe::Clip;
use crate::denoiser::FramePositions;
use crate::depthspace::{encode_latent, encode_video, normalize_depth};
use crate::error::{Error, Result};
use crate::flow::FlowBatch;
use crate::metrics::{CameraPose, Intrinsics};
use crate::numerics::rng::{derive_seed, SeededRng};
use crate::numerics::Tensor;

/// `k` distinct frame indices of a `t`-frame clip, sorted ascending.
pub fn frame_dropout(t: usize, k: usize, seed: u64) -> Result<FramePositions> {
    if k == 0 || k > t {
        return Err(Error::invalid(format!("cannot keep {k} of {t} frames")));
    }
    let mut idx = SeededRng::new(seed).sample_indices(t, k);
    idx.sort_unstable();
    FramePositions::new(idx)
}

/// Clips grouped by target resolution, plus the clips no bucket could take.
#[derive(Debug, Clone, Default)]
pub struct Buckets {
    pub groups: BTreeMap<(usize, usize), Vec<Clip>>,
    /// `(clip id, reason)`.
    pub rejected: Vec<(String, String)>,
}

fn distortion(h: usize, w: usize, bucket: (usize, usize)) -> f64 {
    let a = h as f64 / w as f64;
    let b = bucket.0 as f64 / bucket.1 as f64;
    (a / b).ln().abs()
}

fn per_frame(x: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let s = x.shape();
    let parts = (0..s[0])
        .map(|k| f(&x.narrow(0, k, 1)?.reshape(&s[1..])?))
        .collect::<Result<Vec<_>>>()?;
    let stacked: Vec<Tensor> = parts
        .iter()
        .map(|p| {
            let mut shape = vec![1];
            shape.extend_from_slice(p.shape());
            p.reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Tensor::concat(&stacked.iter().collect::<Vec<_>>(), 0)
}

/// Center-crops `clip` to the aspect ratio of `target` and resamples it to
/// exactly `target`. Frames are box filtered, depth takes nearest samples.
pub fn fit_clip(clip: &Clip, target: (usize, usize)) -> Result<Clip> {
    let (th, tw) = target;
    let (top, left, ch, cw) = center_crop_box(clip.height(), clip.width(), target);
    if ch < th || cw < tw {
        return Err(Error::invalid(format!(
            "{}x{} crop of clip {} is smaller than {th}x{tw}",
            ch, cw, clip.id
        )));
    }
    let frames = per_frame(&clip.frames, |f| area_resize(&crop(f, top, left, ch, cw)?, th, tw))?;
    let depth = per_frame(&clip.depth, |d| nearest_resize(&crop(d, top, left, ch, cw)?, th, tw))?;
    let (sx, sy) = (tw as f64 / cw as f64, th as f64 / ch as f64);
    let poses = clip
        .poses
        .iter()
        .map(|p| {
            let k = p.intrinsics;
            let intrinsics = Intrinsics {
                fx: k.fx * sx,
                fy: k.fy * sy,
                cx: (k.cx - left as f64) * sx,
                cy: (k.cy - top as f64) * sy,
            };
            CameraPose::new(intrinsics, p.camera_to_world)
        })
        .collect::<Result<Vec<_>>>()?;
    // resampling can overshoot [0, 1] by rounding only
    let frames = frames.map(|v| v.clamp(0.0, 1.0));
    Clip::new(clip.id.clone(), frames, depth, poses, clip.fps)
}

/// Assigns each clip to the resolution with the least aspect-ratio distortion
/// among those it can be cropped down to, then fits it there.
pub fn bucket_clips(clips: &[Clip], resolutions: &[(usize, usize)]) -> Result<Buckets> {
    if resolutions.is_empty() {
        return Err(Error::invalid("no bucket resolutions"));
    }
    if let Some(r) = resolutions.iter().find(|r| r.0 == 0 || r.1 == 0) {
        return Err(Error::invalid(format!("bucket resolution {r:?} is empty")));
    }
    let mut out = Buckets::default();
    for clip in clips {
        let (h, w) = (clip.height(), clip.width());
        let fits = |r: &(usize, usize)| {
            let (_, _, ch, cw) = center_crop_box(h, w, *r);
            ch >= r.0 && cw >= r.1
        };
        let best = resolutions.iter().filter(|r| fits(r)).min_by(|a, b| {
            distortion(h, w, **a)
                .total_cmp(&distortion(h, w, **b))
                .then((b.0 * b.1).cmp(&(a.0 * a.1)))
        });
        match best {
            Some(&r) => out.groups.entry(r).or_default().push(fit_clip(clip, r)?),
            None => out.rejected.push((
                clip.id.clone(),
                format!("{h}x{w} is smaller than every bucket in {resolutions:?}"),
            )),
        }
    }
    Ok(out)
}

/// `K` frames of one source clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub source_id: String,
    pub source_len: usize,
    /// `(K, 3, H, W)`.
    pub frames: Tensor,
    /// `(K, 1, H, W)`.
    pub depth: Tensor,
    pub positions: FramePositions,
}

/// Fragments of identical `(K, H, W)` trained on together.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    fragments: Vec<Fragment>,
    resolution: (usize, usize),
    frame_count: usize,
}

impl PackedBatch {
    pub fn new(fragments: Vec<Fragment>) -> Result<Self> {
        let first = fragments.first().ok_or_else(|| Error::invalid("batch of zero fragments"))?;
        let s = first.frames.shape().to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::shape(format!("fragment frames must be (K,3,H,W), got {s:?}")));
        }
        let (k, h, w) = (s[0], s[2], s[3]);
        for f in &fragments {
            if f.frames.shape() != s.as_slice() || f.depth.shape() != [k, 1, h, w] {
                return Err(Error::shape(format!(
                    "fragment of {} has frames {:?} and depth {:?}, batch is {s:?}",
                    f.source_id,
                    f.frames.shape(),
                    f.depth.shape()
                )));
            }
            if f.positions.len() != k || f.positions.as_slice().last().is_some_and(|&p| p >= f.source_len) {
                return Err(Error::invalid(format!(
                    "positions {:?} invalid for {} frames of a {}-frame clip",
                    f.positions.as_slice(),
                    k,
                    f.source_len
                )));
            }
        }
        Ok(Self {
            fragments,
            resolution: (h, w),
            frame_count: k,
        })
    }

    pub fn fragments(&self) -> &[Fragment] {
        &self.fragments
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.resolution
    }

    pub fn frame_count(&self) -> usize {
        self.frame_count
    }

    pub fn batch_size(&self) -> usize {
        self.fragments.len()
    }

    /// Latents, conditioning, noise and times for the flow loss. Each
    /// fragment is normalized on its own and draws `eps` and `t` from its own
    /// stream of `seed`.
    pub fn flow_batch(&self, seed: u64) -> Result<FlowBatch> {
        let mut z = Vec::new();
        let mut cond = Vec::new();
        let mut eps = Vec::new();
        let mut t = Vec::with_capacity(self.fragments.len());
        for (i, f) in self.fragments.iter().enumerate() {
            let (normalized, _) = normalize_depth(&f.depth)?;
            let z_d = encode_latent(&normalized)?.frames;
            let mut rng = SeededRng::new(derive_seed(seed, i as u64));
            eps.extend(rng.normal_tensor(z_d.shape()).into_data());
            t.push(rng.uniform());
            cond.extend(encode_video(&f.frames)?.frames.into_data());
            z.extend(z_d.into_data());
        }
        let (h, w) = self.resolution;
        let shape = vec![self.fragments.len(), self.frame_count, 4, h / 2, w / 2];
        Ok(FlowBatch {
            z_d: Tensor::new(shape.clone(), z)?,
            cond: Tensor::new(shape.clone(), cond)?,
            eps: Tensor::new(shape, eps)?,
            t,
            positions: self.fragments.iter().map(|f| f.positions.clone()).collect(),
        })
    }
}

/// `max(1, floor(budget / (k h w)))`.
pub fn batch_size_for(budget: usize, k: usize, h: usize, w: usize) -> usize {
    (budget / (k * h * w).max(1)).max(1)
}

/// Samples `batch_size_for(budget, k, H, W)` fragments from `group` with
/// replacement, each with its own frame dropout draw of `k` frames.
pub fn pack_batch(group: &[Clip], k: usize, budget: usize, seed: u64) -> Result<PackedBatch> {
    let first = group.first().ok_or_else(|| Error::invalid("cannot pack an empty group"))?;
    let (h, w) = (first.height(), first.width());
    if let Some(c) = group.iter().find(|c| (c.height(), c.width()) != (h, w)) {
        return Err(Error::shape(format!(
            "clip {} is {}x{}, group is {h}x{w}",
            c.id,
            c.height(),
            c.width()
        )));
    }
    if let Some(c) = group.iter().find(|c| c.len() < k) {
        return Err(Error::invalid(format!("clip {} has {} frames, need {k}", c.id, c.len())));
    }
    if k == 0 {
        return Err(Error::invalid("frame count must be positive"));
    }
    let b = batch_size_for(budget, k, h, w);
    let fragments = (0..b as u64)
        .map(|i| {
            let pick = SeededRng::new(derive_seed(seed, 2 * i)).int_inclusive(0, group.len() - 1);
            let clip = &group[pick];
            let positions = frame_dropout(clip.len(), k, derive_seed(seed, 2 * i + 1))?;
            Ok(Fragment {
                source_id: clip.id.clone(),
                source_len: clip.len(),
                frames: clip.frames.select(0, positions.as_slice())?,
                depth: clip.depth.select(0, positions.as_slice())?,
                positions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    PackedBatch::new(fragments)
}
