//! Long clips: sample a sparse set of keyframes in one pass, then fill each
//! gap between consecutive keys with the interpolation model.

use serde::{Deserialize, Serialize};

use crate::denoiser::{interp_condition, keyframe_mask, FramePositions};
use crate::error::{Error, Result};
use crate::flow::{sample, VelocityModel, DEPTH_LATENT_CHANNELS};
use crate::metrics::{align_to, positive_mask};
use crate::numerics::rng::derive_seed;
use crate::numerics::Tensor;

/// Frames strictly between two consecutive keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start_key: usize,
    pub end_key: usize,
    pub interior: Vec<usize>,
}

impl Window {
    /// Both keys plus the interior.
    pub fn frame_count(&self) -> usize {
        self.end_key - self.start_key + 1
    }

    pub fn indices(&self) -> Vec<usize> {
        (self.start_key..=self.end_key).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferencePlan {
    pub frame_count: usize,
    pub key_indices: Vec<usize>,
    /// Gaps with at least one interior frame, in order.
    pub windows: Vec<Window>,
}

impl InferencePlan {
    /// Longest window, or 0 when every frame is a key.
    pub fn max_window_len(&self) -> usize {
        self.windows.iter().map(Window::frame_count).max().unwrap_or(0)
    }
}

/// Keys every `ceil((T - 1) / (max - 1))` frames, plus the last frame.
pub fn plan_inference(t: usize, max_frames_per_pass: usize) -> Result<InferencePlan> {
    if t == 0 {
        return Err(Error::invalid("cannot plan inference for zero frames"));
    }
    if max_frames_per_pass < 2 {
        return Err(Error::invalid(format!(
            "a pass must hold at least 2 frames, got {max_frames_per_pass}"
        )));
    }
    let stride = (t - 1).div_ceil(max_frames_per_pass - 1).max(1);
    let mut keys: Vec<usize> = (0..t).step_by(stride).collect();
    if keys.last() != Some(&(t - 1)) {
        keys.push(t - 1);
    }
    let windows = keys
        .windows(2)
        .filter(|w| w[1] - w[0] > 1)
        .map(|w| Window {
            start_key: w[0],
            end_key: w[1],
            interior: (w[0] + 1..w[1]).collect(),
        })
        .collect();
    Ok(InferencePlan {
        frame_count: t,
        key_indices: keys,
        windows,
    })
}

fn frames_of(z: &Tensor) -> Result<(usize, usize, usize)> {
    match z.shape() {
        [t, c, h, w] if *c == DEPTH_LATENT_CHANNELS => Ok((*t, *h, *w)),
        s => Err(Error::shape(format!("video latent must be (T,4,h,w), got {s:?}"))),
    }
}

fn assemble(t: usize, per: usize, parts: &[(&[usize], &Tensor)], shape: &[usize]) -> Result<Tensor> {
    let mut out = vec![0.0; t * per];
    for (indices, values) in parts {
        for (j, &i) in indices.iter().enumerate() {
            out[i * per..(i + 1) * per].copy_from_slice(&values.data()[j * per..(j + 1) * per]);
        }
    }
    Tensor::new(shape.to_vec(), out)
}

/// Samples depth latents for a video latent `z_c` of any length.
///
/// Keys come from one pass of `base` at their original positions; each
/// window is then sampled by `interp` conditioned on the window's video
/// latents and its two key latents, and only its interior is kept. When the
/// whole clip fits in one pass this is exactly a single `base` pass.
pub fn sample_long<B, I>(
    base: &B,
    interp: &I,
    z_c: &Tensor,
    max_frames_per_pass: usize,
    steps: usize,
    seed: u64,
) -> Result<Tensor>
where
    B: VelocityModel + ?Sized,
    I: VelocityModel + ?Sized,
{
    let (t, h, w) = frames_of(z_c)?;
    let plan = plan_inference(t, max_frames_per_pass)?;
    if plan.max_window_len() > max_frames_per_pass {
        return Err(Error::invalid(format!(
            "{t} frames need windows of {} frames, more than {max_frames_per_pass} per pass",
            plan.max_window_len()
        )));
    }
    let keys = &plan.key_indices;
    let key_positions = FramePositions::new(keys.clone())?;
    let key_latents = sample(base, &z_c.select(0, keys)?, steps, seed, &key_positions)?;
    if plan.windows.is_empty() {
        return Ok(key_latents);
    }
    let per = DEPTH_LATENT_CHANNELS * h * w;
    let key_slot = |k: usize| keys.binary_search(&k).expect("window ends are keys");
    let mut filled = Vec::with_capacity(plan.windows.len());
    for (wi, win) in plan.windows.iter().enumerate() {
        let idx = win.indices();
        let n = idx.len();
        let mut z_key = vec![0.0; n * per];
        let (a, b) = (key_slot(win.start_key), key_slot(win.end_key));
        z_key[..per].copy_from_slice(&key_latents.data()[a * per..(a + 1) * per]);
        z_key[(n - 1) * per..].copy_from_slice(&key_latents.data()[b * per..(b + 1) * per]);
        let z_key = Tensor::new(vec![n, DEPTH_LATENT_CHANNELS, h, w], z_key)?;
        let m = keyframe_mask(n, &[0, n - 1], h, w)?;
        let cond = interp_condition(&z_c.select(0, &idx)?, &z_key, &m)?;
        let positions = FramePositions::new(idx.clone())?;
        let out = sample(interp, &cond, steps, derive_seed(seed, wi as u64 + 1), &positions)?;
        let interior: Vec<usize> = (1..n - 1).collect();
        filled.push(out.select(0, &interior)?);
    }
    let mut parts: Vec<(&[usize], &Tensor)> = vec![(keys.as_slice(), &key_latents)];
    for (win, values) in plan.windows.iter().zip(&filled) {
        parts.push((win.interior.as_slice(), values));
    }
    assemble(t, per, &parts, z_c.shape())
}

/// Last frame of each full naive window: `window - 1, 2 window - 1, ...`.
pub fn naive_boundaries(t: usize, window: usize) -> Vec<usize> {
    (1..)
        .map(|i| i * window)
        .take_while(|&s| s < t)
        .map(|s| s - 1)
        .collect()
}

/// The baseline: cut the clip into consecutive `window`-frame chunks and
/// sample each on its own with `base`. Chunk `i` uses seed stream `i`.
pub fn sample_naive<B: VelocityModel + ?Sized>(
    base: &B,
    z_c: &Tensor,
    window: usize,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let (t, _, _) = frames_of(z_c)?;
    if window == 0 {
        return Err(Error::invalid("window must hold at least one frame"));
    }
    let mut chunks = Vec::new();
    for (i, start) in (0..t).step_by(window).enumerate() {
        let len = window.min(t - start);
        let chunk_seed = if i == 0 { seed } else { derive_seed(seed, i as u64) };
        chunks.push(sample(
            base,
            &z_c.narrow(0, start, len)?,
            steps,
            chunk_seed,
            &FramePositions::contiguous(len),
        )?);
    }
    Tensor::concat(&chunks.iter().collect::<Vec<_>>(), 0)
}

/// Mean absolute jump between frames `k` and `k + 1` over `boundaries`, after
/// one scale and shift alignment of the whole `(T, 1, H, W)` prediction to
/// ground truth.
pub fn seam_discontinuity(pred: &Tensor, gt: &Tensor, boundaries: &[usize]) -> Result<f64> {
    let s = gt.shape();
    if pred.shape() != s || s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(format!(
            "seam needs matching (T,1,H,W), got {:?} and {s:?}",
            pred.shape()
        )));
    }
    if boundaries.is_empty() || boundaries.iter().any(|&k| k + 1 >= s[0]) {
        return Err(Error::invalid(format!("boundaries {boundaries:?} outside {} frames", s[0])));
    }
    let (aligned, _) = align_to(pred, gt, &positive_mask(gt))?;
    let per = s[2] * s[3];
    let d = aligned.data();
    let total: f64 = boundaries
        .iter()
        .map(|&k| {
            let (a, b) = (&d[k * per..(k + 1) * per], &d[(k + 1) * per..(k + 2) * per]);
            a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / per as f64
        })
        .sum();
    Ok(total / boundaries.len() as f64)
}
