//! Affine-invariant depth metrics and the temporal alignment error.

use nalgebra::{Matrix3, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Threshold on `max(pred/gt, gt/pred)` for the δ1 accuracy.
pub const DELTA1_THRESHOLD: f64 = 1.25;

/// Floor applied to aligned predictions so ratios stay defined; such pixels
/// count as failures under δ1.
pub const MIN_ALIGNED_DEPTH: f64 = 1e-6;

const ORTHONORMAL_TOL: f64 = 1e-9;

/// Pinhole intrinsics in pixels. Pixel `(u, v)` covers `[u, u+1) x [v, v+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Intrinsics after cropping `(left, top)` pixels then scaling by `s`.
    pub fn crop_scale(&self, left: f64, top: f64, s: f64) -> Self {
        Self {
            fx: self.fx * s,
            fy: self.fy * s,
            cx: (self.cx - left) * s,
            cy: (self.cy - top) * s,
        }
    }
}

/// Intrinsics plus a camera-to-world transform. The camera looks down +z,
/// with x right and y down in the image.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub intrinsics: Intrinsics,
    pub camera_to_world: Matrix4<f64>,
}

impl CameraPose {
    pub fn new(intrinsics: Intrinsics, camera_to_world: Matrix4<f64>) -> Result<Self> {
        if !(intrinsics.fx > 0.0 && intrinsics.fy > 0.0) {
            return Err(Error::InvalidPose(format!(
                "focal lengths must be positive: fx={} fy={}",
                intrinsics.fx, intrinsics.fy
            )));
        }
        let r = camera_to_world.fixed_view::<3, 3>(0, 0);
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if !(err <= ORTHONORMAL_TOL) {
            return Err(Error::InvalidPose(format!("rotation is not orthonormal (error {err:e})")));
        }
        let last = camera_to_world.row(3);
        if last[0] != 0.0 || last[1] != 0.0 || last[2] != 0.0 || last[3] != 1.0 {
            return Err(Error::InvalidPose("last row must be [0, 0, 0, 1]".into()));
        }
        Ok(Self {
            intrinsics,
            camera_to_world,
        })
    }

    /// From a row-major 4x4 camera-to-world matrix.
    pub fn from_rows(intrinsics: Intrinsics, rows: [[f64; 4]; 4]) -> Result<Self> {
        let m = Matrix4::from_fn(|r, c| rows[r][c]);
        Self::new(intrinsics, m)
    }

    pub fn rows(&self) -> [[f64; 4]; 4] {
        let m = &self.camera_to_world;
        std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentResult {
    pub scale: f64,
    pub shift: f64,
    pub valid_pixel_count: usize,
}

impl AlignmentResult {
    pub fn apply(&self, pred: &Tensor) -> Tensor {
        pred.map(|v| self.scale * v + self.shift)
    }
}

fn check_same(a: &Tensor, b: &Tensor, mask: &Tensor) -> Result<()> {
    if a.shape() != b.shape() || a.shape() != mask.shape() {
        return Err(Error::shape(format!(
            "pred {:?}, gt {:?} and mask {:?} must match",
            a.shape(),
            b.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

fn valid_pairs<'a>(
    pred: &'a Tensor,
    gt: &'a Tensor,
    mask: &'a Tensor,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.data()
        .iter()
        .zip(gt.data())
        .zip(mask.data())
        .filter(|(_, m)| **m != 0.0)
        .map(|((p, g), _)| (*p, *g))
}

/// Least-squares `(s, t)` minimizing `sum (s pred + t - gt)^2` over pixels
/// where `mask` is nonzero.
pub fn align_scale_shift(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<AlignmentResult> {
    check_same(pred, gt, mask)?;
    let (mut n, mut sp, mut sg) = (0usize, 0.0, 0.0);
    let mut peak = 0.0f64;
    for (p, g) in valid_pairs(pred, gt, mask) {
        n += 1;
        sp += p;
        sg += g;
        peak = peak.max(p.abs());
    }
    if n < 2 {
        return Err(Error::DegenerateAlignment(format!("{n} valid pixels, need at least 2")));
    }
    let (mp, mg) = (sp / n as f64, sg / n as f64);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (p, g) in valid_pairs(pred, gt, mask) {
        sxx += (p - mp) * (p - mp);
        sxy += (p - mp) * (g - mg);
    }
    let floor = n as f64 * (peak * 64.0 * f64::EPSILON).powi(2);
    if !(sxx > floor) {
        return Err(Error::DegenerateAlignment("prediction is constant under the mask".into()));
    }
    let scale = sxy / sxx;
    Ok(AlignmentResult {
        scale,
        shift: mg - scale * mp,
        valid_pixel_count: n,
    })
}

/// Mean of `|pred - gt| / gt` over valid pixels.
pub fn absrel(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<f64> {
    check_same(pred, gt, mask)?;
    let (mut n, mut acc) = (0usize, 0.0);
    for (p, g) in valid_pairs(pred, gt, mask) {
        if !(g > 0.0) {
            return Err(Error::NonPositiveDepth(format!("ground truth {g} under the mask")));
        }
        acc += (p - g).abs() / g;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("absrel over an empty mask"));
    }
    Ok(acc / n as f64)
}

/// Fraction of valid pixels with `max(pred/gt, gt/pred) < 1.25`.
pub fn delta1(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<f64> {
    check_same(pred, gt, mask)?;
    let (mut n, mut hits) = (0usize, 0usize);
    for (p, g) in valid_pairs(pred, gt, mask) {
        if !(p > 0.0 && g > 0.0) {
            return Err(Error::NonPositiveDepth(format!("pred {p}, gt {g} under the mask")));
        }
        if (p / g).max(g / p) < DELTA1_THRESHOLD {
            hits += 1;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("delta1 over an empty mask"));
    }
    Ok(hits as f64 / n as f64)
}

/// Mask of pixels with positive ground truth.
pub fn positive_mask(gt: &Tensor) -> Tensor {
    gt.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Aligns `pred` to `gt` over `mask` and floors the result at
/// [`MIN_ALIGNED_DEPTH`].
pub fn align_to(pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<(Tensor, AlignmentResult)> {
    let a = align_scale_shift(pred, gt, mask)?;
    Ok((a.apply(pred).map(|v| v.max(MIN_ALIGNED_DEPTH)), a))
}

/// AbsRel and δ1 after least-squares alignment over pixels with positive gt.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedScores {
    pub absrel: f64,
    pub delta1: f64,
    pub valid_fraction: f64,
    pub alignment: AlignmentResult,
}

pub fn aligned_scores(pred: &Tensor, gt: &Tensor) -> Result<AlignedScores> {
    let mask = positive_mask(gt);
    let (aligned, alignment) = align_to(pred, gt, &mask)?;
    Ok(AlignedScores {
        absrel: absrel(&aligned, gt, &mask)?,
        delta1: delta1(&aligned, gt, &mask)?,
        valid_fraction: alignment.valid_pixel_count as f64 / gt.numel().max(1) as f64,
        alignment,
    })
}

/// Warps a source depth map `(H, W)` into the destination camera.
///
/// Each source pixel centre is unprojected with its depth, moved by
/// `pose_dst^-1 * pose_src` and splatted to the destination pixel containing
/// its projection; the nearest surface wins. Returns the warped depth and a
/// mask of pixels that received a value.
pub fn project_depth(depth_src: &Tensor, pose_src: &CameraPose, pose_dst: &CameraPose) -> Result<(Tensor, Tensor)> {
    if depth_src.rank() != 2 {
        return Err(Error::shape(format!("depth must be (H,W), got {:?}", depth_src.shape())));
    }
    let (h, w) = (depth_src.shape()[0], depth_src.shape()[1]);
    let world_to_dst = pose_dst
        .camera_to_world
        .try_inverse()
        .ok_or_else(|| Error::InvalidPose("singular destination pose".into()))?;
    let rel = world_to_dst * pose_src.camera_to_world;
    let (ks, kd) = (pose_src.intrinsics, pose_dst.intrinsics);
    let mut warped = vec![f64::INFINITY; h * w];
    for v in 0..h {
        for u in 0..w {
            let z = depth_src.data()[v * w + u];
            if !(z > 0.0) {
                continue;
            }
            let x = (u as f64 + 0.5 - ks.cx) / ks.fx * z;
            let y = (v as f64 + 0.5 - ks.cy) / ks.fy * z;
            let p = rel * Vector4::new(x, y, z, 1.0);
            if !(p.z > 0.0) {
                continue;
            }
            let pu = (kd.fx * p.x / p.z + kd.cx).floor();
            let pv = (kd.fy * p.y / p.z + kd.cy).floor();
            if pu < 0.0 || pv < 0.0 || pu >= w as f64 || pv >= h as f64 {
                continue;
            }
            let idx = pv as usize * w + pu as usize;
            if p.z < warped[idx] {
                warped[idx] = p.z;
            }
        }
    }
    let mask: Vec<f64> = warped.iter().map(|d| if d.is_finite() { 1.0 } else { 0.0 }).collect();
    let depth = warped.into_iter().map(|d| if d.is_finite() { d } else { 0.0 }).collect();
    Ok((Tensor::new(vec![h, w], depth)?, Tensor::new(vec![h, w], mask)?))
}

fn frame(seq: &Tensor, k: usize) -> Result<Tensor> {
    let s = seq.shape();
    seq.narrow(0, k, 1)?.reshape(&[s[2], s[3]])
}

fn warp_term(src: &Tensor, dst: &Tensor, pose_src: &CameraPose, pose_dst: &CameraPose) -> Result<f64> {
    let (warped, mask) = project_depth(src, pose_src, pose_dst)?;
    let mask = mask.zip_with(dst, |m, d| if m != 0.0 && d > 0.0 { 1.0 } else { 0.0 })?;
    if mask.data().iter().all(|&m| m == 0.0) {
        return Err(Error::invalid("adjacent frames share no valid pixels"));
    }
    absrel(&warped, dst, &mask)
}

/// Temporal alignment error of a depth sequence `(T, 1, H, W)`: the mean of
/// forward and backward warped AbsRel over the `T - 1` adjacent pairs.
pub fn tae(depth_seq: &Tensor, poses: &[CameraPose]) -> Result<f64> {
    let s = depth_seq.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(format!("depth sequence must be (T,1,H,W), got {s:?}")));
    }
    if s[0] < 2 {
        return Err(Error::invalid("tae needs at least two frames"));
    }
    if poses.len() != s[0] {
        return Err(Error::shape(format!("{} poses for {} frames", poses.len(), s[0])));
    }
    let mut total = 0.0;
    for k in 0..s[0] - 1 {
        let (a, b) = (frame(depth_seq, k)?, frame(depth_seq, k + 1)?);
        total += warp_term(&a, &b, &poses[k], &poses[k + 1])?;
        total += warp_term(&b, &a, &poses[k + 1], &poses[k])?;
    }
    Ok(total / (2.0 * (s[0] - 1) as f64))
}

/// TAE of a prediction after a single scale and shift fitted over the whole
/// sequence against ground truth.
pub fn tae_aligned(pred_seq: &Tensor, gt_seq: &Tensor, poses: &[CameraPose]) -> Result<f64> {
    let (aligned, _) = align_to(pred_seq, gt_seq, &positive_mask(gt_seq))?;
    tae(&aligned, poses)
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub clip_id: String,
    pub absrel: f64,
    pub delta1: f64,
    pub tae: Option<f64>,
    pub valid_fraction: f64,
}
