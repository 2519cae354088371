//! Scene transitions from colour changes in HSV.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Mean HSV difference above which consecutive frames belong to different
/// shots. A black to white switch scores 1/3.
pub const DEFAULT_CUT_THRESHOLD: f64 = 0.12;

/// RGB in `[0, 1]` to `(h, s, v)` with hue as a fraction of a turn.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max > 0.0 { delta / max } else { 0.0 };
    (h, s, max)
}

fn hsv_planes(frames: &Tensor) -> Vec<Vec<(f64, f64, f64)>> {
    let s = frames.shape();
    let hw = s[2] * s[3];
    let d = frames.data();
    (0..s[0])
        .map(|f| {
            let base = f * 3 * hw;
            (0..hw)
                .map(|i| rgb_to_hsv(d[base + i], d[base + hw + i], d[base + 2 * hw + i]))
                .collect()
        })
        .collect()
}

/// Mean over pixels of the averaged channel differences; hue distance wraps.
fn hsv_distance(a: &[(f64, f64, f64)], b: &[(f64, f64, f64)]) -> f64 {
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(p, q)| {
            let dh = (p.0 - q.0).abs();
            let dh = dh.min(1.0 - dh);
            (dh + (p.1 - q.1).abs() + (p.2 - q.2).abs()) / 3.0
        })
        .sum();
    total / a.len().max(1) as f64
}

/// Mean HSV difference between each frame and the next, length `T - 1`.
pub fn frame_differences(frames: &Tensor) -> Result<Vec<f64>> {
    let s = frames.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::shape(format!("frames must be (T,3,H,W), got {s:?}")));
    }
    let planes = hsv_planes(frames);
    Ok(planes.windows(2).map(|w| hsv_distance(&w[0], &w[1])).collect())
}

/// Indices `k` at which frame `k` starts a new shot.
pub fn detect_scene_cuts(frames: &Tensor, threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0) {
        return Err(Error::invalid(format!("cut threshold must be positive, got {threshold}")));
    }
    Ok(frame_differences(frames)?
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > threshold)
        .map(|(k, _)| k + 1)
        .collect())
}

/// Splits `0..len` at `cuts` into half-open segments.
pub fn segments(len: usize, cuts: &[usize]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    for &c in cuts.iter().filter(|&&c| c > 0 && c < len) {
        if c > start {
            out.push(start..c);
            start = c;
        }
    }
    if start < len {
        out.push(start..len);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datapipe::render::{generate_clip, CameraMotion, SceneConfig};
    use crate::numerics::rng::SeededRng;

    fn solid(values: &[f64]) -> Tensor {
        let t = values.len();
        let mut data = Vec::new();
        for v in values {
            data.extend(std::iter::repeat_n(*v, 3 * 4));
        }
        Tensor::new(vec![t, 3, 2, 2], data).unwrap()
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(rgb_to_hsv(1.0, 0.0, 0.0), (0.0, 1.0, 1.0));
        let (h, _, _) = rgb_to_hsv(0.0, 1.0, 0.0);
        assert!((h - 1.0 / 3.0).abs() < 1e-12);
        let (h, _, _) = rgb_to_hsv(0.0, 0.0, 1.0);
        assert!((h - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(rgb_to_hsv(0.0, 0.0, 0.0), (0.0, 0.0, 0.0));
    }

    #[test]
    fn constructed_cuts() {
        assert!(detect_scene_cuts(&solid(&[0.4; 8]), DEFAULT_CUT_THRESHOLD).unwrap().is_empty());
        let mut values = vec![0.0; 10];
        values.extend([1.0; 6]);
        assert_eq!(detect_scene_cuts(&solid(&values), DEFAULT_CUT_THRESHOLD).unwrap(), vec![10]);
        let d = frame_differences(&solid(&[0.0, 1.0])).unwrap();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!(detect_scene_cuts(&solid(&[0.0, 1.0]), 0.0).is_err());
    }

    #[test]
    fn hue_wraps_around() {
        let a = [(0.02, 1.0, 1.0)];
        let b = [(0.98, 1.0, 1.0)];
        assert!((hsv_distance(&a, &b) - 0.04 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn generated_motion_has_no_cuts_and_shot_changes_do() {
        let mut rng = SeededRng::new(0);
        for motion in [CameraMotion::Translate, CameraMotion::Orbit] {
            let cfg = SceneConfig {
                camera_motion: motion,
                frames: 24,
                ..SceneConfig::default()
            };
            for _ in 0..5 {
                let seed = rng.int_inclusive(0, 10_000) as u64;
                let a = generate_clip(&cfg, seed).unwrap();
                assert!(detect_scene_cuts(&a.frames, DEFAULT_CUT_THRESHOLD).unwrap().is_empty());
            }
        }
    }

    #[test]
    fn appending_a_repeat_frame_adds_no_cut() {
        let mut values = vec![0.1; 4];
        values.extend([0.9; 4]);
        let f = solid(&values);
        let last = f.narrow(0, 7, 1).unwrap();
        let longer = Tensor::concat(&[&f, &last], 0).unwrap();
        assert_eq!(
            detect_scene_cuts(&f, 0.1).unwrap(),
            detect_scene_cuts(&longer, 0.1).unwrap()
        );
    }

    #[test]
    fn segment_split() {
        assert_eq!(segments(10, &[]), vec![0..10]);
        assert_eq!(segments(10, &[3, 7]), vec![0..3, 3..7, 7..10]);
        assert_eq!(segments(4, &[0, 4]), vec![0..4]);
    }
}
