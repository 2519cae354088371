use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::pfm::{read_pfm, write_pfm};
use crate::error::{Error, Result};
use crate::metrics::{CameraPose, Intrinsics};
use crate::numerics::Tensor;

/// A video with per-frame depth and cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub id: String,
    /// `(T, 3, H, W)` in `[0, 1]`.
    pub frames: Tensor,
    /// `(T, 1, H, W)`, positive.
    pub depth: Tensor,
    pub poses: Vec<CameraPose>,
    pub fps: f64,
}

impl Clip {
    pub fn new(id: impl Into<String>, frames: Tensor, depth: Tensor, poses: Vec<CameraPose>, fps: f64) -> Result<Self> {
        let (fs_, ds) = (frames.shape(), depth.shape());
        if fs_.len() != 4 || fs_[1] != 3 {
            return Err(Error::shape(format!("frames must be (T,3,H,W), got {fs_:?}")));
        }
        if ds.len() != 4 || ds[1] != 1 || ds[0] != fs_[0] || ds[2..] != fs_[2..] {
            return Err(Error::shape(format!("depth {ds:?} does not match frames {fs_:?}")));
        }
        if fs_[0] == 0 {
            return Err(Error::invalid("clip has no frames"));
        }
        if poses.len() != fs_[0] {
            return Err(Error::shape(format!("{} poses for {} frames", poses.len(), fs_[0])));
        }
        if let Some(d) = depth.data().iter().find(|d| !(**d > 0.0) || !d.is_finite()) {
            return Err(Error::NonPositiveDepth(format!("clip depth contains {d}")));
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("frame values must lie in [0,1]"));
        }
        if !(fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        Ok(Self {
            id: id.into(),
            frames,
            depth,
            poses,
            fps,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// The clip restricted to `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Clip> {
        let poses = indices
            .iter()
            .map(|&i| {
                self.poses
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("frame {i} outside clip of {}", self.len())))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Clip {
            id: self.id.clone(),
            frames: self.frames.select(0, indices)?,
            depth: self.depth.select(0, indices)?,
            poses,
            fps: self.fps,
        })
    }

    /// Depth of frame `k` as `(H, W)`.
    pub fn depth_frame(&self, k: usize) -> Result<Tensor> {
        self.depth.narrow(0, k, 1)?.reshape(&[self.height(), self.width()])
    }

    /// Frame `k` as `(3, H, W)`.
    pub fn frame(&self, k: usize) -> Result<Tensor> {
        self.frames.narrow(0, k, 1)?.reshape(&[3, self.height(), self.width()])
    }
}

/// `meta.json` of a clip directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub id: String,
    pub fps: f64,
    pub intrinsics: Intrinsics,
    /// Row-major 4x4 camera-to-world matrices, one per frame.
    pub camera_to_world: Vec<[[f64; 4]; 4]>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Directory name of a clip inside a dataset.
pub fn clip_dir_name(id: &str) -> String {
    format!("clip_{id}")
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `(3, H, W)` values in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, frame: &Tensor) -> Result<()> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let d = frame.data();
    let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([quantize8(d[i]), quantize8(d[h * w + i]), quantize8(d[2 * h * w + i])])
    });
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Reads any PNG as `(3, H, W)` RGB in `[0, 1]`.
pub fn read_rgb_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Writes an `(H, W)` map as a 16-bit grayscale PNG stretched over its own
/// minimum and maximum.
pub fn write_depth_png16(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = (map.data()[y as usize * w + x as usize] - lo) / span;
        Luma([(v.clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

fn frame_name(k: usize, ext: &str) -> String {
    format!("{k:05}.{ext}")
}

/// Writes `clip` to `root/clip_<id>/` and returns that directory.
pub fn save_clip(root: &Path, clip: &Clip) -> Result<PathBuf> {
    let dir = root.join(clip_dir_name(&clip.id));
    let (frames_dir, depth_dir) = (dir.join("frames"), dir.join("depth"));
    create_dir(&frames_dir)?;
    create_dir(&depth_dir)?;
    for k in 0..clip.len() {
        write_rgb_png(&frames_dir.join(frame_name(k, "png")), &clip.frame(k)?)?;
        write_pfm(&depth_dir.join(frame_name(k, "pfm")), &clip.depth_frame(k)?)?;
    }
    let meta = ClipMeta {
        id: clip.id.clone(),
        fps: clip.fps,
        intrinsics: clip.poses[0].intrinsics,
        camera_to_world: clip.poses.iter().map(|p| p.rows()).collect(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    Ok(dir)
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let reshaped = parts
        .iter()
        .map(|p| {
            let mut s = vec![1];
            s.extend_from_slice(p.shape());
            p.reshape(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Tensor> = reshaped.iter().collect();
    Tensor::concat(&refs, 0)
}

/// Reads every PNG under `dir/frames` in name order as `(T, 3, H, W)`.
pub fn load_frames(dir: &Path) -> Result<Tensor> {
    let frames = sorted_files(&dir.join("frames"), "png")?
        .iter()
        .map(|p| read_rgb_png(p))
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() {
        return Err(Error::format(dir, "no frames"));
    }
    if frames.iter().any(|f| f.shape() != frames[0].shape()) {
        return Err(Error::format(dir, "frames differ in size"));
    }
    stack(&frames)
}

/// Every `clip_*` directory under `root`, sorted by name.
pub fn clip_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("clip_")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Reads a clip directory written by [`save_clip`].
pub fn load_clip(dir: &Path) -> Result<Clip> {
    let meta: ClipMeta = read_json(&dir.join("meta.json"))?;
    let frames = sorted_files(&dir.join("frames"), "png")?
        .iter()
        .map(|p| read_rgb_png(p))
        .collect::<Result<Vec<_>>>()?;
    let depth = sorted_files(&dir.join("depth"), "pfm")?
        .iter()
        .map(|p| read_pfm(p).and_then(|m| m.reshape(&[1, m.shape()[0], m.shape()[1]])))
        .collect::<Result<Vec<_>>>()?;
    if frames.is_empty() || frames.len() != depth.len() || frames.len() != meta.camera_to_world.len() {
        return Err(Error::format(
            dir,
            format!(
                "{} frames, {} depth maps and {} poses",
                frames.len(),
                depth.len(),
                meta.camera_to_world.len()
            ),
        ));
    }
    let poses = meta
        .camera_to_world
        .iter()
        .map(|rows| CameraPose::from_rows(meta.intrinsics, *rows))
        .collect::<Result<Vec<_>>>()?;
    Clip::new(meta.id, stack(&frames)?, stack(&depth)?, poses, meta.fps)
        .map_err(|e| Error::format(dir, e.to_string()))
}

/// Loads every `clip_*` directory under `root`, sorted by name.
pub fn load_dataset(root: &Path) -> Result<Vec<Clip>> {
    clip_dirs(root)?.iter().map(|d| load_clip(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeededRng;

    fn toy(t: usize) -> Clip {
        let mut rng = SeededRng::new(1);
        let k = Intrinsics { fx: 4.0, fy: 4.0, cx: 2.0, cy: 2.0 };
        let poses = vec![CameraPose::new(k, nalgebra::Matrix4::identity()).unwrap(); t];
        Clip::new(
            "a",
            rng.uniform_tensor(&[t, 3, 4, 4], 0.0, 1.0),
            rng.uniform_tensor(&[t, 1, 4, 4], 1.0, 5.0),
            poses,
            10.0,
        )
        .unwrap()
    }

    #[test]
    fn validation() {
        let c = toy(2);
        assert!(Clip::new("x", c.frames.clone(), c.depth.map(|v| v - 10.0), c.poses.clone(), 10.0).is_err());
        assert!(Clip::new("x", c.frames.map(|v| v + 2.0), c.depth.clone(), c.poses.clone(), 10.0).is_err());
        assert!(Clip::new("x", c.frames.clone(), c.depth.clone(), c.poses[..1].to_vec(), 10.0).is_err());
        assert_eq!(c.subset(&[1]).unwrap().frames, c.frames.narrow(0, 1, 1).unwrap());
        assert!(c.subset(&[2]).is_err());
    }

    #[test]
    fn disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let c = toy(3);
        let path = save_clip(dir.path(), &c).unwrap();
        assert!(path.join("frames/00002.png").exists());
        assert!(path.join("depth/00000.pfm").exists());
        let back = load_clip(&path).unwrap();
        assert_eq!(back.poses, c.poses);
        assert!(back.frames.max_abs_diff(&c.frames) <= 0.5 / 255.0 + 1e-12);
        assert!(back.depth.max_abs_diff(&c.depth) < 1e-6);
        assert_eq!(load_dataset(dir.path()).unwrap().len(), 1);
        assert!(load_clip(&dir.path().join("missing")).is_err());
    }
}
