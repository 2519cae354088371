//! Procedural clips: a rigid world of textured rectangles and ellipsoids in
//! front of a tilted backdrop plane, ray cast under a moving pinhole camera.

use std::f64::consts::TAU;

use nalgebra::{Matrix4, Rotation3, Translation3, Vector3};
use serde::{Deserialize, Serialize};

use super::clip::Clip;
use crate::error::{Error, Result};
use crate::metrics::{CameraPose, Intrinsics};
use crate::numerics::rng::{derive_seed, SeededRng};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraMotion {
    Static,
    #[default]
    Translate,
    Orbit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub object_count: usize,
    /// `(near, far)`: objects sit inside this range; the tilted backdrop
    /// spans from a tenth of the way in to `far`.
    pub depth_range: (f64, f64),
    pub camera_motion: CameraMotion,
    pub texture_seed: u64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            object_count: 4,
            depth_range: (1.0, 6.0),
            camera_motion: CameraMotion::Translate,
            texture_seed: 0,
            frames: 12,
            height: 16,
            width: 16,
            fps: 10.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let (near, far) = self.depth_range;
        if !(near > 0.0 && far > near && far.is_finite()) {
            return Err(Error::invalid(format!("depth range needs 0 < near < far, got ({near}, {far})")));
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::invalid("frames, height and width must be positive"));
        }
        if !(self.fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {}", self.fps)));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        let w = self.width as f64;
        Intrinsics {
            fx: w,
            fy: w,
            cx: w / 2.0,
            cy: self.height as f64 / 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    /// Fronto-parallel rectangle with half extents.
    Rect { half: (f64, f64) },
    Ellipsoid { radii: Vector3<f64> },
}

#[derive(Debug, Clone, Copy)]
struct Texture {
    albedo: [f64; 3],
    freq: f64,
    angle: f64,
    phase: f64,
}

impl Texture {
    fn draw(rng: &mut SeededRng) -> Self {
        Self {
            albedo: [0.0; 3].map(|_| rng.uniform_range(0.6, 1.0)),
            freq: rng.uniform_range(1.0, 3.0),
            angle: rng.uniform_range(0.0, TAU),
            phase: rng.uniform_range(0.0, TAU),
        }
    }

    fn shade(&self, u: f64, v: f64) -> [f64; 3] {
        let s = u * self.angle.cos() + v * self.angle.sin();
        let k = 0.85 + 0.15 * (TAU * self.freq * s + self.phase).sin();
        self.albedo.map(|a| a * k)
    }
}

#[derive(Debug, Clone, Copy)]
struct Object {
    center: Vector3<f64>,
    shape: Shape,
    texture: Texture,
}

struct Hit {
    t: f64,
    color: [f64; 3],
}

const FOG: [f64; 3] = [0.04, 0.05, 0.08];
const FOG_DENSITY: f64 = 2.0;

impl Object {
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        match self.shape {
            Shape::Rect { half } => {
                if dir.z.abs() < 1e-12 {
                    return None;
                }
                let t = (self.center.z - origin.z) / dir.z;
                let p = origin + dir * t;
                let (u, v) = ((p.x - self.center.x) / half.0, (p.y - self.center.y) / half.1);
                (t > 0.0 && u.abs() <= 1.0 && v.abs() <= 1.0).then(|| Hit {
                    t,
                    color: self.texture.shade(u, v),
                })
            }
            Shape::Ellipsoid { radii } => {
                let o = (origin - self.center).component_div(&radii);
                let d = dir.component_div(&radii);
                let (a, b, c) = (d.dot(&d), 2.0 * o.dot(&d), o.dot(&o) - 1.0);
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let t = (-b - disc.sqrt()) / (2.0 * a);
                if t <= 0.0 {
                    return None;
                }
                let n = (o + d * t).normalize();
                let light = Vector3::new(-0.4, -0.6, -0.7).normalize();
                let lambert = 0.55 + 0.45 * n.dot(&light).max(0.0);
                let base = self.texture.shade(n.x, n.y);
                Some(Hit {
                    t,
                    color: base.map(|c| c * lambert),
                })
            }
        }
    }
}

/// The plane `z = offset + gradient . (x, y)` in world coordinates.
#[derive(Debug, Clone, Copy)]
struct Backdrop {
    offset: f64,
    gradient: (f64, f64),
    texture: Texture,
}

impl Backdrop {
    fn draw(config: &SceneConfig, geo: &mut SeededRng, tex: &mut SeededRng) -> Self {
        let (near, far) = config.depth_range;
        let (lo, hi) = (near + 0.1 * (far - near), far);
        // depth lo at one edge of the view and hi at the opposite edge
        let offset = 2.0 * lo * hi / (lo + hi);
        let slope = 2.0 * (hi - lo) / (lo + hi);
        let angle = geo.uniform_range(0.0, TAU);
        Self {
            offset,
            gradient: (slope * angle.cos(), slope * angle.sin()),
            texture: Texture::draw(tex),
        }
    }

    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
        let (a, b) = self.gradient;
        let denom = dir.z - a * dir.x - b * dir.y;
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.offset + a * origin.x + b * origin.y - origin.z) / denom;
        let p = origin + dir * t;
        (t > 0.0).then(|| Hit {
            t,
            color: self.texture.shade(p.x / self.offset, p.y / self.offset),
        })
    }
}

fn scene_objects(config: &SceneConfig, seed: u64) -> (Vec<Object>, Backdrop) {
    let (near, far) = config.depth_range;
    let aspect = config.height as f64 / config.width as f64;
    let mut geo = SeededRng::new(derive_seed(seed, 1));
    let mut tex = SeededRng::new(derive_seed(config.texture_seed, derive_seed(seed, 2)));
    let backdrop = Backdrop::draw(config, &mut geo, &mut tex);
    let mut objects = Vec::with_capacity(config.object_count);
    for _ in 0..config.object_count {
        let z = geo.uniform_range(near * 1.15, near + 0.75 * (far - near));
        let center = Vector3::new(
            geo.uniform_range(-0.35, 0.35) * z,
            geo.uniform_range(-0.35, 0.35) * z * aspect,
            z,
        );
        let half = (geo.uniform_range(0.08, 0.25) * z, geo.uniform_range(0.08, 0.25) * z * aspect.max(0.5));
        let shape = if geo.uniform() < 0.6 {
            Shape::Rect { half }
        } else {
            let rz = half.0.min(half.1) * geo.uniform_range(0.5, 1.0);
            Shape::Ellipsoid {
                radii: Vector3::new(half.0, half.1, rz),
            }
        };
        objects.push(Object {
            center,
            shape,
            texture: Texture::draw(&mut tex),
        });
    }
    (objects, backdrop)
}

/// Camera-to-world transform of every frame.
fn trajectory(config: &SceneConfig, seed: u64) -> Vec<Matrix4<f64>> {
    let (near, far) = config.depth_range;
    let t = config.frames as f64;
    let mut rng = SeededRng::new(derive_seed(seed, 3));
    let heading = rng.uniform_range(0.0, TAU);
    let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    (0..config.frames)
        .map(|k| {
            let k = k as f64;
            match config.camera_motion {
                CameraMotion::Static => Matrix4::identity(),
                CameraMotion::Translate => {
                    let step = 0.003 * near;
                    let dz = (0.00075 * near).min(0.25 * near / t);
                    let pos = Vector3::new(heading.cos() * step * k, heading.sin() * step * k, dz * k);
                    Translation3::from(pos).to_homogeneous()
                }
                CameraMotion::Orbit => {
                    let pivot = Vector3::new(0.0, 0.0, 0.5 * (near + far));
                    let yaw = sign * 0.0012 * k;
                    let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw);
                    let pos = pivot + rot * Vector3::new(0.0, 0.0, -pivot.z);
                    Translation3::from(pos).to_homogeneous() * rot.to_homogeneous()
                }
            }
        })
        .collect()
}

/// Renders a clip; identical `(config, seed)` give identical clips.
pub fn generate_clip(config: &SceneConfig, seed: u64) -> Result<Clip> {
    config.validate()?;
    let (near, far) = config.depth_range;
    let (h, w) = (config.height, config.width);
    let k = config.intrinsics();
    let (objects, backdrop) = scene_objects(config, seed);
    let poses = trajectory(config, seed);
    let hw = h * w;
    let mut frames = vec![0.0; config.frames * 3 * hw];
    let mut depth = vec![0.0; config.frames * hw];
    for (f, c2w) in poses.iter().enumerate() {
        let rot = c2w.fixed_view::<3, 3>(0, 0).into_owned();
        let origin = Vector3::new(c2w[(0, 3)], c2w[(1, 3)], c2w[(2, 3)]);
        for v in 0..h {
            for u in 0..w {
                // camera-space ray with unit z, so the hit parameter is the depth
                let ray = Vector3::new((u as f64 + 0.5 - k.cx) / k.fx, (v as f64 + 0.5 - k.cy) / k.fy, 1.0);
                let dir = rot * ray;
                let mut best = backdrop.intersect(&origin, &dir).unwrap_or(Hit {
                    t: far,
                    color: FOG,
                });
                for o in &objects {
                    if let Some(hit) = o.intersect(&origin, &dir) {
                        if hit.t < best.t {
                            best = hit;
                        }
                    }
                }
                let a = (-FOG_DENSITY * (best.t - near) / (far - near)).exp();
                let i = f * hw + v * w + u;
                depth[i] = best.t;
                for c in 0..3 {
                    frames[(f * 3 + c) * hw + v * w + u] = (best.color[c] * a + FOG[c] * (1.0 - a)).clamp(0.0, 1.0);
                }
            }
        }
    }
    let poses = poses
        .into_iter()
        .map(|m| CameraPose::new(k, m))
        .collect::<Result<Vec<_>>>()?;
    Clip::new(
        format!("{seed:06}"),
        Tensor::new(vec![config.frames, 3, h, w], frames)?,
        Tensor::new(vec![config.frames, 1, h, w], depth)?,
        poses,
        config.fps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tae;

    fn config(motion: CameraMotion) -> SceneConfig {
        SceneConfig {
            camera_motion: motion,
            frames: 6,
            height: 24,
            width: 32,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn deterministic() {
        let c = config(CameraMotion::Orbit);
        assert_eq!(generate_clip(&c, 3).unwrap(), generate_clip(&c, 3).unwrap());
        assert_ne!(generate_clip(&c, 3).unwrap().depth, generate_clip(&c, 4).unwrap().depth);
    }

    #[test]
    fn static_scene_is_frozen() {
        let clip = generate_clip(&config(CameraMotion::Static), 5).unwrap();
        let first = clip.frames.narrow(0, 0, 1).unwrap();
        for k in 1..clip.len() {
            assert_eq!(clip.frames.narrow(0, k, 1).unwrap(), first);
        }
        assert_eq!(tae(&clip.depth, &clip.poses).unwrap(), 0.0);
    }

    #[test]
    fn nearer_surface_occludes() {
        let c = SceneConfig {
            object_count: 0,
            ..config(CameraMotion::Static)
        };
        let mut rng = SeededRng::new(0);
        let back = Object {
            center: Vector3::new(0.0, 0.0, 4.0),
            shape: Shape::Rect { half: (1.0, 1.0) },
            texture: Texture::draw(&mut rng),
        };
        let front = Object {
            center: Vector3::new(0.2, 0.0, 2.0),
            shape: Shape::Ellipsoid {
                radii: Vector3::new(0.3, 0.3, 0.2),
            },
            texture: Texture::draw(&mut rng),
        };
        let origin = Vector3::zeros();
        let dir = Vector3::new(0.1, 0.0, 1.0);
        let (hb, hf) = (back.intersect(&origin, &dir).unwrap(), front.intersect(&origin, &dir).unwrap());
        assert!(hf.t < hb.t);
        // the empty scene is the backdrop plane alone
        let clip = generate_clip(&c, 1).unwrap();
        let (lo, hi) = clip.depth.data().iter().fold((f64::INFINITY, 0.0f64), |(a, b), &d| (a.min(d), b.max(d)));
        assert!(lo > 1.0 && hi < 12.0 && hi - lo > 2.0);
    }

    #[test]
    fn values_in_range() {
        let clip = generate_clip(&config(CameraMotion::Translate), 9).unwrap();
        assert!(clip.frames.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let (near, far) = SceneConfig::default().depth_range;
        assert!(clip.depth.data().iter().all(|&d| d > near && d < 2.0 * far));
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(24))]

        #[test]
        fn ground_truth_is_geometrically_consistent(
            seed in 0u64..1_000_000,
            orbit in proptest::bool::ANY,
            size in proptest::sample::select(vec![(16usize, 16usize), (24, 32), (32, 32)]),
            frames in 2usize..24,
        ) {
            let c = SceneConfig {
                camera_motion: if orbit { CameraMotion::Orbit } else { CameraMotion::Translate },
                frames,
                height: size.0,
                width: size.1,
                ..SceneConfig::default()
            };
            let clip = generate_clip(&c, seed).unwrap();
            let e = tae(&clip.depth, &clip.poses).unwrap();
            proptest::prop_assert!(e < 0.01, "{:?}: {}", c.camera_motion, e);
        }
    }
}
