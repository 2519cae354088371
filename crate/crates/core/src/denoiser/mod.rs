//! The velocity network: a small per-frame UNet whose levels are joined by
//! temporal attention over original frame indices.

mod attention;
mod rope;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use attention::{init_attention, temporal_attention, AttentionShape, PositionEncoding};
pub use rope::{rope_rotate, rope_tables, FramePositions};

use attention::{sinusoid, temporal_attention_var};
use crate::error::{Error, Result};
use crate::flow::{VelocityModel, DEPTH_LATENT_CHANNELS};
use crate::numerics::rng::SeededRng;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Input channels of the base model: noisy depth latent plus video latent.
pub const BASE_INPUT_CHANNELS: usize = 8;
/// Input channels of the interpolation model: base inputs plus keyframe
/// latents and the replicated key mask.
pub const INTERP_INPUT_CHANNELS: usize = 16;

const KERNEL: usize = 3;
const TIME_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub depth_levels: usize,
    pub temporal_heads: usize,
    pub head_dim: usize,
    pub rope_theta: f64,
    pub latent_channels_in: usize,
    pub latent_channels_out: usize,
    pub position_encoding: PositionEncoding,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth_levels: 2,
            temporal_heads: 2,
            head_dim: 16,
            rope_theta: 10000.0,
            latent_channels_in: BASE_INPUT_CHANNELS,
            latent_channels_out: DEPTH_LATENT_CHANNELS,
            position_encoding: PositionEncoding::Rope,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth_levels == 0 || self.temporal_heads == 0 {
            return Err(Error::invalid("channels, levels and heads must be positive"));
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!("head_dim must be even, got {}", self.head_dim)));
        }
        if !self.base_channels.is_multiple_of(2) {
            return Err(Error::invalid("base_channels must be even for the time embedding"));
        }
        if !(self.rope_theta > 1.0) {
            return Err(Error::invalid(format!("rope_theta must exceed 1, got {}", self.rope_theta)));
        }
        if self.latent_channels_out != DEPTH_LATENT_CHANNELS {
            return Err(Error::invalid(format!(
                "latent_channels_out must be {DEPTH_LATENT_CHANNELS}"
            )));
        }
        if ![BASE_INPUT_CHANNELS, INTERP_INPUT_CHANNELS].contains(&self.latent_channels_in) {
            return Err(Error::invalid(format!(
                "latent_channels_in must be {BASE_INPUT_CHANNELS} or {INTERP_INPUT_CHANNELS}, got {}",
                self.latent_channels_in
            )));
        }
        Ok(())
    }

    pub fn is_interpolation(&self) -> bool {
        self.latent_channels_in == INTERP_INPUT_CHANNELS
    }

    fn attention(&self) -> AttentionShape {
        AttentionShape {
            channels: self.base_channels,
            heads: self.temporal_heads,
            head_dim: self.head_dim,
            theta: self.rope_theta,
            encoding: self.position_encoding,
        }
    }

    /// Spatial extents of the latent must halve cleanly at every level.
    fn spatial_multiple(&self) -> usize {
        1 << (self.depth_levels - 1)
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
}

fn conv_init(rng: &mut SeededRng, cout: usize, cin: usize, gain: f64) -> Tensor {
    let fan_in = (cin * KERNEL * KERNEL) as f64;
    rng.normal_tensor(&[cout, cin, KERNEL, KERNEL]).scale(gain / fan_in.sqrt())
}

/// `(hw, hw/4)` matrix averaging each 2x2 block.
fn pool_matrix(h: usize, w: usize) -> Tensor {
    let (h2, w2) = (h / 2, w / 2);
    let mut m = Tensor::zeros(&[h * w, h2 * w2]);
    let d = m.data_mut();
    for y in 0..h {
        for x in 0..w {
            d[(y * w + x) * h2 * w2 + (y / 2) * w2 + x / 2] = 0.25;
        }
    }
    m
}

/// `(hw/4, hw)` nearest-neighbour upsampling matrix.
fn upsample_matrix(h: usize, w: usize) -> Tensor {
    let (h2, w2) = (h / 2, w / 2);
    let mut m = Tensor::zeros(&[h2 * w2, h * w]);
    let d = m.data_mut();
    for y in 0..h {
        for x in 0..w {
            d[((y / 2) * w2 + x / 2) * h * w + y * w + x] = 1.0;
        }
    }
    m
}

fn resample<'g>(x: Var<'g>, matrix: Tensor, h: usize, w: usize) -> Result<Var<'g>> {
    let s = x.shape();
    let g = x.graph();
    let cols = matrix.shape()[0];
    x.reshape(&[s[0], s[1], cols])?
        .matmul(g.constant(matrix))?
        .reshape(&[s[0], s[1], h, w])
}

/// The `(T, 4, h, w)` key mask: ones on every channel of key frames.
pub fn keyframe_mask(frames: usize, keys: &[usize], h: usize, w: usize) -> Result<Tensor> {
    let per = DEPTH_LATENT_CHANNELS * h * w;
    let mut data = vec![0.0; frames * per];
    for &k in keys {
        if k >= frames {
            return Err(Error::invalid(format!("key {k} outside {frames} frames")));
        }
        data[k * per..(k + 1) * per].fill(1.0);
    }
    Tensor::new(vec![frames, DEPTH_LATENT_CHANNELS, h, w], data)
}

/// Zero-padded key latents: `latents` on key frames, zeros elsewhere.
pub fn keyframe_latents(latents: &Tensor, keys: &[usize]) -> Result<Tensor> {
    let s = latents.shape();
    if s.len() != 4 || s[1] != DEPTH_LATENT_CHANNELS {
        return Err(Error::shape(format!("key latents must be (T,4,h,w), got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    let mut data = vec![0.0; latents.numel()];
    for &k in keys {
        if k >= s[0] {
            return Err(Error::invalid(format!("key {k} outside {} frames", s[0])));
        }
        data[k * per..(k + 1) * per].copy_from_slice(&latents.data()[k * per..(k + 1) * per]);
    }
    Tensor::new(s.to_vec(), data)
}

/// Checks a key mask: binary, and identical across the 4 channels of a frame.
pub fn validate_key_mask(m: &Tensor) -> Result<()> {
    let s = m.shape();
    if s.len() != 4 || s[1] != DEPTH_LATENT_CHANNELS {
        return Err(Error::shape(format!("mask must be (T,4,h,w), got {s:?}")));
    }
    if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("mask entries must be 0 or 1"));
    }
    let per = s[1] * s[2] * s[3];
    for frame in m.data().chunks(per) {
        if frame.iter().any(|&v| v != frame[0]) {
            return Err(Error::invalid("mask must be constant within a frame"));
        }
    }
    Ok(())
}

/// Conditioning channels `[z_c, z_key, m]` of the interpolation model.
pub fn interp_condition(z_c: &Tensor, z_key: &Tensor, m: &Tensor) -> Result<Tensor> {
    validate_key_mask(m)?;
    if z_key.shape() != m.shape() || z_c.shape() != m.shape() {
        return Err(Error::shape(format!(
            "z_c {:?}, z_key {:?} and mask {:?} must match",
            z_c.shape(),
            z_key.shape(),
            m.shape()
        )));
    }
    Tensor::concat(&[z_c, z_key, m], 1)
}

fn with_batch(x: &Tensor) -> Result<Tensor> {
    let mut s = vec![1];
    s.extend_from_slice(x.shape());
    x.reshape(&s)
}

impl Denoiser {
    /// Fresh weights drawn from `seed`.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let mut params = ParamStore::new();
        let c = config.base_channels;
        params.insert("in.weight", conv_init(&mut rng, c, config.latent_channels_in, 1.0))?;
        params.insert("in.bias", Tensor::zeros(&[c, 1, 1]))?;
        let time_w = rng.normal_tensor(&[c, c]).scale(1.0 / (c as f64).sqrt());
        params.insert("time.weight", time_w)?;
        params.insert("time.bias", Tensor::zeros(&[c]))?;
        let attn = config.attention();
        for l in 0..config.depth_levels {
            params.insert(&format!("down{l}.res.weight"), conv_init(&mut rng, c, c, 0.5))?;
            params.insert(&format!("down{l}.res.bias"), Tensor::zeros(&[c, 1, 1]))?;
            init_attention(&mut params, &format!("down{l}.attn"), &attn, &mut rng)?;
        }
        for l in 0..config.depth_levels {
            params.insert(&format!("up{l}.res.weight"), conv_init(&mut rng, c, c, 0.5))?;
            params.insert(&format!("up{l}.res.bias"), Tensor::zeros(&[c, 1, 1]))?;
        }
        params.insert("out.weight", conv_init(&mut rng, config.latent_channels_out, c, 0.5))?;
        params.insert("out.bias", Tensor::zeros(&[config.latent_channels_out, 1, 1]))?;
        Ok(Self { config, params })
    }

    /// Wraps existing weights after checking every expected tensor is present.
    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// The network on a batch: `phi` `(B, T, 4, h, w)` and `cond`
    /// `(B, T, Cc, h, w)` with `4 + Cc == latent_channels_in`.
    pub fn forward_var<'g>(
        &self,
        g: &'g Graph,
        phi: Var<'g>,
        cond: Var<'g>,
        t: &[f64],
        positions: &[FramePositions],
    ) -> Result<Var<'g>> {
        let cfg = &self.config;
        let (ps, cs) = (phi.shape(), cond.shape());
        if ps.len() != 5 || cs.len() != 5 {
            return Err(Error::shape(format!("phi {ps:?} and cond {cs:?} must be 5-d")));
        }
        let (b, frames, h, w) = (ps[0], ps[1], ps[3], ps[4]);
        if cs[0] != b || cs[1] != frames || cs[3] != h || cs[4] != w {
            return Err(Error::shape(format!("phi {ps:?} vs cond {cs:?}")));
        }
        if ps[2] != cfg.latent_channels_out || ps[2] + cs[2] != cfg.latent_channels_in {
            return Err(Error::shape(format!(
                "input channels {}+{} do not match config {}",
                ps[2], cs[2], cfg.latent_channels_in
            )));
        }
        if t.len() != b || positions.len() != b {
            return Err(Error::shape("one t and one position list per batch element"));
        }
        if positions.iter().any(|p| p.len() != frames) {
            return Err(Error::shape(format!("position lists must have {frames} entries")));
        }
        let mult = cfg.spatial_multiple();
        if h % mult != 0 || w % mult != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!(
                "latent {h}x{w} must be a positive multiple of {mult}"
            )));
        }
        let c = cfg.base_channels;
        let n = b * frames;
        let p = |name: &str| g.param_from(&self.params, name);
        let attn = cfg.attention();

        let x = g
            .concat(&[phi, cond], 2)?
            .reshape(&[n, cfg.latent_channels_in, h, w])?;
        let mut feat = x.conv2d(p("in.weight")?)?.add(p("in.bias")?)?;

        let scaled: Vec<f64> = t.iter().map(|v| v * TIME_SCALE).collect();
        let temb = g
            .constant(sinusoid(&scaled, c))
            .matmul(p("time.weight")?)?
            .add(p("time.bias")?)?;
        let mut expand = Tensor::zeros(&[n, b]);
        for i in 0..n {
            expand.data_mut()[i * b + i / frames] = 1.0;
        }
        let temb = g.constant(expand).matmul(temb)?.reshape(&[n, c, 1, 1])?;

        let res = |feat: Var<'g>, prefix: &str| -> Result<Var<'g>> {
            let a = feat.add(temb)?;
            let r = a
                .silu()?
                .conv2d(p(&format!("{prefix}.res.weight"))?)?
                .add(p(&format!("{prefix}.res.bias"))?)?;
            a.add(r)
        };

        let mut skips = Vec::with_capacity(cfg.depth_levels);
        let (mut lh, mut lw) = (h, w);
        for l in 0..cfg.depth_levels {
            feat = res(feat, &format!("down{l}"))?;
            feat = temporal_attention_var(g, &self.params, &format!("down{l}.attn"), &attn, feat, positions)?;
            skips.push((feat, lh, lw));
            if l + 1 < cfg.depth_levels {
                feat = resample(feat, pool_matrix(lh, lw), lh / 2, lw / 2)?;
                lh /= 2;
                lw /= 2;
            }
        }
        for l in (0..cfg.depth_levels).rev() {
            let (skip, sh, sw) = skips[l];
            if l + 1 < cfg.depth_levels {
                feat = resample(feat, upsample_matrix(sh, sw), sh, sw)?.add(skip)?;
            }
            feat = res(feat, &format!("up{l}"))?;
        }
        feat.conv2d(p("out.weight")?)?
            .add(p("out.bias")?)?
            .reshape(&[b, frames, cfg.latent_channels_out, h, w])
    }

    /// Base velocity for one clip: `phi_t` and `z_c` are `(T, 4, h, w)`.
    pub fn forward(&self, phi_t: &Tensor, z_c: &Tensor, t: f64, positions: &FramePositions) -> Result<Tensor> {
        if self.config.is_interpolation() {
            return Err(Error::invalid("forward called on an interpolation model"));
        }
        self.run(phi_t, z_c, t, positions)
    }

    /// Interpolation velocity for one clip; `z_key` holds key latents padded
    /// with zeros and `m` is the replicated key mask.
    pub fn interp_forward(
        &self,
        phi_t: &Tensor,
        z_c: &Tensor,
        z_key: &Tensor,
        m: &Tensor,
        t: f64,
        positions: &FramePositions,
    ) -> Result<Tensor> {
        if !self.config.is_interpolation() {
            return Err(Error::invalid("interp_forward needs an interpolation model"));
        }
        let cond = interp_condition(z_c, z_key, m)?;
        self.run(phi_t, &cond, t, positions)
    }

    fn run(&self, phi_t: &Tensor, cond: &Tensor, t: f64, positions: &FramePositions) -> Result<Tensor> {
        if phi_t.rank() != 4 || cond.rank() != 4 {
            return Err(Error::shape("single-clip inputs must be (T,C,h,w)"));
        }
        let g = Graph::new();
        let out = self.forward_var(
            &g,
            g.constant(with_batch(phi_t)?),
            g.constant(with_batch(cond)?),
            &[t],
            std::slice::from_ref(positions),
        )?;
        out.value().reshape(phi_t.shape())
    }

    /// Interpolation model whose input layer halves and duplicates the base
    /// input weights, so duplicated inputs reproduce the base output.
    pub fn init_interp_from_base(base: &Denoiser) -> Result<Denoiser> {
        if base.config.latent_channels_in != BASE_INPUT_CHANNELS {
            return Err(Error::invalid(format!(
                "base model must take {BASE_INPUT_CHANNELS} input channels, got {}",
                base.config.latent_channels_in
            )));
        }
        let mut params = base.params.clone_params();
        let w = params
            .get("in.weight")
            .ok_or_else(|| Error::Checkpoint("missing in.weight".into()))?
            .scale(0.5);
        params.replace("in.weight", Tensor::concat(&[&w, &w], 1)?)?;
        let config = DenoiserConfig {
            latent_channels_in: INTERP_INPUT_CHANNELS,
            ..base.config.clone()
        };
        Denoiser::from_params(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut meta = serde_json::Map::new();
        meta.insert("config".into(), serde_json::to_value(&self.config)?);
        self.params.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (params, meta) = ParamStore::load(path)?;
        let config = meta
            .get("config")
            .ok_or_else(|| Error::Checkpoint(format!("{} has no model config", path.display())))?;
        let config: DenoiserConfig = serde_json::from_value(config.clone())?;
        Self::from_params(config, params)
    }
}

impl VelocityModel for Denoiser {
    fn velocity<'g>(
        &self,
        g: &'g Graph,
        phi: Var<'g>,
        cond: Var<'g>,
        t: &[f64],
        positions: &[FramePositions],
    ) -> Result<Var<'g>> {
        self.forward_var(g, phi, cond, t, positions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{fm_loss_graph, FlowBatch};
    use crate::numerics::finite_difference_gradient;

    fn tiny(channels_in: usize) -> DenoiserConfig {
        DenoiserConfig {
            base_channels: 4,
            temporal_heads: 1,
            head_dim: 4,
            latent_channels_in: channels_in,
            ..DenoiserConfig::default()
        }
    }

    fn inputs(seed: u64, frames: usize, cond_channels: usize) -> (Tensor, Tensor) {
        let mut rng = SeededRng::new(seed);
        (
            rng.normal_tensor(&[frames, 4, 4, 4]),
            rng.normal_tensor(&[frames, cond_channels, 4, 4]),
        )
    }

    #[test]
    fn default_config_is_small() {
        let m = Denoiser::new(DenoiserConfig::default(), 0).unwrap();
        assert!(m.param_count() <= 50_000, "{}", m.param_count());
    }

    #[test]
    fn config_rejects_odd_head_dim_and_bad_arity() {
        let bad = DenoiserConfig { head_dim: 3, ..DenoiserConfig::default() };
        assert!(Denoiser::new(bad, 0).is_err());
        let bad = DenoiserConfig { latent_channels_in: 12, ..DenoiserConfig::default() };
        assert!(Denoiser::new(bad, 0).is_err());
    }

    #[test]
    fn output_shape_and_determinism() {
        let m = Denoiser::new(tiny(8), 1).unwrap();
        let (phi, zc) = inputs(2, 3, 4);
        let pos = FramePositions::new(vec![0, 4, 5]).unwrap();
        let a = m.forward(&phi, &zc, 0.3, &pos).unwrap();
        let b = m.forward(&phi, &zc, 0.3, &pos).unwrap();
        assert_eq!(a.shape(), phi.shape());
        assert_eq!(a, b);
        assert!(m.forward(&phi, &zc.narrow(0, 0, 2).unwrap(), 0.3, &pos).is_err());
        let odd = Tensor::zeros(&[3, 4, 3, 3]);
        assert!(m.forward(&odd, &odd, 0.3, &pos).is_err());
    }

    #[test]
    fn shift_invariant_under_rope() {
        let m = Denoiser::new(tiny(8), 3).unwrap();
        let (phi, zc) = inputs(4, 4, 4);
        let pos = FramePositions::new(vec![1, 2, 6, 9]).unwrap();
        let a = m.forward(&phi, &zc, 0.7, &pos).unwrap();
        let b = m.forward(&phi, &zc, 0.7, &pos.shifted(41)).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = Denoiser::new(tiny(8), 5).unwrap();
        let (z, zc) = inputs(6, 2, 4);
        let eps = SeededRng::new(7).normal_tensor(z.shape());
        let pos = FramePositions::new(vec![0, 3]).unwrap();
        let batch = FlowBatch::single(&z, &zc, &eps, 0.4, &pos).unwrap();
        let g = Graph::new();
        let loss = fm_loss_graph(&g, &m, &batch).unwrap();
        let grads = g.backward(loss, m.params()).unwrap();
        for name in ["in.weight", "time.weight", "down1.attn.q", "up0.res.bias", "out.weight"] {
            let x0 = m.params().get(name).unwrap().clone();
            let numeric = finite_difference_gradient(
                |x| {
                    let mut probe = m.clone();
                    probe.params_mut().replace(name, x.clone()).unwrap();
                    let g = Graph::new();
                    fm_loss_graph(&g, &probe, &batch).unwrap().value().item().unwrap()
                },
                &x0,
                1e-5,
            );
            let analytic = &grads[name];
            let scale = numeric.data().iter().map(|v| v.abs()).fold(1e-8, f64::max);
            assert!(analytic.max_abs_diff(&numeric) / scale < 1e-4, "{name}");
        }
    }

    #[test]
    fn every_parameter_gets_gradient() {
        let m = Denoiser::new(tiny(8), 8).unwrap();
        let (z, zc) = inputs(9, 3, 4);
        let eps = SeededRng::new(10).normal_tensor(z.shape());
        let batch = FlowBatch::single(&z, &zc, &eps, 0.5, &FramePositions::contiguous(3)).unwrap();
        let g = Graph::new();
        let loss = fm_loss_graph(&g, &m, &batch).unwrap();
        let grads = g.backward(loss, m.params()).unwrap();
        for (name, grad) in &grads {
            assert!(grad.data().iter().any(|v| *v != 0.0), "{name} has zero gradient");
        }
        assert_eq!(grads.len(), m.params().len());
    }

    #[test]
    fn interp_init_reproduces_base() {
        let base = Denoiser::new(tiny(8), 11).unwrap();
        let interp = Denoiser::init_interp_from_base(&base).unwrap();
        let w0 = base.params().get("in.weight").unwrap();
        let w1 = interp.params().get("in.weight").unwrap();
        assert_eq!(w1.shape()[1], 2 * w0.shape()[1]);
        let summed = w1.narrow(1, 0, 8).unwrap().add(&w1.narrow(1, 8, 8).unwrap()).unwrap();
        assert_eq!(&summed, w0);

        let (phi, zc) = inputs(12, 3, 4);
        let pos = FramePositions::new(vec![2, 3, 7]).unwrap();
        let g = Graph::new();
        let cond = Tensor::concat(&[&zc, &phi, &zc], 1).unwrap();
        let raw = interp
            .velocity(&g, g.constant(with_batch(&phi).unwrap()), g.constant(with_batch(&cond).unwrap()), &[0.6], std::slice::from_ref(&pos))
            .unwrap()
            .value()
            .reshape(phi.shape())
            .unwrap();
        assert!(raw.max_abs_diff(&base.forward(&phi, &zc, 0.6, &pos).unwrap()) < 1e-12);
        // through the public entry point the duplicated pair must be a valid mask
        let mask = keyframe_mask(3, &[0, 2], 4, 4).unwrap();
        let key = keyframe_latents(&phi, &[0, 2]).unwrap();
        let base_out = base.forward(&key, &mask, 0.6, &pos).unwrap();
        let dup = interp.interp_forward(&key, &mask, &key, &mask, 0.6, &pos).unwrap();
        assert!(dup.max_abs_diff(&base_out) < 1e-12);
        assert!(Denoiser::init_interp_from_base(&interp).is_err());
    }

    #[test]
    fn masks_and_key_padding() {
        let m = keyframe_mask(3, &[1], 2, 2).unwrap();
        assert_eq!(m.narrow(0, 1, 1).unwrap(), Tensor::ones(&[1, 4, 2, 2]));
        assert_eq!(m.narrow(0, 0, 1).unwrap(), Tensor::zeros(&[1, 4, 2, 2]));
        validate_key_mask(&m).unwrap();
        let mut bad = m.clone();
        bad.data_mut()[0] = 0.5;
        assert!(validate_key_mask(&bad).is_err());
        let mut split = m.clone();
        split.data_mut()[0] = 1.0;
        assert!(validate_key_mask(&split).is_err());
        assert!(keyframe_mask(3, &[3], 2, 2).is_err());

        let interp = Denoiser::new(tiny(16), 13).unwrap();
        let (phi, zc) = inputs(14, 3, 4);
        let zero = Tensor::zeros(phi.shape());
        let out = interp.interp_forward(&phi, &zc, &zero, &zero, 0.2, &FramePositions::contiguous(3)).unwrap();
        assert_eq!(out.shape(), phi.shape());
        assert!(interp.interp_forward(&phi, &zc, &zero, &bad.select(0, &[0, 0, 0]).unwrap(), 0.2, &FramePositions::contiguous(3)).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Denoiser::new(tiny(8), 15).unwrap();
        m.save(&path).unwrap();
        let back = Denoiser::load(&path).unwrap();
        assert_eq!(back.config(), m.config());
        let (phi, zc) = inputs(16, 2, 4);
        let pos = FramePositions::contiguous(2);
        assert_eq!(back.forward(&phi, &zc, 0.1, &pos).unwrap(), m.forward(&phi, &zc, 0.1, &pos).unwrap());
    }
}
