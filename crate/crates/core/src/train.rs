//! The training loop: bucket, pack, flow loss, AdamW.

use serde::{Deserialize, Serialize};

use crate::datapipe::Clip;
use crate::denoiser::{interp_condition, keyframe_latents, keyframe_mask, Denoiser, DenoiserConfig};
use crate::duration::{bucket_clips, pack_batch, PackedBatch};
use crate::error::{Error, Result};
use crate::flow::{fm_loss_graph, FlowBatch, DEPTH_LATENT_CHANNELS};
use crate::numerics::rng::{derive_seed, SeededRng};
use crate::numerics::{AdamW, Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Base,
    /// Keyframe-conditioned model, fine-tuned from a base checkpoint.
    Interp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Fields left out of a config file keep the values of
    /// `TrainConfig::default()`.
    #[serde(deserialize_with = "partial_optimizer")]
    pub optimizer: AdamW,
    /// Learning rate at the last step as a fraction of the initial one,
    /// reached by cosine decay.
    pub final_lr_fraction: f64,
    /// Frames times pixels per batch; sets the batch size for each `K`.
    pub budget: usize,
    /// Largest frame count `K` drawn per batch.
    pub max_frames: usize,
    pub buckets: Vec<(usize, usize)>,
    pub seed: u64,
    pub model: DenoiserConfig,
    /// Steps between best-checkpoint candidates.
    pub checkpoint_every: usize,
    /// Weight of the previous value in the smoothed loss.
    pub smoothing: f64,
    /// Random horizontal and vertical flips of each fragment.
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            optimizer: AdamW {
                lr: 3e-3,
                weight_decay: 1e-4,
                ..AdamW::default()
            },
            final_lr_fraction: 0.1,
            budget: 4 * 6 * 16 * 16,
            max_frames: 6,
            buckets: vec![(16, 16)],
            seed: 0,
            model: DenoiserConfig::default(),
            checkpoint_every: 20,
            smoothing: 0.9,
            flip_augment: true,
        }
    }
}

fn partial_optimizer<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<AdamW, D::Error> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Patch {
        lr: Option<f64>,
        beta1: Option<f64>,
        beta2: Option<f64>,
        eps: Option<f64>,
        weight_decay: Option<f64>,
    }
    let p = Patch::deserialize(d)?;
    let o = TrainConfig::default().optimizer;
    Ok(AdamW {
        lr: p.lr.unwrap_or(o.lr),
        beta1: p.beta1.unwrap_or(o.beta1),
        beta2: p.beta2.unwrap_or(o.beta2),
        eps: p.eps.unwrap_or(o.eps),
        weight_decay: p.weight_decay.unwrap_or(o.weight_decay),
    })
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let o = &self.optimizer;
        if !(o.lr > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return Err(Error::invalid(format!("optimizer settings out of range: {o:?}")));
        }
        if !(o.weight_decay >= 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(Error::invalid("weight decay and final lr fraction must be nonnegative"));
        }
        if self.max_frames == 0 || self.budget == 0 || self.checkpoint_every == 0 {
            return Err(Error::invalid("max_frames, budget and checkpoint_every must be positive"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::invalid(format!("smoothing {} outside [0,1)", self.smoothing)));
        }
        let unit = 2 << (self.model.depth_levels - 1);
        if self.buckets.is_empty() {
            return Err(Error::invalid("no bucket resolutions"));
        }
        if let Some(b) = self.buckets.iter().find(|b| b.0 == 0 || b.1 == 0 || b.0 % unit != 0 || b.1 % unit != 0) {
            return Err(Error::invalid(format!(
                "bucket {b:?} must be a positive multiple of {unit} for {} levels",
                self.model.depth_levels
            )));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        let progress = step as f64 / self.steps.saturating_sub(1).max(1) as f64;
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.optimizer.lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cosine)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(rename = "K")]
    pub k: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_model: Denoiser,
    /// Snapshot with the lowest smoothed loss at a checkpoint step.
    pub best_model: Denoiser,
    pub best_smoothed_loss: f64,
    pub log: Vec<LogEntry>,
    /// Clips no bucket could take, as `(id, reason)`.
    pub rejected: Vec<(String, String)>,
}

/// Mirrors `(..., H, W)` along the last axis (`vertical = false`) or the
/// one before it.
pub fn flip(x: &Tensor, vertical: bool) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::shape(format!("flip needs at least 2 axes, got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = x.data().to_vec();
    for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(h * w)) {
        for y in 0..h {
            for xx in 0..w {
                let (sy, sx) = if vertical { (h - 1 - y, xx) } else { (y, w - 1 - xx) };
                dst[y * w + xx] = src[sy * w + sx];
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

fn flip_fragments(batch: PackedBatch, seed: u64) -> Result<PackedBatch> {
    let mut rng = SeededRng::new(seed);
    let fragments = batch
        .fragments()
        .iter()
        .map(|f| {
            let mut f = f.clone();
            for vertical in [false, true] {
                if rng.uniform() < 0.5 {
                    f.frames = flip(&f.frames, vertical)?;
                    f.depth = flip(&f.depth, vertical)?;
                }
            }
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    PackedBatch::new(fragments)
}

/// Conditioning for the interpolation objective: the first and last frame of
/// every fragment are keys and carry their clean latents.
pub fn keyframe_batch(batch: &FlowBatch) -> Result<FlowBatch> {
    let s = batch.z_d.shape().to_vec();
    let (b, k, h, w) = (s[0], s[1], s[3], s[4]);
    if k < 2 {
        return Err(Error::invalid("keyframe conditioning needs at least 2 frames"));
    }
    let keys = [0, k - 1];
    let m = keyframe_mask(k, &keys, h, w)?;
    let mut cond = Vec::with_capacity(b * k * 3 * DEPTH_LATENT_CHANNELS * h * w);
    let frame = |x: &Tensor, i: usize| -> Result<Tensor> { x.narrow(0, i, 1)?.reshape(&s[1..]) };
    for i in 0..b {
        let z = frame(&batch.z_d, i)?;
        let z_c = frame(&batch.cond, i)?.narrow(1, 0, DEPTH_LATENT_CHANNELS)?;
        let c = interp_condition(&z_c, &keyframe_latents(&z, &keys)?, &m)?;
        cond.extend(c.into_data());
    }
    Ok(FlowBatch {
        cond: Tensor::new(vec![b, k, 3 * DEPTH_LATENT_CHANNELS, h, w], cond)?,
        ..batch.clone()
    })
}

/// Trains `init` (or a fresh model from `config.model`) on `clips`.
///
/// For [`Variant::Interp`], `init` must be a base model; it is converted by
/// [`Denoiser::init_interp_from_base`] and trained with keyframe
/// conditioning on fragments of at least two frames. `on_step` sees every
/// log entry as it is produced.
pub fn train(
    clips: &[Clip],
    config: &TrainConfig,
    variant: Variant,
    init: Option<&Denoiser>,
    mut on_step: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut model = match (variant, init) {
        (Variant::Base, Some(m)) if !m.config().is_interpolation() => m.clone(),
        (Variant::Base, None) => {
            if config.model.is_interpolation() {
                return Err(Error::invalid("base training needs a base model config"));
            }
            Denoiser::new(config.model.clone(), derive_seed(config.seed, u64::MAX))?
        }
        (Variant::Interp, Some(m)) if !m.config().is_interpolation() => Denoiser::init_interp_from_base(m)?,
        (Variant::Interp, Some(m)) => m.clone(),
        (Variant::Interp, None) => return Err(Error::invalid("interpolation training needs a base checkpoint")),
        (Variant::Base, Some(_)) => return Err(Error::invalid("cannot train an interpolation model as a base model")),
    };
    let min_k = if variant == Variant::Interp { 2 } else { 1 };
    let buckets = bucket_clips(clips, &config.buckets)?;
    let groups: Vec<Vec<Clip>> = buckets
        .groups
        .into_values()
        .map(|g| g.into_iter().filter(|c| c.len() >= min_k).collect::<Vec<_>>())
        .filter(|g| !g.is_empty())
        .collect();
    if groups.is_empty() {
        return Err(Error::invalid(format!(
            "no usable training clips ({} given, {} rejected by bucketing)",
            clips.len(),
            buckets.rejected.len()
        )));
    }
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();

    let mut log = Vec::with_capacity(config.steps);
    let mut smoothed: Option<f64> = None;
    let mut best = (f64::INFINITY, model.clone());
    for step in 0..config.steps {
        let step_seed = derive_seed(config.seed, step as u64);
        let mut rng = SeededRng::new(step_seed);
        // group chosen in proportion to its size
        let mut pick = rng.int_inclusive(0, total - 1);
        let gi = sizes
            .iter()
            .position(|&n| {
                if pick < n {
                    true
                } else {
                    pick -= n;
                    false
                }
            })
            .expect("pick below total");
        let group = &groups[gi];
        let shortest = group.iter().map(Clip::len).min().expect("group is nonempty");
        let k = rng.int_inclusive(min_k, config.max_frames.min(shortest).max(min_k));
        let mut packed = pack_batch(group, k, config.budget, derive_seed(step_seed, 1))?;
        if config.flip_augment {
            packed = flip_fragments(packed, derive_seed(step_seed, 3))?;
        }
        let mut batch = packed.flow_batch(derive_seed(step_seed, 2))?;
        if variant == Variant::Interp {
            batch = keyframe_batch(&batch)?;
        }
        let g = Graph::new();
        let loss_var = fm_loss_graph(&g, &model, &batch)?;
        let loss = loss_var.value().item()?;
        if !loss.is_finite() {
            return Err(Error::invalid(format!("loss diverged at step {step}: {loss}")));
        }
        let grads = g.backward(loss_var, model.params())?;
        let lr = config.lr_at(step);
        AdamW { lr, ..config.optimizer }.step(model.params_mut(), &grads)?;

        let entry = LogEntry {
            step,
            loss,
            lr,
            k,
            batch_size: packed.batch_size(),
        };
        on_step(&entry);
        log.push(entry);
        let s = smoothed.map_or(loss, |p| config.smoothing * p + (1.0 - config.smoothing) * loss);
        smoothed = Some(s);
        if (step + 1) % config.checkpoint_every == 0 && s < best.0 {
            best = (s, model.clone());
        }
    }
    if best.0.is_infinite() {
        best = (smoothed.unwrap_or(f64::INFINITY), model.clone());
    }
    Ok(TrainOutcome {
        final_model: model,
        best_model: best.1,
        best_smoothed_loss: best.0,
        log,
        rejected: buckets.rejected,
    })
}

/// Exponential moving average of a loss trajectory.
pub fn smoothed_losses(log: &[LogEntry], smoothing: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(log.len());
    for e in log {
        let next = out.last().map_or(e.loss, |p: &f64| smoothing * p + (1.0 - smoothing) * e.loss);
        out.push(next);
    }
    out
}
