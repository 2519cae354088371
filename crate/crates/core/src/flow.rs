//! Conditional flow matching on latent depth.
//!
//! Corruption follows the straight line `phi_t = t z + (1 - t) eps` from noise
//! (`t = 0`) to data (`t = 1`), whose velocity `z - eps` is what the denoiser
//! regresses. Sampling integrates that velocity with forward Euler.

use crate::denoiser::FramePositions;
use crate::error::{Error, Result};
use crate::metrics::{align_scale_shift, AlignmentResult};
use crate::numerics::rng::SeededRng;
use crate::numerics::{Graph, Tensor, Var};

/// Latent channels of a depth map under the space-to-depth codec.
pub const DEPTH_LATENT_CHANNELS: usize = 4;

/// A velocity field over batched latents.
///
/// Shapes: `phi` is `(B, T, 4, h, w)`, `cond` is `(B, T, Cc, h, w)`; `t` and
/// `positions` carry one entry per batch element. Implementations return a
/// value shaped like `phi`.
pub trait VelocityModel {
    fn velocity<'g>(
        &self,
        g: &'g Graph,
        phi: Var<'g>,
        cond: Var<'g>,
        t: &[f64],
        positions: &[FramePositions],
    ) -> Result<Var<'g>>;
}

impl<M: VelocityModel + ?Sized> VelocityModel for &M {
    fn velocity<'g>(
        &self,
        g: &'g Graph,
        phi: Var<'g>,
        cond: Var<'g>,
        t: &[f64],
        positions: &[FramePositions],
    ) -> Result<Var<'g>> {
        (**self).velocity(g, phi, cond, t, positions)
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `t z + (1 - t) eps`.
pub fn corrupt(z: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    same_shape(z, eps, "corrupt")?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("t={t} outside [0,1]")));
    }
    z.zip_with(eps, |zv, ev| t * zv + (1.0 - t) * ev)
}

/// `z - eps`, independent of `t`.
pub fn target_velocity(z: &Tensor, eps: &Tensor) -> Result<Tensor> {
    same_shape(z, eps, "target_velocity")?;
    z.sub(eps)
}

/// One training draw: clean latent, noise, time and the corrupted state.
#[derive(Debug, Clone)]
pub struct FlowSample {
    pub z_d: Tensor,
    pub eps: Tensor,
    pub t: f64,
    pub phi_t: Tensor,
}

impl FlowSample {
    pub fn new(z_d: Tensor, eps: Tensor, t: f64) -> Result<Self> {
        let phi_t = corrupt(&z_d, &eps, t)?;
        Ok(Self { z_d, eps, t, phi_t })
    }

    /// Draws `eps ~ N(0, I)` and `t ~ U[0, 1]` from `rng`.
    pub fn draw(z_d: Tensor, rng: &mut SeededRng) -> Result<Self> {
        let eps = rng.normal_tensor(z_d.shape());
        let t = rng.uniform();
        Self::new(z_d, eps, t)
    }
}

/// A packed set of equally shaped fragments for one loss evaluation.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    /// `(B, T, 4, h, w)` clean latents.
    pub z_d: Tensor,
    /// `(B, T, Cc, h, w)` conditioning channels.
    pub cond: Tensor,
    /// Noise shaped like `z_d`.
    pub eps: Tensor,
    pub t: Vec<f64>,
    pub positions: Vec<FramePositions>,
}

impl FlowBatch {
    /// Wraps a single `(T, C, h, w)` clip as a batch of one.
    pub fn single(
        z_d: &Tensor,
        cond: &Tensor,
        eps: &Tensor,
        t: f64,
        positions: &FramePositions,
    ) -> Result<Self> {
        let add_batch = |x: &Tensor| {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            x.reshape(&s)
        };
        Ok(Self {
            z_d: add_batch(z_d)?,
            cond: add_batch(cond)?,
            eps: add_batch(eps)?,
            t: vec![t],
            positions: vec![positions.clone()],
        })
    }

    pub fn batch_size(&self) -> usize {
        self.z_d.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        same_shape(&self.z_d, &self.eps, "z_d vs eps")?;
        let (zs, cs) = (self.z_d.shape(), self.cond.shape());
        if zs.len() != 5 || cs.len() != 5 {
            return Err(Error::shape("flow batch tensors must be (B,T,C,h,w)"));
        }
        if zs[0] != cs[0] || zs[1] != cs[1] || zs[3..] != cs[3..] {
            return Err(Error::shape(format!(
                "condition {cs:?} does not match latent {zs:?}"
            )));
        }
        if self.t.len() != zs[0] || self.positions.len() != zs[0] {
            return Err(Error::shape("one t and one position list per fragment"));
        }
        if let Some(t) = self.t.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("t={t} outside [0,1]")));
        }
        Ok(())
    }

    /// Corrupted states, one `t` per fragment.
    pub fn phi(&self) -> Result<Tensor> {
        let b = self.batch_size();
        let per = self.z_d.numel() / b.max(1);
        let mut out = Vec::with_capacity(self.z_d.numel());
        for i in 0..b {
            let t = self.t[i];
            let z = &self.z_d.data()[i * per..(i + 1) * per];
            let e = &self.eps.data()[i * per..(i + 1) * per];
            out.extend(z.iter().zip(e).map(|(zv, ev)| t * zv + (1.0 - t) * ev));
        }
        Tensor::new(self.z_d.shape().to_vec(), out)
    }
}

/// Mean squared velocity error of `model` over a packed batch, recorded on
/// `g` so it can be differentiated.
pub fn fm_loss_graph<'g, M: VelocityModel + ?Sized>(
    g: &'g Graph,
    model: &M,
    batch: &FlowBatch,
) -> Result<Var<'g>> {
    batch.validate()?;
    let phi = g.constant(batch.phi()?);
    let cond = g.constant(batch.cond.clone());
    let target = g.constant(target_velocity(&batch.z_d, &batch.eps)?);
    let v = model.velocity(g, phi, cond, &batch.t, &batch.positions)?;
    if v.shape() != batch.z_d.shape() {
        return Err(Error::shape(format!(
            "model returned {:?}, expected {:?}",
            v.shape(),
            batch.z_d.shape()
        )));
    }
    let diff = v.sub(target)?;
    diff.mul(diff)?.mean()
}

/// Flow-matching loss of one `(T, 4, h, w)` clip.
pub fn fm_loss<M: VelocityModel + ?Sized>(
    model: &M,
    z_d: &Tensor,
    z_c: &Tensor,
    t: f64,
    eps: &Tensor,
    positions: &FramePositions,
) -> Result<f64> {
    let batch = FlowBatch::single(z_d, z_c, eps, t, positions)?;
    let g = Graph::new();
    fm_loss_graph(&g, model, &batch)?.value().item()
}

/// The unit Gaussian noise [`sample`] starts from for a given seed.
pub fn sample_noise(shape: &[usize], seed: u64) -> Tensor {
    SeededRng::new(seed).normal_tensor(shape)
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Velocity integral kept in double-double so that summing a constant field
/// `k` times and dividing by `k` returns the field exactly.
struct Displacement {
    hi: Vec<f64>,
    lo: Vec<f64>,
}

impl Displacement {
    fn new(n: usize) -> Self {
        Self {
            hi: vec![0.0; n],
            lo: vec![0.0; n],
        }
    }

    fn add(&mut self, v: &[f64]) {
        for ((h, l), &x) in self.hi.iter_mut().zip(self.lo.iter_mut()).zip(v) {
            let (s, e) = two_sum(*h, x);
            let (s2, e2) = two_sum(s, *l + e);
            *h = s2;
            *l = e2;
        }
    }

    /// The accumulated sum divided by `n`, rounded once to `f64`.
    fn divided(&self, n: f64) -> Vec<f64> {
        self.hi
            .iter()
            .zip(&self.lo)
            .map(|(&h, &l)| {
                let q1 = h / n;
                let r = (-q1).mul_add(n, h) + l;
                q1 + r / n
            })
            .collect()
    }
}

/// Integrates `d phi = v dt` from seeded noise at `t = 0` to `t = 1` with
/// `steps` forward-Euler steps on the grid `t_k = k / steps`.
///
/// `cond` is `(T, Cc, h, w)`; the result is `(T, 4, h, w)`.
pub fn sample<M: VelocityModel + ?Sized>(
    model: &M,
    cond: &Tensor,
    steps: usize,
    seed: u64,
    positions: &FramePositions,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::invalid("sample needs at least one step"));
    }
    let cs = cond.shape();
    if cs.len() != 4 {
        return Err(Error::shape(format!("condition must be (T,C,h,w), got {cs:?}")));
    }
    let shape = [cs[0], DEPTH_LATENT_CHANNELS, cs[2], cs[3]];
    let eps = sample_noise(&shape, seed);
    let batched = |x: &Tensor| {
        let mut s = vec![1];
        s.extend_from_slice(x.shape());
        x.reshape(&s)
    };
    let cond_b = batched(cond)?;
    let positions = [positions.clone()];
    let mut disp = Displacement::new(eps.numel());
    let mut phi = eps.clone();
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let g = Graph::new();
        let v = model.velocity(
            &g,
            g.constant(batched(&phi)?),
            g.constant(cond_b.clone()),
            &[t],
            &positions,
        )?;
        let v = v.value();
        if v.numel() != eps.numel() {
            return Err(Error::shape(format!(
                "model returned {:?} for latent {shape:?}",
                v.shape()
            )));
        }
        disp.add(v.data());
        let d = disp.divided(steps as f64);
        let data = eps.data().iter().zip(&d).map(|(e, dv)| e + dv).collect();
        phi = Tensor::new(shape.to_vec(), data)?;
    }
    Ok(phi)
}

/// Aligns every prediction to the first by least-squares scale and shift and
/// takes the per-pixel median.
pub fn ensemble(predictions: &[Tensor]) -> Result<Tensor> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::invalid("ensemble of zero predictions"))?;
    if predictions.len() == 1 {
        return Ok(first.clone());
    }
    let mask = Tensor::ones(first.shape());
    let mut aligned = Vec::with_capacity(predictions.len());
    aligned.push(first.clone());
    for p in &predictions[1..] {
        same_shape(first, p, "ensemble member")?;
        let AlignmentResult { scale, shift, .. } = align_scale_shift(p, first, &mask)?;
        aligned.push(p.map(|v| scale * v + shift));
    }
    let n = first.numel();
    let mut column = vec![0.0; aligned.len()];
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        for (c, a) in column.iter_mut().zip(&aligned) {
            *c = a.data()[i];
        }
        column.sort_by(f64::total_cmp);
        let m = column.len();
        out.push(if m % 2 == 1 {
            column[m / 2]
        } else {
            0.5 * (column[m / 2 - 1] + column[m / 2])
        });
    }
    Tensor::new(first.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::SeededRng;

    /// Returns a fixed tensor regardless of input.
    struct ConstantField(Tensor);

    impl VelocityModel for ConstantField {
        fn velocity<'g>(
            &self,
            g: &'g Graph,
            phi: Var<'g>,
            _cond: Var<'g>,
            _t: &[f64],
            _positions: &[FramePositions],
        ) -> Result<Var<'g>> {
            g.constant(self.0.clone()).reshape(&phi.shape())
        }
    }

    /// `target + offset` where target is the flow velocity of a fixed draw.
    struct Offset {
        target: Tensor,
        offset: f64,
    }

    impl VelocityModel for Offset {
        fn velocity<'g>(
            &self,
            g: &'g Graph,
            phi: Var<'g>,
            _cond: Var<'g>,
            _t: &[f64],
            _positions: &[FramePositions],
        ) -> Result<Var<'g>> {
            g.constant(self.target.map(|v| v + self.offset)).reshape(&phi.shape())
        }
    }

    fn positions(t: usize) -> FramePositions {
        FramePositions::contiguous(t)
    }

    #[test]
    fn corrupt_examples() {
        let z = Tensor::scalar(2.0);
        let e = Tensor::scalar(0.5);
        assert_eq!(corrupt(&z, &e, 0.0).unwrap(), e);
        assert_eq!(corrupt(&z, &e, 1.0).unwrap(), z);
        assert_eq!(corrupt(&z, &e, 0.25).unwrap().item().unwrap(), 0.875);
        assert!(corrupt(&z, &e, 1.5).is_err());
        assert!(corrupt(&z, &Tensor::zeros(&[2]), 0.5).is_err());
    }

    #[test]
    fn velocity_examples() {
        let z = Tensor::scalar(2.0);
        let e = Tensor::scalar(0.5);
        assert_eq!(target_velocity(&z, &e).unwrap().item().unwrap(), 1.5);
        assert_eq!(target_velocity(&z, &z).unwrap().item().unwrap(), 0.0);
        let mut rng = SeededRng::new(3);
        let z = rng.normal_tensor(&[10]);
        let e = rng.normal_tensor(&[10]);
        for t in [0.0, 0.3, 0.9] {
            let back = corrupt(&z, &e, t)
                .unwrap()
                .add(&target_velocity(&z, &e).unwrap().scale(1.0 - t))
                .unwrap();
            assert!(back.max_abs_diff(&z) < 1e-12);
        }
    }

    #[test]
    fn loss_of_exact_and_offset_models() {
        let mut rng = SeededRng::new(8);
        let z = rng.normal_tensor(&[2, 4, 2, 2]);
        let eps = rng.normal_tensor(&[2, 4, 2, 2]);
        let cond = Tensor::zeros(&[2, 4, 2, 2]);
        let target = target_velocity(&z, &eps).unwrap();
        let exact = Offset {
            target: target.clone(),
            offset: 0.0,
        };
        assert_eq!(fm_loss(&exact, &z, &cond, 0.4, &eps, &positions(2)).unwrap(), 0.0);
        let shifted = Offset { target, offset: 0.3 };
        let l = fm_loss(&shifted, &z, &cond, 0.4, &eps, &positions(2)).unwrap();
        assert!((l - 0.09).abs() < 1e-12);
    }

    #[test]
    fn straight_line_endpoint_is_reached_exactly() {
        let shape = [3, 4, 2, 2];
        let cond = Tensor::zeros(&[3, 4, 2, 2]);
        let seed = 99;
        let eps = sample_noise(&shape, seed);
        let v = SeededRng::new(1).normal_tensor(&shape);
        let endpoint = eps.add(&v).unwrap();
        let model = ConstantField(v);
        for steps in [1, 2, 3, 7, 25] {
            let out = sample(&model, &cond, steps, seed, &positions(3)).unwrap();
            assert_eq!(out, endpoint, "steps={steps}");
        }
    }

    #[test]
    fn target_recovered_within_rounding_of_oracle() {
        let shape = [2, 4, 2, 2];
        let cond = Tensor::zeros(&shape);
        let eps = sample_noise(&shape, 5);
        let z_star = SeededRng::new(6).normal_tensor(&shape);
        let model = ConstantField(target_velocity(&z_star, &eps).unwrap());
        let one = sample(&model, &cond, 1, 5, &positions(2)).unwrap();
        for steps in [3, 25] {
            assert_eq!(sample(&model, &cond, steps, 5, &positions(2)).unwrap(), one);
        }
        assert!(one.max_abs_diff(&z_star) < 1e-15);
    }

    #[test]
    fn sample_is_deterministic_and_rejects_zero_steps() {
        let cond = Tensor::zeros(&[1, 4, 2, 2]);
        let model = ConstantField(Tensor::full(&[1, 4, 2, 2], 0.5));
        let a = sample(&model, &cond, 3, 1, &positions(1)).unwrap();
        let b = sample(&model, &cond, 3, 1, &positions(1)).unwrap();
        assert_eq!(a, b);
        assert!(sample(&model, &cond, 0, 1, &positions(1)).is_err());
    }

    #[test]
    fn ensemble_examples() {
        let mut rng = SeededRng::new(2);
        let p = rng.uniform_tensor(&[1, 1, 4, 4], 1.0, 3.0);
        let same = ensemble(&[p.clone(), p.clone(), p.clone()]).unwrap();
        assert_eq!(same, p);
        let affine = p.map(|v| 2.0 * v + 3.0);
        let merged = ensemble(&[p.clone(), affine]).unwrap();
        assert!(merged.max_abs_diff(&p) < 1e-9);
        assert!(ensemble(&[]).is_err());
        let flat = Tensor::full(&[1, 1, 4, 4], 2.0);
        assert!(ensemble(&[flat.clone(), flat]).is_err());
    }
}
