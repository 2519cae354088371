//! Temporal self-attention across frames at every spatial location.

use serde::{Deserialize, Serialize};

use super::rope::{rope_rotate_var, FramePositions};
use crate::error::{Error, Result};
use crate::numerics::rng::SeededRng;
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// How frame positions enter the attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    /// Rotate queries and keys by their frame index.
    #[default]
    Rope,
    /// Add a sinusoidal embedding of the frame index to the normalized input.
    AbsoluteSinusoidal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionShape {
    pub channels: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub theta: f64,
    pub encoding: PositionEncoding,
}

impl AttentionShape {
    fn inner(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Registers the block's weights under `prefix`.
pub fn init_attention(
    store: &mut ParamStore,
    prefix: &str,
    shape: &AttentionShape,
    rng: &mut SeededRng,
) -> Result<()> {
    let (c, inner) = (shape.channels, shape.inner());
    let proj = |rng: &mut SeededRng, fan_in: usize, rows: usize, cols: usize| {
        rng.normal_tensor(&[rows, cols]).scale(1.0 / (fan_in as f64).sqrt())
    };
    store.insert(&format!("{prefix}.norm.gamma"), Tensor::ones(&[c]))?;
    store.insert(&format!("{prefix}.norm.beta"), Tensor::zeros(&[c]))?;
    store.insert(&format!("{prefix}.q"), proj(rng, c, c, inner))?;
    store.insert(&format!("{prefix}.k"), proj(rng, c, c, inner))?;
    store.insert(&format!("{prefix}.v"), proj(rng, c, c, inner))?;
    store.insert(&format!("{prefix}.out.weight"), proj(rng, inner, inner, c).scale(0.5))?;
    store.insert(&format!("{prefix}.out.bias"), Tensor::zeros(&[c]))?;
    Ok(())
}

/// Sinusoidal table `(T, dim)`: `sin` in the first half, `cos` in the second.
pub(crate) fn sinusoid(values: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        let mut row = vec![0.0; dim];
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            row[i] = (v * freq).sin();
            row[half + i] = (v * freq).cos();
        }
        out.extend(row);
    }
    Tensor::new(vec![values.len(), dim], out).expect("sized above")
}

/// Pre-norm attention with a residual: `x + W_o attn(LN(x))`.
///
/// `x` is `(B*T, C, h, w)`; `positions` has one entry per batch element, each
/// of length `T`.
pub(crate) fn temporal_attention_var<'g>(
    g: &'g Graph,
    store: &ParamStore,
    prefix: &str,
    shape: &AttentionShape,
    x: Var<'g>,
    positions: &[FramePositions],
) -> Result<Var<'g>> {
    let s = x.shape();
    let b = positions.len();
    let t = positions.first().map(|p| p.len()).unwrap_or(0);
    if s.len() != 4 || b == 0 || s[0] != b * t || positions.iter().any(|p| p.len() != t) {
        return Err(Error::shape(format!(
            "temporal attention: features {s:?} vs {b} position lists of length {t}"
        )));
    }
    let (c, hw) = (s[1], s[2] * s[3]);
    if c != shape.channels {
        return Err(Error::shape(format!("expected {} channels, got {c}", shape.channels)));
    }
    let (heads, d, inner) = (shape.heads, shape.head_dim, shape.inner());
    let p = |name: &str| g.param_from(store, &format!("{prefix}.{name}"));

    // (B, hw, T, C): attention runs over T for every (batch, pixel).
    let seq = x.reshape(&[b, t, c, hw])?.permute(&[0, 3, 1, 2])?;
    let mut normed = seq.layer_norm()?.mul(p("norm.gamma")?)?.add(p("norm.beta")?)?;
    if shape.encoding == PositionEncoding::AbsoluteSinusoidal {
        let mut table = Vec::with_capacity(b * t * c);
        for pos in positions {
            let vals: Vec<f64> = pos.as_slice().iter().map(|&v| v as f64).collect();
            table.extend_from_slice(sinusoid(&vals, c).data());
        }
        let pe = g.constant(Tensor::new(vec![b, 1, t, c], table)?);
        normed = normed.add(pe)?;
    }
    let split = |v: Var<'g>| -> Result<Var<'g>> {
        v.reshape(&[b, hw, t, heads, d])?.permute(&[0, 1, 3, 2, 4])
    };
    let mut q = split(normed.matmul(p("q")?)?)?;
    let mut k = split(normed.matmul(p("k")?)?)?;
    let v = split(normed.matmul(p("v")?)?)?;
    if shape.encoding == PositionEncoding::Rope {
        q = rope_rotate_var(g, q, positions, shape.theta)?;
        k = rope_rotate_var(g, k, positions, shape.theta)?;
    }
    let groups = b * hw * heads;
    let q = q.reshape(&[groups, t, d])?;
    let kt = k.permute(&[0, 1, 2, 4, 3])?.reshape(&[groups, d, t])?;
    let v = v.reshape(&[groups, t, d])?;
    let weights = q.matmul(kt)?.scale(1.0 / (d as f64).sqrt())?.softmax()?;
    let mixed = weights
        .matmul(v)?
        .reshape(&[b, hw, heads, t, d])?
        .permute(&[0, 1, 3, 2, 4])?
        .reshape(&[b, hw, t, inner])?;
    let out = mixed.matmul(p("out.weight")?)?.add(p("out.bias")?)?;
    let out = out.permute(&[0, 2, 3, 1])?.reshape(&s)?;
    x.add(out)
}

/// Tensor-level temporal attention over a single clip `(T, C, H, W)`.
pub fn temporal_attention(
    features: &Tensor,
    positions: &FramePositions,
    store: &ParamStore,
    prefix: &str,
    shape: &AttentionShape,
) -> Result<Tensor> {
    if features.rank() != 4 || features.shape()[0] != positions.len() {
        return Err(Error::shape(format!(
            "{} positions for features {:?}",
            positions.len(),
            features.shape()
        )));
    }
    let g = Graph::new();
    let out = temporal_attention_var(
        &g,
        store,
        prefix,
        shape,
        g.constant(features.clone()),
        std::slice::from_ref(positions),
    )?;
    Ok(out.value().as_ref().clone())
}
