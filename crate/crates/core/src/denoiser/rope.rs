//! Rotary position encoding over frame indices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Original frame indices of the frames a model sees, strictly increasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct FramePositions(Vec<usize>);

impl FramePositions {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!(
                "frame positions must be strictly increasing: {indices:?}"
            )));
        }
        Ok(Self(indices))
    }

    /// Skips the ordering check; only for exercising attention equivariance.
    #[cfg(test)]
    pub(crate) fn unchecked(indices: Vec<usize>) -> Self {
        Self(indices)
    }

    /// `0..len`.
    pub fn contiguous(len: usize) -> Self {
        Self((0..len).collect())
    }

    pub fn shifted(&self, by: usize) -> Self {
        Self(self.0.iter().map(|p| p + by).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl TryFrom<Vec<usize>> for FramePositions {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<FramePositions> for Vec<usize> {
    fn from(p: FramePositions) -> Self {
        p.0
    }
}

fn check_head_dim(head_dim: usize) -> Result<()> {
    if head_dim == 0 || !head_dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("head_dim must be even and positive, got {head_dim}")));
    }
    Ok(())
}

/// `(cos, sin)` tables of shape `(T, head_dim)`; both entries of pair `j` use
/// the angle `pos * theta^(-2j/head_dim)`.
pub fn rope_tables(positions: &[usize], head_dim: usize, theta: f64) -> Result<(Tensor, Tensor)> {
    check_head_dim(head_dim)?;
    let mut cos = Vec::with_capacity(positions.len() * head_dim);
    let mut sin = Vec::with_capacity(positions.len() * head_dim);
    for &p in positions {
        for c in 0..head_dim {
            let j = (c / 2) as f64;
            let angle = p as f64 * theta.powf(-2.0 * j / head_dim as f64);
            cos.push(angle.cos());
            sin.push(angle.sin());
        }
    }
    let shape = vec![positions.len(), head_dim];
    Ok((Tensor::new(shape.clone(), cos)?, Tensor::new(shape, sin)?))
}

/// Maps each pair `(x0, x1)` to `(-x1, x0)` when right-multiplied.
pub(crate) fn pair_swap_matrix(head_dim: usize) -> Tensor {
    let mut m = Tensor::zeros(&[head_dim, head_dim]);
    let d = m.data_mut();
    for j in 0..head_dim / 2 {
        d[(2 * j + 1) * head_dim + 2 * j] = -1.0;
        d[(2 * j) * head_dim + 2 * j + 1] = 1.0;
    }
    m
}

/// Rotates coordinate pairs of `vectors`, shaped `(..., T, head_dim)`, by
/// their frame position.
pub fn rope_rotate(vectors: &Tensor, positions: &FramePositions, theta: f64) -> Result<Tensor> {
    let s = vectors.shape();
    if s.len() < 2 {
        return Err(Error::shape(format!("rope needs (..., T, head_dim), got {s:?}")));
    }
    let (t, d) = (s[s.len() - 2], s[s.len() - 1]);
    check_head_dim(d)?;
    if t != positions.len() {
        return Err(Error::shape(format!(
            "{} positions for {t} frames",
            positions.len()
        )));
    }
    let (cos, sin) = rope_tables(positions.as_slice(), d, theta)?;
    let mut out = vectors.data().to_vec();
    for (chunk, src) in out.chunks_mut(t * d).zip(vectors.data().chunks(t * d)) {
        for f in 0..t {
            for j in 0..d / 2 {
                let (a, b) = (src[f * d + 2 * j], src[f * d + 2 * j + 1]);
                let (c, sn) = (cos.data()[f * d + 2 * j], sin.data()[f * d + 2 * j]);
                chunk[f * d + 2 * j] = a * c - b * sn;
                chunk[f * d + 2 * j + 1] = a * sn + b * c;
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Graph form of [`rope_rotate`] for `x` shaped `(B, P, H, T, d)` with one
/// position list per batch element.
pub(crate) fn rope_rotate_var<'g>(
    g: &'g Graph,
    x: Var<'g>,
    positions: &[FramePositions],
    theta: f64,
) -> Result<Var<'g>> {
    let s = x.shape();
    let (b, t, d) = (s[0], s[3], s[4]);
    let mut cos = Vec::with_capacity(b * t * d);
    let mut sin = Vec::with_capacity(b * t * d);
    for p in positions {
        let (c, sn) = rope_tables(p.as_slice(), d, theta)?;
        cos.extend_from_slice(c.data());
        sin.extend_from_slice(sn.data());
    }
    let table_shape = [b, 1, 1, t, d];
    let cos = g.constant(Tensor::new(table_shape.to_vec(), cos)?);
    let sin = g.constant(Tensor::new(table_shape.to_vec(), sin)?);
    let swapped = x.matmul(g.constant(pair_swap_matrix(d)))?;
    x.mul(cos)?.add(swapped.mul(sin)?)
}
