//! Cropping and resampling of `(C, H, W)` planes.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn planes(x: &Tensor) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [c, h, w] => Ok((*c, *h, *w)),
        s => Err(Error::shape(format!("expected (C,H,W), got {s:?}"))),
    }
}

/// Overlap weights of output cell `i` with input cells when `n_in` cells are
/// squeezed into `n_out`.
fn coverage(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let (lo, hi) = (i as f64 * ratio, (i + 1) as f64 * ratio);
            let mut cells = Vec::new();
            let mut j = lo.floor() as usize;
            while (j as f64) < hi && j < n_in {
                let w = (hi.min(j as f64 + 1.0) - lo.max(j as f64)) / ratio;
                if w > 0.0 {
                    cells.push((j, w));
                }
                j += 1;
            }
            cells
        })
        .collect()
}

/// Box-filter resampling: each output pixel is the area-weighted mean of the
/// input pixels it covers.
pub fn area_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = planes(x)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output size must be positive"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x.clone());
    }
    let (rows, cols) = (coverage(h, out_h), coverage(w, out_w));
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for r in &rows {
            for col in &cols {
                let mut acc = 0.0;
                for &(y, wy) in r {
                    for &(xx, wx) in col {
                        acc += wy * wx * plane[y * w + xx];
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Nearest-neighbour resampling on pixel centres.
pub fn nearest_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = planes(x)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("output size must be positive"));
    }
    let pick = |i: usize, n_in: usize, n_out: usize| {
        (((i as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for plane in x.data().chunks(h * w) {
        for y in 0..out_h {
            let sy = pick(y, h, out_h);
            for xx in 0..out_w {
                out.push(plane[sy * w + pick(xx, w, out_w)]);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// The `(top, left, height, width)` window with the aspect ratio of
/// `target` cut from the centre of an `h x w` image.
pub fn center_crop_box(h: usize, w: usize, target: (usize, usize)) -> (usize, usize, usize, usize) {
    let (th, tw) = target;
    // largest crop with ch/cw == th/tw
    let (ch, cw) = if h * tw >= w * th {
        ((w * th) / tw, w)
    } else {
        (h, (h * tw) / th)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Crops `(C, H, W)` to the given window.
pub fn crop(x: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::shape(format!("expected (C,H,W), got {:?}", x.shape())));
    }
    x.narrow(1, top, ch)?.narrow(2, left, cw)
}
