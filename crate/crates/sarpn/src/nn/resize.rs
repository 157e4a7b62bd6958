//! Corner-aligned bilinear interpolation and its adjoint.

use ndarray::{Array3, ArrayView3};

/// Sampling stencil on one axis: lower index, upper index, upper weight.
fn axis_taps(in_size: usize, out_size: usize) -> Vec<(usize, usize, f64)> {
    (0..out_size)
        .map(|o| {
            if out_size == 1 || in_size == 1 {
                return (0, 0, 0.0);
            }
            let src = o as f64 * (in_size - 1) as f64 / (out_size - 1) as f64;
            let lo = (src.floor() as usize).min(in_size - 1);
            let hi = (lo + 1).min(in_size - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

pub fn forward(input: ArrayView3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, ih, iw) = input.dim();
    let ys = axis_taps(ih, out_h);
    let xs = axis_taps(iw, out_w);
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = (1.0 - fx) * input[[ch, y0, x0]] + fx * input[[ch, y0, x1]];
                let bot = (1.0 - fx) * input[[ch, y1, x0]] + fx * input[[ch, y1, x1]];
                out[[ch, oy, ox]] = (1.0 - fy) * top + fy * bot;
            }
        }
    }
    out
}

/// Scatters the output gradient back through the interpolation weights.
pub fn backward(grad_out: ArrayView3<f64>, in_h: usize, in_w: usize) -> Array3<f64> {
    let (c, oh, ow) = grad_out.dim();
    let ys = axis_taps(in_h, oh);
    let xs = axis_taps(in_w, ow);
    let mut grad_in = Array3::zeros((c, in_h, in_w));
    for ch in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = grad_out[[ch, oy, ox]];
                grad_in[[ch, y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
                grad_in[[ch, y0, x1]] += g * (1.0 - fy) * fx;
                grad_in[[ch, y1, x0]] += g * fy * (1.0 - fx);
                grad_in[[ch, y1, x1]] += g * fy * fx;
            }
        }
    }
    grad_in
}
