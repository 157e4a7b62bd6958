//! Convolution arithmetic: im2col lowering plus matrix products, with the
//! adjoint passes needed by the differentiation tape.

use ndarray::{Array1, Array2, Array3, Array4, ArrayView1, ArrayView3, ArrayView4};

/// `floor((in + 2*padding - kernel)/stride) + 1`, or `None` when non-positive.
pub fn output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Lowers the padded input into a `(in_c * k * k, out_h * out_w)` matrix.
fn im2col(
    input: &ArrayView3<f64>,
    kernel: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (ic, ih, iw) = input.dim();
    let mut cols = Array2::zeros((ic * kernel * kernel, oh * ow));
    for c in 0..ic {
        for ky in 0..kernel {
            for kx in 0..kernel {
                let row = (c * kernel + ky) * kernel + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy as usize >= ih {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix as usize >= iw {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = input[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Cross-correlation with zero padding. Panics on invalid shapes; callers
/// validate through [`crate::nn::conv2d`] or the graph.
pub fn forward(
    input: ArrayView3<f64>,
    weights: ArrayView4<f64>,
    bias: ArrayView1<f64>,
    stride: usize,
    padding: usize,
) -> Array3<f64> {
    let (oc, ic, k, _) = weights.dim();
    let (_, ih, iw) = input.dim();
    let oh = output_size(ih, k, stride, padding).expect("validated output height");
    let ow = output_size(iw, k, stride, padding).expect("validated output width");
    let cols = im2col(&input, k, stride, padding, oh, ow);
    let w2 = weights
        .into_shape_with_order((oc, ic * k * k))
        .expect("contiguous weights");
    let mut out2 = w2.dot(&cols);
    for (mut row, &b) in out2.outer_iter_mut().zip(bias.iter()) {
        row += b;
    }
    out2
        .into_shape_with_order((oc, oh, ow))
        .expect("output reshape")
}

/// Gradients with respect to (input, weights, bias) for the given upstream
/// gradient. Shapes mirror the forward arguments.
pub fn backward(
    input: ArrayView3<f64>,
    weights: ArrayView4<f64>,
    stride: usize,
    padding: usize,
    grad_out: ArrayView3<f64>,
) -> (Array3<f64>, Array4<f64>, Array1<f64>) {
    let (oc, ic, k, _) = weights.dim();
    let (_, ih, iw) = input.dim();
    let (_, oh, ow) = grad_out.dim();

    let g2 = grad_out
        .into_shape_with_order((oc, oh * ow))
        .expect("contiguous grad");
    let cols = im2col(&input, k, stride, padding, oh, ow);

    let grad_bias = g2.sum_axis(ndarray::Axis(1));
    let grad_w2 = g2.dot(&cols.t());
    let grad_weights = grad_w2
        .into_shape_with_order((oc, ic, k, k))
        .expect("weight reshape");

    let w2 = weights
        .into_shape_with_order((oc, ic * k * k))
        .expect("contiguous weights");
    let grad_cols = w2.t().dot(&g2);

    // col2im: scatter-add column gradients back onto the input raster.
    let mut grad_input = Array3::zeros((ic, ih, iw));
    for c in 0..ic {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy as usize >= ih {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix as usize >= iw {
                            continue;
                        }
                        grad_input[[c, iy as usize, ix as usize]] += grad_cols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    (grad_input, grad_weights, grad_bias)
}
