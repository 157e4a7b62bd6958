//! Numeric primitives shared by the whole network: feature maps,
//! convolution, bilinear resizing, pooling, concatenation, and the
//! reverse-mode differentiation tape that makes every operation trainable.
//!
//! All operations are pure functions of their inputs and run in `f64` so
//! that finite-difference gradient checks are meaningful.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod resize;

use ndarray::{Array1, Array3, Array4};

use crate::error::{Error, Result};

/// A rank-3 feature map indexed `(channel, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    values: Array3<f64>,
}

impl FeatureMap {
    /// Wraps an existing array. All dimensions must be non-zero.
    pub fn new(values: Array3<f64>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!(
                "feature map dimensions must be positive, got {c}x{h}x{w}"
            )));
        }
        Ok(FeatureMap { values })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            values: Array3::zeros((channels, height, width)),
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        FeatureMap {
            values: Array3::from_shape_fn((channels, height, width), |(c, y, x)| f(c, y, x)),
        }
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn height(&self) -> usize {
        self.values.dim().1
    }

    pub fn width(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array3<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array3<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Configuration and parameters of one 2-D convolution.
///
/// Output spatial size on each axis is `floor((in + 2*padding - kernel)/stride) + 1`
/// and must be at least 1.
#[derive(Debug, Clone)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    /// Shape `(out_channels, in_channels, kernel_size, kernel_size)`.
    pub weights: Array4<f64>,
    /// One bias per output channel.
    pub bias: Array1<f64>,
}

impl ConvSpec {
    pub fn new(
        weights: Array4<f64>,
        bias: Array1<f64>,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (oc, ic, kh, kw) = weights.dim();
        if oc == 0 || ic == 0 {
            return Err(Error::config("convolution needs positive channel counts"));
        }
        if kh != kw || kh == 0 || kh % 2 == 0 {
            return Err(Error::config(format!(
                "kernel must be square with positive odd size, got {kh}x{kw}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        if bias.len() != oc {
            return Err(Error::config(format!(
                "bias length {} does not match out_channels {}",
                bias.len(),
                oc
            )));
        }
        Ok(ConvSpec {
            in_channels: ic,
            out_channels: oc,
            kernel_size: kh,
            stride,
            padding,
            weights,
            bias,
        })
    }

    /// Zero-initialized spec, mostly useful in tests.
    pub fn zeros(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        ConvSpec::new(
            Array4::zeros((out_channels, in_channels, kernel_size, kernel_size)),
            Array1::zeros(out_channels),
            stride,
            padding,
        )
    }
}

/// Direct cross-correlation with zero padding.
pub fn conv2d(input: &FeatureMap, spec: &ConvSpec) -> Result<FeatureMap> {
    if input.channels() != spec.in_channels {
        return Err(Error::config(format!(
            "conv2d expects {} input channels, got {}",
            spec.in_channels,
            input.channels()
        )));
    }
    let oh = conv::output_size(input.height(), spec.kernel_size, spec.stride, spec.padding);
    let ow = conv::output_size(input.width(), spec.kernel_size, spec.stride, spec.padding);
    match (oh, ow) {
        (Some(_), Some(_)) => {}
        _ => {
            return Err(Error::config(format!(
                "conv2d output size would be non-positive for input {}x{} kernel {} stride {} padding {}",
                input.height(),
                input.width(),
                spec.kernel_size,
                spec.stride,
                spec.padding
            )))
        }
    }
    let out = conv::forward(
        input.values().view(),
        spec.weights.view(),
        spec.bias.view(),
        spec.stride,
        spec.padding,
    );
    FeatureMap::new(out)
}

/// Separable bilinear interpolation with corner-aligned sampling: the source
/// coordinate for output index `o` is `o * (in - 1) / (out - 1)`, and an
/// output axis of size 1 samples index 0. Channels are preserved.
pub fn bilinear_resize(input: &FeatureMap, out_height: usize, out_width: usize) -> Result<FeatureMap> {
    if out_height == 0 || out_width == 0 {
        return Err(Error::config(format!(
            "bilinear_resize target size must be positive, got {out_height}x{out_width}"
        )));
    }
    FeatureMap::new(resize::forward(input.values().view(), out_height, out_width))
}

/// Mean over all spatial positions of each channel.
pub fn global_avg_pool(input: &FeatureMap) -> Array1<f64> {
    let n = (input.height() * input.width()) as f64;
    Array1::from_iter(
        input
            .values()
            .outer_iter()
            .map(|channel| channel.sum() / n),
    )
}

/// Concatenates along the channel axis, preserving input order.
pub fn concat_channels(inputs: &[FeatureMap]) -> Result<FeatureMap> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::config("concat_channels needs at least one input"))?;
    let (h, w) = (first.height(), first.width());
    for (i, m) in inputs.iter().enumerate() {
        if m.height() != h || m.width() != w {
            return Err(Error::config(format!(
                "concat_channels spatial mismatch: input 0 is {h}x{w}, input {i} is {}x{}",
                m.height(),
                m.width()
            )));
        }
    }
    let channels: usize = inputs.iter().map(|m| m.channels()).sum();
    let mut out = Array3::zeros((channels, h, w));
    let mut offset = 0;
    for m in inputs {
        out.slice_mut(ndarray::s![offset..offset + m.channels(), .., ..])
            .assign(m.values());
        offset += m.channels();
    }
    FeatureMap::new(out)
}
