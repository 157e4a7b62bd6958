//! Reverse-mode differentiation tape.
//!
//! A [`Graph`] records every operation as it is evaluated (define-by-run).
//! Values are dynamic-rank `f64` arrays: rank 3 for feature maps, rank 4 for
//! convolution weights, rank 1 for biases, rank 0 for scalars such as losses.
//! [`Graph::backward`] walks the tape once and returns the gradient of a
//! scalar node with respect to every node that influenced it, which is how the
//! differentiation contract of this module is met for arbitrary compositions.

use ndarray::{Array3, ArrayD, ArrayViewD, Ix1, Ix3, Ix4, IxDyn};

use crate::error::{Error, Result};

use super::{conv, resize};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    BilinearResize {
        input: NodeId,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Concat {
        inputs: Vec<NodeId>,
    },
    Relu {
        input: NodeId,
    },
    Sigmoid {
        input: NodeId,
    },
    Abs {
        input: NodeId,
    },
    Ln {
        input: NodeId,
    },
    Sqrt {
        input: NodeId,
    },
    AddScalar {
        input: NodeId,
    },
    MulScalar {
        input: NodeId,
        factor: f64,
    },
    ClampMin {
        input: NodeId,
        floor: f64,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Sub {
        lhs: NodeId,
        rhs: NodeId,
    },
    Mul {
        lhs: NodeId,
        rhs: NodeId,
    },
    Div {
        lhs: NodeId,
        rhs: NodeId,
    },
    ScaleChannels {
        input: NodeId,
        gate: NodeId,
    },
    DiffX {
        input: NodeId,
    },
    DiffY {
        input: NodeId,
    },
    MaskedMean {
        input: NodeId,
        mask: ArrayD<f64>,
        count: f64,
    },
    WeightedSum {
        input: NodeId,
        weights: ArrayD<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
}

/// Gradients indexed by [`NodeId`], produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the seeded scalar w.r.t. the given node, if it received one.
    pub fn wrt(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    /// Value of a rank-0 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar_value called on non-scalar node");
        *v.iter().next().expect("non-empty value")
    }

    /// Value of a rank-3 node as a feature-map array.
    pub fn value3(&self, id: NodeId) -> Array3<f64> {
        self.view3(id).to_owned()
    }

    fn view3(&self, id: NodeId) -> ndarray::ArrayView3<'_, f64> {
        self.value(id)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("rank-3 node")
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn leaf3(&mut self, value: Array3<f64>) -> NodeId {
        self.leaf(value.into_dyn())
    }

    pub fn scalar_leaf(&mut self, v: f64) -> NodeId {
        self.leaf(scalar(v))
    }

    fn require_rank(&self, id: NodeId, rank: usize, what: &str) -> Result<()> {
        if self.value(id).ndim() != rank {
            return Err(Error::config(format!(
                "{what} must have rank {rank}, got rank {}",
                self.value(id).ndim()
            )));
        }
        Ok(())
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weights: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.require_rank(input, 3, "conv2d input")?;
        self.require_rank(weights, 4, "conv2d weights")?;
        self.require_rank(bias, 1, "conv2d bias")?;
        let w = self
            .value(weights)
            .view()
            .into_dimensionality::<Ix4>()
            .expect("rank checked");
        let (oc, ic, kh, kw) = w.dim();
        let x = self.view3(input);
        let (c, ih, iw) = x.dim();
        if kh != kw {
            return Err(Error::config("conv2d kernel must be square"));
        }
        if c != ic {
            return Err(Error::config(format!(
                "conv2d expects {ic} input channels, got {c}"
            )));
        }
        if self.value(bias).len() != oc {
            return Err(Error::config("conv2d bias length mismatch"));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        if conv::output_size(ih, kh, stride, padding).is_none()
            || conv::output_size(iw, kh, stride, padding).is_none()
        {
            return Err(Error::config(format!(
                "conv2d output would be empty for input {ih}x{iw}, kernel {kh}, stride {stride}, padding {padding}"
            )));
        }
        let b = self
            .value(bias)
            .view()
            .into_dimensionality::<Ix1>()
            .expect("rank checked");
        let out = conv::forward(x, w, b, stride, padding).into_dyn();
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weights,
                bias,
                stride,
                padding,
            },
        ))
    }

    pub fn bilinear_resize(&mut self, input: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        self.require_rank(input, 3, "bilinear_resize input")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::config("bilinear_resize target must be positive"));
        }
        let out = resize::forward(self.view3(input), out_h, out_w).into_dyn();
        Ok(self.push(out, Op::BilinearResize { input }))
    }

    /// Per-channel spatial mean, shaped `(channels, 1, 1)`.
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        self.require_rank(input, 3, "global_avg_pool input")?;
        let x = self.view3(input);
        let (c, h, w) = x.dim();
        let n = (h * w) as f64;
        let out = Array3::from_shape_fn((c, 1, 1), |(ch, _, _)| {
            x.index_axis(ndarray::Axis(0), ch).sum() / n
        });
        Ok(self.push(out.into_dyn(), Op::GlobalAvgPool { input }))
    }

    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::config("concat needs at least one input"));
        }
        for &id in inputs {
            self.require_rank(id, 3, "concat input")?;
        }
        let (_, h, w) = self.view3(inputs[0]).dim();
        let mut channels = 0;
        for &id in inputs {
            let (c, ih, iw) = self.view3(id).dim();
            if ih != h || iw != w {
                return Err(Error::config(format!(
                    "concat spatial mismatch: {h}x{w} vs {ih}x{iw}"
                )));
            }
            channels += c;
        }
        let mut out = Array3::zeros((channels, h, w));
        let mut offset = 0;
        for &id in inputs {
            let x = self.view3(id);
            let c = x.dim().0;
            out.slice_mut(ndarray::s![offset..offset + c, .., ..]).assign(&x);
            offset += c;
        }
        Ok(self.push(
            out.into_dyn(),
            Op::Concat {
                inputs: inputs.to_vec(),
            },
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu { input })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid { input })
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).mapv(f64::abs);
        self.push(out, Op::Abs { input })
    }

    pub fn ln(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).mapv(f64::ln);
        self.push(out, Op::Ln { input })
    }

    pub fn sqrt(&mut self, input: NodeId) -> NodeId {
        let out = self.value(input).mapv(f64::sqrt);
        self.push(out, Op::Sqrt { input })
    }

    pub fn add_scalar(&mut self, input: NodeId, c: f64) -> NodeId {
        let out = self.value(input).mapv(|v| v + c);
        self.push(out, Op::AddScalar { input })
    }

    pub fn mul_scalar(&mut self, input: NodeId, factor: f64) -> NodeId {
        let out = self.value(input).mapv(|v| v * factor);
        self.push(out, Op::MulScalar { input, factor })
    }

    pub fn clamp_min(&mut self, input: NodeId, floor: f64) -> NodeId {
        let out = self.value(input).mapv(|v| v.max(floor));
        self.push(out, Op::ClampMin { input, floor })
    }

    fn binary(
        &mut self,
        lhs: NodeId,
        rhs: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(Error::config(format!(
                "elementwise op shape mismatch: {:?} vs {:?}",
                self.value(lhs).shape(),
                self.value(rhs).shape()
            )));
        }
        let mut out = self.value(lhs).clone();
        ndarray::Zip::from(&mut out)
            .and(self.value(rhs))
            .for_each(|o, &r| *o = f(*o, r));
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(lhs, rhs, |a, b| a + b, Op::Add { lhs, rhs })
    }

    pub fn sub(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(lhs, rhs, |a, b| a - b, Op::Sub { lhs, rhs })
    }

    pub fn mul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(lhs, rhs, |a, b| a * b, Op::Mul { lhs, rhs })
    }

    pub fn div(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        self.binary(lhs, rhs, |a, b| a / b, Op::Div { lhs, rhs })
    }

    /// Multiplies each channel of `input` (rank 3) by the matching entry of
    /// `gate` (shape `(channels, 1, 1)`).
    pub fn scale_channels(&mut self, input: NodeId, gate: NodeId) -> Result<NodeId> {
        self.require_rank(input, 3, "scale_channels input")?;
        self.require_rank(gate, 3, "scale_channels gate")?;
        let x = self.view3(input);
        let g = self.view3(gate);
        let (c, _, _) = x.dim();
        if g.dim() != (c, 1, 1) {
            return Err(Error::config(format!(
                "scale_channels gate must be ({c}, 1, 1), got {:?}",
                g.dim()
            )));
        }
        let mut out = x.to_owned();
        for (ch, mut plane) in out.outer_iter_mut().enumerate() {
            plane *= g[[ch, 0, 0]];
        }
        Ok(self.push(out.into_dyn(), Op::ScaleChannels { input, gate }))
    }

    /// Forward difference along columns; the last column is zero (replicated
    /// boundary).
    pub fn diff_x(&mut self, input: NodeId) -> Result<NodeId> {
        self.require_rank(input, 3, "diff_x input")?;
        let x = self.view3(input);
        let (c, h, w) = x.dim();
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h {
                for xi in 0..w.saturating_sub(1) {
                    out[[ch, y, xi]] = x[[ch, y, xi + 1]] - x[[ch, y, xi]];
                }
            }
        }
        Ok(self.push(out.into_dyn(), Op::DiffX { input }))
    }

    /// Forward difference along rows; the last row is zero.
    pub fn diff_y(&mut self, input: NodeId) -> Result<NodeId> {
        self.require_rank(input, 3, "diff_y input")?;
        let x = self.view3(input);
        let (c, h, w) = x.dim();
        let mut out = Array3::zeros((c, h, w));
        for ch in 0..c {
            for y in 0..h.saturating_sub(1) {
                for xi in 0..w {
                    out[[ch, y, xi]] = x[[ch, y + 1, xi]] - x[[ch, y, xi]];
                }
            }
        }
        Ok(self.push(out.into_dyn(), Op::DiffY { input }))
    }

    /// Mean of `input` over the entries where `mask` is non-zero, as a rank-0
    /// node. An all-zero mask yields 0 and propagates no gradient.
    pub fn masked_mean(&mut self, input: NodeId, mask: ArrayD<f64>) -> Result<NodeId> {
        if self.value(input).shape() != mask.shape() {
            return Err(Error::config("masked_mean mask shape mismatch"));
        }
        let count: f64 = mask.sum();
        let value = if count > 0.0 {
            let mut acc = 0.0;
            ndarray::Zip::from(self.value(input))
                .and(&mask)
                .for_each(|&v, &m| acc += v * m);
            acc / count
        } else {
            0.0
        };
        Ok(self.push(scalar(value), Op::MaskedMean { input, mask, count }))
    }

    /// Mean over all entries, as a rank-0 node.
    pub fn mean(&mut self, input: NodeId) -> Result<NodeId> {
        let ones = ArrayD::from_elem(self.value(input).raw_dim(), 1.0);
        self.masked_mean(input, ones)
    }

    /// `sum(input * weights)` for a fixed weight array, as a rank-0 node.
    pub fn weighted_sum(&mut self, input: NodeId, weights: ArrayD<f64>) -> Result<NodeId> {
        if self.value(input).shape() != weights.shape() {
            return Err(Error::config("weighted_sum weight shape mismatch"));
        }
        let mut acc = 0.0;
        ndarray::Zip::from(self.value(input))
            .and(&weights)
            .for_each(|&v, &w| acc += v * w);
        Ok(self.push(scalar(acc), Op::WeightedSum { input, weights }))
    }

    /// Reverse pass from a rank-0 node. Returns one gradient array per
    /// reachable ancestor node.
    pub fn backward(&self, seed: NodeId) -> Result<Gradients> {
        if self.value(seed).len() != 1 {
            return Err(Error::config(
                "backward seed must be a scalar (rank-0) node",
            ));
        }
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[seed.0] = Some(ArrayD::from_elem(self.value(seed).raw_dim(), 1.0));

        for id in (0..=seed.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weights,
                bias,
                stride,
                padding,
            } => {
                let x = self.view3(*input);
                let w = self
                    .value(*weights)
                    .view()
                    .into_dimensionality::<Ix4>()
                    .expect("rank-4 weights");
                let g3 = g.view().into_dimensionality::<Ix3>().expect("rank-3 grad");
                let (gi, gw, gb) = conv::backward(x, w, *stride, *padding, g3);
                accumulate(&mut grads[input.0], gi.into_dyn().view());
                accumulate(&mut grads[weights.0], gw.into_dyn().view());
                accumulate(&mut grads[bias.0], gb.into_dyn().view());
            }
            Op::BilinearResize { input } => {
                let (_, ih, iw) = self.view3(*input).dim();
                let g3 = g.view().into_dimensionality::<Ix3>().expect("rank-3 grad");
                let gi = resize::backward(g3, ih, iw);
                accumulate(&mut grads[input.0], gi.into_dyn().view());
            }
            Op::GlobalAvgPool { input } => {
                let x = self.view3(*input);
                let (c, h, w) = x.dim();
                let n = (h * w) as f64;
                let mut gi = Array3::zeros((c, h, w));
                let g3 = g.view().into_dimensionality::<Ix3>().expect("rank-3 grad");
                for ch in 0..c {
                    let per = g3[[ch, 0, 0]] / n;
                    gi.index_axis_mut(ndarray::Axis(0), ch).fill(per);
                }
                accumulate(&mut grads[input.0], gi.into_dyn().view());
            }
            Op::Concat { inputs } => {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("rank-3 grad");
                let mut offset = 0;
                for &inp in inputs {
                    let c = self.view3(inp).dim().0;
                    let slice = g3.slice(ndarray::s![offset..offset + c, .., ..]);
                    accumulate(&mut grads[inp.0], slice.into_dyn());
                    offset += c;
                }
            }
            Op::Relu { input } => {
                let gi = elementwise_grad(g, self.value(*input), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else {
                        0.0
                    }
                });
                accumulate(&mut grads[input.0], gi.view());
            }
            Op::Sigmoid { input } => {
                let gi = elementwise_grad(g, &node.value, |gv, s| gv * s * (1.0 - s));
                accumulate(&mut grads[input.0], gi.view());
            }
            Op::Abs { input } => {
                let gi = elementwise_grad(g, self.value(*input), |gv, x| gv * x.signum_or_zero());
                accumulate(&mut grads[input.0], gi.view());
            }
            Op::Ln { input } => {
                let gi = elementwise_grad(g, self.value(*input), |gv, x| gv / x);
                accumulate(&mut grads[input.0], gi.view());
            }
            Op::Sqrt { input } => {
                let gi = elementwise_grad(g, &node.value, |gv, s| gv / (2.0 * s));
                accumulate(&mut grads[input.0], gi.view());
            }
            Op::AddScalar { input } => {
                accumulate(&mut grads[input.0], g.view());
            }
            Op::MulScalar { input, factor } => {
                let gi = g.mapv(|gv| gv * factor);
                accumulate(&mut grads[input.0], gi.view());
            }
            Op::ClampMin { input, floor } => {
                let gi = elementwise_grad(g, self.value(*input), |gv, x| {
                    if x > *floor {
                        gv
                    } else {
                        0.0
                    }
                });
                accumulate(&mut grads[input.0], gi.view());
            }
            Op::Add { lhs, rhs } => {
                accumulate(&mut grads[lhs.0], g.view());
                accumulate(&mut grads[rhs.0], g.view());
            }
            Op::Sub { lhs, rhs } => {
                accumulate(&mut grads[lhs.0], g.view());
                let neg = g.mapv(|gv| -gv);
                accumulate(&mut grads[rhs.0], neg.view());
            }
            Op::Mul { lhs, rhs } => {
                let gl = elementwise_grad(g, self.value(*rhs), |gv, r| gv * r);
                let gr = elementwise_grad(g, self.value(*lhs), |gv, l| gv * l);
                accumulate(&mut grads[lhs.0], gl.view());
                accumulate(&mut grads[rhs.0], gr.view());
            }
            Op::Div { lhs, rhs } => {
                let gl = elementwise_grad(g, self.value(*rhs), |gv, r| gv / r);
                let mut gr = g.clone();
                ndarray::Zip::from(&mut gr)
                    .and(self.value(*lhs))
                    .and(self.value(*rhs))
                    .for_each(|gv, &l, &r| *gv = -*gv * l / (r * r));
                accumulate(&mut grads[lhs.0], gl.view());
                accumulate(&mut grads[rhs.0], gr.view());
            }
            Op::ScaleChannels { input, gate } => {
                let x = self.view3(*input);
                let gt = self.view3(*gate);
                let g3 = g.view().into_dimensionality::<Ix3>().expect("rank-3 grad");
                let (c, h, w) = x.dim();
                let mut gi = Array3::zeros((c, h, w));
                let mut gg = Array3::zeros((c, 1, 1));
                for ch in 0..c {
                    let gate_v = gt[[ch, 0, 0]];
                    let mut acc = 0.0;
                    for y in 0..h {
                        for xi in 0..w {
                            gi[[ch, y, xi]] = g3[[ch, y, xi]] * gate_v;
                            acc += g3[[ch, y, xi]] * x[[ch, y, xi]];
                        }
                    }
                    gg[[ch, 0, 0]] = acc;
                }
                accumulate(&mut grads[input.0], gi.into_dyn().view());
                accumulate(&mut grads[gate.0], gg.into_dyn().view());
            }
            Op::DiffX { input } => {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("rank-3 grad");
                let (c, h, w) = g3.dim();
                let mut gi = Array3::zeros((c, h, w));
                for ch in 0..c {
                    for y in 0..h {
                        for xi in 0..w.saturating_sub(1) {
                            gi[[ch, y, xi + 1]] += g3[[ch, y, xi]];
                            gi[[ch, y, xi]] -= g3[[ch, y, xi]];
                        }
                    }
                }
                accumulate(&mut grads[input.0], gi.into_dyn().view());
            }
            Op::DiffY { input } => {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("rank-3 grad");
                let (c, h, w) = g3.dim();
                let mut gi = Array3::zeros((c, h, w));
                for ch in 0..c {
                    for y in 0..h.saturating_sub(1) {
                        for xi in 0..w {
                            gi[[ch, y + 1, xi]] += g3[[ch, y, xi]];
                            gi[[ch, y, xi]] -= g3[[ch, y, xi]];
                        }
                    }
                }
                accumulate(&mut grads[input.0], gi.into_dyn().view());
            }
            Op::MaskedMean { input, mask, count } => {
                if *count > 0.0 {
                    let gs = g.iter().next().copied().unwrap_or(0.0);
                    let gi = mask.mapv(|m| gs * m / count);
                    accumulate(&mut grads[input.0], gi.view());
                }
            }
            Op::WeightedSum { input, weights } => {
                let gs = g.iter().next().copied().unwrap_or(0.0);
                let gi = weights.mapv(|w| gs * w);
                accumulate(&mut grads[input.0], gi.view());
            }
        }
    }
}

fn accumulate(slot: &mut Option<ArrayD<f64>>, delta: ArrayViewD<f64>) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta.to_owned()),
    }
}

fn elementwise_grad(
    g: &ArrayD<f64>,
    other: &ArrayD<f64>,
    f: impl Fn(f64, f64) -> f64,
) -> ArrayD<f64> {
    let mut out = g.clone();
    ndarray::Zip::from(&mut out)
        .and(other)
        .for_each(|gv, &o| *gv = f(*gv, o));
    out
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}
