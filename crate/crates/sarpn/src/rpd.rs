//! Residual pyramid decoder: the coarsest depth map is predicted first, then
//! one residual refinement module per level upsamples the coarser prediction,
//! adds a learned residual from the fused features, and refines the sum.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::adff::refine_block_graph;
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::FeatureMap;
use crate::params::{self, GraphParams, ParamStore};

/// Single-channel depth raster in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Array2<f64>,
}

impl DepthMap {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        let (h, w) = values.dim();
        if h == 0 || w == 0 {
            return Err(Error::config("depth map dimensions must be positive"));
        }
        Ok(DepthMap { values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        DepthMap {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        DepthMap {
            values: Array2::from_shape_fn((height, width), |(y, x)| f(y, x)),
        }
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    /// As a one-channel feature map for graph insertion.
    pub fn to_feature(&self) -> FeatureMap {
        let (h, w) = self.values.dim();
        FeatureMap::new(
            self.values
                .clone()
                .into_shape_with_order((1, h, w))
                .expect("reshape"),
        )
        .expect("non-empty")
    }

    /// Channel 0 of a one-channel rank-3 array.
    pub fn from_channel(values: ndarray::Array3<f64>) -> Result<Self> {
        let (c, h, w) = values.dim();
        if c != 1 {
            return Err(Error::config(format!(
                "expected a single-channel map, got {c} channels"
            )));
        }
        DepthMap::new(
            values
                .into_shape_with_order((h, w))
                .expect("reshape"),
        )
    }
}

/// Signed per-level correction added to the upsampled coarser prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMap {
    pub values: Array2<f64>,
}

impl ResidualMap {
    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }
}

/// Predicted depths at all L levels (finest first) plus the residuals for
/// levels `1..L-1`. The baseline decoder produces a single level and no
/// residuals.
#[derive(Debug, Clone)]
pub struct DepthPyramid {
    pub depths: Vec<DepthMap>,
    pub residuals: Vec<ResidualMap>,
}

impl DepthPyramid {
    pub fn levels(&self) -> usize {
        self.depths.len()
    }

    /// Depth at `level` in `1..=levels`, level 1 being the finest.
    pub fn level(&self, level: usize) -> &DepthMap {
        &self.depths[level - 1]
    }

    pub fn finest(&self) -> &DepthMap {
        &self.depths[0]
    }
}

/// Tape node ids for a decoded pyramid.
pub struct DecodedNodes {
    /// Level `i+1` depth node, finest first; each is a `(1, h, w)` map.
    pub depths: Vec<NodeId>,
    /// Residual nodes for levels `1..L-1`.
    pub residuals: Vec<NodeId>,
}

/// Registers decoder parameters under `rpd.*`. `feature_channels[i]` is the
/// channel count of the per-level feature input (the fused pyramid for the
/// full model, the raw encoder pyramid when fusion is disabled) and
/// `hidden_channels` is the width of the residual and refine heads.
pub fn register_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    encoder_top_channels: usize,
    feature_channels: &[usize],
    hidden_channels: usize,
) {
    let levels = feature_channels.len();
    let top_c = feature_channels[levels - 1];
    params::register_conv(store, rng, "rpd.top.reduce", top_c, encoder_top_channels, 1);
    params::register_conv(store, rng, "rpd.top.refine.conv1", 2 * top_c, 2 * top_c, 3);
    params::register_conv(store, rng, "rpd.top.refine.conv2", 2 * top_c, 2 * top_c, 3);
    params::register_conv(store, rng, "rpd.top.head", 1, 2 * top_c, 3);
    for (idx, &fc) in feature_channels.iter().enumerate().take(levels - 1) {
        let level = idx + 1;
        params::register_conv(
            store,
            rng,
            &format!("rpd.rrm{level}.res.conv1"),
            hidden_channels,
            fc,
            3,
        );
        params::register_conv(
            store,
            rng,
            &format!("rpd.rrm{level}.res.conv2"),
            1,
            hidden_channels,
            3,
        );
        params::register_conv(
            store,
            rng,
            &format!("rpd.rrm{level}.refine.conv1"),
            hidden_channels,
            1,
            3,
        );
        params::register_conv(
            store,
            rng,
            &format!("rpd.rrm{level}.refine.conv2"),
            hidden_channels,
            hidden_channels,
            3,
        );
        params::register_conv(
            store,
            rng,
            &format!("rpd.rrm{level}.refine.conv3"),
            1,
            hidden_channels,
            3,
        );
    }
}

/// Top-level prediction: reduce the encoder top to the fused width, concat,
/// refine, and emit a one-channel depth map at `(H/2^L, W/2^L)`.
pub fn predict_top_graph(
    g: &mut Graph,
    p: &mut GraphParams,
    encoder_top: NodeId,
    fused_top: NodeId,
) -> Result<NodeId> {
    let es = g.value(encoder_top).shape().to_vec();
    let fs = g.value(fused_top).shape().to_vec();
    if es[1..] != fs[1..] {
        return Err(Error::config(format!(
            "predict_top spatial mismatch: encoder {es:?} vs fused {fs:?}"
        )));
    }
    let rw = p.node(g, "rpd.top.reduce.w")?;
    let rb = p.node(g, "rpd.top.reduce.b")?;
    let reduced = g.conv2d(encoder_top, rw, rb, 1, 0)?;
    let cat = g.concat(&[reduced, fused_top])?;
    let refined = refine_block_graph(g, p, "rpd.top.refine", cat)?;
    let hw = p.node(g, "rpd.top.head.w")?;
    let hb = p.node(g, "rpd.top.head.b")?;
    g.conv2d(refined, hw, hb, 1, 1)
}

/// One residual refinement module. Upsamples the coarser depth to the level
/// resolution, predicts a residual from the fused features, and refines the
/// sum with a three-conv residual block that keeps an identity skip, so zero
/// parameters reproduce the upsampled input exactly. Returns
/// `(depth, residual)` nodes.
pub fn rrm_graph(
    g: &mut Graph,
    p: &mut GraphParams,
    level: usize,
    coarser: NodeId,
    fused: NodeId,
) -> Result<(NodeId, NodeId)> {
    let cs = g.value(coarser).shape().to_vec();
    let fs = g.value(fused).shape().to_vec();
    if cs[0] != 1 {
        return Err(Error::config("rrm expects a single-channel coarser depth"));
    }
    if fs[1] != cs[1] * 2 || fs[2] != cs[2] * 2 {
        return Err(Error::config(format!(
            "rrm level {level}: fused {}x{} must be twice the coarser {}x{}",
            fs[1], fs[2], cs[1], cs[2]
        )));
    }
    let up = g.bilinear_resize(coarser, fs[1], fs[2])?;

    let r1w = p.node(g, &format!("rpd.rrm{level}.res.conv1.w"))?;
    let r1b = p.node(g, &format!("rpd.rrm{level}.res.conv1.b"))?;
    let h = g.conv2d(fused, r1w, r1b, 1, 1)?;
    let h = g.relu(h);
    let r2w = p.node(g, &format!("rpd.rrm{level}.res.conv2.w"))?;
    let r2b = p.node(g, &format!("rpd.rrm{level}.res.conv2.b"))?;
    let residual = g.conv2d(h, r2w, r2b, 1, 1)?;

    let sum = g.add(up, residual)?;
    let depth = refine_sum_graph(g, p, level, sum)?;
    Ok((depth, residual))
}

/// The RRM's final residual block: three 3x3 convs with interleaved ReLU and
/// an identity skip from the input sum.
fn refine_sum_graph(g: &mut Graph, p: &mut GraphParams, level: usize, sum: NodeId) -> Result<NodeId> {
    let w1 = p.node(g, &format!("rpd.rrm{level}.refine.conv1.w"))?;
    let b1 = p.node(g, &format!("rpd.rrm{level}.refine.conv1.b"))?;
    let h = g.conv2d(sum, w1, b1, 1, 1)?;
    let h = g.relu(h);
    let w2 = p.node(g, &format!("rpd.rrm{level}.refine.conv2.w"))?;
    let b2 = p.node(g, &format!("rpd.rrm{level}.refine.conv2.b"))?;
    let h = g.conv2d(h, w2, b2, 1, 1)?;
    let h = g.relu(h);
    let w3 = p.node(g, &format!("rpd.rrm{level}.refine.conv3.w"))?;
    let b3 = p.node(g, &format!("rpd.rrm{level}.refine.conv3.b"))?;
    let h = g.conv2d(h, w3, b3, 1, 1)?;
    g.add(sum, h)
}

/// Full coarse-to-fine decode over the tape. `encoder_nodes` and
/// `feature_nodes` are level-1-first; `feature_nodes` is the fused pyramid
/// for the full model or the encoder pyramid itself when fusion is off.
pub fn decode_graph(
    g: &mut Graph,
    p: &mut GraphParams,
    encoder_nodes: &[NodeId],
    feature_nodes: &[NodeId],
) -> Result<DecodedNodes> {
    let levels = feature_nodes.len();
    if levels == 0 || encoder_nodes.len() != levels {
        return Err(Error::config("decode needs matching non-empty pyramids"));
    }
    let top = predict_top_graph(
        g,
        p,
        encoder_nodes[levels - 1],
        feature_nodes[levels - 1],
    )?;
    let mut depths = vec![top];
    let mut residuals = Vec::new();
    for level in (1..levels).rev() {
        let coarser = depths[0];
        let (d, r) = rrm_graph(g, p, level, coarser, feature_nodes[level - 1])?;
        depths.insert(0, d);
        residuals.insert(0, r);
    }
    Ok(DecodedNodes { depths, residuals })
}

/// Value-level top prediction.
pub fn predict_top(
    encoder_top: &FeatureMap,
    fused_top: &FeatureMap,
    store: &ParamStore,
) -> Result<DepthMap> {
    let mut g = Graph::new();
    let mut gp = GraphParams::new(store);
    let e = g.leaf3(encoder_top.values().clone());
    let f = g.leaf3(fused_top.values().clone());
    let out = predict_top_graph(&mut g, &mut gp, e, f)?;
    DepthMap::from_channel(g.value3(out))
}

/// Value-level residual refinement for one level.
pub fn rrm(
    coarser: &DepthMap,
    fused: &FeatureMap,
    level: usize,
    store: &ParamStore,
) -> Result<(DepthMap, ResidualMap)> {
    let mut g = Graph::new();
    let mut gp = GraphParams::new(store);
    let c = g.leaf3(coarser.to_feature().into_values());
    let f = g.leaf3(fused.values().clone());
    let (d, r) = rrm_graph(&mut g, &mut gp, level, c, f)?;
    Ok((
        DepthMap::from_channel(g.value3(d))?,
        ResidualMap {
            values: DepthMap::from_channel(g.value3(r))?.values,
        },
    ))
}

/// Value-level decode.
pub fn decode(
    encoder_maps: &[FeatureMap],
    feature_maps: &[FeatureMap],
    store: &ParamStore,
) -> Result<DepthPyramid> {
    let mut g = Graph::new();
    let mut gp = GraphParams::new(store);
    let enc: Vec<NodeId> = encoder_maps
        .iter()
        .map(|m| g.leaf3(m.values().clone()))
        .collect();
    let feat: Vec<NodeId> = feature_maps
        .iter()
        .map(|m| g.leaf3(m.values().clone()))
        .collect();
    let nodes = decode_graph(&mut g, &mut gp, &enc, &feat)?;
    let depths = nodes
        .depths
        .iter()
        .map(|&id| DepthMap::from_channel(g.value3(id)))
        .collect::<Result<Vec<_>>>()?;
    let residuals = nodes
        .residuals
        .iter()
        .map(|&id| {
            Ok(ResidualMap {
                values: DepthMap::from_channel(g.value3(id))?.values,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DepthPyramid { depths, residuals })
}

/// Zeroes every parameter of level `i`'s residual head and refine block.
pub fn zero_level_params(store: &mut ParamStore, level: usize) {
    store.zero_prefix(&format!("rpd.rrm{level}.res"));
    store.zero_prefix(&format!("rpd.rrm{level}.refine"));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::bilinear_resize;
    use crate::nn::gradcheck;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        FeatureMap::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Feature channels per level plus a parameter store for an L-level decoder.
    fn setup(seed: u64, enc_channels: &[usize], fc: usize) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let levels = enc_channels.len();
        register_params(
            &mut store,
            &mut rng,
            enc_channels[levels - 1],
            &vec![fc; levels],
            fc,
        );
        store
    }

    #[test]
    fn predict_top_output_size() {
        let store = setup(1, &[4, 4, 4, 4, 8], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc_top = random_map(&mut rng, 8, 2, 2);
        let fused_top = random_map(&mut rng, 4, 2, 2);
        let d = predict_top(&enc_top, &fused_top, &store).unwrap();
        assert_eq!((d.height(), d.width()), (2, 2));
    }

    #[test]
    fn predict_top_constant_head() {
        let mut store = setup(3, &[4, 8], 4);
        store.zero_prefix("rpd.top.head");
        store.get_mut("rpd.top.head.b").unwrap().fill(2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc_top = random_map(&mut rng, 8, 4, 4);
        let fused_top = random_map(&mut rng, 4, 4, 4);
        let d = predict_top(&enc_top, &fused_top, &store).unwrap();
        assert!(d.values().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn predict_top_matches_composition_oracle() {
        let store = setup(5, &[4, 8], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc_top = random_map(&mut rng, 8, 4, 4);
        let fused_top = random_map(&mut rng, 4, 4, 4);
        let got = predict_top(&enc_top, &fused_top, &store).unwrap();

        let spec = |name: &str, stride: usize, padding: usize| {
            crate::nn::ConvSpec::new(
                store
                    .get(&format!("{name}.w"))
                    .unwrap()
                    .clone()
                    .into_dimensionality()
                    .unwrap(),
                store
                    .get(&format!("{name}.b"))
                    .unwrap()
                    .clone()
                    .into_dimensionality()
                    .unwrap(),
                stride,
                padding,
            )
            .unwrap()
        };
        let reduced = crate::nn::conv2d(&enc_top, &spec("rpd.top.reduce", 1, 0)).unwrap();
        let cat = crate::nn::concat_channels(&[reduced, fused_top]).unwrap();
        let refined = crate::adff::refine_block(
            &cat,
            &crate::adff::RefineParams {
                conv1: spec("rpd.top.refine.conv1", 1, 1),
                conv2: spec("rpd.top.refine.conv2", 1, 1),
            },
        )
        .unwrap();
        let head = crate::nn::conv2d(&refined, &spec("rpd.top.head", 1, 1)).unwrap();
        for (a, b) in got.values().iter().zip(head.values().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn predict_top_spatial_mismatch_is_config_error() {
        let store = setup(7, &[4, 8], 4);
        let enc_top = FeatureMap::zeros(8, 2, 2);
        let fused_top = FeatureMap::zeros(4, 4, 4);
        assert!(predict_top(&enc_top, &fused_top, &store).is_err());
    }

    #[test]
    fn rrm_zero_params_reproduces_bilinear_upsample_exactly() {
        let mut store = setup(8, &[4, 8], 4);
        zero_level_params(&mut store, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coarser = DepthMap::from_fn(3, 4, |_, _| rng.gen_range(-2.0..5.0));
        let fused = random_map(&mut rng, 4, 6, 8);
        let (d, r) = rrm(&coarser, &fused, 1, &store).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
        let up = bilinear_resize(&coarser.to_feature(), 6, 8).unwrap();
        for (a, b) in d.values().iter().zip(up.values().iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn rrm_preserves_constant_coarser_under_zero_params() {
        let mut store = setup(10, &[4, 8], 4);
        zero_level_params(&mut store, 1);
        let coarser = DepthMap::from_fn(2, 2, |_, _| 3.75);
        let fused = FeatureMap::zeros(4, 4, 4);
        let (d, _) = rrm(&coarser, &fused, 1, &store).unwrap();
        // interpolation weights like 1/3 round, so constants survive only to
        // machine precision rather than bit-exactly
        assert!(d.values().iter().all(|&v| (v - 3.75).abs() < 1e-9));
    }

    #[test]
    fn rrm_matches_composition_oracle_and_decomposition() {
        let store = setup(11, &[4, 8], 4);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let coarser = DepthMap::from_fn(3, 3, |_, _| rng.gen_range(0.5..4.0));
        let fused = random_map(&mut rng, 4, 6, 6);
        let (d, r) = rrm(&coarser, &fused, 1, &store).unwrap();

        let spec = |name: &str| {
            crate::nn::ConvSpec::new(
                store
                    .get(&format!("{name}.w"))
                    .unwrap()
                    .clone()
                    .into_dimensionality()
                    .unwrap(),
                store
                    .get(&format!("{name}.b"))
                    .unwrap()
                    .clone()
                    .into_dimensionality()
                    .unwrap(),
                1,
                1,
            )
            .unwrap()
        };
        // residual head oracle
        let h = crate::nn::conv2d(&fused, &spec("rpd.rrm1.res.conv1")).unwrap();
        let h = FeatureMap::new(h.values().mapv(|v| v.max(0.0))).unwrap();
        let res = crate::nn::conv2d(&h, &spec("rpd.rrm1.res.conv2")).unwrap();
        for (a, b) in r.values.iter().zip(res.values().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        // depth oracle: refine(sum) with identity skip
        let up = bilinear_resize(&coarser.to_feature(), 6, 6).unwrap();
        let sum = FeatureMap::new(up.values() + res.values()).unwrap();
        let b1 = crate::nn::conv2d(&sum, &spec("rpd.rrm1.refine.conv1")).unwrap();
        let b1 = FeatureMap::new(b1.values().mapv(|v| v.max(0.0))).unwrap();
        let b2 = crate::nn::conv2d(&b1, &spec("rpd.rrm1.refine.conv2")).unwrap();
        let b2 = FeatureMap::new(b2.values().mapv(|v| v.max(0.0))).unwrap();
        let b3 = crate::nn::conv2d(&b2, &spec("rpd.rrm1.refine.conv3")).unwrap();
        let expect = sum.values() + b3.values();
        for (a, b) in d.values().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rrm_size_mismatch_is_config_error() {
        let store = setup(13, &[4, 8], 4);
        let coarser = DepthMap::zeros(3, 3);
        let fused = FeatureMap::zeros(4, 5, 6);
        assert!(rrm(&coarser, &fused, 1, &store).is_err());
    }

    fn random_pyramids(
        seed: u64,
        enc_channels: &[usize],
        fc: usize,
        h: usize,
        w: usize,
    ) -> (Vec<FeatureMap>, Vec<FeatureMap>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = enc_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| random_map(&mut rng, c, h >> (i + 1), w >> (i + 1)))
            .collect();
        let fused = (0..enc_channels.len())
            .map(|i| {
                let mut rng2 = ChaCha8Rng::seed_from_u64(seed + 1 + i as u64);
                FeatureMap::from_fn(fc, h >> (i + 1), w >> (i + 1), |_, _, _| {
                    rng2.gen_range(-1.0..1.0)
                })
            })
            .collect();
        (enc, fused)
    }

    #[test]
    fn decode_finest_is_half_input_resolution() {
        let channels = [4, 4, 4, 4, 8];
        let store = setup(14, &channels, 4);
        let (enc, fused) = random_pyramids(15, &channels, 4, 64, 64);
        let pyr = decode(&enc, &fused, &store).unwrap();
        assert_eq!(pyr.levels(), 5);
        assert_eq!((pyr.finest().height(), pyr.finest().width()), (32, 32));
        assert_eq!(pyr.residuals.len(), 4);
        let expect = [(32, 32), (16, 16), (8, 8), (4, 4), (2, 2)];
        for (level, &(h, w)) in (1..=5).zip(expect.iter()) {
            assert_eq!(
                (pyr.level(level).height(), pyr.level(level).width()),
                (h, w)
            );
        }
    }

    #[test]
    fn decode_with_all_residual_params_zero_is_repeated_upsampling() {
        let channels = [4, 8];
        let mut store = setup(16, &channels, 4);
        zero_level_params(&mut store, 1);
        let (enc, fused) = random_pyramids(17, &channels, 4, 16, 16);
        let pyr = decode(&enc, &fused, &store).unwrap();
        let up = bilinear_resize(&pyr.level(2).to_feature(), 8, 8).unwrap();
        for (a, b) in pyr.level(1).values().iter().zip(up.values().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn decode_matches_manual_rrm_chaining() {
        let channels = [4, 4, 8];
        let store = setup(18, &channels, 4);
        let (enc, fused) = random_pyramids(19, &channels, 4, 32, 32);
        let pyr = decode(&enc, &fused, &store).unwrap();

        let top = predict_top(&enc[2], &fused[2], &store).unwrap();
        for (a, b) in pyr.level(3).values().iter().zip(top.values().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let (d2, _) = rrm(&top, &fused[1], 2, &store).unwrap();
        for (a, b) in pyr.level(2).values().iter().zip(d2.values().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        let (d1, r1) = rrm(&d2, &fused[0], 1, &store).unwrap();
        for (a, b) in pyr.level(1).values().iter().zip(d1.values().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        for (a, b) in pyr.residuals[0].values.iter().zip(r1.values.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn stored_depth_and_residual_are_mutually_consistent() {
        // depths[i] == refine(upsample(depths[i+1]) + residuals[i]) recomputed post-hoc
        let channels = [4, 8];
        let store = setup(20, &channels, 4);
        let (enc, fused) = random_pyramids(21, &channels, 4, 16, 16);
        let pyr = decode(&enc, &fused, &store).unwrap();

        let up = bilinear_resize(&pyr.level(2).to_feature(), 8, 8).unwrap();
        let sum = up.values() + &pyr.residuals[0]
            .values
            .clone()
            .into_shape_with_order((1, 8, 8))
            .unwrap();
        // replay the refine block from stored parameters
        let mut g = Graph::new();
        let mut gp = GraphParams::new(&store);
        let s = g.leaf3(sum);
        let out = refine_sum_graph(&mut g, &mut gp, 1, s).unwrap();
        let replay = DepthMap::from_channel(g.value3(out)).unwrap();
        for (a, b) in pyr.level(1).values().iter().zip(replay.values().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_flows_to_residual_heads_at_every_level() {
        let channels = [4, 4, 8];
        let store = setup(22, &channels, 4);
        let (enc, fused) = random_pyramids(23, &channels, 4, 32, 32);

        let loss_of = |store: &ParamStore| -> (f64, Vec<ArrayD<f64>>) {
            let mut g = Graph::new();
            let mut gp = GraphParams::new(store);
            let enc_ids: Vec<NodeId> =
                enc.iter().map(|m| g.leaf3(m.values().clone())).collect();
            let fused_ids: Vec<NodeId> =
                fused.iter().map(|m| g.leaf3(m.values().clone())).collect();
            let nodes = decode_graph(&mut g, &mut gp, &enc_ids, &fused_ids).unwrap();
            let mut prng = ChaCha8Rng::seed_from_u64(77);
            let proj = ArrayD::from_shape_fn(g.value(nodes.depths[0]).raw_dim(), |_| {
                prng.gen_range(-1.0..1.0)
            });
            let loss = g.weighted_sum(nodes.depths[0], proj).unwrap();
            let heads: Vec<NodeId> = (1..=2)
                .map(|l| gp.node(&mut g, &format!("rpd.rrm{l}.res.conv1.w")).unwrap())
                .collect();
            let grads = g.backward(loss).unwrap();
            (
                g.scalar_value(loss),
                heads
                    .iter()
                    .map(|&h| grads.wrt(h).cloned().unwrap())
                    .collect(),
            )
        };

        let (_, analytic) = loss_of(&store);
        for (idx, level) in (1..=2).enumerate() {
            let name = format!("rpd.rrm{level}.res.conv1.w");
            let base = store.get(&name).unwrap().clone();
            let coords: Vec<usize> = (0..4).map(|i| (i * 13) % base.len()).collect();
            let numeric = gradcheck::central_difference_at(&base, &coords, 1e-5, |w| {
                let mut s = store.clone();
                *s.get_mut(&name).unwrap() = w.clone();
                loss_of(&s).0
            });
            for (&c, n) in coords.iter().zip(numeric) {
                let a = analytic[idx].as_slice().unwrap()[c];
                let err = gradcheck::relative_error(a, n);
                assert!(err < 1e-4, "level {level} coord {c}: {a} vs {n} err {err}");
            }
        }
    }
}
