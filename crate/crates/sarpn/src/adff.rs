//! Adaptive dense feature fusion: every pyramid level receives a fused map
//! built from all encoder scales — each source map is resized to the target
//! resolution, refined, concatenated, and reduced to a common width.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

use crate::encoder::EncoderPyramid;
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::{ConvSpec, FeatureMap};
use crate::params::{self, GraphParams, ParamStore};

/// The L fused maps, all with `fused_channels` channels, finest first.
#[derive(Debug, Clone)]
pub struct FusedPyramid {
    pub maps: Vec<FeatureMap>,
    pub fused_channels: usize,
}

impl FusedPyramid {
    pub fn level(&self, level: usize) -> &FeatureMap {
        &self.maps[level - 1]
    }

    pub fn levels(&self) -> usize {
        self.maps.len()
    }
}

/// Registers one refine block per (target, source) pair plus one 1x1
/// reduction per target, under `adff.*`.
pub fn register_params(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    stage_channels: &[usize],
    fused_channels: usize,
) {
    let levels = stage_channels.len();
    let total: usize = stage_channels.iter().sum();
    for target in 1..=levels {
        for (s, &c) in stage_channels.iter().enumerate() {
            let source = s + 1;
            params::register_conv(
                store,
                rng,
                &format!("adff.m{target}.r{source}.conv1"),
                c,
                c,
                3,
            );
            params::register_conv(
                store,
                rng,
                &format!("adff.m{target}.r{source}.conv2"),
                c,
                c,
                3,
            );
        }
        params::register_conv(
            store,
            rng,
            &format!("adff.m{target}.reduce"),
            fused_channels,
            total,
            1,
        );
    }
}

/// `ReLU(x + conv(ReLU(conv(x))))` with two shape-preserving 3x3 convs.
pub fn refine_block_graph(
    g: &mut Graph,
    p: &mut GraphParams,
    prefix: &str,
    input: NodeId,
) -> Result<NodeId> {
    let w1 = p.node(g, &format!("{prefix}.conv1.w"))?;
    let b1 = p.node(g, &format!("{prefix}.conv1.b"))?;
    let h = g.conv2d(input, w1, b1, 1, 1)?;
    let h = g.relu(h);
    let w2 = p.node(g, &format!("{prefix}.conv2.w"))?;
    let b2 = p.node(g, &format!("{prefix}.conv2.b"))?;
    let h = g.conv2d(h, w2, b2, 1, 1)?;
    let sum = g.add(input, h)?;
    Ok(g.relu(sum))
}

/// One multi-scale fusion unit: all encoder maps resized to the target
/// level's resolution, refined pairwise, concatenated, then reduced to
/// `fused_channels` by a 1x1 convolution.
pub fn mff_graph(
    g: &mut Graph,
    p: &mut GraphParams,
    encoder_nodes: &[NodeId],
    target_level: usize,
) -> Result<NodeId> {
    let levels = encoder_nodes.len();
    if target_level == 0 || target_level > levels {
        return Err(Error::config(format!(
            "mff target level {target_level} out of range 1..={levels}"
        )));
    }
    let target_shape = g.value(encoder_nodes[target_level - 1]).shape().to_vec();
    let (th, tw) = (target_shape[1], target_shape[2]);
    let mut refined = Vec::with_capacity(levels);
    for (s, &node) in encoder_nodes.iter().enumerate() {
        let source = s + 1;
        let resized = g.bilinear_resize(node, th, tw)?;
        refined.push(refine_block_graph(
            g,
            p,
            &format!("adff.m{target_level}.r{source}"),
            resized,
        )?);
    }
    let cat = g.concat(&refined)?;
    let rw = p.node(g, &format!("adff.m{target_level}.reduce.w"))?;
    let rb = p.node(g, &format!("adff.m{target_level}.reduce.b"))?;
    g.conv2d(cat, rw, rb, 1, 0)
}

/// All L fusion units; `out[i]` fuses toward level `i+1`.
pub fn build_fused_graph(
    g: &mut Graph,
    p: &mut GraphParams,
    encoder_nodes: &[NodeId],
) -> Result<Vec<NodeId>> {
    (1..=encoder_nodes.len())
        .map(|t| mff_graph(g, p, encoder_nodes, t))
        .collect()
}

/// Parameters of one standalone refine block.
#[derive(Debug, Clone)]
pub struct RefineParams {
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
}

impl RefineParams {
    pub fn zeros(channels: usize) -> Self {
        RefineParams {
            conv1: ConvSpec::zeros(channels, channels, 3, 1, 1).expect("valid spec"),
            conv2: ConvSpec::zeros(channels, channels, 3, 1, 1).expect("valid spec"),
        }
    }
}

/// Value-level refine block.
pub fn refine_block(input: &FeatureMap, p: &RefineParams) -> Result<FeatureMap> {
    let mut store = ParamStore::new();
    store.insert("rf.conv1.w", p.conv1.weights.clone().into_dyn());
    store.insert("rf.conv1.b", p.conv1.bias.clone().into_dyn());
    store.insert("rf.conv2.w", p.conv2.weights.clone().into_dyn());
    store.insert("rf.conv2.b", p.conv2.bias.clone().into_dyn());
    let mut g = Graph::new();
    let mut gp = GraphParams::new(&store);
    let x = g.leaf3(input.values().clone());
    let out = refine_block_graph(&mut g, &mut gp, "rf", x)?;
    FeatureMap::new(g.value3(out))
}

/// Value-level fusion of one level from `adff.*` parameters in `store`.
pub fn mff(
    encoder: &EncoderPyramid,
    target_level: usize,
    store: &ParamStore,
) -> Result<FeatureMap> {
    let mut g = Graph::new();
    let mut gp = GraphParams::new(store);
    let nodes: Vec<NodeId> = encoder
        .maps
        .iter()
        .map(|m| g.leaf3(m.values().clone()))
        .collect();
    let out = mff_graph(&mut g, &mut gp, &nodes, target_level)?;
    FeatureMap::new(g.value3(out))
}

/// Value-level fused pyramid.
pub fn build_fused_pyramid(
    encoder: &EncoderPyramid,
    fused_channels: usize,
    store: &ParamStore,
) -> Result<FusedPyramid> {
    let mut g = Graph::new();
    let mut gp = GraphParams::new(store);
    let nodes: Vec<NodeId> = encoder
        .maps
        .iter()
        .map(|m| g.leaf3(m.values().clone()))
        .collect();
    let ids = build_fused_graph(&mut g, &mut gp, &nodes)?;
    let maps = ids
        .into_iter()
        .map(|id| FeatureMap::new(g.value3(id)))
        .collect::<Result<Vec<_>>>()?;
    Ok(FusedPyramid {
        maps,
        fused_channels,
    })
}
