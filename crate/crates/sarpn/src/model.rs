//! Whole-network assembly and the ablation wirings: a plain sequential
//! upsampling decoder (`baseline`), the residual pyramid decoder fed with raw
//! encoder features (`baseline_rpd`), and the full model with dense feature
//! fusion (`full`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adff;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::nn::FeatureMap;
use crate::params::{self, GraphParams, ParamStore};
use crate::rpd::{self, DecodedNodes, DepthMap, DepthPyramid, ResidualMap};

/// Which parts of the network are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// Sequential upsampling decoder with encoder skips, single output scale.
    Baseline,
    /// Residual pyramid decoder fed directly with encoder features.
    BaselineRpd,
    /// Residual pyramid decoder fed with the fused feature pyramid.
    Full,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "baseline" => Ok(Ablation::Baseline),
            "baseline_rpd" => Ok(Ablation::BaselineRpd),
            "full" => Ok(Ablation::Full),
            other => Err(Error::config(format!(
                "unknown ablation {other:?}; valid names: baseline, baseline_rpd, full"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::BaselineRpd => "baseline_rpd",
            Ablation::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub fused_channels: usize,
    pub ablation: Ablation,
}

impl ModelConfig {
    pub fn desk_default(height: usize, width: usize, ablation: Ablation) -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk_default(height, width),
            fused_channels: 32,
            ablation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.fused_channels == 0 {
            return Err(Error::config("fused_channels must be positive"));
        }
        Ok(())
    }

    /// Channel count of the per-level feature input seen by the decoder.
    fn decoder_feature_channels(&self) -> Vec<usize> {
        match self.ablation {
            Ablation::Full => vec![self.fused_channels; self.encoder.levels],
            _ => self.encoder.stage_channels.clone(),
        }
    }

    /// Number of depth scales the assembled model emits.
    pub fn output_levels(&self) -> usize {
        match self.ablation {
            Ablation::Baseline => 1,
            _ => self.encoder.levels,
        }
    }
}

/// Tape outputs of one forward pass.
pub struct ForwardNodes {
    pub depths: Vec<NodeId>,
    pub residuals: Vec<NodeId>,
}

/// The assembled network: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh model with seeded random initialization.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        encoder::register_params(&mut store, &mut rng, &cfg.encoder);
        let top_c = *cfg.encoder.stage_channels.last().expect("validated levels");
        match cfg.ablation {
            Ablation::Full => {
                adff::register_params(
                    &mut store,
                    &mut rng,
                    &cfg.encoder.stage_channels,
                    cfg.fused_channels,
                );
                rpd::register_params(
                    &mut store,
                    &mut rng,
                    top_c,
                    &cfg.decoder_feature_channels(),
                    cfg.fused_channels,
                );
            }
            Ablation::BaselineRpd => {
                rpd::register_params(
                    &mut store,
                    &mut rng,
                    top_c,
                    &cfg.decoder_feature_channels(),
                    cfg.fused_channels,
                );
            }
            Ablation::Baseline => {
                register_baseline_params(&mut store, &mut rng, &cfg);
            }
        }
        Ok(Model { cfg, params: store })
    }

    /// Builds the forward pass on `g` and returns output nodes plus the
    /// parameter binding for gradient lookup.
    pub fn forward<'s>(
        &'s self,
        g: &mut Graph,
        image: &FeatureMap,
    ) -> Result<(ForwardNodes, GraphParams<'s>)> {
        let mut gp = GraphParams::new(&self.params);
        let img = g.leaf3(image.values().clone());
        let enc = encoder::encode_graph(g, &mut gp, &self.cfg.encoder, img)?;
        let out = match self.cfg.ablation {
            Ablation::Full => {
                let fused = adff::build_fused_graph(g, &mut gp, &enc)?;
                let nodes = rpd::decode_graph(g, &mut gp, &enc, &fused)?;
                decoded_to_forward(nodes)
            }
            Ablation::BaselineRpd => {
                let nodes = rpd::decode_graph(g, &mut gp, &enc, &enc)?;
                decoded_to_forward(nodes)
            }
            Ablation::Baseline => {
                let d1 = baseline_decode_graph(g, &mut gp, &self.cfg, &enc)?;
                ForwardNodes {
                    depths: vec![d1],
                    residuals: Vec::new(),
                }
            }
        };
        Ok((out, gp))
    }

    /// Value-level prediction.
    pub fn predict(&self, image: &FeatureMap) -> Result<DepthPyramid> {
        let mut g = Graph::new();
        let (nodes, _) = self.forward(&mut g, image)?;
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
                    values: DepthMap::from_channel(g.value3(id))?.values().clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DepthPyramid { depths, residuals })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }
}

fn decoded_to_forward(nodes: DecodedNodes) -> ForwardNodes {
    ForwardNodes {
        depths: nodes.depths,
        residuals: nodes.residuals,
    }
}

/// Baseline decoder parameters under `base.*`. Each level reduces the
/// concatenated skip back to a fixed width so the decoder cost stays bounded.
fn register_baseline_params(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) {
    let channels = &cfg.encoder.stage_channels;
    let levels = cfg.encoder.levels;
    let dec_c = cfg.fused_channels;
    params::register_conv(store, rng, "base.init", dec_c, channels[levels - 1], 1);
    for level in (1..levels).rev() {
        params::register_conv(
            store,
            rng,
            &format!("base.l{level}.reduce"),
            dec_c,
            dec_c + channels[level - 1],
            1,
        );
        params::register_conv(
            store,
            rng,
            &format!("base.l{level}.refine.conv1"),
            dec_c,
            dec_c,
            3,
        );
        params::register_conv(
            store,
            rng,
            &format!("base.l{level}.refine.conv2"),
            dec_c,
            dec_c,
            3,
        );
    }
    params::register_conv(store, rng, "base.head", 1, dec_c, 3);
}

/// Multi-stage upsampling decoder: upsample x2, concat the encoder skip,
/// reduce, refine; a single one-channel head at the finest level.
fn baseline_decode_graph(
    g: &mut Graph,
    gp: &mut GraphParams,
    cfg: &ModelConfig,
    enc: &[NodeId],
) -> Result<NodeId> {
    let levels = enc.len();
    let iw = gp.node(g, "base.init.w")?;
    let ib = gp.node(g, "base.init.b")?;
    let mut x = g.conv2d(enc[levels - 1], iw, ib, 1, 0)?;
    for level in (1..levels).rev() {
        let skip = enc[level - 1];
        let shape = g.value(skip).shape().to_vec();
        x = g.bilinear_resize(x, shape[1], shape[2])?;
        x = g.concat(&[x, skip])?;
        let rw = gp.node(g, &format!("base.l{level}.reduce.w"))?;
        let rb = gp.node(g, &format!("base.l{level}.reduce.b"))?;
        x = g.conv2d(x, rw, rb, 1, 0)?;
        x = adff::refine_block_graph(g, gp, &format!("base.l{level}.refine"), x)?;
    }
    let hw = gp.node(g, "base.head.w")?;
    let hb = gp.node(g, "base.head.b")?;
    g.conv2d(x, hw, hb, 1, 1)
}
