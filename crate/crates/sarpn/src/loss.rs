//! Multi-scale training objective: per-level depth, gradient, and
//! surface-normal terms summed over every pyramid scale, plus ground-truth
//! pyramid construction. Pixels with non-positive ground truth are sensor
//! holes and are excluded from every mean; gradient and normal terms also
//! exclude any finite difference that touches a hole.

use ndarray::{Array2, Array3, ArrayD};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, NodeId};
use crate::rpd::{DepthMap, DepthPyramid};

/// Log-barrier offset and prediction clamp floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub epsilon_depth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.5,
            epsilon_depth: 1e-3,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 {
            return Err(Error::config("loss alpha must be positive"));
        }
        if self.epsilon_depth <= 0.0 {
            return Err(Error::config("epsilon_depth must be positive"));
        }
        Ok(())
    }
}

/// Ground-truth depth at every level, finest first; each coarser level is the
/// 2x2 block mean of the previous one.
#[derive(Debug, Clone)]
pub struct GroundTruthPyramid {
    pub maps: Vec<DepthMap>,
}

impl GroundTruthPyramid {
    pub fn levels(&self) -> usize {
        self.maps.len()
    }

    pub fn level(&self, level: usize) -> &DepthMap {
        &self.maps[level - 1]
    }
}

/// One level's loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub l_depth: f64,
    pub l_grad: f64,
    pub l_normal: f64,
}

impl LossTerms {
    pub fn sum(&self) -> f64 {
        self.l_depth + self.l_grad + self.l_normal
    }
}

/// Per-level terms and their grand total.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub per_level: Vec<LossTerms>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn mean_terms(&self) -> LossTerms {
        let n = self.per_level.len().max(1) as f64;
        LossTerms {
            l_depth: self.per_level.iter().map(|t| t.l_depth).sum::<f64>() / n,
            l_grad: self.per_level.iter().map(|t| t.l_grad).sum::<f64>() / n,
            l_normal: self.per_level.iter().map(|t| t.l_normal).sum::<f64>() / n,
        }
    }
}

/// 2x2 block mean with pairwise summation, so constant blocks pool exactly.
fn pool2x2(m: &Array2<f64>) -> Array2<f64> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h / 2, w / 2), |(y, x)| {
        ((m[[2 * y, 2 * x]] + m[[2 * y, 2 * x + 1]])
            + (m[[2 * y + 1, 2 * x]] + m[[2 * y + 1, 2 * x + 1]]))
            / 4.0
    })
}

/// Builds the L-level ground-truth pyramid from the finest-level target.
pub fn build_gt_pyramid(gt: &DepthMap, levels: usize) -> Result<GroundTruthPyramid> {
    if levels == 0 {
        return Err(Error::config("ground-truth pyramid needs at least one level"));
    }
    if gt.values().iter().any(|&v| v <= 0.0) {
        return Err(Error::data(
            "ground-truth depth must be strictly positive at every pixel",
        ));
    }
    let mut maps = vec![gt.clone()];
    for level in 1..levels {
        let prev = maps[level - 1].values();
        let (h, w) = prev.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!(
                "level {level} size {h}x{w} is odd; ground truth must be divisible by 2^{}",
                levels - 1
            )));
        }
        maps.push(DepthMap::new(pool2x2(prev))?);
    }
    Ok(GroundTruthPyramid { maps })
}

/// Validity mask (1 where ground truth is positive), shaped `(1, h, w)`.
fn validity_mask(g: &Array2<f64>) -> Array3<f64> {
    let (h, w) = g.dim();
    Array3::from_shape_fn((1, h, w), |(_, y, x)| if g[[y, x]] > 0.0 { 1.0 } else { 0.0 })
}

/// Masks for the forward-difference fields. An interior difference needs both
/// touched pixels valid; the replicated last column/row difference (which is
/// always zero) needs only its own pixel.
fn grad_masks(g: &Array2<f64>) -> (Array3<f64>, Array3<f64>) {
    let (h, w) = g.dim();
    let valid = |y: usize, x: usize| g[[y, x]] > 0.0;
    let mx = Array3::from_shape_fn((1, h, w), |(_, y, x)| {
        let ok = if x + 1 < w {
            valid(y, x) && valid(y, x + 1)
        } else {
            valid(y, x)
        };
        if ok {
            1.0
        } else {
            0.0
        }
    });
    let my = Array3::from_shape_fn((1, h, w), |(_, y, x)| {
        let ok = if y + 1 < h {
            valid(y, x) && valid(y + 1, x)
        } else {
            valid(y, x)
        };
        if ok {
            1.0
        } else {
            0.0
        }
    });
    (mx, my)
}

fn check_same_size(d: &DepthMap, g: &DepthMap) -> Result<()> {
    if d.height() != g.height() || d.width() != g.width() {
        return Err(Error::config(format!(
            "loss size mismatch: prediction {}x{} vs ground truth {}x{}",
            d.height(),
            d.width(),
            g.height(),
            g.width()
        )));
    }
    Ok(())
}

/// Tape nodes for one level's three loss terms. `pred` must be a `(1, h, w)`
/// node; the ground truth enters as a leaf so its gradients also exist.
pub fn level_terms_graph(
    g: &mut Graph,
    pred: NodeId,
    gt: &DepthMap,
    cfg: &LossConfig,
) -> Result<(NodeId, NodeId, NodeId)> {
    cfg.validate()?;
    let shape = g.value(pred).shape().to_vec();
    if shape != [1, gt.height(), gt.width()] {
        return Err(Error::config(format!(
            "loss expects a (1, {}, {}) prediction node, got {shape:?}",
            gt.height(),
            gt.width()
        )));
    }
    let gt_node = g.leaf3(gt.to_feature().into_values());
    let mask = validity_mask(gt.values()).into_dyn();
    let (mask_x, mask_y) = grad_masks(gt.values());
    let mask_x = mask_x.into_dyn();
    let mask_y = mask_y.into_dyn();
    // normals touch both difference stencils
    let mask_n: ArrayD<f64> = (&mask_x * &mask_y).into_dyn();

    let d = g.clamp_min(pred, cfg.epsilon_depth);

    // depth term: mean ln(|d - g| + alpha)
    let e = g.sub(d, gt_node)?;
    let abs_e = g.abs(e);
    let shifted = g.add_scalar(abs_e, cfg.alpha);
    let ln_e = g.ln(shifted);
    let l_depth = g.masked_mean(ln_e, mask)?;

    // gradient term: mean ln(|dx e| + alpha) + mean ln(|dy e| + alpha)
    let ex = g.diff_x(e)?;
    let ey = g.diff_y(e)?;
    let lx = {
        let a = g.abs(ex);
        let s = g.add_scalar(a, cfg.alpha);
        let l = g.ln(s);
        g.masked_mean(l, mask_x)?
    };
    let ly = {
        let a = g.abs(ey);
        let s = g.add_scalar(a, cfg.alpha);
        let l = g.ln(s);
        g.masked_mean(l, mask_y)?
    };
    let l_grad = g.add(lx, ly)?;

    // normal term: mean (1 - cos(n(d), n(g))) with n(x) = (-dx, -dy, 1)
    let dx_d = g.diff_x(d)?;
    let dy_d = g.diff_y(d)?;
    let dx_g = g.diff_x(gt_node)?;
    let dy_g = g.diff_y(gt_node)?;
    let dot = {
        let px = g.mul(dx_d, dx_g)?;
        let py = g.mul(dy_d, dy_g)?;
        let s = g.add(px, py)?;
        g.add_scalar(s, 1.0)
    };
    let norm = |g: &mut Graph, dx: NodeId, dy: NodeId| -> Result<NodeId> {
        let xx = g.mul(dx, dx)?;
        let yy = g.mul(dy, dy)?;
        let s = g.add(xx, yy)?;
        let s1 = g.add_scalar(s, 1.0);
        Ok(g.sqrt(s1))
    };
    let nd = norm(g, dx_d, dy_d)?;
    let ng = norm(g, dx_g, dy_g)?;
    let denom = g.mul(nd, ng)?;
    let cos = g.div(dot, denom)?;
    let neg = g.mul_scalar(cos, -1.0);
    let one_minus = g.add_scalar(neg, 1.0);
    let l_normal = g.masked_mean(one_minus, mask_n)?;

    Ok((l_depth, l_grad, l_normal))
}

/// Sum of all levels' terms on the tape. `depth_nodes` is finest-first and
/// must match the pyramid's level count.
pub fn total_loss_graph(
    g: &mut Graph,
    depth_nodes: &[NodeId],
    gt: &GroundTruthPyramid,
    cfg: &LossConfig,
) -> Result<(NodeId, Vec<(NodeId, NodeId, NodeId)>)> {
    if depth_nodes.len() != gt.levels() {
        return Err(Error::config(format!(
            "prediction has {} levels but ground truth has {}",
            depth_nodes.len(),
            gt.levels()
        )));
    }
    let mut terms = Vec::with_capacity(depth_nodes.len());
    let mut total: Option<NodeId> = None;
    for (idx, &pred) in depth_nodes.iter().enumerate() {
        let (ld, lg, ln) = level_terms_graph(g, pred, gt.level(idx + 1), cfg)?;
        let lvl = g.add(ld, lg)?;
        let lvl = g.add(lvl, ln)?;
        total = Some(match total {
            None => lvl,
            Some(t) => g.add(t, lvl)?,
        });
        terms.push((ld, lg, ln));
    }
    Ok((total.expect("at least one level"), terms))
}

fn single_term(
    d: &DepthMap,
    gt: &DepthMap,
    cfg: &LossConfig,
    pick: impl Fn(NodeId, NodeId, NodeId) -> NodeId,
) -> Result<f64> {
    check_same_size(d, gt)?;
    let mut g = Graph::new();
    let pred = g.leaf3(d.to_feature().into_values());
    let (ld, lg, ln) = level_terms_graph(&mut g, pred, gt, cfg)?;
    Ok(g.scalar_value(pick(ld, lg, ln)))
}

/// Mean log-barrier on the absolute depth error.
pub fn l_depth(d: &DepthMap, gt: &DepthMap, cfg: &LossConfig) -> Result<f64> {
    single_term(d, gt, cfg, |ld, _, _| ld)
}

/// Mean log-barrier on the forward differences of the error field.
pub fn l_grad(d: &DepthMap, gt: &DepthMap, cfg: &LossConfig) -> Result<f64> {
    single_term(d, gt, cfg, |_, lg, _| lg)
}

/// Mean (1 - cosine) between prediction and ground-truth surface normals.
pub fn l_normal(d: &DepthMap, gt: &DepthMap) -> Result<f64> {
    single_term(d, gt, &LossConfig::default(), |_, _, ln| ln)
}

/// Full multi-scale objective at value level.
pub fn total_loss(
    pred: &DepthPyramid,
    gt: &GroundTruthPyramid,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if pred.levels() != gt.levels() {
        return Err(Error::config(format!(
            "prediction has {} levels but ground truth has {}",
            pred.levels(),
            gt.levels()
        )));
    }
    for level in 1..=pred.levels() {
        check_same_size(pred.level(level), gt.level(level))?;
    }
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = pred
        .depths
        .iter()
        .map(|d| g.leaf3(d.to_feature().into_values()))
        .collect();
    let (total, terms) = total_loss_graph(&mut g, &nodes, gt, cfg)?;
    let per_level = terms
        .iter()
        .map(|&(ld, lg, ln)| LossTerms {
            l_depth: g.scalar_value(ld),
            l_grad: g.scalar_value(lg),
            l_normal: g.scalar_value(ln),
        })
        .collect();
    Ok(LossBreakdown {
        per_level,
        total: g.scalar_value(total),
    })
}
