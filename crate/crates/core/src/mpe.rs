//! Multi-prototype excitation in feature space: masked-average guidance,
//! CBAM channel-then-spatial gating, and the descriptor-pair cosine map.

use rand::Rng;

use crate::backbone::from_descriptors;
use crate::error::{Error, Result};
use crate::layers::{Conv1dLayer, Conv2dLayer};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

pub const SPATIAL_KERNEL: usize = 7;

#[derive(Debug, Clone)]
pub struct MpeConfig {
    pub channels: usize,
    /// Channel-attention bottleneck ratio.
    pub reduction: usize,
    /// Descriptor count `l = h * w`; sizes the edge-similarity projection.
    pub positions: usize,
    /// Fuse the global edge similarity map into `P_aux`.
    pub edge: bool,
    /// Divide masked pooling by `l` instead of the foreground count.
    pub pool_divide_by_l: bool,
}

#[derive(Debug, Clone)]
pub struct Mpe {
    cfg: MpeConfig,
    pub squeeze: Conv1dLayer,
    pub excite: Conv1dLayer,
    pub spatial: Conv2dLayer,
    pub fuse: Option<Conv1dLayer>,
}

impl Mpe {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: MpeConfig) -> Result<Self> {
        let c = cfg.channels;
        if cfg.reduction == 0 || !c.is_multiple_of(cfg.reduction) {
            return Err(Error::Config(format!(
                "channels {c} not divisible by reduction ratio {}",
                cfg.reduction
            )));
        }
        let hidden = c / cfg.reduction;
        let squeeze = Conv1dLayer::new(store, rng, "mpe.cbam.squeeze", c, hidden, 1)?;
        let excite = Conv1dLayer::new(store, rng, "mpe.cbam.excite", hidden, c, 1)?;
        let spatial = Conv2dLayer::new(store, rng, "mpe.cbam.spatial", c, 1, SPATIAL_KERNEL, 1)?;
        let fuse = if cfg.edge {
            Some(Conv1dLayer::new(store, rng, "mpe.fuse_aux", c + cfg.positions, c, 1)?)
        } else {
            None
        };
        Ok(Mpe {
            cfg,
            squeeze,
            excite,
            spatial,
            fuse,
        })
    }

    pub fn config(&self) -> &MpeConfig {
        &self.cfg
    }

    /// `P_aux` (`c x l`). `support` is the masked support descriptors and
    /// `grid` its foreground weight at feature resolution.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        support: Var,
        query: Var,
        grid: &Tensor<T>,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        if self.cfg.edge && h * w != self.cfg.positions {
            return Err(Error::dim(
                "mpe",
                format!("configured for {} positions, got {h}x{w}", self.cfg.positions),
            ));
        }
        let guidance = masked_avg_pool(tape, support, grid, self.cfg.pool_divide_by_l)?;
        let guided = guide(tape, guidance, query)?;
        let (w1, b1) = self.squeeze.bind(tape, store);
        let (w2, b2) = self.excite.bind(tape, store);
        let channel = cbam_channel(tape, guided, (w1, b1), (w2, b2))?;
        let (sw, sb) = self.spatial.bind(tape, store);
        let excited = cbam_spatial(tape, channel, h, w, sw, sb)?;
        match &self.fuse {
            Some(layer) => {
                let d = global_edge_similarity(tape, query, support)?;
                let (fw, fb) = layer.bind(tape, store);
                fuse_aux(tape, excited, d, fw, fb)
            }
            None => Ok(excited),
        }
    }
}

/// Per-channel mean of `x: c x l` over foreground positions of `grid`.
///
/// `grid` holds foreground weights in `[0, 1]`; the sum runs over positions
/// with positive weight and divides by the total weight (the foreground
/// count for a binary grid), or by `l` when `divide_by_l` is set.
pub fn masked_avg_pool<T: Scalar>(tape: &mut Tape<T>, x: Var, grid: &Tensor<T>, divide_by_l: bool) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || grid.len() != s[1] {
        return Err(Error::shapes("masked_avg_pool", &s, grid.shape()));
    }
    if grid.data().iter().any(|&g| g < T::zero() || g > T::one()) {
        return Err(Error::Validation("pooling grid values must lie in [0, 1]".into()));
    }
    let weight = grid.sum();
    if weight <= T::zero() {
        return Err(Error::DegenerateEpisode("support mask has no foreground cell".into()));
    }
    let indicator = grid.map(|g| if g > T::zero() { T::one() } else { T::zero() });
    let ind = tape.constant(indicator.reshape(&[1, s[1]])?);
    let masked = tape.mul(x, ind)?;
    let summed = tape.sum_axis(masked, 1)?;
    let denom = if divide_by_l { T::of(s[1] as f64) } else { weight };
    tape.scale(summed, T::one() / denom)
}

/// Channel-broadcast product `P[i, j] = g[i] * X_q[i, j]`.
pub fn guide<T: Scalar>(tape: &mut Tape<T>, guidance: Var, query: Var) -> Result<Var> {
    let (gs, qs) = (tape.shape(guidance).to_vec(), tape.shape(query).to_vec());
    if gs.len() != 2 || gs[1] != 1 || qs.len() != 2 || gs[0] != qs[0] {
        return Err(Error::shapes("guide", &gs, &qs));
    }
    tape.mul(guidance, query)
}

/// Channel attention: `P * sigmoid(W2 relu(W1 avg(P) + b1) + b2)`.
pub fn cbam_channel<T: Scalar>(
    tape: &mut Tape<T>,
    p: Var,
    squeeze: (Var, Var),
    excite: (Var, Var),
) -> Result<Var> {
    let pooled = tape.avg_pool_global(p)?;
    let hidden = tape.conv1d(pooled, squeeze.0, squeeze.1)?;
    let hidden = tape.relu(hidden)?;
    let logits = tape.conv1d(hidden, excite.0, excite.1)?;
    let weights = tape.sigmoid(logits)?;
    tape.mul(p, weights)
}

/// Spatial attention: `P * sigmoid(conv7x7(P))`, the gate shared across channels.
pub fn cbam_spatial<T: Scalar>(tape: &mut Tape<T>, p: Var, h: usize, w: usize, conv_w: Var, conv_b: Var) -> Result<Var> {
    let grid = from_descriptors(tape, p, h, w)?;
    let logits = tape.conv2d(grid, conv_w, conv_b, 1)?;
    let gate = tape.sigmoid(logits)?;
    let gated = tape.mul(grid, gate)?;
    let c = tape.shape(p)[0];
    tape.reshape(gated, &[c, h * w])
}

/// `D[i, j] = cos(x_q^i, x_s^j)` over channels, `l_q x l_s`; zero-norm
/// descriptors give similarity 0.
pub fn global_edge_similarity<T: Scalar>(tape: &mut Tape<T>, query: Var, support: Var) -> Result<Var> {
    let (qs, ss) = (tape.shape(query).to_vec(), tape.shape(support).to_vec());
    if qs.len() != 2 || ss.len() != 2 || qs[0] != ss[0] {
        return Err(Error::shapes("global_edge_similarity", &qs, &ss));
    }
    let qt = tape.transpose(query)?;
    let qn = tape.normalize_rows(qt)?;
    let st = tape.transpose(support)?;
    let sn = tape.normalize_rows(st)?;
    let snt = tape.transpose(sn)?;
    tape.matmul(qn, snt)
}

/// Stack `[P_e ; D^T]` (`(c + l) x l`, column `i` = query position `i`) and
/// project back to `c x l` with a kernel-1 conv.
pub fn fuse_aux<T: Scalar>(tape: &mut Tape<T>, excited: Var, similarity: Var, w: Var, b: Var) -> Result<Var> {
    let (es, ds) = (tape.shape(excited).to_vec(), tape.shape(similarity).to_vec());
    if es.len() != 2 || ds.len() != 2 || ds[0] != es[1] || ds[1] != es[1] {
        return Err(Error::shapes("fuse_aux", &es, &ds));
    }
    let dt = tape.transpose(similarity)?;
    let stacked = tape.concat(&[excited, dt])?;
    tape.conv1d(stacked, w, b)
}
