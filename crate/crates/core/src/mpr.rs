//! Multi-prototype reasoning in graph space.
//!
//! Support and query descriptors are projected to node-level and
//! channel-level prototypes (`r x l` each), crossed into two `r x r`
//! relation matrices, fused, propagated through a GCN whose adjacency is the
//! relu-cosine affinity of the fused relation rows, and finally reflected
//! back onto the query descriptors as a residual.

use rand::Rng;

use crate::backbone::from_descriptors;
use crate::error::{Error, Result};
use crate::layers::{Conv1dLayer, Conv2dLayer};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Variance floor of the per-channel standardization in the reflection.
pub const NORM_EPS: f64 = 1e-5;
const TAU_KERNEL: usize = 3;

/// Node-level and channel-level prototypes, both `r x l`.
#[derive(Debug, Clone, Copy)]
pub struct PrototypePair {
    pub node: Var,
    pub channel: Var,
}

#[derive(Debug, Clone)]
pub struct MprConfig {
    pub channels: usize,
    pub proto_dim: usize,
    pub gcn_depth: usize,
}

#[derive(Debug, Clone)]
pub struct Mpr {
    cfg: MprConfig,
    pub proj_node: Conv1dLayer,
    pub proj_channel: Conv1dLayer,
    pub fuse: Conv1dLayer,
    pub gcn: Vec<ParamId>,
    pub tau: Conv2dLayer,
}

impl Mpr {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: MprConfig) -> Result<Self> {
        let (c, r) = (cfg.channels, cfg.proto_dim);
        if r == 0 {
            return Err(Error::Config("prototype dimension r must be positive".into()));
        }
        if cfg.gcn_depth == 0 {
            return Err(Error::Config("GCN depth must be at least 1".into()));
        }
        if r > c {
            log::warn!("prototype dimension r={r} exceeds feature channels c={c}");
        }
        let proj_node = Conv1dLayer::new(store, rng, "mpr.proj_node", c, r, 1)?;
        let proj_channel = Conv1dLayer::new(store, rng, "mpr.proj_channel", c, r, 1)?;
        let fuse = Conv1dLayer::new(store, rng, "mpr.fuse", 2 * r, r, 1)?;
        let gcn = (0..cfg.gcn_depth)
            .map(|i| store.add_he(format!("mpr.gcn{i}.theta"), &[r, r], r, rng))
            .collect::<Result<Vec<_>>>()?;
        let tau = Conv2dLayer::new(store, rng, "mpr.tau", r, c, TAU_KERNEL, 1)?;
        Ok(Mpr {
            cfg,
            proj_node,
            proj_channel,
            fuse,
            gcn,
            tau,
        })
    }

    pub fn config(&self) -> &MprConfig {
        &self.cfg
    }

    pub fn project_prototypes<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<PrototypePair> {
        let (wv, bv) = self.proj_node.bind(tape, store);
        let (wd, bd) = self.proj_channel.bind(tape, store);
        project_prototypes(tape, x, (wv, bv), (wd, bd))
    }

    /// `P_main` (`c x l`) from masked support and query descriptors.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        support: Var,
        query: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let ps = self.project_prototypes(tape, store, support)?;
        let pq = self.project_prototypes(tape, store, query)?;
        let (fw, fb) = self.fuse.bind(tape, store);
        let relation = relation_matrices(tape, &ps, &pq, fw, fb)?;
        let adjacency = build_adjacency(tape, relation)?;
        let laplacian = normalized_laplacian(tape, adjacency)?;
        let thetas: Vec<Var> = self.gcn.iter().map(|&id| tape.param(store, id)).collect();
        let g = gcn_forward(tape, relation, laplacian, &thetas)?;
        let (tw, tb) = self.tau.bind(tape, store);
        reflect(tape, g, pq.node, query, tw, tb, h, w)
    }
}

/// Two independent kernel-1 conv projections `c -> r`.
pub fn project_prototypes<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    node: (Var, Var),
    channel: (Var, Var),
) -> Result<PrototypePair> {
    Ok(PrototypePair {
        node: tape.conv1d(x, node.0, node.1)?,
        channel: tape.conv1d(x, channel.0, channel.1)?,
    })
}

/// Node relation `P_q^v P_s^dT` and channel relation `P_q^d P_s^vT`, stacked
/// as `[G_v ; G_d^T]` (`2r x r`) and reduced to `r x r` by a kernel-1 conv
/// over the stacked axis.
pub fn relation_matrices<T: Scalar>(
    tape: &mut Tape<T>,
    support: &PrototypePair,
    query: &PrototypePair,
    fuse_w: Var,
    fuse_b: Var,
) -> Result<Var> {
    let (gv, gd) = raw_relations(tape, support, query)?;
    let gdt = tape.transpose(gd)?;
    let stacked = tape.concat(&[gv, gdt])?;
    tape.conv1d(stacked, fuse_w, fuse_b)
}

/// The two unfused `r x r` relation matrices `(G_v, G_d)`.
pub fn raw_relations<T: Scalar>(
    tape: &mut Tape<T>,
    support: &PrototypePair,
    query: &PrototypePair,
) -> Result<(Var, Var)> {
    for (a, b) in [(support.node, query.node), (support.channel, query.channel), (support.node, support.channel)] {
        if tape.shape(a) != tape.shape(b) {
            return Err(Error::shapes("relation_matrices", tape.shape(a), tape.shape(b)));
        }
    }
    let sdt = tape.transpose(support.channel)?;
    let svt = tape.transpose(support.node)?;
    let gv = tape.matmul(query.node, sdt)?;
    let gd = tape.matmul(query.channel, svt)?;
    Ok((gv, gd))
}

/// `A[i,j] = relu(cos(row_i, row_j))` off the diagonal, zero on it.
/// Zero rows have cosine 0 against everything.
pub fn build_adjacency<T: Scalar>(tape: &mut Tape<T>, g: Var) -> Result<Var> {
    let s = tape.shape(g).to_vec();
    if s.len() != 2 {
        return Err(Error::dim("build_adjacency", format!("expected a matrix, got {s:?}")));
    }
    let n = tape.normalize_rows(g)?;
    let nt = tape.transpose(n)?;
    let cos = tape.matmul(n, nt)?;
    let pos = tape.relu(cos)?;
    let r = s[0];
    let mut mask = Tensor::ones(&[r, r]);
    for i in 0..r {
        mask.data_mut()[i * r + i] = T::zero();
    }
    let mask = tape.constant(mask);
    tape.mul(pos, mask)
}

/// `D^-1/2 (I + A) D^-1/2` with `D_ii = sum_j (I + A)_ij`.
pub fn normalized_laplacian<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let s = tape.shape(a).to_vec();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim("normalized_laplacian", format!("expected a square matrix, got {s:?}")));
    }
    let eye = tape.constant(Tensor::eye(s[0]));
    let a_tilde = tape.add(eye, a)?;
    let deg = tape.sum_axis(a_tilde, 1)?;
    let d_col = tape.powf(deg, T::of(-0.5))?;
    let d_row = tape.transpose(d_col)?;
    let left = tape.mul(a_tilde, d_col)?;
    tape.mul(left, d_row)
}

/// Dense evaluation of [`normalized_laplacian`] outside any training tape.
pub fn laplacian_of<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let av = tape.constant(a.clone());
    let l = normalized_laplacian(&mut tape, av)?;
    Ok(tape.value(l).clone())
}

/// `H <- relu(L H Theta)` once per weight matrix.
pub fn gcn_forward<T: Scalar>(tape: &mut Tape<T>, h0: Var, laplacian: Var, thetas: &[Var]) -> Result<Var> {
    if thetas.is_empty() {
        return Err(Error::Config("GCN depth must be at least 1".into()));
    }
    let mut h = h0;
    for &theta in thetas {
        let lh = tape.matmul(laplacian, h)?;
        let lht = tape.matmul(lh, theta)?;
        h = tape.relu(lht)?;
    }
    Ok(h)
}

/// `P_main = X_q + flatten(standardize(conv2d(reshape(G P_q^v))))`.
#[allow(clippy::too_many_arguments)]
pub fn reflect<T: Scalar>(
    tape: &mut Tape<T>,
    g: Var,
    query_node: Var,
    query: Var,
    tau_w: Var,
    tau_b: Var,
    h: usize,
    w: usize,
) -> Result<Var> {
    let l = h * w;
    let qs = tape.shape(query).to_vec();
    if qs.len() != 2 || qs[1] != l || tape.shape(query_node)[1] != l {
        return Err(Error::dim(
            "reflect",
            format!("query {qs:?} / prototypes {:?} vs grid {h}x{w}", tape.shape(query_node)),
        ));
    }
    let y = tape.matmul(g, query_node)?;
    let grid = from_descriptors(tape, y, h, w)?;
    let conv = tape.conv2d(grid, tau_w, tau_b, 1)?;
    let c = tape.shape(conv)[0];
    let flat = tape.reshape(conv, &[c, l])?;
    let normed = tape.standardize_rows(flat, T::of(NORM_EPS))?;
    tape.add(query, normed)
}
