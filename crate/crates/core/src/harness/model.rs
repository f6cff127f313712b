//! The full network with per-module toggles.

use std::collections::BTreeMap;

use rand::Rng;

use crate::backbone::{apply_mask, average_grids, kshot_average, mask_to_feature_grid, to_descriptors, Encoder};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::harness::config::Config;
use crate::ifm::{bce_loss, Ifm};
use crate::mpe::{Mpe, MpeConfig};
use crate::mpr::{Mpr, MprConfig};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

pub const MODULE_PREFIXES: [&str; 4] = ["backbone", "mpr", "mpe", "ifm"];

#[derive(Debug, Clone)]
pub struct Lerenet {
    pub encoder: Encoder,
    pub mpr: Option<Mpr>,
    pub mpe: Option<Mpe>,
    pub ifm: Ifm,
    image_size: usize,
}

/// Intermediate tape values of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub query: Var,
    pub support: Var,
    pub main: Var,
    pub aux: Var,
    pub logits: Var,
}

impl Lerenet {
    /// Parameters are created in a fixed module order, so the same `rng`
    /// state always yields the same weights for the enabled modules.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, cfg: &Config) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let fs = cfg.feature_size();
        let encoder = Encoder::new(store, rng, c)?;
        let mpr = if cfg.mpr {
            let mc = MprConfig {
                channels: c,
                proto_dim: cfg.proto_dim,
                gcn_depth: cfg.gcn_depth,
            };
            Some(Mpr::new(store, rng, mc)?)
        } else {
            None
        };
        let mpe = if cfg.mpe {
            let mc = MpeConfig {
                channels: c,
                reduction: cfg.reduction,
                positions: fs * fs,
                edge: cfg.mpe_star,
                pool_divide_by_l: cfg.pool_divide_by_l,
            };
            Some(Mpe::new(store, rng, mc)?)
        } else {
            None
        };
        let ifm = Ifm::new(store, rng, c)?;
        Ok(Lerenet {
            encoder,
            mpr,
            mpe,
            ifm,
            image_size: cfg.image_size,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    /// Logits for the episode's query image. Support masks are projected to
    /// the feature grid; every shot must keep at least one foreground cell.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, episode: &Episode) -> Result<ForwardVars> {
        if episode.support.is_empty() {
            return Err(Error::Config("episode has no support samples".into()));
        }
        let n = self.image_size;
        if episode.query.image.shape() != [3, n, n] {
            return Err(Error::dim(
                "forward",
                format!("model expects 3x{n}x{n} images, got {:?}", episode.query.image.shape()),
            ));
        }
        let mut masked = Vec::with_capacity(episode.support.len());
        let mut grids = Vec::with_capacity(episode.support.len());
        let (mut h, mut w) = (0, 0);
        for (k, shot) in episode.support.iter().enumerate() {
            let img = tape.constant(shot.image.cast::<T>());
            let f = self.encoder.encode(tape, store, img)?;
            let s = tape.shape(f).to_vec();
            (h, w) = (s[1], s[2]);
            let grid = mask_to_feature_grid(&shot.mask.cast::<T>(), h, w)?;
            if grid.sum() == T::zero() {
                return Err(Error::DegenerateEpisode(format!(
                    "support shot {k} has no foreground cell on the {h}x{w} grid"
                )));
            }
            masked.push(apply_mask(tape, f, &grid)?);
            grids.push(grid);
        }
        let support_map = kshot_average(tape, &masked)?;
        let soft_grid = average_grids(&grids)?;
        let support = to_descriptors(tape, support_map)?;

        let qimg = tape.constant(episode.query.image.cast::<T>());
        let qf = self.encoder.encode(tape, store, qimg)?;
        let query = to_descriptors(tape, qf)?;

        let main = match &self.mpr {
            Some(m) => m.forward(tape, store, support, query, h, w)?,
            None => query,
        };
        let aux = match &self.mpe {
            Some(m) => m.forward(tape, store, support, query, &soft_grid, h, w)?,
            None => query,
        };
        let logits = self.ifm.forward(tape, store, main, aux, h, w, n, n)?;
        Ok(ForwardVars {
            query,
            support,
            main,
            aux,
            logits,
        })
    }

    /// Forward plus BCE against the query mask.
    pub fn loss<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, episode: &Episode) -> Result<Var> {
        let vars = self.forward(tape, store, episode)?;
        bce_loss(tape, vars.logits, &episode.query.mask.cast::<T>())
    }

    /// Query logits without recording gradients.
    pub fn predict_logits<T: Scalar>(&self, store: &ParamStore<T>, episode: &Episode) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let vars = self.forward(&mut tape, store, episode)?;
        Ok(tape.value(vars.logits).clone())
    }
}

/// Scalar parameter counts per module prefix.
pub fn param_breakdown<T: Scalar>(store: &ParamStore<T>) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = MODULE_PREFIXES.iter().map(|p| (p.to_string(), 0)).collect();
    for (_, p) in store.iter() {
        let module = p.name.split('.').next().unwrap_or("").to_string();
        *out.entry(module).or_default() += p.value.len();
    }
    out
}
