//! Finite-difference checks of every module and of the full pipeline, in f64.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{mask_to_feature_grid, Encoder};
use crate::episodes::{derive_seed, Dataset, Episode, Role};
use crate::error::{Error, Result};
use crate::harness::config::Config;
use crate::harness::model::Lerenet;
use crate::harness::STREAM_GRADCHECK;
use crate::ifm::{bce_loss, Ifm};
use crate::mpe::{Mpe, MpeConfig};
use crate::mpr::{Mpr, MprConfig};
use crate::tensor::{grad_check, GradCheckReport, ParamStore, Tape, Tensor, Var};

pub const THRESHOLD: f64 = 1e-4;
pub const PROBE_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ModuleCheck {
    pub name: &'static str,
    pub params: usize,
    pub report: GradCheckReport,
}

impl ModuleCheck {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < THRESHOLD
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// `sum(out * probe)`: a scalar whose gradient exercises every output entry.
fn probe_loss(tape: &mut Tape<f64>, out: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = tape.constant(probe.clone());
    let prod = tape.mul(out, p)?;
    tape.sum_all(prod)
}

/// Run every check on a 1-shot episode of the config's size, all modules on.
pub fn gradcheck_suite(config: &Config) -> Result<Vec<ModuleCheck>> {
    let cfg = Config {
        shots: 1,
        mpr: true,
        mpe: true,
        mpe_star: true,
        ..config.clone()
    };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_GRADCHECK, 0));
    let dataset = Dataset::new(cfg.image_size, cfg.fold_seed, cfg.test_fold)?;
    let episode = dataset.sample_episode(Role::Train, 1, rng.random())?;
    let (c, fs) = (cfg.channels, cfg.feature_size());
    let l = fs * fs;
    let mut out = Vec::new();
    let mut record = |name: &'static str, store: &ParamStore<f64>, report: GradCheckReport| {
        log::info!("gradcheck {name}: {:.3e}", report.max_rel_error);
        out.push(ModuleCheck {
            name,
            params: store.scalar_count(),
            report,
        });
    };

    {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, &mut rng, c)?;
        let image = episode.query.image.cast::<f64>();
        let probe = rand_tensor(&mut rng, &[c, fs, fs]);
        let r = grad_check(&store, PROBE_EPS, |s, t| {
            let img = t.constant(image.clone());
            let f = enc.encode(t, s, img)?;
            probe_loss(t, f, &probe)
        })?;
        record("backbone", &store, r);
    }
    let xs = rand_tensor(&mut rng, &[c, l]);
    let xq = rand_tensor(&mut rng, &[c, l]);
    {
        let mut store = ParamStore::new();
        let mc = MprConfig {
            channels: c,
            proto_dim: cfg.proto_dim,
            gcn_depth: cfg.gcn_depth,
        };
        let mpr = Mpr::new(&mut store, &mut rng, mc)?;
        let probe = rand_tensor(&mut rng, &[c, l]);
        let r = grad_check(&store, PROBE_EPS, |s, t| {
            let (a, b) = (t.constant(xs.clone()), t.constant(xq.clone()));
            let o = mpr.forward(t, s, a, b, fs, fs)?;
            probe_loss(t, o, &probe)
        })?;
        record("mpr", &store, r);
    }
    {
        let mut store = ParamStore::new();
        let mc = MpeConfig {
            channels: c,
            reduction: cfg.reduction,
            positions: l,
            edge: true,
            pool_divide_by_l: cfg.pool_divide_by_l,
        };
        let mpe = Mpe::new(&mut store, &mut rng, mc)?;
        let grid = mask_to_feature_grid(&episode.support[0].mask.cast::<f64>(), fs, fs)?;
        let probe = rand_tensor(&mut rng, &[c, l]);
        let r = grad_check(&store, PROBE_EPS, |s, t| {
            let (a, b) = (t.constant(xs.clone()), t.constant(xq.clone()));
            let o = mpe.forward(t, s, a, b, &grid, fs, fs)?;
            probe_loss(t, o, &probe)
        })?;
        record("mpe", &store, r);
    }
    {
        let mut store = ParamStore::new();
        let ifm = Ifm::new(&mut store, &mut rng, c)?;
        let gt = episode.query.mask.cast::<f64>();
        let n = cfg.image_size;
        let r = grad_check(&store, PROBE_EPS, |s, t| {
            let (a, b) = (t.constant(xs.clone()), t.constant(xq.clone()));
            let logits = ifm.forward(t, s, a, b, fs, fs, n, n)?;
            bce_loss(t, logits, &gt)
        })?;
        record("ifm", &store, r);
    }
    {
        let mut store = ParamStore::new();
        let model = Lerenet::new(&mut store, &mut rng, &cfg)?;
        let r = full_pipeline_check(&model, &store, &episode)?;
        record("pipeline", &store, r);
    }
    Ok(out)
}

pub fn full_pipeline_check(model: &Lerenet, store: &ParamStore<f64>, episode: &Episode) -> Result<GradCheckReport> {
    grad_check(store, PROBE_EPS, |s, t| model.loss(t, s, episode))
}

/// Fails with the worst offender when any module breaches the threshold.
pub fn enforce(checks: &[ModuleCheck]) -> Result<()> {
    match checks.iter().find(|c| !c.passed()) {
        None => Ok(()),
        Some(c) => Err(Error::GradCheck {
            error: c.report.max_rel_error,
            location: format!("{}: {}[{}]", c.name, c.report.worst_param, c.report.worst_index),
        }),
    }
}

pub fn render(checks: &[ModuleCheck]) -> String {
    let mut s = String::new();
    for c in checks {
        let _ = writeln!(
            s,
            "gradcheck.{} = {:.3e}  # {} params, worst {}[{}], {}",
            c.name,
            c.report.max_rel_error,
            c.params,
            c.report.worst_param,
            c.report.worst_index,
            if c.passed() { "pass" } else { "FAIL" }
        );
    }
    s
}
