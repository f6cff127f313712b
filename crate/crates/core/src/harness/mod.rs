//! Configuration, training, evaluation, ablation and reporting.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod gradcheck;
pub mod model;
pub mod train;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

pub use ablate::{ablate, AblationRow, AblationTable};
pub use checkpoint::Checkpoint;
pub use config::Config;
pub use evaluate::{evaluate, EvalRequest, GroundTruthPredictor, ModelPredictor, Predictor};
pub use model::{param_breakdown, Lerenet};
pub use train::{train, Trainer};

/// Seed streams; each consumer derives its seeds from `(seed, stream, index)`.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;
pub const STREAM_EVAL: u64 = 3;
pub const STREAM_GRADCHECK: u64 = 4;

pub const THREADS_ENV: &str = "LERENET_THREADS";

/// Worker count from `LERENET_THREADS`, default 1.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelReport {
    pub total: usize,
    pub modules: BTreeMap<String, usize>,
}

impl ModelReport {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        let mut modules: BTreeMap<String, usize> =
            model::MODULE_PREFIXES.iter().map(|p| (p.to_string(), 0)).collect();
        for (name, value) in &ckpt.params {
            let module = name.split('.').next().unwrap_or("").to_string();
            *modules.entry(module).or_default() += value.len();
        }
        ModelReport {
            total: modules.values().sum(),
            modules,
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "params.total = {}", self.total);
        for (m, n) in &self.modules {
            let _ = writeln!(s, "params.{m} = {n}");
        }
        s.push_str("json = ");
        s.push_str(&serde_json::to_string(self).expect("report serializes"));
        s.push('\n');
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{Dataset, Role};
    use crate::tensor::{ParamStore, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> Config {
        Config {
            image_size: 16,
            channels: 4,
            proto_dim: 2,
            reduction: 2,
            epochs: 1,
            episodes_per_epoch: 4,
            eval_episodes: 4,
            ..Config::default()
        }
    }

    #[test]
    fn hand_counted_parameters() {
        let cfg = tiny();
        let mut store = ParamStore::<f32>::new();
        Lerenet::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap();
        let b = param_breakdown(&store);
        let conv2 = |i: usize, o: usize, k: usize| o * i * k * k + o;
        let conv1 = |i: usize, o: usize| o * i + o;
        let backbone = conv2(3, 2, 3) + conv2(2, 2, 3) + conv2(2, 4, 3) + conv2(4, 4, 3);
        let mpr = 2 * conv1(4, 2) + conv1(4, 2) + 2 * 2 * 2 + conv2(2, 4, 3);
        let l = 16;
        let mpe = conv1(4, 2) + conv1(2, 4) + conv2(4, 1, 7) + conv1(4 + l, 4);
        let ifm = 4 * conv2(8, 8, 3) + conv2(8, 1, 1);
        assert_eq!(b["backbone"], backbone);
        assert_eq!(b["mpr"], mpr);
        assert_eq!(b["mpe"], mpe);
        assert_eq!(b["ifm"], ifm);
        assert_eq!(store.scalar_count(), backbone + mpr + mpe + ifm);
    }

    #[test]
    fn toggling_mpr_removes_exactly_its_parameters() {
        let cfg = tiny();
        let count = |c: &Config, seed| {
            let mut s = ParamStore::<f32>::new();
            Lerenet::new(&mut s, &mut ChaCha8Rng::seed_from_u64(seed), c).unwrap();
            (s.scalar_count(), param_breakdown(&s)["mpr"])
        };
        let (on, mpr) = count(&cfg, 0);
        let (off, zero) = count(&Config { mpr: false, ..cfg.clone() }, 0);
        assert_eq!(on - off, mpr);
        assert_eq!(zero, 0);
        assert_eq!(count(&cfg, 99).0, on);
    }

    #[test]
    fn every_parameter_receives_gradient() {
        // r = 2 often leaves the relu GCN output all zero at init; r = 4 does not.
        let cfg = Config { channels: 8, proto_dim: 4, reduction: 4, ..tiny() };
        let mut store = ParamStore::<f64>::new();
        let model = Lerenet::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &cfg).unwrap();
        for p in store.iter_mut() {
            if p.name.ends_with(".bias") {
                p.value = p.value.map(|_| 0.05);
            }
        }
        let ds = Dataset::new(16, 0, 0).unwrap();
        let ep = ds.sample_episode(Role::Train, 1, 5).unwrap();
        let mut tape = Tape::new();
        let loss = model.loss(&mut tape, &store, &ep).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (id, p) in store.iter() {
            let g = grads.param(id).unwrap_or_else(|| panic!("{} has no gradient", p.name));
            assert!(g.data().iter().any(|&v| v != 0.0), "{} gradient is all zero", p.name);
        }
    }

    #[test]
    fn disabled_branches_substitute_query_descriptors() {
        let cfg = Config { mpr: false, mpe: false, mpe_star: false, ..tiny() };
        let mut store = ParamStore::<f32>::new();
        let model = Lerenet::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), &cfg).unwrap();
        assert!(param_breakdown(&store)["mpr"] == 0 && param_breakdown(&store)["mpe"] == 0);
        let ds = Dataset::new(16, 0, 0).unwrap();
        let ep = ds.sample_episode(Role::Train, 1, 5).unwrap();
        let mut tape = Tape::inference();
        let v = model.forward(&mut tape, &store, &ep).unwrap();
        assert_eq!(v.main, v.query);
        assert_eq!(v.aux, v.query);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let cfg = Config { learning_rate: 0.0, ..tiny() };
        let before = Trainer::new(&cfg).unwrap().store;
        let after = train(&cfg, None).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(after.store.iter()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(after.loss_trace.len(), 4);
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let cfg = Config { epochs: 2, ..tiny() };
        let a = train(&cfg, None).unwrap();
        let b = train(&cfg, None).unwrap();
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(a.checkpoint().to_bytes().unwrap(), b.checkpoint().to_bytes().unwrap());

        let mut half = Trainer::new(&Config { epochs: 1, ..cfg.clone() }).unwrap();
        half.train(None).unwrap();
        let mut ckpt = half.checkpoint();
        ckpt.config.epochs = 2;
        let mut resumed = Trainer::from_checkpoint(&ckpt).unwrap();
        resumed.train(None).unwrap();
        assert_eq!(resumed.loss_trace, a.loss_trace);
        for ((_, x), (_, y)) in resumed.store.iter().zip(a.store.iter()) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn ground_truth_predictor_scores_one() {
        let ds = Dataset::new(16, 0, 2).unwrap();
        let req = EvalRequest { shots: 1, episodes: 8, seed: 3 };
        let r = evaluate(&GroundTruthPredictor, &ds, &req, 1, vec![]).unwrap();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.fb_iou, 1.0);
        assert_eq!(r.per_class_iou.len(), 4);
        let short = EvalRequest { episodes: 3, ..req };
        assert_eq!(evaluate(&GroundTruthPredictor, &ds, &short, 1, vec![]).unwrap_err().kind(), "config");
    }

    #[test]
    fn parallel_evaluation_matches_sequential() {
        let t = Trainer::new(&tiny()).unwrap();
        let p = ModelPredictor { model: &t.model, store: &t.store };
        let req = EvalRequest { shots: 2, episodes: 6, seed: 1 };
        let a = evaluate(&p, &t.dataset, &req, 1, vec![]).unwrap();
        let b = evaluate(&p, &t.dataset, &req, 3, vec![]).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.render(), b.render());
    }

    #[test]
    fn checkpoint_reload_reproduces_logits() {
        let dir = tempfile::tempdir().unwrap();
        let t = train(&tiny(), Some(dir.path())).unwrap();
        let ckpt = Checkpoint::load(&dir.path().join(train::CHECKPOINT_FILE)).unwrap();
        let (model, store) = ckpt.restore().unwrap();
        let ep = t.dataset.sample_episode(Role::Test, 1, 77).unwrap();
        let before = t.model.predict_logits(&t.store, &ep).unwrap();
        let after = model.predict_logits(&store, &ep).unwrap();
        assert_eq!(before.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), after.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn model_report_sums_modules() {
        let t = Trainer::new(&tiny()).unwrap();
        let r = ModelReport::from_checkpoint(&t.checkpoint());
        assert_eq!(r.total, t.store.scalar_count());
        assert!(r.render().starts_with(&format!("params.total = {}\n", r.total)));
    }

    #[test]
    fn threads_env_parsing() {
        // Only the parsing path is exercised; the variable is not set here.
        if std::env::var(THREADS_ENV).is_err() {
            assert_eq!(threads_from_env().unwrap(), 1);
        }
    }
}
