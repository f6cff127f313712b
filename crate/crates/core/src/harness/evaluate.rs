//! Held-out evaluation.

use rayon::prelude::*;

use crate::episodes::{derive_seed, Dataset, Episode};
use crate::error::{Error, Result};
use crate::harness::model::Lerenet;
use crate::harness::STREAM_EVAL;
use crate::ifm::SegMask;
use crate::metrics::{fb_iou, iou, EpisodeScore, MetricsReport};
use crate::tensor::{ParamStore, Tensor};

/// Anything that turns an episode into a binary query mask.
pub trait Predictor: Sync {
    fn predict(&self, episode: &Episode) -> Result<Tensor<f32>>;

    fn param_count(&self) -> usize {
        0
    }
}

pub struct ModelPredictor<'a> {
    pub model: &'a Lerenet,
    pub store: &'a ParamStore<f32>,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, episode: &Episode) -> Result<Tensor<f32>> {
        let logits = self.model.predict_logits(self.store, episode)?;
        Ok(SegMask::from_logits(logits).binary)
    }

    fn param_count(&self) -> usize {
        self.store.scalar_count()
    }
}

/// Test hook returning the query's own mask.
pub struct GroundTruthPredictor;

impl Predictor for GroundTruthPredictor {
    fn predict(&self, episode: &Episode) -> Result<Tensor<f32>> {
        Ok(episode.query.mask.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalRequest {
    pub shots: usize,
    pub episodes: usize,
    pub seed: u64,
}

/// Test episode `index`: classes of the test fold taken round-robin, so any
/// request of at least one episode per class scores every class.
pub fn eval_episode(dataset: &Dataset, req: &EvalRequest, index: usize) -> Result<Episode> {
    let classes = dataset.split.test_classes();
    let class = classes[index % classes.len()];
    dataset.sample_class_episode(class, req.shots, derive_seed(req.seed, STREAM_EVAL, index as u64))
}

/// Per-episode scores in index order. With `threads > 1` episodes run on a
/// rayon pool; results are identical to the sequential run.
pub fn score_episodes(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    req: &EvalRequest,
    threads: usize,
) -> Result<Vec<EpisodeScore>> {
    let classes = dataset.split.test_classes();
    if req.episodes < classes.len() {
        return Err(Error::Config(format!(
            "{} episodes cannot cover the {} test classes",
            req.episodes,
            classes.len()
        )));
    }
    let one = |index: usize| -> Result<EpisodeScore> {
        let episode = eval_episode(dataset, req, index)?;
        let pred = predictor.predict(&episode)?;
        Ok(EpisodeScore {
            index,
            class_id: episode.class_id,
            iou: iou(&pred, &episode.query.mask)?,
            fb_iou: fb_iou(&pred, &episode.query.mask)?,
        })
    };
    if threads <= 1 {
        return (0..req.episodes).map(one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| (0..req.episodes).into_par_iter().map(one).collect())
}

pub fn evaluate(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    req: &EvalRequest,
    threads: usize,
    loss_trace: Vec<f64>,
) -> Result<MetricsReport> {
    let scores = score_episodes(predictor, dataset, req, threads)?;
    MetricsReport::from_scores(
        scores,
        &dataset.split.test_classes(),
        dataset.split.test_fold,
        req.shots,
        predictor.param_count(),
        loss_trace,
    )
}
