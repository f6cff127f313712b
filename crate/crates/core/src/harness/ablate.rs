//! The module toggle grid.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::Result;
use crate::harness::config::Config;
use crate::harness::evaluate::{evaluate, EvalRequest, ModelPredictor};
use crate::harness::train::train;

/// `(name, mpr, mpe, mpe_star)` for each row, baseline first.
pub const ROWS: [(&str, bool, bool, bool); 6] = [
    ("baseline", false, false, false),
    ("mpr", true, false, false),
    ("mpe", false, true, false),
    ("mpe_star", false, true, true),
    ("mpr+mpe", true, true, false),
    ("mpr+mpe_star", true, true, true),
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub mpr: bool,
    pub mpe: bool,
    pub mpe_star: bool,
    pub miou: f64,
    pub fb_iou: f64,
    pub param_count: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:>5} {:>5} {:>8} {:>8} {:>8} {:>10}", "row", "mpr", "mpe", "mpe*", "miou", "fb_iou", "params");
        let mark = |b: bool| if b { "x" } else { "-" };
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>5} {:>5} {:>8} {:>8.4} {:>8.4} {:>10}",
                r.name,
                mark(r.mpr),
                mark(r.mpe),
                mark(r.mpe_star),
                r.miou,
                r.fb_iou,
                r.param_count
            );
        }
        s.push_str("json = ");
        s.push_str(&serde_json::to_string(self).expect("table serializes"));
        s.push('\n');
        s
    }
}

/// Train and evaluate every row with the config's seed, so rows share the
/// training and evaluation episode streams.
pub fn ablate(config: &Config, threads: usize) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(ROWS.len());
    for (name, mpr, mpe, mpe_star) in ROWS {
        let cfg = Config {
            mpr,
            mpe,
            mpe_star,
            ..config.clone()
        };
        log::info!("ablation row {name}");
        let trainer = train(&cfg, None)?;
        let predictor = ModelPredictor {
            model: &trainer.model,
            store: &trainer.store,
        };
        let req = EvalRequest {
            shots: cfg.shots,
            episodes: cfg.eval_episodes,
            seed: cfg.seed,
        };
        let report = evaluate(&predictor, &trainer.dataset, &req, threads, Vec::new())?;
        rows.push(AblationRow {
            name: name.to_string(),
            mpr,
            mpe,
            mpe_star,
            miou: report.miou,
            fb_iou: report.fb_iou,
            param_count: report.param_count,
            final_loss: trainer.loss_trace.last().copied().unwrap_or(f64::NAN),
        });
    }
    Ok(AblationTable {
        seed: config.seed,
        rows,
    })
}
