//! Line-based `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub image_size: usize,
    pub channels: usize,
    pub proto_dim: usize,
    pub gcn_depth: usize,
    pub reduction: usize,
    pub shots: usize,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub fold_seed: u64,
    pub test_fold: usize,
    pub eval_episodes: usize,
    pub mpr: bool,
    pub mpe: bool,
    pub mpe_star: bool,
    pub pool_divide_by_l: bool,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            image_size: 64,
            channels: 32,
            proto_dim: 16,
            gcn_depth: 2,
            reduction: 4,
            shots: 1,
            epochs: 4,
            episodes_per_epoch: 50,
            batch_size: 2,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            fold_seed: 0,
            test_fold: 0,
            eval_episodes: 60,
            mpr: true,
            mpe: true,
            mpe_star: true,
            pool_divide_by_l: false,
        }
    }
}

fn parse_num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

impl Config {
    /// Small configuration used by the gradient suite.
    pub fn toy() -> Self {
        Config {
            image_size: 16,
            channels: 8,
            proto_dim: 4,
            ..Config::default()
        }
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment;
    /// unknown and repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut seen = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            seen.push(key.to_string());
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "image_size" => self.image_size = parse_num(key, value)?,
            "channels" => self.channels = parse_num(key, value)?,
            "proto_dim" => self.proto_dim = parse_num(key, value)?,
            "gcn_depth" => self.gcn_depth = parse_num(key, value)?,
            "reduction" => self.reduction = parse_num(key, value)?,
            "shots" => self.shots = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "episodes_per_epoch" => self.episodes_per_epoch = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "learning_rate" => self.learning_rate = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "fold_seed" => self.fold_seed = parse_num(key, value)?,
            "test_fold" => self.test_fold = parse_num(key, value)?,
            "eval_episodes" => self.eval_episodes = parse_num(key, value)?,
            "mpr" => self.mpr = parse_bool(key, value)?,
            "mpe" => self.mpe = parse_bool(key, value)?,
            "mpe_star" => self.mpe_star = parse_bool(key, value)?,
            "pool_divide_by_l" => self.pool_divide_by_l = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("proto_dim", self.proto_dim),
            ("gcn_depth", self.gcn_depth),
            ("reduction", self.reduction),
            ("shots", self.shots),
            ("epochs", self.epochs),
            ("episodes_per_epoch", self.episodes_per_epoch),
            ("batch_size", self.batch_size),
            ("eval_episodes", self.eval_episodes),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("`{k}` must be positive")));
        }
        if !self.image_size.is_multiple_of(4) || self.image_size < 8 {
            return Err(Error::Config(format!(
                "image_size {} must be a multiple of 4 and at least 8",
                self.image_size
            )));
        }
        if !self.channels.is_multiple_of(2) {
            return Err(Error::Config(format!("channels {} must be even", self.channels)));
        }
        if !self.channels.is_multiple_of(self.reduction) {
            return Err(Error::Config(format!(
                "channels {} not divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.test_fold >= crate::episodes::folds::NUM_FOLDS {
            return Err(Error::Config(format!("test_fold {} not in 0..3", self.test_fold)));
        }
        if self.mpe_star && !self.mpe {
            return Err(Error::Config("mpe_star requires mpe".into()));
        }
        Ok(())
    }

    /// Feature grid side `h = w`.
    pub fn feature_size(&self) -> usize {
        self.image_size / crate::backbone::TOTAL_STRIDE
    }

    pub fn total_episodes(&self) -> usize {
        self.epochs * self.episodes_per_epoch
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("image_size", self.image_size.to_string());
        put("channels", self.channels.to_string());
        put("proto_dim", self.proto_dim.to_string());
        put("gcn_depth", self.gcn_depth.to_string());
        put("reduction", self.reduction.to_string());
        put("shots", self.shots.to_string());
        put("epochs", self.epochs.to_string());
        put("episodes_per_epoch", self.episodes_per_epoch.to_string());
        put("batch_size", self.batch_size.to_string());
        put("learning_rate", format!("{:?}", self.learning_rate));
        put("momentum", format!("{:?}", self.momentum));
        put("seed", self.seed.to_string());
        put("fold_seed", self.fold_seed.to_string());
        put("test_fold", self.test_fold.to_string());
        put("eval_episodes", self.eval_episodes.to_string());
        put("mpr", self.mpr.to_string());
        put("mpe", self.mpe.to_string());
        put("mpe_star", self.mpe_star.to_string());
        put("pool_divide_by_l", self.pool_divide_by_l.to_string());
        s
    }
}
