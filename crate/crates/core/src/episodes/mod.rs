//! Synthetic defect data: class definitions, folds, 1-way K-shot episode
//! sampling and the on-disk tensor format.

pub mod folds;
pub mod format;
pub mod generator;

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use folds::{make_folds, FoldSplit, Role};
pub use generator::{default_classes, generate_sample, DefectClass, DistortionParams};

/// Episode-level resample budget after degenerate draws.
pub const MAX_EPISODE_RESAMPLES: usize = 16;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for item `index` of stream `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(base ^ mix64(stream)) ^ index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `3 x H x W`.
    pub image: Tensor<f32>,
    /// `H x W`, values in `{0, 1}`.
    pub mask: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub class_id: usize,
    pub support: Vec<Sample>,
    pub query: Sample,
    pub seed: u64,
    /// Degenerate draws skipped before this episode was accepted.
    pub resamples: usize,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.support.len()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: Vec<DefectClass>,
    pub split: FoldSplit,
    pub image_size: usize,
}

impl Dataset {
    pub fn new(image_size: usize, fold_seed: u64, test_fold: usize) -> Result<Self> {
        let classes = default_classes();
        let ids: Vec<usize> = classes.iter().map(|c| c.id).collect();
        Ok(Dataset {
            split: make_folds(&ids, fold_seed, test_fold)?,
            classes,
            image_size,
        })
    }

    pub fn class(&self, id: usize) -> Result<&DefectClass> {
        self.classes
            .get(id)
            .ok_or_else(|| Error::Config(format!("unknown class id {id}")))
    }

    /// One sample of `class` with a freshly drawn sub-style and distortion.
    pub fn draw_sample(&self, class: &DefectClass, rng: &mut impl Rng) -> Result<Sample> {
        let substyle = rng.random_range(0..class.substyle_count());
        let params = DistortionParams::sample(&class.distortion, rng);
        let (image, mask) = generate_sample(class, substyle, &params, self.image_size, rng.random())?;
        Ok(Sample { image, mask })
    }

    /// A 1-way `shots`-shot episode from a uniformly chosen class of `role`.
    /// Support and query samples draw sub-style and distortion independently.
    /// The query is drawn first, so episodes that differ only in `shots`
    /// share their query and leading support samples.
    pub fn sample_episode(&self, role: Role, shots: usize, seed: u64) -> Result<Episode> {
        if shots == 0 {
            return Err(Error::Config("shot count K must be at least 1".into()));
        }
        let pool = self.split.classes(role);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let class_id = pool[rng.random_range(0..pool.len())];
        self.draw_episode(class_id, shots, seed, &mut rng)
    }

    /// Like [`Dataset::sample_episode`] with the class fixed by the caller.
    pub fn sample_class_episode(&self, class_id: usize, shots: usize, seed: u64) -> Result<Episode> {
        if shots == 0 {
            return Err(Error::Config("shot count K must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.draw_episode(class_id, shots, seed, &mut rng)
    }

    fn draw_episode(&self, class_id: usize, shots: usize, seed: u64, rng: &mut ChaCha8Rng) -> Result<Episode> {
        let class = self.class(class_id)?;
        for attempt in 0..=MAX_EPISODE_RESAMPLES {
            let draw = (0..=shots)
                .map(|_| self.draw_sample(class, rng))
                .collect::<Result<Vec<_>>>();
            match draw {
                Ok(mut samples) => {
                    let query = samples.remove(0);
                    if attempt > 0 {
                        log::debug!("episode {seed:#x}: accepted after {attempt} degenerate draws");
                    }
                    return Ok(Episode {
                        class_id,
                        support: samples,
                        query,
                        seed,
                        resamples: attempt,
                    });
                }
                Err(Error::DegenerateEpisode(msg)) => {
                    log::debug!("episode {seed:#x}: resampling after degenerate draw ({msg})");
                }
                Err(e) => return Err(e),
            }
        }
        Err(Error::DegenerateEpisode(format!(
            "episode {seed:#x}: no valid draw after {MAX_EPISODE_RESAMPLES} resamples"
        )))
    }

    /// Write `per_class` samples of every class under
    /// `<root>/<class_id>/<sample_id>.{img,msk}.ltsr`.
    pub fn export(&self, root: &Path, per_class: usize, seed: u64) -> Result<usize> {
        let mut written = 0;
        for class in &self.classes {
            let dir = root.join(class.id.to_string());
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for i in 0..per_class {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, class.id as u64, i as u64));
                let sample = self.draw_sample(class, &mut rng)?;
                format::write_tensor(&dir.join(format!("{i}.img.ltsr")), &sample.image)?;
                format::write_tensor(&dir.join(format!("{i}.msk.ltsr")), &sample.mask)?;
                written += 1;
            }
        }
        Ok(written)
    }

    pub fn load_sample(root: &Path, class_id: usize, sample_id: usize) -> Result<Sample> {
        let dir = root.join(class_id.to_string());
        Ok(Sample {
            image: format::read_tensor(&dir.join(format!("{sample_id}.img.ltsr")))?,
            mask: format::read_tensor(&dir.join(format!("{sample_id}.msk.ltsr")))?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mix64_reference_values() {
        // First outputs of the reference SplitMix64 generator seeded with 0.
        assert_eq!(mix64(0), 0xe220_a839_7b1d_cdaf);
        assert_eq!(mix64(0x9e37_79b9_7f4a_7c15), 0x6e78_9e6a_a1b9_65f4);
    }

    #[test]
    fn derived_seeds_differ_by_stream_and_index() {
        let a = derive_seed(1, 0, 0);
        assert_ne!(a, derive_seed(1, 0, 1));
        assert_ne!(a, derive_seed(1, 1, 0));
        assert_ne!(a, derive_seed(2, 0, 0));
        assert_eq!(a, derive_seed(1, 0, 0));
    }

    #[test]
    fn episode_shapes_and_class_roles() {
        let ds = Dataset::new(16, 0, 1).unwrap();
        let train = ds.split.train_classes();
        for i in 0..10 {
            let e = ds.sample_episode(Role::Test, 1, i).unwrap();
            assert_eq!(e.shots(), 1);
            assert!(!train.contains(&e.class_id));
            assert_eq!(e.query.image.shape(), &[3, 16, 16]);
            assert_eq!(e.query.mask.shape(), &[16, 16]);
        }
        let e = ds.sample_episode(Role::Train, 5, 3).unwrap();
        assert_eq!(e.shots(), 5);
        assert_eq!(ds.sample_class_episode(7, 2, 3).unwrap().class_id, 7);
        assert!(ds.sample_class_episode(12, 2, 3).is_err());
        assert!(train.contains(&e.class_id));
        assert!(ds.sample_episode(Role::Train, 0, 3).is_err());
    }

    #[test]
    fn episode_stream_is_reproducible() {
        let ds = Dataset::new(16, 4, 0).unwrap();
        for i in 0..5 {
            let s = derive_seed(9, 0, i);
            assert_eq!(ds.sample_episode(Role::Train, 2, s).unwrap(), ds.sample_episode(Role::Train, 2, s).unwrap());
        }
    }

    #[test]
    fn shot_count_keeps_query_and_prefix() {
        let ds = Dataset::new(16, 0, 0).unwrap();
        let one = ds.sample_episode(Role::Test, 1, 21).unwrap();
        let five = ds.sample_episode(Role::Test, 5, 21).unwrap();
        assert_eq!(one.query, five.query);
        assert_eq!(one.support[0], five.support[0]);
    }

    #[test]
    fn support_and_query_differ() {
        let ds = Dataset::new(32, 0, 0).unwrap();
        let e = ds.sample_episode(Role::Train, 1, 11).unwrap();
        assert_ne!(e.support[0].mask, e.query.mask);
    }

    #[test]
    fn export_layout_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(16, 0, 0).unwrap();
        assert_eq!(ds.export(dir.path(), 2, 5).unwrap(), 24);
        assert!(dir.path().join("11").join("1.msk.ltsr").is_file());
        let s = Dataset::load_sample(dir.path(), 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(5, 3, 1));
        assert_eq!(s, ds.draw_sample(ds.class(3).unwrap(), &mut rng).unwrap());
    }
}
