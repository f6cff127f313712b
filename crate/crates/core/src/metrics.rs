//! Segmentation scores and the evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ifm::check_binary;
use crate::tensor::{Scalar, Tensor};

fn counts<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, invert: bool) -> Result<(usize, usize)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shapes("iou", pred.shape(), gt.shape()));
    }
    check_binary(pred, "predicted mask")?;
    check_binary(gt, "ground-truth mask")?;
    let (mut inter, mut union) = (0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = ((p == T::one()) != invert, (g == T::one()) != invert);
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok((inter, union))
}

fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Foreground intersection over union; 1 when both masks are empty.
pub fn iou<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let (i, u) = counts(pred, gt, false)?;
    Ok(ratio(i, u))
}

/// Mean of foreground and background IoU.
pub fn fb_iou<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let (fi, fu) = counts(pred, gt, false)?;
    let (bi, bu) = counts(pred, gt, true)?;
    Ok((ratio(fi, fu) + ratio(bi, bu)) / 2.0)
}

/// Per-class mean IoU over `(class, iou)` pairs.
pub fn per_class_iou(per_episode: &[(usize, f64)]) -> BTreeMap<usize, f64> {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for &(class, v) in per_episode {
        let e = sums.entry(class).or_default();
        e.0 += v;
        e.1 += 1;
    }
    sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect()
}

/// Mean over `classes` of each class's mean episode IoU. Every listed class
/// must have at least one episode; episodes of other classes are an error.
pub fn miou(per_episode: &[(usize, f64)], classes: &[usize]) -> Result<f64> {
    if classes.is_empty() {
        return Err(Error::Config("mIoU needs at least one class".into()));
    }
    let per_class = per_class_iou(per_episode);
    if let Some(&extra) = per_class.keys().find(|c| !classes.contains(c)) {
        return Err(Error::Config(format!("episode of class {extra} outside the evaluated fold")));
    }
    let mut total = 0.0;
    for &c in classes {
        total += per_class
            .get(&c)
            .ok_or(Error::IncompleteEvaluation { class: c })?;
    }
    Ok(total / classes.len() as f64)
}

/// Scores of one evaluated episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeScore {
    pub index: usize,
    pub class_id: usize,
    pub iou: f64,
    pub fb_iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fold: usize,
    pub shots: usize,
    pub episodes: usize,
    pub miou: f64,
    pub fb_iou: f64,
    pub per_class_iou: BTreeMap<usize, f64>,
    pub param_count: usize,
    pub loss_trace: Vec<f64>,
}

impl MetricsReport {
    /// Aggregate scores in episode-index order, so the result does not
    /// depend on the order workers finished in.
    pub fn from_scores(
        mut scores: Vec<EpisodeScore>,
        classes: &[usize],
        fold: usize,
        shots: usize,
        param_count: usize,
        loss_trace: Vec<f64>,
    ) -> Result<Self> {
        scores.sort_by_key(|s| s.index);
        let pairs: Vec<(usize, f64)> = scores.iter().map(|s| (s.class_id, s.iou)).collect();
        let miou = miou(&pairs, classes)?;
        let fb = scores.iter().map(|s| s.fb_iou).sum::<f64>() / scores.len() as f64;
        Ok(MetricsReport {
            fold,
            shots,
            episodes: scores.len(),
            miou,
            fb_iou: fb,
            per_class_iou: per_class_iou(&pairs),
            param_count,
            loss_trace,
        })
    }

    /// `key = value` lines followed by the same fields as one JSON object.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fold = {}", self.fold);
        let _ = writeln!(s, "shots = {}", self.shots);
        let _ = writeln!(s, "episodes = {}", self.episodes);
        let _ = writeln!(s, "miou = {:.6}", self.miou);
        let _ = writeln!(s, "fb_iou = {:.6}", self.fb_iou);
        for (c, v) in &self.per_class_iou {
            let _ = writeln!(s, "iou.class{c} = {v:.6}");
        }
        let _ = writeln!(s, "param_count = {}", self.param_count);
        if let (Some(first), Some(last)) = (self.loss_trace.first(), self.loss_trace.last()) {
            let _ = writeln!(s, "loss.first = {first:.6}");
            let _ = writeln!(s, "loss.last = {last:.6}");
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
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask(bits: &[u8], n: usize) -> Tensor<f32> {
        Tensor::new(&[n, n], bits.iter().map(|&b| b as f32).collect()).unwrap()
    }

    fn rand_mask(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f32> {
        let bits: Vec<u8> = (0..n * n).map(|_| rng.random_bool(0.4) as u8).collect();
        mask(&bits, n)
    }

    #[test]
    fn iou_cases() {
        let a = mask(&[1, 1, 0, 0], 2);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &mask(&[0, 0, 1, 1], 2)).unwrap(), 0.0);
        let z = mask(&[0; 4], 2);
        assert_eq!(iou(&z, &z).unwrap(), 1.0);
        assert_eq!(iou(&a, &Tensor::zeros(&[4])).unwrap_err().kind(), "dimension");
        assert_eq!(iou(&a, &Tensor::full(&[2, 2], 0.5)).unwrap_err().kind(), "validation");
    }

    #[test]
    fn iou_four_of_twelve() {
        let mut p = [0u8; 16];
        let mut g = [0u8; 16];
        p[..8].fill(1);
        g[4..12].fill(1);
        assert!((iou(&mask(&p, 4), &mask(&g, 4)).unwrap() - 4.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn fb_iou_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = rand_mask(&mut rng, 8);
        assert_eq!(fb_iou(&g, &g).unwrap(), 1.0);
        let half = mask(&[1, 1, 0, 0], 2);
        let inv = mask(&[0, 0, 1, 1], 2);
        assert_eq!(fb_iou(&inv, &half).unwrap(), 0.0);
        for _ in 0..20 {
            let (p, g) = (rand_mask(&mut rng, 8), rand_mask(&mut rng, 8));
            let (mut fi, mut fu, mut bi, mut bu) = (0.0, 0.0, 0.0, 0.0);
            for (&a, &b) in p.data().iter().zip(g.data()) {
                fi += (a == 1.0 && b == 1.0) as u8 as f64;
                fu += (a == 1.0 || b == 1.0) as u8 as f64;
                bi += (a == 0.0 && b == 0.0) as u8 as f64;
                bu += (a == 0.0 || b == 0.0) as u8 as f64;
            }
            assert!((fb_iou(&p, &g).unwrap() - (fi / fu + bi / bu) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn miou_cases() {
        assert_eq!(miou(&[(0, 1.0), (1, 1.0), (1, 1.0)], &[0, 1]).unwrap(), 1.0);
        assert!((miou(&[(0, 0.2), (1, 0.6)], &[0, 1]).unwrap() - 0.4).abs() < 1e-15);
        assert!(matches!(
            miou(&[(0, 0.2)], &[0, 1]),
            Err(Error::IncompleteEvaluation { class: 1 })
        ));
        assert!(miou(&[(0, 0.2), (5, 0.1)], &[0]).is_err());
    }

    #[test]
    fn miou_is_nested_not_pooled() {
        let eps = vec![(0, 1.0), (1, 0.0), (1, 0.0), (1, 0.0), (2, 0.5), (3, 0.25), (3, 0.75)];
        let nested = (1.0 + 0.0 + 0.5 + 0.5) / 4.0;
        let pooled = eps.iter().map(|e| e.1).sum::<f64>() / eps.len() as f64;
        let got = miou(&eps, &[0, 1, 2, 3]).unwrap();
        assert!((got - nested).abs() < 1e-15);
        assert!((got - pooled).abs() > 0.1);
    }

    #[test]
    fn report_renders_both_forms() {
        let scores = vec![
            EpisodeScore { index: 1, class_id: 3, iou: 0.5, fb_iou: 0.7 },
            EpisodeScore { index: 0, class_id: 2, iou: 0.25, fb_iou: 0.6 },
        ];
        let r = MetricsReport::from_scores(scores, &[2, 3], 1, 1, 10, vec![0.7, 0.5]).unwrap();
        assert_eq!(r.episodes, 2);
        let text = r.render();
        assert!(text.contains("miou = 0.375000\n"));
        assert!(text.contains("iou.class3 = 0.500000\n"));
        let json = text.lines().find_map(|l| l.strip_prefix("json = ")).unwrap();
        let back: MetricsReport = serde_json::from_str(json).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn iou_properties(a in proptest::collection::vec(0u8..2, 16), b in proptest::collection::vec(0u8..2, 16)) {
            let (pa, pb) = (mask(&a, 4), mask(&b, 4));
            let v = iou(&pa, &pb).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&pb, &pa).unwrap());
            prop_assert_eq!(iou(&pa, &pa).unwrap(), 1.0);
            let flip = |t: &Tensor<f32>| t.map(|x| 1.0 - x);
            prop_assert_eq!(fb_iou(&pa, &pb).unwrap(), fb_iou(&flip(&pa), &flip(&pb)).unwrap());
        }

        #[test]
        fn report_ignores_episode_order(vals in proptest::collection::vec((0usize..3, 0.0f64..1.0), 3..20), seed in any::<u64>()) {
            let mut scores: Vec<EpisodeScore> = vals.iter().enumerate()
                .map(|(i, &(c, v))| EpisodeScore { index: i, class_id: c, iou: v, fb_iou: v })
                .collect();
            scores.extend((0..3).map(|c| EpisodeScore { index: 100 + c, class_id: c, iou: 0.5, fb_iou: 0.5 }));
            let a = MetricsReport::from_scores(scores.clone(), &[0, 1, 2], 0, 1, 0, vec![]).unwrap();
            rand::seq::SliceRandom::shuffle(scores.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(seed));
            let b = MetricsReport::from_scores(scores, &[0, 1, 2], 0, 1, 0, vec![]).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
