//! Trainable convolutional encoder producing mid-level feature maps, plus the
//! support-mask plumbing and the feature-map <-> local-descriptor views.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Conv2dLayer;
use crate::tensor::{kernels, ParamStore, Scalar, Tape, Tensor, Var};

/// Per-block strides of the encoder; total stride is their product.
const STRIDES: [usize; 4] = [2, 1, 2, 1];
pub const TOTAL_STRIDE: usize = 4;
/// Variance floor of the input standardization.
pub const INPUT_NORM_EPS: f64 = 1e-5;

/// Encoder output `c x h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Scalar>(pub Tensor<T>);

/// Feature map viewed as `c x (h*w)`; column `j` is position `(j / w, j % w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet<T: Scalar> {
    pub tensor: Tensor<T>,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn to_descriptors(&self) -> Result<DescriptorSet<T>> {
        let s = self.0.shape();
        if s.len() != 3 {
            return Err(Error::dim("to_descriptors", format!("expected c x h x w, got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        Ok(DescriptorSet {
            tensor: self.0.reshape(&[c, h * w])?,
            h,
            w,
        })
    }
}

impl<T: Scalar> DescriptorSet<T> {
    pub fn from_tensor(tensor: Tensor<T>, h: usize, w: usize) -> Result<Self> {
        if tensor.rank() != 2 || tensor.shape()[1] != h * w {
            return Err(Error::dim(
                "descriptors",
                format!("{:?} does not hold {h}x{w} positions", tensor.shape()),
            ));
        }
        Ok(DescriptorSet { tensor, h, w })
    }

    pub fn to_feature_map(&self) -> Result<FeatureMap<T>> {
        let c = self.tensor.shape()[0];
        Ok(FeatureMap(self.tensor.reshape(&[c, self.h, self.w])?))
    }
}

/// Tape view `c x h x w -> c x (h*w)`.
pub fn to_descriptors<T: Scalar>(tape: &mut Tape<T>, f: Var) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 {
        return Err(Error::dim("to_descriptors", format!("expected c x h x w, got {s:?}")));
    }
    tape.reshape(f, &[s[0], s[1] * s[2]])
}

/// Tape view `c x l -> c x h x w`.
pub fn from_descriptors<T: Scalar>(tape: &mut Tape<T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 2 || s[1] != h * w {
        return Err(Error::dim(
            "from_descriptors",
            format!("{s:?} does not hold {h}x{w} positions"),
        ));
    }
    tape.reshape(x, &[s[0], h, w])
}

/// Four 3x3 conv blocks; relu after all but the last. Output has `channels`
/// channels at `1 / TOTAL_STRIDE` of the input resolution.
#[derive(Debug, Clone)]
pub struct Encoder {
    blocks: Vec<Conv2dLayer>,
    channels: usize,
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, channels: usize) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("encoder channels must be positive".into()));
        }
        let half = (channels / 2).max(1);
        let widths = [3, half, half, channels, channels];
        let blocks = STRIDES
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                Conv2dLayer::new(store, rng, &format!("backbone.conv{i}"), widths[i], widths[i + 1], 3, s)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Encoder { blocks, channels })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn blocks(&self) -> &[Conv2dLayer] {
        &self.blocks
    }

    /// `image: 3 x H x W` -> feature map `c x H/4 x W/4`. Each image channel is
    /// standardized over its pixels before the first conv.
    pub fn encode<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, image: Var) -> Result<Var> {
        let s = tape.shape(image).to_vec();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::dim("encode", format!("expected 3 x H x W image, got {s:?}")));
        }
        if !s[1].is_multiple_of(TOTAL_STRIDE) || !s[2].is_multiple_of(TOTAL_STRIDE) || s[1] < 2 * TOTAL_STRIDE || s[2] < 2 * TOTAL_STRIDE {
            return Err(Error::Config(format!(
                "image extents {}x{} must be multiples of {TOTAL_STRIDE} and at least {}",
                s[1],
                s[2],
                2 * TOTAL_STRIDE
            )));
        }
        let flat = tape.reshape(image, &[3, s[1] * s[2]])?;
        let flat = tape.standardize_rows(flat, T::of(INPUT_NORM_EPS))?;
        let mut x = tape.reshape(flat, &s)?;
        let last = self.blocks.len() - 1;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, store, x)?;
            if i != last {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }
}

fn check_binary<T: Scalar>(what: &str, t: &Tensor<T>) -> Result<()> {
    if t.data().iter().all(|&v| v == T::zero() || v == T::one()) {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} must be binary (0/1)")))
    }
}

/// Project an `H x W` binary mask onto the `h x w` feature grid: block-average
/// then threshold at 0.5 (ties count as foreground).
pub fn mask_to_feature_grid<T: Scalar>(mask: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if mask.rank() != 2 {
        return Err(Error::dim("mask_to_feature_grid", format!("mask shape {:?}", mask.shape())));
    }
    check_binary("mask", mask)?;
    let (mh, mw) = (mask.shape()[0], mask.shape()[1]);
    if h == 0 || w == 0 || mh % h != 0 || mw % w != 0 {
        return Err(Error::dim(
            "mask_to_feature_grid",
            format!("{mh}x{mw} mask does not tile onto a {h}x{w} grid"),
        ));
    }
    let (fy, fx) = (mh / h, mw / w);
    let cells = (fy * fx) as f64;
    let mut out = Vec::with_capacity(h * w);
    for gy in 0..h {
        for gx in 0..w {
            let mut count = 0.0;
            for y in gy * fy..(gy + 1) * fy {
                for x in gx * fx..(gx + 1) * fx {
                    count += mask.data()[y * mw + x].as_f64();
                }
            }
            out.push(if count / cells >= 0.5 { T::one() } else { T::zero() });
        }
    }
    Tensor::new(&[h, w], out)
}

/// Zero every descriptor outside the grid's foreground.
pub fn apply_mask<T: Scalar>(tape: &mut Tape<T>, f: Var, grid: &Tensor<T>) -> Result<Var> {
    let s = tape.shape(f).to_vec();
    if s.len() != 3 || grid.shape() != [s[1], s[2]] {
        return Err(Error::shapes("apply_mask", &s, grid.shape()));
    }
    let g = tape.constant(grid.reshape(&[1, s[1], s[2]])?);
    tape.mul(f, g)
}

/// Elementwise mean of K feature maps.
pub fn kshot_average<T: Scalar>(tape: &mut Tape<T>, features: &[Var]) -> Result<Var> {
    let (&first, rest) = features
        .split_first()
        .ok_or_else(|| Error::Validation("kshot_average needs at least one feature map".into()))?;
    let shape = tape.shape(first).to_vec();
    if rest.is_empty() {
        return Ok(first);
    }
    let mut acc = first;
    for &f in rest {
        if tape.shape(f) != shape.as_slice() {
            return Err(Error::Validation(format!(
                "kshot_average shape mismatch: {shape:?} vs {:?}",
                tape.shape(f)
            )));
        }
        acc = tape.add(acc, f)?;
    }
    tape.scale(acc, T::one() / T::of(features.len() as f64))
}

/// Mean of K binary grids, the soft foreground weight of averaged support.
pub fn average_grids<T: Scalar>(grids: &[Tensor<T>]) -> Result<Tensor<T>> {
    let (first, rest) = grids
        .split_first()
        .ok_or_else(|| Error::Validation("no support grids".into()))?;
    let mut acc = first.clone();
    for g in rest {
        acc = kernels::add(&acc, g)?;
    }
    let k = T::of(grids.len() as f64);
    Ok(acc.map(|v| v / k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), 8).unwrap();
        let mut tape = Tape::inference();
        let img = tape.constant(Tensor::zeros(&[3, 16, 16]));
        let f = enc.encode(&mut tape, &store, img).unwrap();
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_shape_for_desk_config() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), 32).unwrap();
        let mut tape = Tape::inference();
        let img = tape.constant(Tensor::full(&[3, 64, 64], 0.3));
        let f = enc.encode(&mut tape, &store, img).unwrap();
        assert_eq!(tape.shape(f), &[32, 16, 16]);
    }

    #[test]
    fn encode_rejects_indivisible_extents() {
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(1), 4).unwrap();
        let mut tape = Tape::inference();
        let img = tape.constant(Tensor::zeros(&[3, 18, 16]));
        assert!(matches!(enc.encode(&mut tape, &store, img), Err(Error::Config(_))));
    }

    #[test]
    fn encode_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut store = ParamStore::<f32>::new();
            let enc = Encoder::new(&mut store, &mut rng, 8).unwrap();
            let img = rand_tensor(&mut rng, &[3, 32, 32]);
            let mut tape = Tape::inference();
            let i = tape.constant(img);
            let f = enc.encode(&mut tape, &store, i).unwrap();
            tape.value(f).clone()
        };
        let (a, b) = (run(), run());
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn features_ignore_per_channel_gain_and_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&mut store, &mut rng, 8).unwrap();
        let img = rand_tensor(&mut rng, &[3, 16, 16]).cast::<f64>();
        let (gain, offset) = ([0.5, 2.0, 3.0], [0.1, -0.4, 0.7]);
        let mut shifted = img.clone();
        for (i, v) in shifted.data_mut().iter_mut().enumerate() {
            let ch = i / 256;
            *v = gain[ch] * *v + offset[ch];
        }
        let mut tape = Tape::inference();
        let (a, b) = (tape.constant(img), tape.constant(shifted));
        let fa = enc.encode(&mut tape, &store, a).unwrap();
        let fb = enc.encode(&mut tape, &store, b).unwrap();
        // exact up to the variance floor
        assert!(tape.value(fa).max_abs_diff(tape.value(fb)) < 1e-3);
    }

    #[test]
    fn mask_grid_trivial_cases() {
        let ones = Tensor::<f32>::ones(&[16, 16]);
        assert_eq!(mask_to_feature_grid(&ones, 4, 4).unwrap(), Tensor::ones(&[4, 4]));
        let zeros = Tensor::<f32>::zeros(&[16, 16]);
        assert_eq!(mask_to_feature_grid(&zeros, 4, 4).unwrap(), Tensor::zeros(&[4, 4]));
    }

    #[test]
    fn mask_grid_half_plane() {
        // Left 8 of 16 columns set; 4x downsample keeps the left 2 of 4 cells.
        let mut m = Tensor::<f32>::zeros(&[16, 16]);
        for y in 0..16 {
            for x in 0..8 {
                m.data_mut()[y * 16 + x] = 1.0;
            }
        }
        let g = mask_to_feature_grid(&m, 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(g.at(&[y, x]), if x < 2 { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn mask_grid_tie_rounds_up() {
        // 2x2 block with exactly two foreground pixels.
        let m = Tensor::<f32>::from_f64(&[2, 2], &[1., 1., 0., 0.]).unwrap();
        assert_eq!(mask_to_feature_grid(&m, 1, 1).unwrap().data(), &[1.0]);
    }

    #[test]
    fn mask_grid_rejects_non_binary() {
        let m = Tensor::<f32>::full(&[4, 4], 0.5);
        assert!(matches!(mask_to_feature_grid(&m, 2, 2), Err(Error::Validation(_))));
    }

    #[test]
    fn apply_mask_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = rand_tensor(&mut rng, &[3, 2, 2]);
        let mut tape = Tape::inference();
        let fv = tape.constant(f.clone());
        let same = apply_mask(&mut tape, fv, &Tensor::ones(&[2, 2])).unwrap();
        assert_eq!(tape.value(same), &f);
        let zero = apply_mask(&mut tape, fv, &Tensor::zeros(&[2, 2])).unwrap();
        assert!(tape.value(zero).data().iter().all(|&v| v == 0.0));

        let single = Tensor::from_f64(&[2, 2], &[0., 0., 1., 0.]).unwrap();
        let m = apply_mask(&mut tape, fv, &single).unwrap();
        let x = to_descriptors(&mut tape, m).unwrap();
        let d = tape.value(x);
        for c in 0..3 {
            for j in 0..4 {
                let expect = if j == 2 { f.at(&[c, 1, 0]) } else { 0.0 };
                assert_eq!(d.at(&[c, j]), expect);
            }
        }
        assert!(apply_mask(&mut tape, fv, &Tensor::ones(&[3, 2])).is_err());
    }

    #[test]
    fn kshot_average_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = rand_tensor(&mut rng, &[2, 3, 3]);
        let mut tape = Tape::inference();
        let a = tape.constant(f.clone());
        let one = kshot_average(&mut tape, &[a]).unwrap();
        assert_eq!(tape.value(one), &f);

        let neg = tape.constant(f.map(|v| -v));
        let z = kshot_average(&mut tape, &[a, neg]).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));

        let fs: Vec<Tensor<f32>> = (0..5).map(|_| rand_tensor(&mut rng, &[2, 3, 3])).collect();
        let vars: Vec<Var> = fs.iter().map(|t| tape.constant(t.clone())).collect();
        let m = kshot_average(&mut tape, &vars).unwrap();
        for i in 0..18 {
            let oracle: f32 = fs.iter().map(|t| t.data()[i]).sum::<f32>() / 5.0;
            assert!((tape.value(m).data()[i] - oracle).abs() < 1e-6);
        }

        assert!(matches!(kshot_average::<f32>(&mut tape, &[]), Err(Error::Validation(_))));
        let other = tape.constant(Tensor::zeros(&[2, 3, 4]));
        assert!(matches!(kshot_average(&mut tape, &[a, other]), Err(Error::Validation(_))));
    }

    #[test]
    fn descriptor_layout() {
        let f = FeatureMap(Tensor::<f32>::from_f64(&[1, 2, 2], &[1., 2., 3., 4.]).unwrap());
        let d = f.to_descriptors().unwrap();
        assert_eq!(d.tensor.shape(), &[1, 4]);
        assert_eq!(d.tensor.data(), &[1., 2., 3., 4.]);
        assert!(DescriptorSet::from_tensor(Tensor::<f32>::zeros(&[2, 5]), 2, 3).is_err());
    }

    proptest! {
        #[test]
        fn descriptor_round_trip(c in 1usize..5, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = FeatureMap(rand_tensor(&mut rng, &[c, h, w]));
            let back = f.to_descriptors().unwrap().to_feature_map().unwrap();
            prop_assert_eq!(back, f);
        }

        #[test]
        fn apply_mask_idempotent(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = rand_tensor(&mut rng, &[3, 4, 4]);
            let grid = Tensor::new(&[4, 4], (0..16).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()).unwrap();
            let mut tape = Tape::<f32>::inference();
            let v = tape.constant(f);
            let once = apply_mask(&mut tape, v, &grid).unwrap();
            let twice = apply_mask(&mut tape, once, &grid).unwrap();
            prop_assert_eq!(tape.value(once), tape.value(twice));
        }

        #[test]
        fn kshot_of_copies_is_identity(k in 1usize..6, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // Dyadic values keep the repeated sum exact.
            let f = Tensor::<f32>::new(&[2, 3, 3], (0..18).map(|_| rng.random_range(-64i32..64) as f32 / 8.0).collect()).unwrap();
            let mut tape = Tape::inference();
            let vars: Vec<Var> = (0..k).map(|_| tape.constant(f.clone())).collect();
            let m = kshot_average(&mut tape, &vars).unwrap();
            prop_assert!(tape.value(m).max_abs_diff(&f) < 1e-6);
        }

        #[test]
        fn encoder_channels_match_config(c in 1usize..12, hs in 2usize..5, ws in 2usize..5) {
            let mut store = ParamStore::<f32>::new();
            let enc = Encoder::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), c).unwrap();
            let mut tape = Tape::inference();
            let img = tape.constant(Tensor::full(&[3, 4 * hs, 4 * ws], 0.1));
            let f = enc.encode(&mut tape, &store, img).unwrap();
            prop_assert_eq!(tape.shape(f), &[c, hs, ws]);
        }
    }
}
