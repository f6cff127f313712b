//! Fusion head: concatenates the main and auxiliary predictions, refines them
//! with residual blocks and emits image-resolution logits.

use rand::Rng;

use crate::backbone::from_descriptors;
use crate::error::{Error, Result};
use crate::layers::Conv2dLayer;
use crate::tensor::{kernels, ParamStore, Scalar, Tape, Tensor, Var};

pub const RES_BLOCKS: usize = 2;
/// Probability clamp used by the loss.
pub const BCE_EPS: f64 = 1e-7;
/// The classifier starts at a tenth of He scale so initial logits sit near 0.
pub const CLS_INIT_GAIN: f64 = 0.1;

#[derive(Debug, Clone, Copy)]
pub struct ResBlock {
    pub first: Conv2dLayer,
    pub second: Conv2dLayer,
}

#[derive(Debug, Clone)]
pub struct Ifm {
    channels: usize,
    pub blocks: Vec<ResBlock>,
    pub cls: Conv2dLayer,
}

impl Ifm {
    /// `channels` is the width of each input; the head runs at twice that.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng, channels: usize) -> Result<Self> {
        let wide = 2 * channels;
        let blocks = (0..RES_BLOCKS)
            .map(|i| {
                Ok(ResBlock {
                    first: Conv2dLayer::new(store, rng, &format!("ifm.res{i}.conv_a"), wide, wide, 3, 1)?,
                    second: Conv2dLayer::new(store, rng, &format!("ifm.res{i}.conv_b"), wide, wide, 3, 1)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cls = Conv2dLayer::new(store, rng, "ifm.cls", wide, 1, 1, 1)?;
        cls.rescale(store, CLS_INIT_GAIN);
        Ok(Ifm { channels, blocks, cls })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Logits of shape `out_h x out_w`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        main: Var,
        aux: Var,
        h: usize,
        w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Result<Var> {
        let (ms, xs) = (tape.shape(main).to_vec(), tape.shape(aux).to_vec());
        if ms != xs || ms.len() != 2 || ms[0] != self.channels {
            return Err(Error::shapes("fuse_and_segment", &ms, &xs));
        }
        let stacked = tape.concat(&[main, aux])?;
        let mut x = from_descriptors(tape, stacked, h, w)?;
        for block in &self.blocks {
            let y = block.first.forward(tape, store, x)?;
            let y = tape.relu(y)?;
            let y = block.second.forward(tape, store, y)?;
            x = tape.add(x, y)?;
        }
        let logits = self.cls.forward(tape, store, x)?;
        let up = tape.upsample_bilinear(logits, out_h, out_w)?;
        tape.reshape(up, &[out_h, out_w])
    }
}

/// Hard and soft views of a predicted mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask<T: Scalar> {
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
    pub binary: Tensor<T>,
}

impl<T: Scalar> SegMask<T> {
    pub fn from_logits(logits: Tensor<T>) -> Self {
        let probabilities = kernels::sigmoid(&logits);
        let binary = binarize(&probabilities, T::of(0.5));
        SegMask {
            logits,
            probabilities,
            binary,
        }
    }
}

/// `1` where `p >= threshold`, else `0`.
pub fn binarize<T: Scalar>(probabilities: &Tensor<T>, threshold: T) -> Tensor<T> {
    probabilities.map(|p| if p >= threshold { T::one() } else { T::zero() })
}

pub fn check_binary<T: Scalar>(mask: &Tensor<T>, what: &str) -> Result<()> {
    if mask.data().iter().all(|&v| v == T::zero() || v == T::one()) {
        Ok(())
    } else {
        Err(Error::Validation(format!("{what} must contain only 0 and 1")))
    }
}

/// Mean per-pixel BCE of `sigmoid(logits)` against a binary mask, on the tape.
pub fn bce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, gt: &Tensor<T>) -> Result<Var> {
    check_binary(gt, "ground-truth mask")?;
    let p = tape.sigmoid(logits)?;
    tape.bce(p, gt, T::of(BCE_EPS))
}

/// The same loss evaluated directly on probabilities.
pub fn bce_value<T: Scalar>(probabilities: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check_binary(gt, "ground-truth mask")?;
    if probabilities.shape() != gt.shape() {
        return Err(Error::shapes("bce_loss", probabilities.shape(), gt.shape()));
    }
    let mut tape = Tape::inference();
    let p = tape.constant(probabilities.clone());
    let loss = tape.bce(p, gt, T::of(BCE_EPS))?;
    Ok(tape.value(loss).data()[0].as_f64())
}
