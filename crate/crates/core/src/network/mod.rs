//! Fully convolutional inverted-bottleneck detector.
//!
//! A 3×3 stem lifts the `m` input frames to `stem_ch` channels. Each block
//! is depthwise 7×7, then pointwise expansion to `hidden_ch`, then pointwise
//! projection back. Every convolution is followed by batch norm and exact
//! GELU, and the block output is added to its input. Three 1×1 decoders emit
//! one detection logit and K offset-bin logits per axis at every pixel. There
//! is no down- or upsampling.
//!
//! Activations are stored channel-major as `[C][N*H*W]`, so the pointwise
//! convolutions are plain matrix products. Everything is generic over
//! [`Real`] so gradients can be checked in `f64` while training runs in
//! `f32`.

mod checkpoint;
pub(crate) mod layers;
mod model;
mod params;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{ArrayView3, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SrusError};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use layers::Geom;
pub use model::{backward, forward_eval, forward_eval_batch, forward_train, BatchOutput, NetOutput, TrainCache};
pub use params::{BatchNorm, ConvBlock, Decoder, NetParams, ParamKind};

/// Scalar type the network runs in.
pub trait Real:
    Float
    + FromPrimitive
    + ndarray::LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + 'static
{
    fn erf(self) -> Self;
}

impl Real for f32 {
    fn erf(self) -> f32 {
        libm::erff(self)
    }
}

impl Real for f64 {
    fn erf(self) -> f64 {
        libm::erf(self)
    }
}

pub const MAX_HIDDEN_CH: usize = 768;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Input frames per stack.
    pub m: usize,
    pub stem_ch: usize,
    pub hidden_ch: usize,
    pub n_blocks: usize,
    pub k_bins: usize,
    pub dw_kernel: usize,
    pub stem_kernel: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            m: 3,
            stem_ch: 128,
            hidden_ch: 512,
            n_blocks: 6,
            k_bins: 4,
            dw_kernel: 7,
            stem_kernel: 3,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let ints = [
            ("m", self.m),
            ("stem_ch", self.stem_ch),
            ("hidden_ch", self.hidden_ch),
            ("n_blocks", self.n_blocks),
            ("dw_kernel", self.dw_kernel),
            ("stem_kernel", self.stem_kernel),
        ];
        for (name, v) in ints {
            if v == 0 {
                return Err(SrusError::config(format!("{name} must be positive")));
            }
        }
        if self.k_bins < 2 || self.k_bins > 255 {
            return Err(SrusError::config(format!("k_bins must be in [2, 255], got {}", self.k_bins)));
        }
        if self.dw_kernel % 2 == 0 || self.stem_kernel % 2 == 0 {
            return Err(SrusError::config("kernel sizes must be odd"));
        }
        if self.hidden_ch > MAX_HIDDEN_CH {
            return Err(SrusError::config(format!(
                "hidden_ch {} exceeds {MAX_HIDDEN_CH}",
                self.hidden_ch
            )));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(SrusError::config("bn_momentum must be in (0, 1]"));
        }
        if !(self.bn_eps > 0.0 && self.bn_eps.is_finite()) {
            return Err(SrusError::config("bn_eps must be positive"));
        }
        Ok(())
    }

    /// Output channels of all heads together: one detection plus K per axis.
    pub fn head_channels(&self) -> usize {
        1 + 2 * self.k_bins
    }

    /// Half-width of the receptive field in pixels.
    pub fn receptive_radius(&self) -> usize {
        self.stem_kernel / 2 + self.n_blocks * (self.dw_kernel / 2)
    }
}

/// Trainable parameter count (running statistics excluded).
pub fn param_count(cfg: &NetConfig) -> usize {
    let c = cfg.stem_ch;
    let h = cfg.hidden_ch;
    let stem = cfg.stem_kernel * cfg.stem_kernel * cfg.m * c + 2 * c;
    let block = cfg.dw_kernel * cfg.dw_kernel * c + 2 * c + c * h + 2 * h + h * c + 2 * c;
    let heads = (c + 1) * cfg.head_channels();
    stem + cfg.n_blocks * block + heads
}

/// A detected microbubble on the coarse grid with its offset bins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub i: usize,
    pub j: usize,
    pub kz: usize,
    pub kx: usize,
    pub prob: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// First index of the maximum; NaN never wins.
pub(crate) fn argmax<F: Real>(vals: impl Iterator<Item = F>) -> usize {
    let mut best = 0;
    let mut best_v = F::neg_infinity();
    for (i, v) in vals.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Threshold the detection map and read out offset bins.
pub fn detections_from_output<F: Real>(out: &NetOutput<F>, threshold: f64) -> Vec<Detection> {
    let (h, w) = out.detect_logit.dim();
    let mut dets = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let prob = sigmoid(out.detect_logit[[i, j]].to_f64().unwrap_or(f64::NAN));
            if prob >= threshold {
                let kx = argmax(out.xoff_logits.slice(ndarray::s![.., i, j]).iter().copied());
                let kz = argmax(out.zoff_logits.slice(ndarray::s![.., i, j]).iter().copied());
                dets.push(Detection { i, j, kz, kx, prob });
            }
        }
    }
    dets
}

/// Eval-mode detection on one `[m][H][W]` input.
pub fn predict<F: Real>(params: &NetParams<F>, input: ArrayView3<'_, F>, threshold: f64) -> Result<Vec<Detection>> {
    let out = forward_eval(params, input)?;
    Ok(detections_from_output(&out, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig {
            m: 1,
            stem_ch: 8,
            hidden_ch: 16,
            n_blocks: 2,
            ..NetConfig::default()
        }
    }

    #[test]
    fn default_count() {
        assert_eq!(param_count(&NetConfig::default()), 838_153);
        assert_eq!(param_count(&NetConfig { m: 1, ..NetConfig::default() }), 835_849);
        let k10 = NetConfig { k_bins: 10, ..NetConfig::default() };
        assert_eq!(param_count(&k10) - param_count(&NetConfig::default()), 1_548);
    }

    #[test]
    fn count_matches_allocation() {
        for cfg in [NetConfig::default(), tiny(), NetConfig { m: 5, k_bins: 10, hidden_ch: 768, ..tiny() }] {
            let p = NetParams::<f32>::init(&cfg, 1).unwrap();
            assert_eq!(p.trainable_count(), param_count(&cfg));
        }
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        assert!(NetConfig { hidden_ch: 768, ..NetConfig::default() }.validate().is_ok());
        assert!(NetConfig { hidden_ch: 769, ..NetConfig::default() }.validate().is_err());
        assert!(NetConfig { dw_kernel: 6, ..NetConfig::default() }.validate().is_err());
        assert!(NetConfig { m: 0, ..NetConfig::default() }.validate().is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(f64::INFINITY), 1.0);
        assert_eq!(sigmoid(f64::NEG_INFINITY), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax([1.0f32, 3.0, 3.0, 2.0].into_iter()), 1);
        assert_eq!(argmax([0.0f64; 4].into_iter()), 0);
    }
}
