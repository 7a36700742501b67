//! Convolutional image encoder: a small residual backbone with a top-down
//! fusion neck producing a 4-level feature pyramid at strides 4/8/16/32.
//! All levels share the channel width `feat_dim` and a normalized [0,1]^2
//! coordinate frame over the padded input.

use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Module, ParamSet, Session, Tensor};
use crate::scalar::Scalar;

pub const NUM_LEVELS: usize = 4;
pub const STRIDES: [usize; NUM_LEVELS] = [4, 8, 16, 32];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Input channels (grayscale images use 1).
    pub in_channels: usize,
    /// Trunk widths at strides 4/8/16/32.
    pub stage_widths: [usize; NUM_LEVELS],
    /// Residual blocks per stage.
    pub blocks_per_stage: [usize; NUM_LEVELS],
    /// Pyramid channel width d_v, shared by all levels.
    pub feat_dim: usize,
    /// Short side images are resized to before padding (inference contract).
    pub input_short_side: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 1,
            stage_widths: [32, 64, 96, 128],
            blocks_per_stage: [2, 2, 2, 2],
            feat_dim: 128,
            input_short_side: 256,
        }
    }
}

/// Multi-level features in a shared normalized coordinate frame. A
/// normalized point addresses the same image location at every level.
pub struct FeaturePyramid<T: Scalar> {
    /// Four maps `[B, feat_dim, H/s, W/s]` for s in 4/8/16/32.
    pub levels: Vec<Tensor<T>>,
    /// Padded input size `(h, w)` in pixels.
    pub image_size: (usize, usize),
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn batch(&self) -> usize {
        self.levels[0].shape()[0]
    }

    pub fn feat_dim(&self) -> usize {
        self.levels[0].shape()[1]
    }

    /// Total token count of all levels, per batch element.
    pub fn dense_token_count(&self) -> usize {
        self.levels
            .iter()
            .map(|l| l.shape()[2] * l.shape()[3])
            .sum()
    }
}

struct ConvBnRelu<T: Scalar> {
    conv: Conv2d<T>,
    bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    fn new<R: Rng>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(cin, cout, k, stride, false, rng),
            bn: BatchNorm2d::new(cout),
        }
    }

    fn forward(&self, sess: &Session<T>, x: &Tensor<T>) -> Tensor<T> {
        self.bn.forward(sess, &self.conv.forward(sess, x)).relu()
    }
}

impl<T: Scalar> Module<T> for ConvBnRelu<T> {
    fn collect(&self, prefix: &str, out: &mut ParamSet<T>) {
        self.conv.collect(&format!("{prefix}.conv"), out);
        self.bn.collect(&format!("{prefix}.bn"), out);
    }
}

struct ResidualBlock<T: Scalar> {
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    fn new<R: Rng>(width: usize, rng: &mut R) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(width, width, 3, 1, false, rng),
            bn1: BatchNorm2d::new(width),
            conv2: Conv2d::new(width, width, 3, 1, false, rng),
            bn2: BatchNorm2d::new(width),
        }
    }

    fn forward(&self, sess: &Session<T>, x: &Tensor<T>) -> Tensor<T> {
        let y = self.bn1.forward(sess, &self.conv1.forward(sess, x)).relu();
        let y = self.bn2.forward(sess, &self.conv2.forward(sess, &y));
        y.add(x).relu()
    }
}

impl<T: Scalar> Module<T> for ResidualBlock<T> {
    fn collect(&self, prefix: &str, out: &mut ParamSet<T>) {
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.bn1.collect(&format!("{prefix}.bn1"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        self.bn2.collect(&format!("{prefix}.bn2"), out);
    }
}

pub struct Encoder<T: Scalar> {
    pub config: EncoderConfig,
    stem1: ConvBnRelu<T>,
    stem2: ConvBnRelu<T>,
    downsamples: Vec<ConvBnRelu<T>>, // stages 1..3
    stages: Vec<Vec<ResidualBlock<T>>>,
    laterals: Vec<Conv2d<T>>,
    smooths: Vec<Conv2d<T>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng>(config: EncoderConfig, rng: &mut R) -> Self {
        let stem_width = (config.stage_widths[0] / 2).max(8);
        let stem1 = ConvBnRelu::new(config.in_channels, stem_width, 3, 2, rng);
        let stem2 = ConvBnRelu::new(stem_width, config.stage_widths[0], 3, 2, rng);
        let mut downsamples = Vec::new();
        let mut stages = Vec::new();
        for l in 0..NUM_LEVELS {
            if l > 0 {
                downsamples.push(ConvBnRelu::new(
                    config.stage_widths[l - 1],
                    config.stage_widths[l],
                    3,
                    2,
                    rng,
                ));
            }
            let blocks = (0..config.blocks_per_stage[l])
                .map(|_| ResidualBlock::new(config.stage_widths[l], rng))
                .collect();
            stages.push(blocks);
        }
        let laterals = (0..NUM_LEVELS)
            .map(|l| Conv2d::new(config.stage_widths[l], config.feat_dim, 1, 1, true, rng))
            .collect();
        let smooths = (0..NUM_LEVELS)
            .map(|_| Conv2d::new(config.feat_dim, config.feat_dim, 3, 1, true, rng))
            .collect();
        Encoder {
            config,
            stem1,
            stem2,
            downsamples,
            stages,
            laterals,
            smooths,
        }
    }

    /// Runs the backbone and neck on a `[B, C, H, W]` batch. H and W must be
    /// multiples of 32 and at least 32 (see [`preprocess`]).
    pub fn extract_features(&self, sess: &Session<T>, images: &Tensor<T>) -> Result<FeaturePyramid<T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::contract(format!(
                "expected [B,{},H,W] input, got {s:?}",
                self.config.in_channels
            )));
        }
        let (h, w) = (s[2], s[3]);
        if h < 32 || w < 32 {
            return Err(Error::contract(format!(
                "image {h}x{w} smaller than 32 px on a side"
            )));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::contract(format!(
                "image {h}x{w} not padded to a multiple of 32"
            )));
        }

        let mut x = self.stem1.forward(sess, images);
        x = self.stem2.forward(sess, &x);
        let mut trunk = Vec::with_capacity(NUM_LEVELS);
        for l in 0..NUM_LEVELS {
            if l > 0 {
                x = self.downsamples[l - 1].forward(sess, &x);
            }
            for block in &self.stages[l] {
                x = block.forward(sess, &x);
            }
            trunk.push(x.clone());
        }

        // top-down fusion
        let mut levels = vec![None; NUM_LEVELS];
        let mut upper: Option<Tensor<T>> = None;
        for l in (0..NUM_LEVELS).rev() {
            let mut p = self.laterals[l].forward(sess, &trunk[l]);
            if let Some(u) = upper {
                p = p.add(&u.upsample2x());
            }
            upper = Some(p.clone());
            levels[l] = Some(self.smooths[l].forward(sess, &p));
        }
        Ok(FeaturePyramid {
            levels: levels.into_iter().map(Option::unwrap).collect(),
            image_size: (h, w),
        })
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn collect(&self, prefix: &str, out: &mut ParamSet<T>) {
        self.stem1.collect(&format!("{prefix}.stem1"), out);
        self.stem2.collect(&format!("{prefix}.stem2"), out);
        for (i, d) in self.downsamples.iter().enumerate() {
            d.collect(&format!("{prefix}.down{}", i + 1), out);
        }
        for (l, stage) in self.stages.iter().enumerate() {
            for (b, block) in stage.iter().enumerate() {
                block.collect(&format!("{prefix}.stage{l}.block{b}"), out);
            }
        }
        for (l, c) in self.laterals.iter().enumerate() {
            c.collect(&format!("{prefix}.lateral{l}"), out);
        }
        for (l, c) in self.smooths.iter().enumerate() {
            c.collect(&format!("{prefix}.smooth{l}"), out);
        }
    }
}

/// Normalizes a `[H, W]` grayscale byte image to a zero-centered float map
/// and pads the bottom/right to multiples of 32. Returns the padded tensor
/// data `[C, H', W']`.
pub fn preprocess<T: Scalar>(pixels: &Array3<u8>) -> ArrayD<T> {
    let (c, h, w) = (pixels.shape()[0], pixels.shape()[1], pixels.shape()[2]);
    let hp = h.div_ceil(32) * 32;
    let wp = w.div_ceil(32) * 32;
    let mut out = ArrayD::<T>::zeros(IxDyn(&[c, hp, wp]));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[[ci, y, x]] = T::from_f64(pixels[[ci, y, x]] as f64 / 255.0 - 0.5);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            in_channels: 1,
            stage_widths: [8, 12, 16, 16],
            blocks_per_stage: [1, 1, 1, 1],
            feat_dim: 8,
            input_short_side: 64,
        }
    }

    #[test]
    fn stride_arithmetic_shapes() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let enc = Encoder::<f32>::new(small_config(), &mut rng);
        let x = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 1, 256, 256])));
        let pyr = enc.extract_features(&Session::eval(), &x).unwrap();
        let want = [64, 32, 16, 8];
        for (l, lvl) in pyr.levels.iter().enumerate() {
            assert_eq!(lvl.shape(), &[1, 8, want[l], want[l]]);
        }
    }

    #[test]
    fn rejects_small_or_unpadded() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let enc = Encoder::<f32>::new(small_config(), &mut rng);
        let too_small = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 1, 16, 64])));
        assert!(enc.extract_features(&Session::eval(), &too_small).is_err());
        let unpadded = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 1, 100, 96])));
        assert!(enc.extract_features(&Session::eval(), &unpadded).is_err());
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let enc = Encoder::<f64>::new(small_config(), &mut rng);
        let mut img_rng = ChaCha12Rng::seed_from_u64(2);
        let x = Tensor::constant(ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, 64, 64]), || {
            img_rng.random_range(-0.5..0.5)
        }));
        let a = enc.extract_features(&Session::eval(), &x).unwrap();
        let b = enc.extract_features(&Session::eval(), &x).unwrap();
        for (la, lb) in a.levels.iter().zip(b.levels.iter()) {
            assert_eq!(la.data(), lb.data());
        }
        for lvl in &a.levels {
            assert!(lvl.data().iter().all(|v| v.is_finite()));
        }
    }

    /// Pearson correlation between the finest level of the base image and
    /// the (cell-shifted) finest level of a translated copy.
    fn shift_correlation(img_px: usize, shift_px: usize, margin: usize) -> f64 {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let enc = Encoder::<f64>::new(small_config(), &mut rng);
        let mut img_rng = ChaCha12Rng::seed_from_u64(4);
        let base = ArrayD::from_shape_simple_fn(IxDyn(&[1, 1, img_px, img_px]), || {
            img_rng.random_range(-0.5..0.5)
        });
        let mut shifted = base.clone();
        for y in 0..img_px {
            for x in shift_px..img_px {
                shifted[[0, 0, y, x]] = base[[0, 0, y, x - shift_px]];
            }
        }
        let fa = enc
            .extract_features(&Session::eval(), &Tensor::constant(base))
            .unwrap();
        let fb = enc
            .extract_features(&Session::eval(), &Tensor::constant(shifted))
            .unwrap();
        let a = fa.levels[0].data();
        let b = fb.levels[0].data();
        let cells = img_px / 4;
        let shift_cells = shift_px / 4;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for c in 0..8 {
            for y in margin..cells - margin {
                for x in margin..cells - margin - shift_cells {
                    xs.push(a[[0, c, y, x]]);
                    ys.push(b[[0, c, y, x + shift_cells]]);
                }
            }
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = xs.iter().map(|a| (a - mx) * (a - mx)).sum();
        let vy: f64 = ys.iter().map(|b| (b - my) * (b - my)).sum();
        cov / (vx.sqrt() * vy.sqrt())
    }

    #[test]
    fn translation_shifts_finest_level() {
        // A whole-pyramid cell (32 px) translates every level integrally:
        // near-exact equivariance away from the zero-padding boundary.
        let corr32 = shift_correlation(256, 32, 12);
        assert!(corr32 >= 0.99, "32px shift correlation {corr32}");
        // One stride-4 cell is a sub-cell shift for the coarser levels, so
        // the top-down pathway only tracks it approximately.
        let corr4 = shift_correlation(256, 4, 12);
        assert!(corr4 >= 0.80, "4px shift correlation {corr4}");
    }

    #[test]
    fn gradient_reaches_every_parameter() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let enc = Encoder::<f64>::new(small_config(), &mut rng);
        let mut img_rng = ChaCha12Rng::seed_from_u64(6);
        let x = Tensor::constant(ArrayD::from_shape_simple_fn(IxDyn(&[2, 1, 64, 64]), || {
            img_rng.random_range(-0.5..0.5)
        }));
        let sess = Session::train();
        let pyr = enc.extract_features(&sess, &x).unwrap();
        // random loss over all levels
        let mut loss = Tensor::constant(ArrayD::zeros(IxDyn(&[])));
        for lvl in &pyr.levels {
            let w = Tensor::constant(ArrayD::from_shape_simple_fn(
                IxDyn(lvl.shape()),
                || img_rng.random_range(-1.0..1.0),
            ));
            loss = loss.add(&lvl.mul(&w).sum_all());
        }
        loss.backward();
        let mut set = ParamSet::new();
        enc.collect("encoder", &mut set);
        for (name, p) in &set.params {
            let g = sess.grad_of(p).unwrap_or_else(|| panic!("no grad for {name}"));
            let norm: f64 = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm > 0.0, "zero gradient for {name}");
        }
    }

    #[test]
    fn preprocess_pads_to_32() {
        let img = Array3::<u8>::from_elem((1, 100, 130), 128);
        let t = preprocess::<f32>(&img);
        assert_eq!(t.shape(), &[1, 128, 160]);
        assert!((t[[0, 0, 0]] - 0.00196).abs() < 1e-3);
        assert_eq!(t[[0, 120, 0]], 0.0, "padding is zero");
    }
}
