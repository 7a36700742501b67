//! Start Point Localization Module: start / centerline / region probability
//! heads on the finest pyramid level, their pointwise fusion, start-point
//! extraction from connected regions, and the detection loss.

use ndarray::{ArrayD, ArrayView2, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::nn::{bce_with_logits, smooth_l1, BatchNorm2d, Conv2d, Module, ParamSet, Session, Tensor};
use crate::scalar::Scalar;

/// Which probability maps participate in the fused start map.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub use_region: bool,
    pub use_center: bool,
    pub use_start: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            use_region: true,
            use_center: true,
            use_start: true,
        }
    }
}

impl FusionConfig {
    pub fn region_only() -> Self {
        FusionConfig {
            use_region: true,
            use_center: false,
            use_start: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SplmConfig {
    /// Connected-region threshold T on the fused map.
    pub threshold: f64,
    /// Channel width of the three Conv-BN-ReLU head layers.
    pub head_width: usize,
    #[serde(default)]
    pub fusion: FusionConfig,
}

impl Default for SplmConfig {
    fn default() -> Self {
        SplmConfig {
            threshold: 0.5,
            head_width: 32,
            fusion: FusionConfig::default(),
        }
    }
}

/// Sigmoid probability maps `[B, H, W]` at stride 4 plus the fused start
/// map; logits are kept for the numerically stable loss path.
pub struct ProbabilityMaps<T: Scalar> {
    pub f_start: Tensor<T>,
    pub f_center: Tensor<T>,
    pub f_region: Tensor<T>,
    pub fused: Tensor<T>,
    pub start_logits: Tensor<T>,
    pub center_logits: Tensor<T>,
    pub region_logits: Tensor<T>,
    pub stride: usize,
}

/// Pointwise fusion: the square root of the product of the selected maps;
/// a single selected map passes through unchanged.
pub fn fuse_maps<T: Scalar>(parts: &[&Tensor<T>]) -> Tensor<T> {
    assert!(!parts.is_empty(), "fusion needs at least one map");
    if parts.len() == 1 {
        return parts[0].clone();
    }
    let mut prod = parts[0].clone();
    for p in &parts[1..] {
        prod = prod.mul(p);
    }
    prod.sqrt_t()
}

impl<T: Scalar> ProbabilityMaps<T> {
    pub fn from_logits(
        start_logits: Tensor<T>,
        center_logits: Tensor<T>,
        region_logits: Tensor<T>,
        fusion: &FusionConfig,
        stride: usize,
    ) -> Self {
        let f_start = start_logits.sigmoid();
        let f_center = center_logits.sigmoid();
        let f_region = region_logits.sigmoid();
        let mut parts: Vec<&Tensor<T>> = Vec::new();
        if fusion.use_start {
            parts.push(&f_start);
        }
        if fusion.use_center {
            parts.push(&f_center);
        }
        if fusion.use_region {
            parts.push(&f_region);
        }
        assert!(!parts.is_empty(), "fusion config selects no maps");
        let fused = fuse_maps(&parts);
        ProbabilityMaps {
            fused,
            f_start,
            f_center,
            f_region,
            start_logits,
            center_logits,
            region_logits,
            stride,
        }
    }

    pub fn batch(&self) -> usize {
        self.fused.shape()[0]
    }

    /// Fused map of one batch element as a 2D view.
    pub fn fused_map(&self, b: usize) -> ArrayView2<'_, T> {
        self.fused
            .data()
            .index_axis(Axis(0), b)
            .into_dimensionality()
            .unwrap()
    }
}

/// Three Conv-BN-ReLU layers and a 1x1 projection to the three logit maps,
/// fed by the stride-4 pyramid level only.
pub struct SplmHead<T: Scalar> {
    pub config: SplmConfig,
    conv1: Conv2d<T>,
    bn1: BatchNorm2d<T>,
    conv2: Conv2d<T>,
    bn2: BatchNorm2d<T>,
    conv3: Conv2d<T>,
    bn3: BatchNorm2d<T>,
    proj: Conv2d<T>,
}

impl<T: Scalar> SplmHead<T> {
    pub fn new<R: Rng>(config: SplmConfig, feat_dim: usize, rng: &mut R) -> Self {
        let w = config.head_width;
        SplmHead {
            conv1: Conv2d::new(feat_dim, w, 3, 1, false, rng),
            bn1: BatchNorm2d::new(w),
            conv2: Conv2d::new(w, w, 3, 1, false, rng),
            bn2: BatchNorm2d::new(w),
            conv3: Conv2d::new(w, w, 3, 1, false, rng),
            bn3: BatchNorm2d::new(w),
            proj: Conv2d::new(w, 3, 1, 1, true, rng),
            config,
        }
    }

    /// Predicts the three probability maps from the finest pyramid level.
    pub fn forward(&self, sess: &Session<T>, pyramid: &FeaturePyramid<T>) -> ProbabilityMaps<T> {
        let x = &pyramid.levels[0];
        let (b, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let y = self.bn1.forward(sess, &self.conv1.forward(sess, x)).relu();
        let y = self.bn2.forward(sess, &self.conv2.forward(sess, &y)).relu();
        let y = self.bn3.forward(sess, &self.conv3.forward(sess, &y)).relu();
        let logits = self.proj.forward(sess, &y); // [B,3,H,W]
        let start = logits.narrow(1, 0, 1).reshape(&[b, h, w]);
        let center = logits.narrow(1, 1, 1).reshape(&[b, h, w]);
        let region = logits.narrow(1, 2, 1).reshape(&[b, h, w]);
        ProbabilityMaps::from_logits(start, center, region, &self.config.fusion, 4)
    }
}

impl<T: Scalar> Module<T> for SplmHead<T> {
    fn collect(&self, prefix: &str, out: &mut ParamSet<T>) {
        self.conv1.collect(&format!("{prefix}.conv1"), out);
        self.bn1.collect(&format!("{prefix}.bn1"), out);
        self.conv2.collect(&format!("{prefix}.conv2"), out);
        self.bn2.collect(&format!("{prefix}.bn2"), out);
        self.conv3.collect(&format!("{prefix}.conv3"), out);
        self.bn3.collect(&format!("{prefix}.bn3"), out);
        self.proj.collect(&format!("{prefix}.proj"), out);
    }
}

/// A detected text start: normalized image coordinates plus the mean fused
/// probability of its source region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StartPoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

/// Extracts start points from the fused map of one image: connected regions
/// of `{fused > threshold}` under 8-connectivity, one point per region at
/// the region's pixel centroid, confidence the mean fused value. Sorted by
/// descending confidence (ties keep scan order).
pub fn extract_start_points<T: Scalar>(
    fused: ArrayView2<'_, T>,
    threshold: f64,
) -> Result<Vec<StartPoint>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!(
            "threshold must lie in (0,1), got {threshold}"
        )));
    }
    let thr = T::from_f64(threshold);
    let (rows, cols) = fused.dim();
    let mut seen = vec![false; rows * cols];
    let mut points = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if seen[r * cols + c] || fused[[r, c]] <= thr {
                continue;
            }
            let mut stack = vec![(r, c)];
            seen[r * cols + c] = true;
            let mut sum_r = 0.0f64;
            let mut sum_c = 0.0f64;
            let mut sum_v = 0.0f64;
            let mut count = 0usize;
            while let Some((rr, cc)) = stack.pop() {
                sum_r += rr as f64;
                sum_c += cc as f64;
                sum_v += fused[[rr, cc]].to_f64();
                count += 1;
                for dr in -1i64..=1 {
                    for dc in -1i64..=1 {
                        let nr = rr as i64 + dr;
                        let nc = cc as i64 + dc;
                        if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if !seen[nr * cols + nc] && fused[[nr, nc]] > thr {
                            seen[nr * cols + nc] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
            }
            let n = count as f64;
            points.push(StartPoint {
                x: (sum_c / n + 0.5) / cols as f64,
                y: (sum_r / n + 0.5) / rows as f64,
                confidence: sum_v / n,
            });
        }
    }
    points.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
    Ok(points)
}

/// Ground-truth maps stacked over the batch, plus the text-region mask that
/// restricts the centerline and start losses.
pub struct DetectionTargets<T: Scalar> {
    pub gt_start: ArrayD<T>,
    pub gt_center: ArrayD<T>,
    pub gt_region: ArrayD<T>,
}

impl<T: Scalar> DetectionTargets<T> {
    pub fn from_maps(maps: &[crate::geom::GroundTruthMaps<T>]) -> Self {
        assert!(!maps.is_empty());
        let (h, w) = maps[0].gt_region.dim();
        let b = maps.len();
        let mut gt_start = ArrayD::<T>::zeros(IxDyn(&[b, h, w]));
        let mut gt_center = ArrayD::<T>::zeros(IxDyn(&[b, h, w]));
        let mut gt_region = ArrayD::<T>::zeros(IxDyn(&[b, h, w]));
        for (i, m) in maps.iter().enumerate() {
            gt_start
                .index_axis_mut(Axis(0), i)
                .assign(&m.gt_start.view().into_dyn());
            gt_center
                .index_axis_mut(Axis(0), i)
                .assign(&m.gt_center.view().into_dyn());
            gt_region
                .index_axis_mut(Axis(0), i)
                .assign(&m.gt_region.view().into_dyn());
        }
        DetectionTargets {
            gt_start,
            gt_center,
            gt_region,
        }
    }

    /// Mask equals the region support.
    pub fn mask(&self) -> ArrayD<T> {
        self.gt_region
            .mapv(|v| if v > T::zero() { T::one() } else { T::zero() })
    }
}

/// Detection loss components; each is a graph scalar.
pub struct DetectionLoss<T: Scalar> {
    pub total: Tensor<T>,
    pub start: Tensor<T>,
    pub center: Tensor<T>,
    pub region: Tensor<T>,
}

/// `L_det = L_s + L_c + L_r`: region BCE over all pixels, centerline BCE and
/// start Smooth-L1 restricted to the text-region mask. Every term is
/// mean-reduced over its own support; empty supports contribute zero.
pub fn detection_loss<T: Scalar>(
    maps: &ProbabilityMaps<T>,
    targets: &DetectionTargets<T>,
) -> Result<DetectionLoss<T>> {
    if maps.region_logits.shape() != targets.gt_region.shape() {
        return Err(Error::contract(format!(
            "prediction shape {:?} vs target shape {:?}",
            maps.region_logits.shape(),
            targets.gt_region.shape()
        )));
    }
    let mask = targets.mask();
    let mask_count = mask.iter().filter(|&&v| v > T::zero()).count();

    let region = bce_with_logits(&maps.region_logits, &targets.gt_region).mean_all();
    let (center, start) = if mask_count == 0 {
        let zero = || Tensor::constant(ArrayD::zeros(IxDyn(&[])));
        (zero(), zero())
    } else {
        let mask_t = Tensor::constant(mask);
        let scale = T::one() / T::from_usize(mask_count);
        let center = bce_with_logits(&maps.center_logits, &targets.gt_center)
            .mul(&mask_t)
            .sum_all()
            .scale(scale);
        // Smooth-L1 is applied to the start probability map itself.
        let start = smooth_l1(&maps.f_start, &targets.gt_start)
            .mul(&mask_t)
            .sum_all()
            .scale(scale);
        (center, start)
    };
    let total = start.add(&center).add(&region);
    Ok(DetectionLoss {
        total,
        start,
        center,
        region,
    })
}
