//! Label geometry: polygon annotations, centerlines, per-character reference
//! points, training-time disturbance and rasterized ground-truth maps.
//!
//! Everything here is a pure function of its inputs; `disturb` additionally
//! takes an explicit RNG.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// 2D point, image-pixel or normalized coordinates depending on context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Point { x, y }
    }

    pub fn add(self, o: Point<T>) -> Point<T> {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Point<T>) -> Point<T> {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, s: T) -> Point<T> {
        Point::new(self.x * s, self.y * s)
    }

    pub fn midpoint(self, o: Point<T>) -> Point<T> {
        Point::new(
            (self.x + o.x) / T::from_f64(2.0),
            (self.y + o.y) / T::from_f64(2.0),
        )
    }

    pub fn dist(self, o: Point<T>) -> T {
        let d = self.sub(o);
        (d.x * d.x + d.y * d.y).sqrt()
    }

    pub fn to_f64(self) -> Point<f64> {
        Point::new(self.x.to_f64(), self.y.to_f64())
    }
}

/// A text instance: boundary polygon plus transcription.
///
/// The vertex list stores the top edge in reading order followed by the
/// bottom edge in reverse reading order, so that the list traces a simple
/// closed polygon. Reading order is therefore encoded in the vertex order.
#[derive(Debug, Clone, PartialEq)]
pub struct TextAnnotation<T> {
    vertices: Vec<Point<T>>,
    transcription: String,
}

impl<T: Scalar> TextAnnotation<T> {
    /// Validates the vertex-count / transcription invariants and builds the
    /// annotation. Self-intersection is not checked here (the generator and
    /// parsers only produce simple bands); degenerate edges are rejected at
    /// resampling time.
    pub fn new(vertices: Vec<Point<T>>, transcription: impl Into<String>) -> Result<Self> {
        let transcription = transcription.into();
        if vertices.len() < 4 || vertices.len() % 2 != 0 {
            return Err(Error::contract(format!(
                "annotation needs an even vertex count >= 4, got {}",
                vertices.len()
            )));
        }
        if transcription.chars().count() == 0 {
            return Err(Error::contract("empty transcription"));
        }
        Ok(TextAnnotation {
            vertices,
            transcription,
        })
    }

    pub fn vertices(&self) -> &[Point<T>] {
        &self.vertices
    }

    pub fn transcription(&self) -> &str {
        &self.transcription
    }

    /// Number of characters m.
    pub fn len(&self) -> usize {
        self.transcription.chars().count()
    }

    pub fn is_empty(&self) -> bool {
        self.transcription.is_empty()
    }

    /// Top edge polyline in reading order.
    pub fn top_edge(&self) -> Vec<Point<T>> {
        self.vertices[..self.vertices.len() / 2].to_vec()
    }

    /// Bottom edge polyline in reading order (the stored second half runs
    /// backwards along the polygon boundary).
    pub fn bottom_edge(&self) -> Vec<Point<T>> {
        let mut b = self.vertices[self.vertices.len() / 2..].to_vec();
        b.reverse();
        b
    }

    /// The same physical region read in the opposite direction: top and
    /// bottom edges swap and both reverse.
    pub fn reverse_reading_order(&self) -> TextAnnotation<T> {
        let top = self.top_edge();
        let bottom = self.bottom_edge();
        let mut vertices: Vec<Point<T>> = bottom.into_iter().rev().collect();
        vertices.extend(top);
        TextAnnotation {
            vertices,
            transcription: self.transcription.chars().rev().collect(),
        }
    }

    /// Axis-aligned bounding box `(min, max)` of the polygon.
    pub fn bbox(&self) -> (Point<T>, Point<T>) {
        let mut min = self.vertices[0];
        let mut max = self.vertices[0];
        for v in &self.vertices {
            min.x = min.x.min(v.x);
            min.y = min.y.min(v.y);
            max.x = max.x.max(v.x);
            max.y = max.y.max(v.y);
        }
        (min, max)
    }

    /// Even-odd point-in-polygon test.
    pub fn contains(&self, p: Point<T>) -> bool {
        let mut inside = false;
        let n = self.vertices.len();
        let mut j = n - 1;
        for i in 0..n {
            let vi = self.vertices[i];
            let vj = self.vertices[j];
            if (vi.y > p.y) != (vj.y > p.y) {
                let x_cross = (vj.x - vi.x) * (p.y - vi.y) / (vj.y - vi.y) + vi.x;
                if p.x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }
}

/// Resamples the top and bottom edge polylines into `m + 1` points each,
/// equally spaced by arc length. The first and last output points coincide
/// with the polyline endpoints.
pub fn resample_edges<T: Scalar>(
    annotation: &TextAnnotation<T>,
    m: usize,
) -> Result<(Vec<Point<T>>, Vec<Point<T>>)> {
    if m < 1 {
        return Err(Error::contract("resample_edges requires m >= 1"));
    }
    let top = resample_polyline(&annotation.top_edge(), m + 1)?;
    let bottom = resample_polyline(&annotation.bottom_edge(), m + 1)?;
    Ok((top, bottom))
}

/// Arc-length resampling of a polyline into `count` points.
pub fn resample_polyline<T: Scalar>(poly: &[Point<T>], count: usize) -> Result<Vec<Point<T>>> {
    assert!(count >= 2);
    if poly.len() < 2 {
        return Err(Error::contract("polyline needs at least 2 vertices"));
    }
    let mut cum = Vec::with_capacity(poly.len());
    cum.push(T::zero());
    let mut total = T::zero();
    for w in poly.windows(2) {
        total = total + w[0].dist(w[1]);
        cum.push(total);
    }
    if total <= T::zero() {
        return Err(Error::contract("degenerate edge: zero total length"));
    }
    let mut out = Vec::with_capacity(count);
    let denom = T::from_usize(count - 1);
    let mut seg = 0usize;
    for k in 0..count {
        let target = total * T::from_usize(k) / denom;
        while seg + 1 < cum.len() - 1 && cum[seg + 1] < target {
            seg += 1;
        }
        let seg_len = cum[seg + 1] - cum[seg];
        let frac = if seg_len > T::zero() {
            (target - cum[seg]) / seg_len
        } else {
            T::zero()
        };
        let a = poly[seg];
        let b = poly[seg + 1];
        out.push(Point::new(
            a.x + (b.x - a.x) * frac,
            a.y + (b.y - a.y) * frac,
        ));
    }
    // Endpoints are exact by construction of the first/last targets, but
    // floating-point division can leave the last point a hair short.
    out[0] = poly[0];
    out[count - 1] = poly[poly.len() - 1];
    Ok(out)
}

/// Centerline vertices `c_i = (t_i + b_i) / 2`.
pub fn centerline<T: Scalar>(top: &[Point<T>], bottom: &[Point<T>]) -> Result<Vec<Point<T>>> {
    if top.len() != bottom.len() {
        return Err(Error::contract(format!(
            "centerline: edge length mismatch {} vs {}",
            top.len(),
            bottom.len()
        )));
    }
    Ok(top
        .iter()
        .zip(bottom.iter())
        .map(|(t, b)| t.midpoint(*b))
        .collect())
}

/// Per-character reference points `r_t = (c_t + c_{t+1}) / 2`.
pub fn reference_points<T: Scalar>(line: &[Point<T>]) -> Vec<Point<T>> {
    assert!(line.len() >= 2, "centerline needs at least 2 points");
    line.windows(2).map(|w| w[0].midpoint(w[1])).collect()
}

/// Per-character track of a text instance: centerline, reference points and
/// the start/end position tokens.
#[derive(Debug, Clone)]
pub struct CharacterTrack<T> {
    /// `m + 1` centerline points.
    pub centerline: Vec<Point<T>>,
    /// `m` reference points, one per character.
    pub reference_points: Vec<Point<T>>,
    /// `c_0`, the position token preceding the first character.
    pub sos_point: Point<T>,
    /// `c_m`, the position token following the last character.
    pub eos_point: Point<T>,
    /// Local text height `|t_i - b_i|` at each centerline vertex.
    pub heights: Vec<T>,
}

impl<T: Scalar> CharacterTrack<T> {
    pub fn from_annotation(annotation: &TextAnnotation<T>) -> Result<Self> {
        let m = annotation.len();
        let (top, bottom) = resample_edges(annotation, m)?;
        let line = centerline(&top, &bottom)?;
        let refs = reference_points(&line);
        let heights = top
            .iter()
            .zip(bottom.iter())
            .map(|(t, b)| t.dist(*b))
            .collect();
        Ok(CharacterTrack {
            sos_point: line[0],
            eos_point: line[m],
            centerline: line,
            reference_points: refs,
            heights,
        })
    }

    /// Local text height at the reference point of character `t`.
    pub fn height_at(&self, t: usize) -> T {
        (self.heights[t] + self.heights[t + 1]) / T::from_f64(2.0)
    }
}

/// Controls the training-time reference-point disturbance.
#[derive(Debug, Clone, Copy)]
pub struct DisturbanceConfig {
    pub enabled: bool,
    pub rng_seed: u64,
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        DisturbanceConfig {
            enabled: true,
            rng_seed: 0,
        }
    }
}

/// Disturbs the reference points of a track. Per point and axis, an i.i.d.
/// weight drawn uniformly from [-1, 1] scales half the absolute displacement
/// from the previous point; the predecessor of `r_0` is the SOS point `c_0`.
/// The draw order is fixed (x then y, per point) so results are reproducible
/// for a given RNG state.
pub fn disturb<T: Scalar, R: Rng>(
    track: &CharacterTrack<T>,
    enabled: bool,
    rng: &mut R,
) -> Vec<Point<T>> {
    if !enabled {
        return track.reference_points.clone();
    }
    let half = T::from_f64(0.5);
    let mut prev = track.sos_point;
    let mut out = Vec::with_capacity(track.reference_points.len());
    for &r in &track.reference_points {
        let eta_x = T::from_f64(rng.random_range(-1.0..=1.0));
        let eta_y = T::from_f64(rng.random_range(-1.0..=1.0));
        let dx = (r.x - prev.x).abs();
        let dy = (r.y - prev.y).abs();
        out.push(Point::new(
            r.x + eta_x * half * dx,
            r.y + eta_y * half * dy,
        ));
        prev = r;
    }
    out
}

/// Ground-truth maps at a fixed stride relative to the input image.
#[derive(Debug, Clone)]
pub struct GroundTruthMaps<T> {
    pub gt_region: Array2<T>,
    pub gt_center: Array2<T>,
    pub gt_start: Array2<T>,
    pub stride: usize,
}

/// Rasterization parameters for the ground-truth maps.
#[derive(Debug, Clone, Copy)]
pub struct RasterConfig {
    /// Map stride relative to the input image.
    pub stride: usize,
    /// Centerline band half-width as a fraction of the local text height.
    pub center_band_frac: f64,
    /// Start-disk radius as a fraction of the local text height at `r_0`.
    pub start_radius_frac: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        RasterConfig {
            stride: 4,
            center_band_frac: 0.25,
            start_radius_frac: 0.5,
        }
    }
}

/// Renders region / centerline / start maps for a set of annotations.
///
/// `map_size` is `(rows, cols)` of the output maps; the covered image area is
/// `map_size * stride`. Region is a hard mask of the polygon interior,
/// center a hard band around the centerline, start a disk on `r_0` decaying
/// linearly from 1 to 0 at its radius. Instances overlap by pointwise
/// maximum, and the center/start supports are clipped to the region support.
pub fn rasterize_ground_truth<T: Scalar>(
    annotations: &[TextAnnotation<T>],
    map_size: (usize, usize),
    cfg: &RasterConfig,
) -> Result<GroundTruthMaps<T>> {
    let (rows, cols) = map_size;
    let mut region = Array2::<T>::zeros((rows, cols));
    let mut center = Array2::<T>::zeros((rows, cols));
    let mut start = Array2::<T>::zeros((rows, cols));
    let stride = T::from_usize(cfg.stride);
    let img_w = T::from_usize(cols * cfg.stride);
    let img_h = T::from_usize(rows * cfg.stride);

    for (idx, ann) in annotations.iter().enumerate() {
        let (min, max) = ann.bbox();
        if max.x < T::zero() || max.y < T::zero() || min.x > img_w || min.y > img_h {
            eprintln!("warning: annotation {idx} lies outside the image, clipped");
            continue;
        }
        if min.x < T::zero() || min.y < T::zero() || max.x > img_w || max.y > img_h {
            eprintln!("warning: annotation {idx} extends outside the image, clipped");
        }
        let track = CharacterTrack::from_annotation(ann)?;
        let r0 = track.reference_points[0];
        let radius = track.height_at(0) * T::from_f64(cfg.start_radius_frac);
        let band = T::from_f64(cfg.center_band_frac);

        // Map-pixel range covered by the polygon (pixel centers).
        let c0 = ((min.x / stride).to_f64().floor() as isize - 1).max(0) as usize;
        let c1 = (((max.x / stride).to_f64().ceil() as isize + 1).max(0) as usize).min(cols);
        let r0_px = ((min.y / stride).to_f64().floor() as isize - 1).max(0) as usize;
        let r1_px = (((max.y / stride).to_f64().ceil() as isize + 1).max(0) as usize).min(rows);

        for row in r0_px..r1_px {
            for col in c0..c1 {
                let p = Point::new(
                    (T::from_usize(col) + T::from_f64(0.5)) * stride,
                    (T::from_usize(row) + T::from_f64(0.5)) * stride,
                );
                if !ann.contains(p) {
                    continue;
                }
                region[[row, col]] = T::one();

                let (d_line, h_local) = distance_to_centerline(&track, p);
                if d_line <= band * h_local {
                    center[[row, col]] = T::one();
                }
                if radius > T::zero() {
                    let d = p.dist(r0);
                    if d < radius {
                        let v = T::one() - d / radius;
                        if v > start[[row, col]] {
                            start[[row, col]] = v;
                        }
                    }
                }
            }
        }
    }
    Ok(GroundTruthMaps {
        gt_region: region,
        gt_center: center,
        gt_start: start,
        stride: cfg.stride,
    })
}

/// Distance from `p` to the centerline polyline plus the local text height
/// interpolated at the closest point.
fn distance_to_centerline<T: Scalar>(track: &CharacterTrack<T>, p: Point<T>) -> (T, T) {
    let mut best = T::infinity();
    let mut best_h = track.heights[0];
    for i in 0..track.centerline.len() - 1 {
        let a = track.centerline[i];
        let b = track.centerline[i + 1];
        let ab = b.sub(a);
        let len2 = ab.x * ab.x + ab.y * ab.y;
        let t = if len2 > T::zero() {
            ((p.x - a.x) * ab.x + (p.y - a.y) * ab.y) / len2
        } else {
            T::zero()
        }
        .max(T::zero())
        .min(T::one());
        let q = Point::new(a.x + ab.x * t, a.y + ab.y * t);
        let d = p.dist(q);
        if d < best {
            best = d;
            best_h = track.heights[i] + (track.heights[i + 1] - track.heights[i]) * t;
        }
    }
    (best, best_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn rect_annotation(w: f64, h: f64, text: &str) -> TextAnnotation<f64> {
        TextAnnotation::new(
            vec![
                Point::new(0.0, 0.0),
                Point::new(w, 0.0),
                Point::new(w, h),
                Point::new(0.0, h),
            ],
            text,
        )
        .unwrap()
    }

    #[test]
    fn resample_rectangle_endpoints() {
        let ann = rect_annotation(4.0, 2.0, "a");
        let (top, bottom) = resample_edges(&ann, 1).unwrap();
        assert_eq!(top, vec![Point::new(0.0, 0.0), Point::new(4.0, 0.0)]);
        assert_eq!(bottom, vec![Point::new(0.0, 2.0), Point::new(4.0, 2.0)]);
    }

    #[test]
    fn resample_rectangle_midpoint() {
        let ann = rect_annotation(4.0, 2.0, "ab");
        let (top, _) = resample_edges(&ann, 2).unwrap();
        assert_eq!(
            top,
            vec![
                Point::new(0.0, 0.0),
                Point::new(2.0, 0.0),
                Point::new(4.0, 0.0)
            ]
        );
    }

    /// Independent oracle: densify the polyline to `n` linear subdivisions,
    /// accumulate arc length over the dense chain and pick the closest dense
    /// point for each target arc length.
    fn dense_resample_oracle(poly: &[Point<f64>], count: usize, n: usize) -> Vec<Point<f64>> {
        let mut dense = Vec::with_capacity(n * (poly.len() - 1) + 1);
        for w in poly.windows(2) {
            for k in 0..n {
                let t = k as f64 / n as f64;
                dense.push(Point::new(
                    w[0].x + (w[1].x - w[0].x) * t,
                    w[0].y + (w[1].y - w[0].y) * t,
                ));
            }
        }
        dense.push(poly[poly.len() - 1]);
        let mut cum = vec![0.0];
        for w in dense.windows(2) {
            cum.push(cum.last().unwrap() + w[0].dist(w[1]));
        }
        let total = *cum.last().unwrap();
        (0..count)
            .map(|k| {
                let target = total * k as f64 / (count - 1) as f64;
                // nearest dense sample with linear refinement
                let i = cum.partition_point(|&c| c < target).min(cum.len() - 1);
                if i == 0 {
                    return dense[0];
                }
                let seg = cum[i] - cum[i - 1];
                let f = if seg > 0.0 { (target - cum[i - 1]) / seg } else { 0.0 };
                Point::new(
                    dense[i - 1].x + (dense[i].x - dense[i - 1].x) * f,
                    dense[i - 1].y + (dense[i].y - dense[i - 1].y) * f,
                )
            })
            .collect()
    }

    #[test]
    fn resample_curved_edge_matches_dense_oracle() {
        let curved = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.8),
            Point::new(2.5, 1.0),
            Point::new(4.0, 0.6),
            Point::new(5.0, -0.2),
        ];
        let got = resample_polyline(&curved, 5).unwrap();
        let want = dense_resample_oracle(&curved, 5, 10_000);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!(g.dist(*w) < 1e-6, "got {g:?} want {w:?}");
        }
    }

    #[test]
    fn resample_rejects_degenerate_edge() {
        let ann = TextAnnotation::new(
            vec![
                Point::new(1.0, 1.0),
                Point::new(1.0, 1.0),
                Point::new(1.0, 2.0),
                Point::new(1.0, 2.0),
            ],
            "x",
        )
        .unwrap();
        assert!(resample_edges(&ann, 1).is_err());
    }

    #[test]
    fn centerline_trivials() {
        let top = vec![Point::new(0.0, 0.0), Point::new(2.0, 0.0)];
        let bottom = vec![Point::new(0.0, 2.0), Point::new(2.0, 2.0)];
        assert_eq!(
            centerline(&top, &bottom).unwrap(),
            vec![Point::new(0.0, 1.0), Point::new(2.0, 1.0)]
        );
        // degenerate band: identical edges
        assert_eq!(centerline(&top, &top).unwrap(), top);
        assert!(centerline(&top, &bottom[..1].to_vec()).is_err());
    }

    #[test]
    fn reference_points_trivials() {
        let c = vec![Point::new(0.0, 1.0), Point::new(2.0, 1.0)];
        assert_eq!(reference_points(&c), vec![Point::new(1.0, 1.0)]);
        let mut rev = c.clone();
        rev.reverse();
        let mut want = reference_points(&c);
        want.reverse();
        assert_eq!(reference_points(&rev), want);
    }

    #[test]
    fn disturb_respects_bounds_and_fixed_points() {
        let ann = rect_annotation(8.0, 2.0, "ab");
        let track = CharacterTrack::from_annotation(&ann).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..200 {
            let d = disturb(&track, true, &mut rng);
            let mut prev = track.sos_point;
            for (r, rd) in track.reference_points.iter().zip(d.iter()) {
                assert!((rd.x - r.x).abs() <= 0.5 * (r.x - prev.x).abs() + 1e-12);
                assert!((rd.y - r.y).abs() <= 0.5 * (r.y - prev.y).abs() + 1e-12);
                prev = *r;
            }
        }
    }

    #[test]
    fn disturb_zero_displacement_is_identity() {
        // straight horizontal line: y displacement between consecutive points is 0
        let ann = rect_annotation(8.0, 2.0, "abcd");
        let track = CharacterTrack::from_annotation(&ann).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let d = disturb(&track, true, &mut rng);
        for (r, rd) in track.reference_points.iter().zip(d.iter()) {
            assert_eq!(r.y, rd.y, "no vertical displacement, no vertical shift");
        }
        let undisturbed = disturb(&track, false, &mut rng);
        assert_eq!(undisturbed, track.reference_points);
    }

    /// Kolmogorov-Smirnov p-value (asymptotic) for a sample against U[lo, hi].
    fn ks_uniform_p(samples: &mut [f64], lo: f64, hi: f64) -> f64 {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len() as f64;
        let mut d: f64 = 0.0;
        for (i, &s) in samples.iter().enumerate() {
            let cdf = ((s - lo) / (hi - lo)).clamp(0.0, 1.0);
            let lo_e = i as f64 / n;
            let hi_e = (i + 1) as f64 / n;
            d = d.max((cdf - lo_e).abs()).max((hi_e - cdf).abs());
        }
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        let mut p = 0.0;
        for k in 1..101 {
            let k = k as f64;
            p += 2.0 * (-1.0f64).powi(k as i32 - 1) * (-2.0 * k * k * lambda * lambda).exp();
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn disturb_offsets_are_uniform() {
        // one reference point with a known predecessor displacement
        let ann = rect_annotation(8.0, 6.0, "ab");
        let track = CharacterTrack::from_annotation(&ann).unwrap();
        let t = 1usize; // second point, predecessor is r_0
        let prev = track.reference_points[0];
        let r = track.reference_points[t];
        let bound_x = 0.5 * (r.x - prev.x).abs();
        let mut rng = ChaCha12Rng::seed_from_u64(1234);
        let mut xs = Vec::with_capacity(1000);
        for _ in 0..1000 {
            let d = disturb(&track, true, &mut rng);
            xs.push(d[t].x - r.x);
        }
        let p = ks_uniform_p(&mut xs, -bound_x, bound_x);
        assert!(p > 0.01, "KS p = {p}");
    }

    #[test]
    fn rasterize_empty_is_zero() {
        let maps =
            rasterize_ground_truth::<f64>(&[], (16, 16), &RasterConfig::default()).unwrap();
        assert!(maps.gt_region.iter().all(|&v| v == 0.0));
        assert!(maps.gt_center.iter().all(|&v| v == 0.0));
        assert!(maps.gt_start.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rasterize_center_strictly_inside_region() {
        let ann = TextAnnotation::new(
            vec![
                Point::new(8.0, 16.0),
                Point::new(52.0, 16.0),
                Point::new(52.0, 32.0),
                Point::new(8.0, 32.0),
            ],
            "abc",
        )
        .unwrap();
        let maps = rasterize_ground_truth(&[ann], (16, 16), &RasterConfig::default()).unwrap();
        let region: usize = maps.gt_region.iter().filter(|&&v| v > 0.0).count();
        let center: usize = maps.gt_center.iter().filter(|&&v| v > 0.0).count();
        assert!(center > 0);
        assert!(center < region, "center {center} region {region}");
        for (c, r) in maps.gt_center.iter().zip(maps.gt_region.iter()) {
            assert!(*c == 0.0 || *r > 0.0);
        }
        for (s, r) in maps.gt_start.iter().zip(maps.gt_region.iter()) {
            assert!(*s == 0.0 || *r > 0.0);
        }
    }

    /// 8-connectivity component counter used as the oracle.
    fn count_components(map: &Array2<f64>, thr: f64) -> usize {
        let (rows, cols) = map.dim();
        let mut seen = vec![false; rows * cols];
        let mut count = 0;
        for r in 0..rows {
            for c in 0..cols {
                if map[[r, c]] <= thr || seen[r * cols + c] {
                    continue;
                }
                count += 1;
                let mut stack = vec![(r, c)];
                seen[r * cols + c] = true;
                while let Some((rr, cc)) = stack.pop() {
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let nr = rr as i64 + dr;
                            let nc = cc as i64 + dc;
                            if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                                continue;
                            }
                            let (nr, nc) = (nr as usize, nc as usize);
                            if !seen[nr * cols + nc] && map[[nr, nc]] > thr {
                                seen[nr * cols + nc] = true;
                                stack.push((nr, nc));
                            }
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn rasterize_two_instances_two_start_components() {
        let a = TextAnnotation::new(
            vec![
                Point::new(4.0, 8.0),
                Point::new(56.0, 8.0),
                Point::new(56.0, 24.0),
                Point::new(4.0, 24.0),
            ],
            "abc",
        )
        .unwrap();
        let b = TextAnnotation::new(
            vec![
                Point::new(4.0, 40.0),
                Point::new(56.0, 40.0),
                Point::new(56.0, 56.0),
                Point::new(4.0, 56.0),
            ],
            "xy",
        )
        .unwrap();
        let maps = rasterize_ground_truth(&[a, b], (16, 16), &RasterConfig::default()).unwrap();
        assert_eq!(count_components(&maps.gt_start, 0.5), 2);
    }

    proptest! {
        #[test]
        fn midpoint_identities_hold(
            pts in proptest::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 2..12)
        ) {
            let top: Vec<Point<f64>> = pts.iter().map(|&(x, y)| Point::new(x, y)).collect();
            let bottom: Vec<Point<f64>> =
                pts.iter().map(|&(x, y)| Point::new(x + 1.0, y + 3.0)).collect();
            let c = centerline(&top, &bottom).unwrap();
            for i in 0..c.len() {
                prop_assert!((c[i].x - (top[i].x + bottom[i].x) / 2.0).abs() < 1e-12);
                prop_assert!((c[i].y - (top[i].y + bottom[i].y) / 2.0).abs() < 1e-12);
            }
            let r = reference_points(&c);
            for t in 0..r.len() {
                prop_assert!((r[t].x - (c[t].x + c[t + 1].x) / 2.0).abs() < 1e-12);
                prop_assert!((r[t].y - (c[t].y + c[t + 1].y) / 2.0).abs() < 1e-12);
            }
        }

        #[test]
        fn reading_order_reversal_reverses_references(
            w in 10.0f64..60.0, h in 2.0f64..12.0, len in 1usize..9
        ) {
            let text: String = std::iter::repeat('a').take(len).collect();
            let ann = rect_annotation(w, h, &text);
            let fwd = CharacterTrack::from_annotation(&ann).unwrap();
            let rev = CharacterTrack::from_annotation(&ann.reverse_reading_order()).unwrap();
            let mut expect = fwd.reference_points.clone();
            expect.reverse();
            for (a, b) in rev.reference_points.iter().zip(expect.iter()) {
                prop_assert!(a.dist(*b) < 1e-9);
            }
        }

        #[test]
        fn convex_annotation_references_inside(
            w in 8.0f64..50.0, h in 3.0f64..20.0, skew in -5.0f64..5.0, len in 1usize..8
        ) {
            // convex trapezoid
            let text: String = std::iter::repeat('x').take(len).collect();
            let ann = TextAnnotation::new(
                vec![
                    Point::new(0.0, 0.0),
                    Point::new(w, skew.max(0.0)),
                    Point::new(w, skew.max(0.0) + h),
                    Point::new(0.0, h - skew.min(0.0)),
                ],
                &text,
            ).unwrap();
            let track = CharacterTrack::from_annotation(&ann).unwrap();
            for r in &track.reference_points {
                prop_assert!(ann.contains(*r), "reference {r:?} outside polygon");
            }
        }
    }
}
