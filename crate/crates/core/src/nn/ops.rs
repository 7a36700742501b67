//! Convolution, bilinear grid sampling and loss kernels.
//!
//! These are the ops with hand-written backward passes; everything else in
//! the stack is composed from the primitives in [`super::tensor`].

use ndarray::{Array2, ArrayD, ArrayView3, ArrayViewMut3, Axis, IxDyn};

use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Lowers one padded image into a `[C*kh*kw, Ho*Wo]` column matrix.
fn im2col<T: Scalar>(
    img: ArrayView3<T>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<T> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut col = Array2::<T>::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut out_row = col.row_mut(row);
                let out = out_row.as_slice_mut().unwrap();
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[oy * wo + ox] = img[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatters a column-matrix gradient back onto the image.
fn col2im<T: Scalar>(
    col: &Array2<T>,
    mut img: ArrayViewMut3<T>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = col.row(row);
                let src = src_row.as_slice().unwrap();
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[[ci, iy as usize, ix as usize]] += src[oy * wo + ox];
                    }
                }
            }
        }
    }
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// 2D convolution of `x: [B,Cin,H,W]` with `w: [Cout,Cin,k,k]`.
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize) -> Tensor<T> {
    let xs = x.shape().to_vec();
    let ws = w.shape().to_vec();
    assert_eq!(xs.len(), 4);
    assert_eq!(ws.len(), 4);
    assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
    assert_eq!(ws[2], ws[3], "square kernels only");
    let (batch, cin, h, win) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, k) = (ws[0], ws[2]);
    let ho = conv_out(h, k, stride, pad);
    let wo = conv_out(win, k, stride, pad);

    let w_mat = w
        .data()
        .view()
        .into_shape_with_order((cout, cin * k * k))
        .unwrap()
        .to_owned();
    let mut value = ArrayD::<T>::zeros(IxDyn(&[batch, cout, ho, wo]));
    for b in 0..batch {
        let img = x
            .data()
            .index_axis(Axis(0), b)
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        let col = im2col(img, k, stride, pad, ho, wo);
        let y = w_mat.dot(&col);
        value
            .index_axis_mut(Axis(0), b)
            .assign(&y.into_shape_with_order((cout, ho, wo)).unwrap());
    }

    let parents = vec![x.clone(), w.clone()];
    Tensor::from_op(
        value,
        parents,
        Box::new(move |g, parents| {
            let (x, w) = (&parents[0], &parents[1]);
            let w_mat = w
                .data()
                .view()
                .into_shape_with_order((cout, cin * k * k))
                .unwrap()
                .to_owned();
            let mut gw = Array2::<T>::zeros((cout, cin * k * k));
            let mut gx = ArrayD::<T>::zeros(IxDyn(&[batch, cin, h, win]));
            for b in 0..batch {
                let g_mat = g
                    .index_axis(Axis(0), b)
                    .into_shape_with_order((cout, ho * wo))
                    .unwrap()
                    .to_owned();
                if w.requires_grad() {
                    let img = x
                        .data()
                        .index_axis(Axis(0), b)
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap();
                    let col = im2col(img, k, stride, pad, ho, wo);
                    gw = gw + g_mat.dot(&col.t());
                }
                if x.requires_grad() {
                    let gcol = w_mat.t().dot(&g_mat);
                    let dst = gx
                        .index_axis_mut(Axis(0), b)
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap();
                    col2im(&gcol, dst, k, stride, pad, ho, wo);
                }
            }
            if x.requires_grad() {
                x.accumulate(&gx);
            }
            if w.requires_grad() {
                w.accumulate(
                    &gw.into_shape_with_order(IxDyn(&[cout, cin, k, k]))
                        .unwrap(),
                );
            }
        }),
    )
}

/// Bilinear sampling of `features: [B,C,H,W]` at `points: [N,P,2]` given in
/// normalized `[0,1]^2` coordinates (x, y order). `batch_idx[n]` selects the
/// batch element each point row samples from. Uses the align-corners
/// convention `u -> u * (W - 1)`; coordinates are clamped to `[0,1]` first
/// (the clamp zeroes the coordinate gradient outside the range).
///
/// Returns `[N,P,C]`; differentiable w.r.t. both features and points.
pub fn grid_sample<T: Scalar>(
    features: &Tensor<T>,
    points: &Tensor<T>,
    batch_idx: &[usize],
) -> Tensor<T> {
    let fs = features.shape().to_vec();
    let ps = points.shape().to_vec();
    assert_eq!(fs.len(), 4);
    assert_eq!(ps.len(), 3);
    assert_eq!(ps[2], 2);
    assert_eq!(ps[0], batch_idx.len());
    let (c, h, w) = (fs[1], fs[2], fs[3]);
    let (n, p) = (ps[0], ps[1]);

    // Resolve each point to its four neighbours once; forward and backward
    // share the logic through this closure.
    let resolve = move |px: T, py: T| -> (usize, usize, T, T, bool, bool) {
        let cx = px.max(T::zero()).min(T::one());
        let cy = py.max(T::zero()).min(T::one());
        let col = cx * T::from_usize(w - 1);
        let row = cy * T::from_usize(h - 1);
        let i0 = if w > 1 {
            (col.floor().to_f64() as isize).clamp(0, w as isize - 2) as usize
        } else {
            0
        };
        let j0 = if h > 1 {
            (row.floor().to_f64() as isize).clamp(0, h as isize - 2) as usize
        } else {
            0
        };
        let fx = if w > 1 { col - T::from_usize(i0) } else { T::zero() };
        let fy = if h > 1 { row - T::from_usize(j0) } else { T::zero() };
        let x_active = px > T::zero() && px < T::one() && w > 1;
        let y_active = py > T::zero() && py < T::one() && h > 1;
        (i0, j0, fx, fy, x_active, y_active)
    };

    let mut value = ArrayD::<T>::zeros(IxDyn(&[n, p, c]));
    {
        let f = features.data();
        let pts = points.data();
        for ni in 0..n {
            let b = batch_idx[ni];
            for pi in 0..p {
                let (i0, j0, fx, fy, _, _) = resolve(pts[[ni, pi, 0]], pts[[ni, pi, 1]]);
                let i1 = (i0 + 1).min(w - 1);
                let j1 = (j0 + 1).min(h - 1);
                for ci in 0..c {
                    let v00 = f[[b, ci, j0, i0]];
                    let v01 = f[[b, ci, j0, i1]];
                    let v10 = f[[b, ci, j1, i0]];
                    let v11 = f[[b, ci, j1, i1]];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    value[[ni, pi, ci]] = top + (bot - top) * fy;
                }
            }
        }
    }

    let batch_idx = batch_idx.to_vec();
    Tensor::from_op(
        value,
        vec![features.clone(), points.clone()],
        Box::new(move |g, parents| {
            let (features, points) = (&parents[0], &parents[1]);
            let f = features.data();
            let pts = points.data();
            let mut gf = ArrayD::<T>::zeros(IxDyn(features.shape()));
            let mut gp = ArrayD::<T>::zeros(IxDyn(points.shape()));
            for ni in 0..n {
                let b = batch_idx[ni];
                for pi in 0..p {
                    let px = pts[[ni, pi, 0]];
                    let py = pts[[ni, pi, 1]];
                    let (i0, j0, fx, fy, x_active, y_active) = resolve(px, py);
                    let i1 = (i0 + 1).min(w - 1);
                    let j1 = (j0 + 1).min(h - 1);
                    let mut dcol = T::zero();
                    let mut drow = T::zero();
                    for ci in 0..c {
                        let go = g[[ni, pi, ci]];
                        let w00 = (T::one() - fx) * (T::one() - fy);
                        let w01 = fx * (T::one() - fy);
                        let w10 = (T::one() - fx) * fy;
                        let w11 = fx * fy;
                        if features.requires_grad() {
                            gf[[b, ci, j0, i0]] += go * w00;
                            gf[[b, ci, j0, i1]] += go * w01;
                            gf[[b, ci, j1, i0]] += go * w10;
                            gf[[b, ci, j1, i1]] += go * w11;
                        }
                        if points.requires_grad() {
                            let v00 = f[[b, ci, j0, i0]];
                            let v01 = f[[b, ci, j0, i1]];
                            let v10 = f[[b, ci, j1, i0]];
                            let v11 = f[[b, ci, j1, i1]];
                            dcol += go
                                * ((v01 - v00) * (T::one() - fy) + (v11 - v10) * fy);
                            drow += go
                                * ((v10 - v00) * (T::one() - fx) + (v11 - v01) * fx);
                        }
                    }
                    if points.requires_grad() {
                        if x_active {
                            gp[[ni, pi, 0]] += dcol * T::from_usize(w - 1);
                        }
                        if y_active {
                            gp[[ni, pi, 1]] += drow * T::from_usize(h - 1);
                        }
                    }
                }
            }
            if features.requires_grad() {
                features.accumulate(&gf);
            }
            if points.requires_grad() {
                points.accumulate(&gp);
            }
        }),
    )
}

/// Elementwise binary cross-entropy on logits against constant targets.
/// Stable form `max(x,0) - x t + ln(1 + exp(-|x|))`.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, targets: &ArrayD<T>) -> Tensor<T> {
    assert_eq!(logits.shape(), targets.shape());
    let value = ndarray::Zip::from(logits.data())
        .and(targets)
        .map_collect(|&x, &t| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln());
    let t = targets.clone();
    Tensor::from_op(
        value,
        vec![logits.clone()],
        Box::new(move |g, parents| {
            let x = parents[0].data();
            let gx = ndarray::Zip::from(g)
                .and(x)
                .and(&t)
                .map_collect(|&gv, &xv, &tv| gv * (T::one() / (T::one() + (-xv).exp()) - tv));
            parents[0].accumulate(&gx);
        }),
    )
}

/// Per-row cross entropy of `logits: [N,K]` against class indices.
/// Returns `[N]`; rows with `target == usize::MAX` are masked to zero loss.
pub fn cross_entropy_logits<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Tensor<T> {
    let shape = logits.shape().to_vec();
    assert_eq!(shape.len(), 2);
    assert_eq!(shape[0], targets.len());
    let (n, k) = (shape[0], shape[1]);
    let x = logits.data();
    let mut value = ArrayD::<T>::zeros(IxDyn(&[n]));
    for row in 0..n {
        if targets[row] == usize::MAX {
            continue;
        }
        let mut maxv = T::neg_infinity();
        for col in 0..k {
            maxv = maxv.max(x[[row, col]]);
        }
        let mut lse = T::zero();
        for col in 0..k {
            lse = lse + (x[[row, col]] - maxv).exp();
        }
        value[[row]] = lse.ln() + maxv - x[[row, targets[row]]];
    }
    let targets = targets.to_vec();
    Tensor::from_op(
        value,
        vec![logits.clone()],
        Box::new(move |g, parents| {
            let x = parents[0].data();
            let mut gx = ArrayD::<T>::zeros(IxDyn(&[n, k]));
            for row in 0..n {
                if targets[row] == usize::MAX {
                    continue;
                }
                let gr = g[[row]];
                let mut maxv = T::neg_infinity();
                for col in 0..k {
                    maxv = maxv.max(x[[row, col]]);
                }
                let mut lse = T::zero();
                for col in 0..k {
                    lse = lse + (x[[row, col]] - maxv).exp();
                }
                for col in 0..k {
                    let p = (x[[row, col]] - maxv).exp() / lse;
                    let onehot = if col == targets[row] { T::one() } else { T::zero() };
                    gx[[row, col]] = gr * (p - onehot);
                }
            }
            parents[0].accumulate(&gx);
        }),
    )
}

/// Elementwise Smooth-L1 against constant targets:
/// `0.5 r^2` for `|r| < 1`, else `|r| - 0.5`.
pub fn smooth_l1<T: Scalar>(pred: &Tensor<T>, targets: &ArrayD<T>) -> Tensor<T> {
    assert_eq!(pred.shape(), targets.shape());
    let half = T::from_f64(0.5);
    let value = ndarray::Zip::from(pred.data())
        .and(targets)
        .map_collect(|&p, &t| {
            let r = p - t;
            if r.abs() < T::one() {
                half * r * r
            } else {
                r.abs() - half
            }
        });
    let t = targets.clone();
    Tensor::from_op(
        value,
        vec![pred.clone()],
        Box::new(move |g, parents| {
            let p = parents[0].data();
            let gx = ndarray::Zip::from(g)
                .and(p)
                .and(&t)
                .map_collect(|&gv, &pv, &tv| gv * (pv - tv).max(-T::one()).min(T::one()));
            parents[0].accumulate(&gx);
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn conv2d_identity_kernel() {
        // 1x1 kernel with weight 1 reproduces the input
        let x = Tensor::<f64>::leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let w = Tensor::leaf(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 1.0));
        let y = conv2d(&x, &w, 1, 0);
        assert_eq!(y.data().as_slice().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        y.sum_all().backward();
        assert_eq!(w.grad().unwrap().as_slice().unwrap(), &[10.0]);
        assert_eq!(x.grad().unwrap().as_slice().unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn conv2d_stride_and_pad_shapes() {
        let x = Tensor::<f64>::constant(ArrayD::zeros(IxDyn(&[2, 3, 8, 8])));
        let w = Tensor::constant(ArrayD::zeros(IxDyn(&[5, 3, 3, 3])));
        assert_eq!(conv2d(&x, &w, 2, 1).shape(), &[2, 5, 4, 4]);
        assert_eq!(conv2d(&x, &w, 1, 1).shape(), &[2, 5, 8, 8]);
    }

    #[test]
    fn grid_sample_center_and_corner() {
        // 2x2 map [[0,1],[2,3]]
        let f = Tensor::<f64>::leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
        );
        let pts = Tensor::constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 2, 2]), vec![0.5, 0.5, 0.0, 0.0]).unwrap(),
        );
        let y = grid_sample(&f, &pts, &[0]);
        assert!((y.data()[[0, 0, 0]] - 1.5).abs() < 1e-12, "four-cell average");
        assert_eq!(y.data()[[0, 1, 0]], 0.0, "align-corners corner hit");
    }

    #[test]
    fn bce_matches_naive_formula() {
        let logits = Tensor::<f64>::leaf(
            ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.3, -1.2, 2.0]).unwrap(),
        );
        let targets = ArrayD::from_shape_vec(IxDyn(&[3]), vec![1.0, 0.0, 0.5]).unwrap();
        let loss = bce_with_logits(&logits, &targets);
        for i in 0..3 {
            let x: f64 = logits.data()[[i]];
            let t = targets[[i]];
            let p = 1.0 / (1.0 + (-x).exp());
            let want = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
            assert!((loss.data()[[i]] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn smooth_l1_branches() {
        let pred =
            Tensor::<f64>::leaf(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, 3.0]).unwrap());
        let targets = ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.0, 0.0]).unwrap();
        let loss = smooth_l1(&pred, &targets);
        assert!((loss.data()[[0]] - 0.125).abs() < 1e-12, "quadratic branch");
        assert!((loss.data()[[1]] - 2.5).abs() < 1e-12, "linear branch");
    }

    #[test]
    fn cross_entropy_perfect_prediction_is_zero() {
        let logits = Tensor::<f64>::leaf(
            ArrayD::from_shape_vec(IxDyn(&[1, 3]), vec![100.0, 0.0, 0.0]).unwrap(),
        );
        let loss = cross_entropy_logits(&logits, &[0]);
        assert!(loss.data()[[0]].abs() < 1e-12);
    }
}
