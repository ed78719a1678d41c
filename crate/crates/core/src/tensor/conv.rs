//! Convolutions: 2-D (im2col + matmul), 1-D over token sequences, and 1-D
//! width-1 (pointwise over the channel axis).
//!
//! All convolutions are cross-correlations with zero same-padding (k-1)/2 and
//! odd kernel sizes.

use super::Tensor;
use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Real;

/// col[cin*k*k, ho*wo] patch matrix for one image.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let howo = ho * wo;
    let mut col = vec![T::zero(); cin * k * k * howo];
    let mut r = 0;
    for ci in 0..cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut col[r * howo..(r + 1) * howo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
                r += 1;
            }
        }
    }
    col
}

/// Scatter-add a patch-matrix gradient back onto the image.
#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Real>(
    col: &[T],
    dx: &mut [T],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) {
    let howo = ho * wo;
    let mut r = 0;
    for ci in 0..cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let src = &col[r * howo..(r + 1) * howo];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

/// Strided 2-D convolution.
///
/// x: [b, cin, h, w], w: [cout, cin, k, k] (square, odd k), bias: [cout].
/// Zero same-padding (k-1)/2; output spatial dims are
/// (h + 2 pad - k) / stride + 1.
pub fn conv2d_strided<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::BadShape {
            op: "conv2d",
            shape: x.shape().to_vec(),
            reason: "input must be [batch, channels, h, w]".into(),
        });
    }
    if w.rank() != 4 || w.shape()[2] != w.shape()[3] {
        return Err(Error::BadShape {
            op: "conv2d",
            shape: w.shape().to_vec(),
            reason: "weight must be [cout, cin, k, k] with square k".into(),
        });
    }
    let (b, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if k % 2 == 0 {
        return Err(Error::EvenKernel { op: "conv2d", k });
    }
    if wcin != cin {
        return Err(Error::DimMismatch {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if bias.rank() != 1 || bias.shape()[0] != cout {
        return Err(Error::DimMismatch {
            op: "conv2d",
            lhs: w.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
    }
    let pad = (k - 1) / 2;
    let span = h + 2 * pad;
    if span < k || (span - k) / stride + 1 == 0 || wd + 2 * pad < k {
        return Err(Error::BadShape {
            op: "conv2d",
            shape: x.shape().to_vec(),
            reason: format!("input too small for kernel {k} stride {stride}"),
        });
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let howo = ho * wo;
    let kk = cin * k * k;

    let mut out = vec![T::zero(); b * cout * howo];
    for bi in 0..b {
        let col = im2col(
            &x.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd],
            cin,
            h,
            wd,
            k,
            pad,
            stride,
            ho,
            wo,
        );
        let dst = &mut out[bi * cout * howo..(bi + 1) * cout * howo];
        for co in 0..cout {
            let bv = bias.data()[co];
            for d in &mut dst[co * howo..(co + 1) * howo] {
                *d = bv;
            }
        }
        kernels::mm_nn_into(w.data(), &col, dst, cout, kk, howo);
    }

    Ok(Tensor::from_op(
        vec![b, cout, ho, wo],
        out,
        vec![x.clone(), w.clone(), bias.clone()],
        move |g, ps| {
            let (xt, wt, _bt) = (&ps[0], &ps[1], &ps[2]);
            let need_x = xt.requires_grad();
            let need_w = wt.requires_grad();
            let need_b = ps[2].requires_grad();
            let mut dx = need_x.then(|| vec![T::zero(); xt.numel()]);
            let mut dw = need_w.then(|| vec![T::zero(); wt.numel()]);
            let mut db = need_b.then(|| vec![T::zero(); cout]);
            for bi in 0..b {
                let gb = &g[bi * cout * howo..(bi + 1) * cout * howo];
                if need_w {
                    let col = im2col(
                        &xt.data()[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                        cin,
                        h,
                        wd,
                        k,
                        pad,
                        stride,
                        ho,
                        wo,
                    );
                    let part = kernels::mm_nt(gb, &col, cout, howo, kk);
                    let dw = dw.as_mut().unwrap();
                    for (d, v) in dw.iter_mut().zip(part) {
                        *d += v;
                    }
                }
                if need_x {
                    let dcol = kernels::mm_tn(wt.data(), gb, cout, kk, howo);
                    col2im_add(
                        &dcol,
                        &mut dx.as_mut().unwrap()[bi * cin * h * wd..(bi + 1) * cin * h * wd],
                        cin,
                        h,
                        wd,
                        k,
                        pad,
                        stride,
                        ho,
                        wo,
                    );
                }
                if let Some(db) = db.as_mut() {
                    for co in 0..cout {
                        for &gv in &gb[co * howo..(co + 1) * howo] {
                            db[co] += gv;
                        }
                    }
                }
            }
            vec![dx, dw, db]
        },
    ))
}

/// Stride-1 2-D convolution (shape-preserving).
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    conv2d_strided(x, w, bias, 1)
}

/// 1-D convolution over a token sequence with same padding.
///
/// x: [l, cin], w: [cout, cin, k] (odd k), bias: [cout] -> [l, cout].
pub fn conv1d_same<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::BadShape {
            op: "conv1d",
            shape: x.shape().to_vec(),
            reason: "input must be [len, channels]".into(),
        });
    }
    if w.rank() != 3 {
        return Err(Error::BadShape {
            op: "conv1d",
            shape: w.shape().to_vec(),
            reason: "weight must be [cout, cin, k]".into(),
        });
    }
    let (l, cin) = (x.shape()[0], x.shape()[1]);
    let (cout, wcin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if k % 2 == 0 {
        return Err(Error::EvenKernel { op: "conv1d", k });
    }
    if wcin != cin {
        return Err(Error::DimMismatch {
            op: "conv1d",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if bias.rank() != 1 || bias.shape()[0] != cout {
        return Err(Error::DimMismatch {
            op: "conv1d",
            lhs: w.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let pad = (k - 1) / 2;
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![T::zero(); l * cout];
    for t in 0..l {
        for co in 0..cout {
            let mut acc = bias.data()[co];
            for ci in 0..cin {
                for dk in 0..k {
                    let s = t as isize + dk as isize - pad as isize;
                    if s >= 0 && (s as usize) < l {
                        acc += xd[s as usize * cin + ci] * wdat[(co * cin + ci) * k + dk];
                    }
                }
            }
            out[t * cout + co] = acc;
        }
    }
    Ok(Tensor::from_op(
        vec![l, cout],
        out,
        vec![x.clone(), w.clone(), bias.clone()],
        move |g, ps| {
            let xd = ps[0].data();
            let wdat = ps[1].data();
            let dx = ps[0].requires_grad().then(|| {
                let mut dx = vec![T::zero(); l * cin];
                for t in 0..l {
                    for co in 0..cout {
                        let gv = g[t * cout + co];
                        for ci in 0..cin {
                            for dk in 0..k {
                                let s = t as isize + dk as isize - pad as isize;
                                if s >= 0 && (s as usize) < l {
                                    dx[s as usize * cin + ci] += gv * wdat[(co * cin + ci) * k + dk];
                                }
                            }
                        }
                    }
                }
                dx
            });
            let dw = ps[1].requires_grad().then(|| {
                let mut dw = vec![T::zero(); cout * cin * k];
                for t in 0..l {
                    for co in 0..cout {
                        let gv = g[t * cout + co];
                        for ci in 0..cin {
                            for dk in 0..k {
                                let s = t as isize + dk as isize - pad as isize;
                                if s >= 0 && (s as usize) < l {
                                    dw[(co * cin + ci) * k + dk] += gv * xd[s as usize * cin + ci];
                                }
                            }
                        }
                    }
                }
                dw
            });
            let db = ps[2].requires_grad().then(|| {
                let mut db = vec![T::zero(); cout];
                for t in 0..l {
                    for co in 0..cout {
                        db[co] += g[t * cout + co];
                    }
                }
                db
            });
            vec![dx, dw, db]
        },
    ))
}

/// Width-1 1-D convolution mixing the channel axis.
///
/// x: [b, l, c], w: [n, c, 1], bias: [n] -> [b, n, l];
/// out[bi, j, t] = bias[j] + sum_c w[j, c] x[bi, t, c].
pub fn conv1d_pointwise<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::BadShape {
            op: "conv1d_pointwise",
            shape: x.shape().to_vec(),
            reason: "input must be [batch, len, channels]".into(),
        });
    }
    if w.rank() != 3 || w.shape()[2] != 1 {
        return Err(Error::BadShape {
            op: "conv1d_pointwise",
            shape: w.shape().to_vec(),
            reason: "weight must be [n, channels, 1]".into(),
        });
    }
    let (b, l, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = w.shape()[0];
    if w.shape()[1] != c {
        return Err(Error::DimMismatch {
            op: "conv1d_pointwise",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if bias.rank() != 1 || bias.shape()[0] != n {
        return Err(Error::DimMismatch {
            op: "conv1d_pointwise",
            lhs: w.shape().to_vec(),
            rhs: bias.shape().to_vec(),
        });
    }
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); b * n * l];
    for bi in 0..b {
        let xb = &xd[bi * l * c..(bi + 1) * l * c];
        let ob = &mut out[bi * n * l..(bi + 1) * n * l];
        for j in 0..n {
            let wr = &wd[j * c..(j + 1) * c];
            let orow = &mut ob[j * l..(j + 1) * l];
            for (t, o) in orow.iter_mut().enumerate() {
                let mut acc = bias.data()[j];
                let xr = &xb[t * c..(t + 1) * c];
                for (&wv, &xv) in wr.iter().zip(xr) {
                    acc += wv * xv;
                }
                *o = acc;
            }
        }
    }
    Ok(Tensor::from_op(
        vec![b, n, l],
        out,
        vec![x.clone(), w.clone(), bias.clone()],
        move |g, ps| {
            let xd = ps[0].data();
            let wd = ps[1].data();
            let dx = ps[0].requires_grad().then(|| {
                let mut dx = vec![T::zero(); b * l * c];
                for bi in 0..b {
                    for j in 0..n {
                        let wr = &wd[j * c..(j + 1) * c];
                        for t in 0..l {
                            let gv = g[(bi * n + j) * l + t];
                            let dr = &mut dx[(bi * l + t) * c..(bi * l + t + 1) * c];
                            for (d, &wv) in dr.iter_mut().zip(wr) {
                                *d += gv * wv;
                            }
                        }
                    }
                }
                dx
            });
            let dw = ps[1].requires_grad().then(|| {
                let mut dw = vec![T::zero(); n * c];
                for bi in 0..b {
                    for j in 0..n {
                        let dr = &mut dw[j * c..(j + 1) * c];
                        for t in 0..l {
                            let gv = g[(bi * n + j) * l + t];
                            let xr = &xd[(bi * l + t) * c..(bi * l + t + 1) * c];
                            for (d, &xv) in dr.iter_mut().zip(xr) {
                                *d += gv * xv;
                            }
                        }
                    }
                }
                dw
            });
            let db = ps[2].requires_grad().then(|| {
                let mut db = vec![T::zero(); n];
                for bi in 0..b {
                    for j in 0..n {
                        for t in 0..l {
                            db[j] += g[(bi * n + j) * l + t];
                        }
                    }
                }
                db
            });
            vec![dx, dw, db]
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn k1_identity_kernel_is_identity() {
        let x = Tensor::new(vec![1, 2, 2, 2], (1..=8).map(|v| v as f64).collect()).unwrap();
        // w[c_out, c_in, 0, 0] = delta
        let w = Tensor::new(vec![2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::zeros(vec![2]);
        let y = conv2d(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn k3_ones_counts_neighbors() {
        let x = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let w = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        let b = Tensor::zeros(vec![1]);
        let y = conv2d(&x, &w, &b).unwrap();
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
        assert_eq!(y.at(&[0, 0, 0, 1]), 6.0);
        assert_eq!(y.at(&[0, 0, 2, 2]), 4.0);
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 4, 4]);
        let w = Tensor::<f64>::zeros(vec![1, 1, 2, 2]);
        let b = Tensor::<f64>::zeros(vec![1]);
        assert!(matches!(
            conv2d(&x, &w, &b),
            Err(Error::EvenKernel { op: "conv2d", k: 2 })
        ));
    }

    #[test]
    fn channel_mismatch_rejected() {
        let x = Tensor::<f64>::zeros(vec![1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(vec![1, 2, 3, 3]);
        let b = Tensor::<f64>::zeros(vec![1]);
        assert!(matches!(conv2d(&x, &w, &b), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn stride2_halves_spatial_dims() {
        let x = Tensor::<f64>::zeros(vec![1, 1, 8, 8]);
        let w = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        let b = Tensor::<f64>::zeros(vec![1]);
        let y = conv2d_strided(&x, &w, &b, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        let y = conv2d_strided(&x, &w, &b, 4).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn conv2d_matches_naive_loops() {
        let mut rng = crate::rng::SplitMix64::new(11);
        let (b, cin, h, wd, cout, k, stride) = (2, 3, 5, 6, 4, 3, 2);
        let x: Vec<f64> = (0..b * cin * h * wd).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..cout * cin * k * k).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let bias: Vec<f64> = (0..cout).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let xt = Tensor::new(vec![b, cin, h, wd], x.clone()).unwrap();
        let wt = Tensor::new(vec![cout, cin, k, k], w.clone()).unwrap();
        let bt = Tensor::new(vec![cout], bias.clone()).unwrap();
        let y = conv2d_strided(&xt, &wt, &bt, stride).unwrap();

        let pad = (k - 1) / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        assert_eq!(y.shape(), &[b, cout, ho, wo]);
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += x[((bi * cin + ci) * h + iy as usize) * wd
                                            + ix as usize]
                                            * w[((co * cin + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        assert_eq!(y.at(&[bi, co, oy, ox]), acc);
                    }
                }
            }
        }
    }

    #[test]
    fn conv1d_same_shape_and_values() {
        // x rows: tokens; single in/out channel, k=3 kernel [1, 2, 3]
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::zeros(vec![1]);
        let y = conv1d_same(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[4, 1]);
        // out[t] = 1*x[t-1] + 2*x[t] + 3*x[t+1], zeros outside
        assert_eq!(y.data(), &[8.0, 14.0, 20.0, 11.0]);
    }

    #[test]
    fn conv1d_pointwise_mixes_channels() {
        let x = Tensor::new(vec![1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let w = Tensor::new(vec![2, 3, 1], vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 10.0]).unwrap();
        let y = conv1d_pointwise(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        // row 0 picks channel 0; row 1 sums channels + bias
        assert_eq!(y.data(), &[1.0, 4.0, 16.0, 25.0]);
    }

    #[test]
    fn conv1d_pointwise_rejects_wider_kernel() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 3]);
        let w = Tensor::<f64>::zeros(vec![2, 3, 2]);
        let b = Tensor::<f64>::zeros(vec![2]);
        assert!(conv1d_pointwise(&x, &w, &b).is_err());
    }
}
