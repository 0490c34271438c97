//! Plain-tensor compute kernels used by the autodiff tape: grouped 2-D
//! convolution, 3-D convolution, resampling and pooling, each with its
//! hand-derived backward pass.

use crate::tensor::Tensor;

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`:
/// input index `o*stride + k - pad` must land in `[0, n)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, n: usize, out_n: usize) -> (usize, usize) {
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    let max_i = n as i64 - 1 + pad as i64 - k as i64;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = ((max_i as usize) / stride + 1).min(out_n);
    (lo.min(hi), hi)
}

/// Grouped 2-D convolution.
///
/// `x`: `[Cin, H, W]`, `w`: `[Cout, Cin/groups, kh, kw]`, `b`: `[Cout]`.
/// Output: `[Cout, OH, OW]` with `OH = (H + 2*pad - kh)/stride + 1`.
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, pad: usize, stride: usize, groups: usize) -> Tensor {
    let (cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, cin_g * groups, "conv2d channel/group mismatch");
    assert_eq!(cout % groups, 0);
    assert_eq!(b.shape(), &[cout]);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (win + 2 * pad - kw) / stride + 1;
    let cout_g = cout / groups;

    let mut out = Tensor::zeros(&[cout, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for g in 0..groups {
        for ocg in 0..cout_g {
            let oc = g * cout_g + ocg;
            let orow0 = oc * oh * ow;
            // bias first, accumulate taps on top
            od[orow0..orow0 + oh * ow].fill(b.data()[oc]);
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let xrow0 = ic * h * win;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, oh);
                    for kx in 0..kw {
                        let wv = wd[((oc * cin_g + icg) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = valid_range(kx, pad, stride, win, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = xrow0 + iy * win;
                            let obase = orow0 + oy * ow;
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let os = &mut od[obase + ox_lo..obase + ox_hi];
                                let xs = &xd[xrow + ix0..xrow + ix0 + (ox_hi - ox_lo)];
                                for (o, &xv) in os.iter_mut().zip(xs) {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    od[obase + ox] += wv * xd[xrow + ox * stride + kx - pad];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv2d`]. Returns `(grad_x, grad_w, grad_b)`.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    pad: usize,
    stride: usize,
    groups: usize,
    need_gx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (h, win) = (x.shape()[1], x.shape()[2]);
    let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (gout.shape()[1], gout.shape()[2]);
    let cout_g = cout / groups;

    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let mut gx = if need_gx { Some(Tensor::zeros(x.shape())) } else { None };

    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();

    for oc in 0..cout {
        let orow0 = oc * oh * ow;
        gb.data_mut()[oc] = gd[orow0..orow0 + oh * ow].iter().sum();
    }

    for g in 0..groups {
        for ocg in 0..cout_g {
            let oc = g * cout_g + ocg;
            let orow0 = oc * oh * ow;
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let xrow0 = ic * h * win;
                for ky in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(ky, pad, stride, h, oh);
                    for kx in 0..kw {
                        let widx = ((oc * cin_g + icg) * kh + ky) * kw + kx;
                        let wv = wd[widx];
                        let (ox_lo, ox_hi) = valid_range(kx, pad, stride, win, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let mut wacc = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - pad;
                            let xrow = xrow0 + iy * win;
                            let obase = orow0 + oy * ow;
                            if stride == 1 {
                                let ix0 = ox_lo + kx - pad;
                                let gos = &gd[obase + ox_lo..obase + ox_hi];
                                let xs = &xd[xrow + ix0..xrow + ix0 + (ox_hi - ox_lo)];
                                if let Some(gx) = gx.as_mut() {
                                    let gxs = &mut gx.data_mut()
                                        [xrow + ix0..xrow + ix0 + (ox_hi - ox_lo)];
                                    for i in 0..gos.len() {
                                        let go = gos[i];
                                        wacc += go * xs[i];
                                        gxs[i] += go * wv;
                                    }
                                } else {
                                    for (go, xv) in gos.iter().zip(xs) {
                                        wacc += go * xv;
                                    }
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ox * stride + kx - pad;
                                    let go = gd[obase + ox];
                                    wacc += go * xd[xrow + ix];
                                    if let Some(gx) = gx.as_mut() {
                                        gx.data_mut()[xrow + ix] += go * wv;
                                    }
                                }
                            }
                        }
                        gw.data_mut()[widx] += wacc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// 3-D convolution over `[Cin, D, H, W]` with per-axis padding and stride.
pub fn conv3d(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    pad: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> Tensor {
    let (cin, d, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, cin_w, kd, kh, kw) = (
        w.shape()[0],
        w.shape()[1],
        w.shape()[2],
        w.shape()[3],
        w.shape()[4],
    );
    assert_eq!(cin, cin_w, "conv3d channel mismatch");
    let od_ = (d + 2 * pad.0 - kd) / stride.0 + 1;
    let oh = (h + 2 * pad.1 - kh) / stride.1 + 1;
    let ow = (win + 2 * pad.2 - kw) / stride.2 + 1;
    let mut out = Tensor::zeros(&[cout, od_, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let odata = out.data_mut();
    for oc in 0..cout {
        let base_oc = oc * od_ * oh * ow;
        odata[base_oc..base_oc + od_ * oh * ow].fill(b.data()[oc]);
        for ic in 0..cin {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wd[(((oc * cin + ic) * kd + kz) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oz in 0..od_ {
                            let iz = (oz * stride.0 + kz) as i64 - pad.0 as i64;
                            if iz < 0 || iz >= d as i64 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * stride.1 + ky) as i64 - pad.1 as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                let xbase = ((ic * d + iz as usize) * h + iy as usize) * win;
                                let obase = base_oc + (oz * oh + oy) * ow;
                                for ox in 0..ow {
                                    let ix = (ox * stride.2 + kx) as i64 - pad.2 as i64;
                                    if ix < 0 || ix >= win as i64 {
                                        continue;
                                    }
                                    odata[obase + ox] += wv * xd[xbase + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv3d`]. Returns `(grad_x, grad_w, grad_b)`.
pub fn conv3d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    pad: (usize, usize, usize),
    stride: (usize, usize, usize),
    need_gx: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (cin, d, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kd, kh, kw) = (
        w.shape()[0],
        w.shape()[1],
        w.shape()[2],
        w.shape()[3],
        w.shape()[4],
    );
    let (od_, oh, ow) = (gout.shape()[1], gout.shape()[2], gout.shape()[3]);
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let mut gx = if need_gx { Some(Tensor::zeros(x.shape())) } else { None };
    let xd = x.data();
    let wd = w.data();
    let gd = gout.data();
    for oc in 0..cout {
        let base_oc = oc * od_ * oh * ow;
        gb.data_mut()[oc] = gd[base_oc..base_oc + od_ * oh * ow].iter().sum();
        for ic in 0..cin {
            for kz in 0..kd {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let widx = (((oc * cin + ic) * kd + kz) * kh + ky) * kw + kx;
                        let wv = wd[widx];
                        let mut wacc = 0.0;
                        for oz in 0..od_ {
                            let iz = (oz * stride.0 + kz) as i64 - pad.0 as i64;
                            if iz < 0 || iz >= d as i64 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * stride.1 + ky) as i64 - pad.1 as i64;
                                if iy < 0 || iy >= h as i64 {
                                    continue;
                                }
                                let xbase = ((ic * d + iz as usize) * h + iy as usize) * win;
                                let obase = base_oc + (oz * oh + oy) * ow;
                                for ox in 0..ow {
                                    let ix = (ox * stride.2 + kx) as i64 - pad.2 as i64;
                                    if ix < 0 || ix >= win as i64 {
                                        continue;
                                    }
                                    let go = gd[obase + ox];
                                    wacc += go * xd[xbase + ix as usize];
                                    if let Some(gx) = gx.as_mut() {
                                        gx.data_mut()[xbase + ix as usize] += go * wv;
                                    }
                                }
                            }
                        }
                        gw.data_mut()[widx] += wacc;
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Bilinear upsampling of `[C, H, W]` by an integer factor, half-pixel
/// aligned: output pixel centers map to `(p + 0.5)/factor - 0.5` in the
/// input, clamped to the border.
pub fn upsample_bilinear(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for oy in 0..oh {
        let (y0, y1, fy) = src_coords(oy, factor, h);
        for ox in 0..ow {
            let (x0, x1, fx) = src_coords(ox, factor, w);
            for k in 0..c {
                let v = x.at3(k, y0, x0) * (1.0 - fy) * (1.0 - fx)
                    + x.at3(k, y0, x1) * (1.0 - fy) * fx
                    + x.at3(k, y1, x0) * fy * (1.0 - fx)
                    + x.at3(k, y1, x1) * fy * fx;
                *out.at3_mut(k, oy, ox) = v;
            }
        }
    }
    out
}

#[inline]
fn src_coords(o: usize, factor: usize, n: usize) -> (usize, usize, f64) {
    let s = (o as f64 + 0.5) / factor as f64 - 0.5;
    let s = s.clamp(0.0, (n - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, s - i0 as f64)
}

/// Backward pass of [`upsample_bilinear`].
pub fn upsample_bilinear_backward(gout: &Tensor, factor: usize, in_shape: &[usize]) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (gout.shape()[1], gout.shape()[2]);
    let mut gx = Tensor::zeros(in_shape);
    for oy in 0..oh {
        let (y0, y1, fy) = src_coords(oy, factor, h);
        for ox in 0..ow {
            let (x0, x1, fx) = src_coords(ox, factor, w);
            for k in 0..c {
                let g = gout.at3(k, oy, ox);
                *gx.at3_mut(k, y0, x0) += g * (1.0 - fy) * (1.0 - fx);
                *gx.at3_mut(k, y0, x1) += g * (1.0 - fy) * fx;
                *gx.at3_mut(k, y1, x0) += g * fy * (1.0 - fx);
                *gx.at3_mut(k, y1, x1) += g * fy * fx;
            }
        }
    }
    gx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Tensor::zeros(&[c, h * factor, w * factor]);
    for k in 0..c {
        for oy in 0..h * factor {
            for ox in 0..w * factor {
                *out.at3_mut(k, oy, ox) = x.at3(k, oy / factor, ox / factor);
            }
        }
    }
    out
}

pub fn upsample_nearest_backward(gout: &Tensor, factor: usize, in_shape: &[usize]) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let mut gx = Tensor::zeros(in_shape);
    for k in 0..c {
        for oy in 0..h * factor {
            for ox in 0..w * factor {
                *gx.at3_mut(k, oy / factor, ox / factor) += gout.at3(k, oy, ox);
            }
        }
    }
    gx
}

/// 2x2 average pooling (stride 2); trailing odd row/column dropped.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    for k in 0..c {
        for y in 0..oh {
            for x_ in 0..ow {
                let s = x.at3(k, 2 * y, 2 * x_)
                    + x.at3(k, 2 * y, 2 * x_ + 1)
                    + x.at3(k, 2 * y + 1, 2 * x_)
                    + x.at3(k, 2 * y + 1, 2 * x_ + 1);
                *out.at3_mut(k, y, x_) = 0.25 * s;
            }
        }
    }
    out
}

pub fn avg_pool2_backward(gout: &Tensor, in_shape: &[usize]) -> Tensor {
    let (c, oh, ow) = (gout.shape()[0], gout.shape()[1], gout.shape()[2]);
    let mut gx = Tensor::zeros(in_shape);
    for k in 0..c {
        for y in 0..oh {
            for x_ in 0..ow {
                let g = 0.25 * gout.at3(k, y, x_);
                *gx.at3_mut(k, 2 * y, 2 * x_) += g;
                *gx.at3_mut(k, 2 * y, 2 * x_ + 1) += g;
                *gx.at3_mut(k, 2 * y + 1, 2 * x_) += g;
                *gx.at3_mut(k, 2 * y + 1, 2 * x_ + 1) += g;
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rt(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Brute-force conv2d by definition, no layout tricks.
    fn conv2d_naive(
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        pad: usize,
        stride: usize,
        groups: usize,
    ) -> Tensor {
        let (cin, h, win) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, cin_g, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (win + 2 * pad - kw) / stride + 1;
        let cout_g = cout / groups;
        let _ = cin;
        let mut out = Tensor::zeros(&[cout, oh, ow]);
        for oc in 0..cout {
            let g = oc / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[oc];
                    for icg in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= win as i64 {
                                    continue;
                                }
                                acc += w.data()[((oc * cin_g + icg) * kh + ky) * kw + kx]
                                    * x.at3(g * cin_g + icg, iy as usize, ix as usize);
                            }
                        }
                    }
                    *out.at3_mut(oc, oy, ox) = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(groups, stride, pad) in &[(1usize, 1usize, 1usize), (3, 1, 1), (1, 2, 1), (2, 2, 0)] {
            let cin = 6;
            let cout = 6;
            let x = rt(&mut rng, &[cin, 9, 10]);
            let w = rt(&mut rng, &[cout, cin / groups, 3, 3]);
            let b = rt(&mut rng, &[cout]);
            let fast = conv2d(&x, &w, &b, pad, stride, groups);
            let slow = conv2d_naive(&x, &w, &b, pad, stride, groups);
            assert_eq!(fast.shape(), slow.shape());
            for (a, e) in fast.data().iter().zip(slow.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    /// Finite-difference check of a scalar functional sum(conv(x)) for all
    /// three gradients.
    #[test]
    fn conv2d_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (groups, pad, stride) = (2, 1, 1);
        let x = rt(&mut rng, &[4, 5, 6]);
        let w = rt(&mut rng, &[4, 2, 3, 3]);
        let b = rt(&mut rng, &[4]);
        // weight the output so the functional is non-symmetric
        let y = conv2d(&x, &w, &b, pad, stride, groups);
        let wt = rt(&mut rng, y.shape());
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            conv2d(x, w, b, pad, stride, groups)
                .data()
                .iter()
                .zip(wt.data())
                .map(|(a, t)| a * t)
                .sum()
        };
        let (gx, gw, gb) = conv2d_backward(&x, &w, &wt, pad, stride, groups, true);
        let eps = 1e-6;
        for (tensor, grad, name) in [(&x, gx.as_ref().unwrap(), "x"), (&w, &gw, "w"), (&b, &gb, "b")] {
            for i in (0..tensor.numel()).step_by(7) {
                let mut tp = (*tensor).clone();
                tp.data_mut()[i] += eps;
                let mut tm = (*tensor).clone();
                tm.data_mut()[i] -= eps;
                let (fp, fm) = match name {
                    "x" => (loss(&tp, &w, &b), loss(&tm, &w, &b)),
                    "w" => (loss(&x, &tp, &b), loss(&x, &tm, &b)),
                    _ => (loss(&x, &w, &tp), loss(&x, &w, &tm)),
                };
                let fd = (fp - fm) / (2.0 * eps);
                assert!(
                    (fd - grad.data()[i]).abs() < 1e-6,
                    "{name}[{i}]: fd {fd} vs analytic {}",
                    grad.data()[i]
                );
            }
        }
    }

    #[test]
    fn conv3d_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pad = (1, 1, 1);
        let stride = (1, 2, 2);
        let x = rt(&mut rng, &[2, 3, 6, 6]);
        let w = rt(&mut rng, &[3, 2, 3, 3, 3]);
        let b = rt(&mut rng, &[3]);
        let y = conv3d(&x, &w, &b, pad, stride);
        let wt = rt(&mut rng, y.shape());
        let loss = |x: &Tensor, w: &Tensor, b: &Tensor| -> f64 {
            conv3d(x, w, b, pad, stride)
                .data()
                .iter()
                .zip(wt.data())
                .map(|(a, t)| a * t)
                .sum()
        };
        let (gx, gw, gb) = conv3d_backward(&x, &w, &wt, pad, stride, true);
        let eps = 1e-6;
        for (tensor, grad, name) in [(&x, gx.as_ref().unwrap(), "x"), (&w, &gw, "w"), (&b, &gb, "b")] {
            for i in (0..tensor.numel()).step_by(11) {
                let mut tp = (*tensor).clone();
                tp.data_mut()[i] += eps;
                let mut tm = (*tensor).clone();
                tm.data_mut()[i] -= eps;
                let (fp, fm) = match name {
                    "x" => (loss(&tp, &w, &b), loss(&tm, &w, &b)),
                    "w" => (loss(&x, &tp, &b), loss(&x, &tm, &b)),
                    _ => (loss(&x, &w, &tp), loss(&x, &w, &tm)),
                };
                let fd = (fp - fm) / (2.0 * eps);
                assert!((fd - grad.data()[i]).abs() < 1e-6, "{name}[{i}]");
            }
        }
    }

    #[test]
    fn upsample_bilinear_constant_stays_constant() {
        let x = Tensor::full(&[2, 4, 4], 0.7);
        let up = upsample_bilinear(&x, 4);
        assert_eq!(up.shape(), &[2, 16, 16]);
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn upsample_backward_is_adjoint() {
        // <up(x), g> == <x, up_backward(g)> for linear maps.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rt(&mut rng, &[3, 5, 4]);
        let up = upsample_bilinear(&x, 3);
        let g = rt(&mut rng, up.shape());
        let gx = upsample_bilinear_backward(&g, 3, x.shape());
        let lhs: f64 = up.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn nearest_and_avgpool_adjoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rt(&mut rng, &[2, 4, 6]);
        let up = upsample_nearest(&x, 2);
        let g = rt(&mut rng, up.shape());
        let gx = upsample_nearest_backward(&g, 2, x.shape());
        let lhs: f64 = up.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);

        let p = avg_pool2(&x);
        let gp = rt(&mut rng, p.shape());
        let gxp = avg_pool2_backward(&gp, x.shape());
        let lhs: f64 = p.data().iter().zip(gp.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gxp.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
