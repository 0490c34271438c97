//! Mask-renormalized (partial) convolution support.
//!
//! A partial convolution zeroes invalid inputs, rescales each window by
//! `k*k / (number of valid pixels)` and marks an output pixel valid when
//! any input in its receptive field was valid:
//!
//! `y = (W (x . M)) * sum(1)/sum(M) + b` where the window has coverage,
//! `y = 0` where it has none.

use crate::tensor::Tensor;

use super::kernels;

/// Propagate a validity mask (`[H, W]`, entries 0/1) through a `k x k`
/// convolution window. Returns `(updated_mask, renorm_factor, coverage)`
/// at the output resolution; `renorm_factor = k*k / valid_count` where
/// coverage exists, 0 elsewhere. `coverage` equals the updated mask.
pub fn mask_update(mask: &Tensor, k: usize, pad: usize, stride: usize) -> (Tensor, Tensor, Tensor) {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut updated = Tensor::zeros(&[oh, ow]);
    let mut factor = Tensor::zeros(&[oh, ow]);
    let window = (k * k) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let mut valid = 0.0;
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    let ix = (ox * stride + kx) as i64 - pad as i64;
                    if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                        continue;
                    }
                    valid += mask.data()[iy as usize * w + ix as usize];
                }
            }
            if valid > 0.0 {
                updated.data_mut()[oy * ow + ox] = 1.0;
                factor.data_mut()[oy * ow + ox] = window / valid;
            }
        }
    }
    let cover = updated.clone();
    (updated, factor, cover)
}

/// Standalone partial convolution on plain tensors:
/// `(features [Cin,H,W], validity [H,W], kernel [Cout,Cin,k,k], bias)`
/// -> `(features [Cout,OH,OW], updated validity [OH,OW])`.
pub fn partial_conv(
    features: &Tensor,
    validity: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    pad: usize,
    stride: usize,
) -> (Tensor, Tensor) {
    let k = kernel.shape()[2];
    let (updated, factor, cover) = mask_update(validity, k, pad, stride);
    let (cin, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let mut masked = features.clone();
    for c in 0..cin {
        for p in 0..h * w {
            masked.data_mut()[c * h * w + p] *= validity.data()[p];
        }
    }
    let zero_bias = Tensor::zeros(&[kernel.shape()[0]]);
    let mut y = kernels::conv2d(&masked, kernel, &zero_bias, pad, stride, 1);
    let (cout, oh, ow) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    for oc in 0..cout {
        for p in 0..oh * ow {
            let i = oc * oh * ow + p;
            y.data_mut()[i] = y.data()[i] * factor.data()[p] + bias.data()[oc] * cover.data()[p];
        }
    }
    (y, updated)
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

    #[test]
    fn all_valid_mask_equals_ordinary_conv_interior() {
        // With zero padding even a fully valid mask renormalizes border
        // windows (padding pixels count as invalid), so compare with
        // pad = 0 where the two coincide everywhere.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rt(&mut rng, &[3, 7, 7]);
        let w = rt(&mut rng, &[4, 3, 3, 3]);
        let b = rt(&mut rng, &[4]);
        let mask = Tensor::full(&[7, 7], 1.0);
        let (y, updated) = partial_conv(&x, &mask, &w, &b, 0, 1);
        let ordinary = kernels::conv2d(&x, &w, &b, 0, 1, 1);
        assert!(updated.data().iter().all(|&m| m == 1.0));
        for (a, e) in y.data().iter().zip(ordinary.data()) {
            assert!((a - e).abs() < 1e-6, "partial vs ordinary: {a} vs {e}");
        }
    }

    #[test]
    fn half_valid_window_renormalizes_by_nine_over_k() {
        // Single output pixel, 3x3 window, some pixels masked out.
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = rt(&mut rng, &[1, 3, 3]);
        let w = rt(&mut rng, &[1, 1, 3, 3]);
        let b = Tensor::zeros(&[1]);
        let mut mask = Tensor::full(&[3, 3], 1.0);
        for i in [1usize, 4, 6, 8] {
            mask.data_mut()[i] = 0.0;
        }
        let valid_count = 5.0;
        let (y, _) = partial_conv(&x, &mask, &w, &b, 0, 1);
        // hand computation
        let mut acc = 0.0;
        for i in 0..9 {
            acc += w.data()[i] * x.data()[i] * mask.data()[i];
        }
        let expected = acc * 9.0 / valid_count;
        assert!((y.data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn all_invalid_window_outputs_zero_and_mask_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = rt(&mut rng, &[2, 3, 3]);
        let w = rt(&mut rng, &[2, 2, 3, 3]);
        let b = rt(&mut rng, &[2]); // bias must not leak through
        let mask = Tensor::zeros(&[3, 3]);
        let (y, updated) = partial_conv(&x, &mask, &w, &b, 0, 1);
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(updated.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn mask_update_marks_any_coverage() {
        let mut mask = Tensor::zeros(&[4, 4]);
        mask.data_mut()[5] = 1.0; // single valid pixel at (1,1)
        let (updated, factor, _) = mask_update(&mask, 3, 1, 1);
        // every output within the 3x3 neighbourhood of (1,1) is covered
        for y in 0..4 {
            for x in 0..4 {
                let near = y <= 2 && x <= 2;
                assert_eq!(updated.data()[y * 4 + x] == 1.0, near, "at ({y},{x})");
                if near {
                    assert_eq!(factor.data()[y * 4 + x], 9.0);
                }
            }
        }
    }
}
