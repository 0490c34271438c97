//! Evaluation metrics: PSNR, SSIM, MS-SSIM, mIoU, flow endpoint error and
//! binary precision/recall.

use crate::scene::{label_gradient, FlowField, SemanticMap};
use crate::tensor::Tensor;

/// PSNR between two `[C, H, W]` images in [0,1]; identical inputs are
/// capped at 99 dB instead of infinity.
pub fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64;
    if mse < 1e-10 {
        return 99.0;
    }
    (10.0 * (1.0 / mse).log10()).min(99.0)
}

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_1d(window: usize, sigma: f64) -> Vec<f64> {
    let r = window / 2;
    let mut k: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Gaussian-weighted local statistics with border renormalization
/// (kernel weights falling outside the image are dropped and the window
/// re-normalized). Returns per-pixel (mu_a, mu_b, var_a, var_b, cov).
#[allow(clippy::type_complexity)]
fn local_stats(a: &[f64], b: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let win = SSIM_WINDOW.min(h.max(1)).min(w.max(1)).max(1);
    let k = gaussian_1d(win, SSIM_SIGMA);
    let r = win / 2;
    let n = h * w;
    let (mut mu_a, mut mu_b) = (vec![0.0; n], vec![0.0; n]);
    let (mut va, mut vb, mut cov) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for y in 0..h {
        for x in 0..w {
            let mut wsum = 0.0;
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..win {
                let sy = y as i64 + ky as i64 - r as i64;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for kx in 0..win {
                    let sx = x as i64 + kx as i64 - r as i64;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    let wt = k[ky] * k[kx];
                    let i = sy as usize * w + sx as usize;
                    wsum += wt;
                    sa += wt * a[i];
                    sb += wt * b[i];
                    saa += wt * a[i] * a[i];
                    sbb += wt * b[i] * b[i];
                    sab += wt * a[i] * b[i];
                }
            }
            let i = y * w + x;
            let ma = sa / wsum;
            let mb = sb / wsum;
            mu_a[i] = ma;
            mu_b[i] = mb;
            va[i] = (saa / wsum - ma * ma).max(0.0);
            vb[i] = (sbb / wsum - mb * mb).max(0.0);
            cov[i] = sab / wsum - ma * mb;
        }
    }
    (mu_a, mu_b, va, vb, cov)
}

/// Mean SSIM and mean contrast-structure (cs) term of one channel plane.
fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let c1 = (SSIM_K1) * (SSIM_K1);
    let c2 = (SSIM_K2) * (SSIM_K2);
    let (mu_a, mu_b, va, vb, cov) = local_stats(a, b, h, w);
    let n = h * w;
    let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..n {
        let l = (2.0 * mu_a[i] * mu_b[i] + c1) / (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1);
        let cs = (2.0 * cov[i] + c2) / (va[i] + vb[i] + c2);
        ssim_sum += l * cs;
        cs_sum += cs;
    }
    (ssim_sum / n as f64, cs_sum / n as f64)
}

/// SSIM between `[C, H, W]` images in [0,1], averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let (c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let mut acc = 0.0;
    for k in 0..c {
        acc += ssim_plane(a.plane(k), b.plane(k), h, w).0;
    }
    acc / c as f64
}

/// Standard five-scale weights of multi-scale SSIM.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Multi-scale SSIM: contrast-structure terms at the four coarser-to-finer
/// scales combined with the full SSIM at the coarsest, each raised to the
/// standard weight; negative per-scale means clamp to zero.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let c = a.shape()[0];
    let mut result = 1.0;
    let mut cur_a = a.clone();
    let mut cur_b = b.clone();
    for (scale, weight) in MS_SSIM_WEIGHTS.iter().enumerate() {
        let (h, w) = (cur_a.shape()[1], cur_a.shape()[2]);
        let (mut s_sum, mut cs_sum) = (0.0, 0.0);
        for k in 0..c {
            let (s, cs) = ssim_plane(cur_a.plane(k), cur_b.plane(k), h, w);
            s_sum += s;
            cs_sum += cs;
        }
        let s_mean = (s_sum / c as f64).max(0.0);
        let cs_mean = (cs_sum / c as f64).max(0.0);
        if scale + 1 == MS_SSIM_WEIGHTS.len() {
            result *= s_mean.powf(*weight);
        } else {
            result *= cs_mean.powf(*weight);
            cur_a = crate::nn::kernels::avg_pool2(&cur_a);
            cur_b = crate::nn::kernels::avg_pool2(&cur_b);
        }
    }
    result
}

/// Mean intersection-over-union between two label maps. Classes absent
/// from both maps are excluded from the mean.
pub fn miou(pred: &SemanticMap, truth: &SemanticMap) -> f64 {
    assert_eq!(pred.num_classes(), truth.num_classes());
    assert_eq!(pred.height(), truth.height());
    assert_eq!(pred.width(), truth.width());
    let c = pred.num_classes();
    let mut inter = vec![0usize; c];
    let mut uni = vec![0usize; c];
    for (p, t) in pred.labels().iter().zip(truth.labels()) {
        let (p, t) = (*p as usize, *t as usize);
        if p == t {
            inter[p] += 1;
            uni[p] += 1;
        } else {
            uni[p] += 1;
            uni[t] += 1;
        }
    }
    let mut acc = 0.0;
    let mut present = 0usize;
    for k in 0..c {
        if uni[k] == 0 {
            continue;
        }
        acc += inter[k] as f64 / uni[k] as f64;
        present += 1;
    }
    if present == 0 {
        1.0
    } else {
        acc / present as f64
    }
}

/// Mean flow endpoint error in pixels, optionally restricted to a mask.
pub fn endpoint_error(pred: &FlowField, truth: &FlowField, mask: Option<&[bool]>) -> f64 {
    assert_eq!(pred.vectors.shape(), truth.vectors.shape());
    let (h, w) = (pred.height(), pred.width());
    let mut acc = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = mask {
                if !m[y * w + x] {
                    continue;
                }
            }
            let (pu, pv) = pred.uv(y, x);
            let (tu, tv) = truth.uv(y, x);
            acc += ((pu - tu).powi(2) + (pv - tv).powi(2)).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

/// Pixels within Chebyshev distance `radius` of a class boundary of `map`.
pub fn boundary_band(map: &SemanticMap, radius: usize) -> Vec<bool> {
    let (h, w) = (map.height(), map.width());
    let grad = label_gradient(map);
    let mut band = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if grad.data()[y * w + x] == 0.0 {
                continue;
            }
            let y0 = y.saturating_sub(radius);
            let x0 = x.saturating_sub(radius);
            for by in y0..=(y + radius).min(h - 1) {
                for bx in x0..=(x + radius).min(w - 1) {
                    band[by * w + bx] = true;
                }
            }
        }
    }
    band
}

/// Precision, recall and F1 of a boolean prediction against truth.
pub fn binary_prf(pred: &[bool], truth: &[bool]) -> (f64, f64, f64) {
    assert_eq!(pred.len(), truth.len());
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 1.0 } else { tp as f64 / (tp + fneg) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}
