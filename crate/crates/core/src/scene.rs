//! Scene data types shared by the whole pipeline: frames, backward flow
//! fields, semantic maps and their per-class decomposition, plus the
//! sampling and boundary-weight primitives everything else builds on.
//!
//! Conventions:
//! - Spatial tensors are `[C, H, W]`, f64, row-major.
//! - Flow fields are *backward* displacements in pixels: channel 0 is the
//!   x (column) component, channel 1 the y (row) component, and the source
//!   of target pixel `p` is `p + flow(p)` in the previous frame.
//! - Class labels are `0..C-1` internally. Serialized semantic maps are
//!   1-based (pixel value = class index + 1); see [`crate::io`].

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// RGB video frame with values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Frame {
    /// `[3, H, W]` pixel data.
    pub pixels: Tensor,
    /// Frame index within its clip.
    pub timestamp: usize,
}

impl Frame {
    pub fn new(pixels: Tensor, timestamp: usize) -> Result<Self> {
        if pixels.shape().len() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "frame pixels must be [3, H, W], got {:?}",
                pixels.shape()
            )));
        }
        if !pixels.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
            return Err(Error::Contract("frame values outside [0, 1]".into()));
        }
        Ok(Frame { pixels, timestamp })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

/// Dense backward flow field, `[2, H, W]`, in pixels.
#[derive(Debug, Clone)]
pub struct FlowField {
    pub vectors: Tensor,
}

impl FlowField {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 3 || vectors.shape()[0] != 2 {
            return Err(Error::ShapeMismatch(format!(
                "flow must be [2, H, W], got {:?}",
                vectors.shape()
            )));
        }
        if !vectors.is_finite() {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(FlowField { vectors })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            vectors: Tensor::zeros(&[2, h, w]),
        }
    }

    pub fn height(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.vectors.shape()[2]
    }

    #[inline]
    pub fn uv(&self, y: usize, x: usize) -> (f64, f64) {
        (self.vectors.at3(0, y, x), self.vectors.at3(1, y, x))
    }
}

/// Per-pixel class labels, `0..num_classes-1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMap {
    labels: Vec<u8>,
    h: usize,
    w: usize,
    num_classes: usize,
}

impl SemanticMap {
    pub fn new(labels: Vec<u8>, h: usize, w: usize, num_classes: usize) -> Result<Self> {
        if labels.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "label buffer {} != {}x{}",
                labels.len(),
                h,
                w
            )));
        }
        if num_classes == 0 || num_classes > u8::MAX as usize {
            return Err(Error::Contract(format!("bad class count {num_classes}")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Contract(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(SemanticMap {
            labels,
            h,
            w,
            num_classes,
        })
    }

    pub fn uniform(h: usize, w: usize, num_classes: usize, class: u8) -> Self {
        SemanticMap::new(vec![class; h * w], h, w, num_classes).unwrap()
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn label(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// Per-pixel class probabilities, `[C, H, W]`; each pixel's channel vector
/// is a simplex (non-negative, sums to 1).
#[derive(Debug, Clone)]
pub struct SoftSemanticMap {
    pub probs: Tensor,
}

impl SoftSemanticMap {
    pub fn new(probs: Tensor) -> Result<Self> {
        let shape = probs.shape();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "soft map must be [C, H, W], got {shape:?}"
            )));
        }
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                for k in 0..c {
                    let p = probs.at3(k, y, x);
                    if p < -1e-9 {
                        return Err(Error::Contract("negative probability".into()));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > 1e-6 {
                    return Err(Error::Contract(format!(
                        "pixel ({y},{x}) probabilities sum to {sum}"
                    )));
                }
            }
        }
        Ok(SoftSemanticMap { probs })
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    /// Per-pixel argmax as a hard label map.
    pub fn harden(&self) -> SemanticMap {
        let (c, h, w) = (
            self.probs.shape()[0],
            self.probs.shape()[1],
            self.probs.shape()[2],
        );
        let mut labels = vec![0u8; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_p = self.probs.at3(0, y, x);
                for k in 1..c {
                    let p = self.probs.at3(k, y, x);
                    if p > best_p {
                        best_p = p;
                        best = k;
                    }
                }
                labels[y * w + x] = best as u8;
            }
        }
        SemanticMap::new(labels, h, w, c).unwrap()
    }

    /// One-hot soft map from a hard label map.
    pub fn from_labels(map: &SemanticMap) -> Self {
        let (h, w, c) = (map.height(), map.width(), map.num_classes());
        let mut probs = Tensor::zeros(&[c, h, w]);
        for y in 0..h {
            for x in 0..w {
                *probs.at3_mut(map.label(y, x) as usize, y, x) = 1.0;
            }
        }
        SoftSemanticMap { probs }
    }
}

/// Per-class binary masks and masked flows: `masks[c] = 1(map = c)`,
/// `masked_flows[c] = flow * masks[c]`.
#[derive(Debug, Clone)]
pub struct ClassDecomposition {
    /// `[C, H, W]` binary masks.
    pub masks: Tensor,
    /// `[C, 2, H, W]` per-class masked flows.
    pub masked_flows: Tensor,
}

impl ClassDecomposition {
    pub fn num_classes(&self) -> usize {
        self.masks.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.masks.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.masks.shape()[2]
    }
}

/// Boundary-emphasis weights for the semantic loss: 1 far from class
/// boundaries, up to `1 + alpha` on them.
#[derive(Debug, Clone)]
pub struct BoundaryWeightMap {
    /// `[H, W]` weights, all >= 1.
    pub weights: Tensor,
    pub alpha: f64,
    pub gaussian_variance: f64,
}

/// Aligned frame/flow/map sequences: `observed_len` past steps followed by
/// `horizon` future steps.
#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Vec<Frame>,
    pub flows: Vec<FlowField>,
    pub maps: Vec<SemanticMap>,
    pub observed_len: usize,
    pub horizon: usize,
}

impl Clip {
    pub fn new(
        frames: Vec<Frame>,
        flows: Vec<FlowField>,
        maps: Vec<SemanticMap>,
        observed_len: usize,
        horizon: usize,
    ) -> Result<Self> {
        let len = observed_len + horizon;
        if observed_len < 1 || horizon < 1 {
            return Err(Error::Contract(
                "clip needs observed_len >= 1 and horizon >= 1".into(),
            ));
        }
        if frames.len() != len || flows.len() != len || maps.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "clip sequences must all have length {len}"
            )));
        }
        let (h, w) = (frames[0].height(), frames[0].width());
        let c = maps[0].num_classes();
        for t in 0..len {
            if frames[t].height() != h
                || frames[t].width() != w
                || flows[t].height() != h
                || flows[t].width() != w
                || maps[t].height() != h
                || maps[t].width() != w
                || maps[t].num_classes() != c
            {
                return Err(Error::ShapeMismatch(format!("clip element {t} disagrees on H/W/C")));
            }
        }
        Ok(Clip {
            frames,
            flows,
            maps,
            observed_len,
            horizon,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn num_classes(&self) -> usize {
        self.maps[0].num_classes()
    }
}

/// Split `map`/`flow` into per-class binary masks and masked flows.
pub fn decompose(map: &SemanticMap, flow: &FlowField) -> Result<ClassDecomposition> {
    let (h, w) = (map.height(), map.width());
    if flow.height() != h || flow.width() != w {
        return Err(Error::ShapeMismatch(format!(
            "map {}x{} vs flow {}x{}",
            h,
            w,
            flow.height(),
            flow.width()
        )));
    }
    let c = map.num_classes();
    let mut masks = Tensor::zeros(&[c, h, w]);
    let mut masked_flows = Tensor::zeros(&[c, 2, h, w]);
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            let k = map.label(y, x) as usize;
            let i = y * w + x;
            masks.data_mut()[k * hw + i] = 1.0;
            let (u, v) = flow.uv(y, x);
            masked_flows.data_mut()[(k * 2) * hw + i] = u;
            masked_flows.data_mut()[(k * 2 + 1) * hw + i] = v;
        }
    }
    Ok(ClassDecomposition {
        masks,
        masked_flows,
    })
}

/// Sample `image` (`[D, H, W]`) at absolute positions `coords`
/// (`[2, H', W']`, channel 0 = x, channel 1 = y) with bilinear
/// interpolation. Out-of-bounds positions clamp to the border.
pub fn bilinear_sample(image: &Tensor, coords: &Tensor) -> Result<Tensor> {
    if image.shape().len() != 3 || coords.shape().len() != 3 || coords.shape()[0] != 2 {
        return Err(Error::ShapeMismatch(format!(
            "bilinear_sample image {:?} coords {:?}",
            image.shape(),
            coords.shape()
        )));
    }
    if !coords.is_finite() {
        return Err(Error::NonFinite("sampling coordinates".into()));
    }
    let (d, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (oh, ow) = (coords.shape()[1], coords.shape()[2]);
    let mut out = Tensor::zeros(&[d, oh, ow]);
    for y in 0..oh {
        for x in 0..ow {
            let sx = coords.at3(0, y, x).clamp(0.0, (w - 1) as f64);
            let sy = coords.at3(1, y, x).clamp(0.0, (h - 1) as f64);
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = sx - x0 as f64;
            let fy = sy - y0 as f64;
            for c in 0..d {
                let v00 = image.at3(c, y0, x0);
                let v01 = image.at3(c, y0, x1);
                let v10 = image.at3(c, y1, x0);
                let v11 = image.at3(c, y1, x1);
                *out.at3_mut(c, y, x) = v00 * (1.0 - fx) * (1.0 - fy)
                    + v01 * fx * (1.0 - fy)
                    + v10 * (1.0 - fx) * fy
                    + v11 * fx * fy;
            }
        }
    }
    Ok(out)
}

/// Identity sampling grid for an `H x W` domain: `coords[0] = x`, `coords[1] = y`.
pub fn identity_grid(h: usize, w: usize) -> Tensor {
    let mut g = Tensor::zeros(&[2, h, w]);
    for y in 0..h {
        for x in 0..w {
            *g.at3_mut(0, y, x) = x as f64;
            *g.at3_mut(1, y, x) = y as f64;
        }
    }
    g
}

/// Binarized label-gradient map: 1 where the label differs from its right
/// or bottom neighbour (forward differences), else 0. Invariant to class
/// relabeling by construction.
pub fn label_gradient(map: &SemanticMap) -> Tensor {
    let (h, w) = (map.height(), map.width());
    let mut g = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let l = map.label(y, x);
            let dx = x + 1 < w && map.label(y, x + 1) != l;
            let dy = y + 1 < h && map.label(y + 1, x) != l;
            if dx || dy {
                g.data_mut()[y * w + x] = 1.0;
            }
        }
    }
    g
}

/// Normalized 2-D Gaussian kernel with the given variance, truncated at
/// three standard deviations.
pub fn gaussian_kernel_2d(variance: f64) -> Tensor {
    let sigma = variance.sqrt();
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let size = 2 * radius + 1;
    let mut k = Tensor::zeros(&[size, size]);
    let mut sum = 0.0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - radius as f64;
            let dx = x as f64 - radius as f64;
            let v = (-(dx * dx + dy * dy) / (2.0 * variance)).exp();
            k.data_mut()[y * size + x] = v;
            sum += v;
        }
    }
    k.scale_in_place(1.0 / sum);
    k
}

/// Boundary-emphasis weights: `1 + alpha * (G * grad)` where `grad` is the
/// binarized label gradient and `G` a normalized Gaussian of the given
/// variance (zero padding at the image border).
pub fn boundary_weights(map: &SemanticMap, alpha: f64, variance: f64) -> Result<BoundaryWeightMap> {
    if alpha < 0.0 {
        return Err(Error::Contract("alpha must be >= 0".into()));
    }
    if variance <= 0.0 {
        return Err(Error::Contract("variance must be > 0".into()));
    }
    let (h, w) = (map.height(), map.width());
    let grad = label_gradient(map);
    let kernel = gaussian_kernel_2d(variance);
    let ks = kernel.shape()[0];
    let radius = ks / 2;
    let mut weights = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ky in 0..ks {
                let sy = y as i64 + ky as i64 - radius as i64;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for kx in 0..ks {
                    let sx = x as i64 + kx as i64 - radius as i64;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    acc += kernel.data()[ky * ks + kx] * grad.data()[sy as usize * w + sx as usize];
                }
            }
            weights.data_mut()[y * w + x] = 1.0 + alpha * acc;
        }
    }
    Ok(BoundaryWeightMap {
        weights,
        alpha,
        gaussian_variance: variance,
    })
}

/// Average-pool a `[C, H, W]` tensor by an integer factor. H and W must be
/// divisible by the factor.
pub fn avg_downsample(x: &Tensor, factor: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(h % factor == 0 && w % factor == 0, "size not divisible by factor");
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let norm = 1.0 / (factor * factor) as f64;
    for k in 0..c {
        for y in 0..oh {
            for x_ in 0..ow {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += x.at3(k, y * factor + dy, x_ * factor + dx);
                    }
                }
                *out.at3_mut(k, y, x_) = acc * norm;
            }
        }
    }
    out
}
