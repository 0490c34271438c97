//! Conditional dis-occlusion inpainting.
//!
//! The generator is a small U-Net whose encoder uses partial (mask-
//! renormalized) convolutions over the warped anchor frame, conditioned on
//! the predicted soft semantic map and the dis-occlusion mask. Training is
//! adversarial against a frame discriminator and a spatiotemporal clip
//! discriminator (3-D convolutions), with a least-squares GAN objective
//! and a fixed random multi-scale feature pyramid standing in for a
//! pretrained perceptual network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::partial::mask_update;
use crate::nn::{ParamSet, Tape, VarId};
use crate::scene::{Frame, SoftSemanticMap};
use crate::tensor::Tensor;
use crate::warp::{DisocclusionMask, WarpedFrame};

pub use crate::nn::partial::partial_conv;

/// Seed of the frozen perceptual-proxy pyramid.
const PERCEPTUAL_SEED: u64 = 0x7065_7263;

/// Loss weights of the inpainting objective.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintLossWeights {
    /// Perceptual term.
    pub lambda: f64,
    /// Frame-adversarial term.
    pub gamma: f64,
    /// Clip-adversarial term.
    pub eta: f64,
}

impl Default for InpaintLossWeights {
    fn default() -> Self {
        InpaintLossWeights {
            lambda: 2.0,
            gamma: 2.0,
            eta: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct InpaintConfig {
    pub num_classes: usize,
    /// Channel width of the first U-Net stage.
    pub base_channels: usize,
    /// Channel width of the first discriminator stage.
    pub disc_channels: usize,
    pub weights: InpaintLossWeights,
}

impl Default for InpaintConfig {
    fn default() -> Self {
        InpaintConfig {
            num_classes: 3,
            base_channels: 12,
            disc_channels: 12,
            weights: InpaintLossWeights::default(),
        }
    }
}

/// Inputs of one inpainting call.
#[derive(Debug, Clone)]
pub struct InpaintInput {
    pub anchor: WarpedFrame,
    pub mask: DisocclusionMask,
    pub condition: SoftSemanticMap,
}

/// Per-encoder-stage validity masks and renormalization constants,
/// precomputed outside the tape (the mask path carries no gradients).
pub struct MaskPyramid {
    /// (input mask, renorm factor, coverage) per partial-conv layer.
    stages: Vec<(Tensor, Tensor, Tensor)>,
}

impl MaskPyramid {
    /// Build the chain for the 4 encoder stages (stride 1, then three
    /// stride-2 halvings).
    pub fn build(validity: &Tensor) -> Self {
        let mut stages = Vec::with_capacity(4);
        let mut mask = validity.clone();
        for stage in 0..4 {
            let stride = if stage == 0 { 1 } else { 2 };
            let (updated, factor, cover) = mask_update(&mask, 3, 1, stride);
            stages.push((mask.clone(), factor, cover));
            mask = updated;
        }
        MaskPyramid { stages }
    }
}

pub struct InpaintModel {
    pub config: InpaintConfig,
    pub params: ParamSet,
}

impl InpaintModel {
    pub fn new(config: InpaintConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = config.base_channels;
        let c = config.num_classes;
        let bound = 0.05;
        let mut p = ParamSet::new();
        // encoder: partial convs over the anchor, ordinary conv over the
        // condition (labels are known inside the holes)
        p.init_uniform("enc1.w", &[b, 3, 3, 3], bound, &mut rng);
        p.init_zeros("enc1.b", &[b]);
        p.init_uniform("cond.w", &[b, c + 1, 3, 3], bound, &mut rng);
        p.init_zeros("cond.b", &[b]);
        p.init_uniform("enc2.w", &[2 * b, b, 3, 3], bound, &mut rng);
        p.init_zeros("enc2.b", &[2 * b]);
        p.init_uniform("enc3.w", &[4 * b, 2 * b, 3, 3], bound, &mut rng);
        p.init_zeros("enc3.b", &[4 * b]);
        p.init_uniform("enc4.w", &[4 * b, 4 * b, 3, 3], bound, &mut rng);
        p.init_zeros("enc4.b", &[4 * b]);
        // decoder with skip connections
        p.init_uniform("dec3.w", &[2 * b, 4 * b + 4 * b, 3, 3], bound, &mut rng);
        p.init_zeros("dec3.b", &[2 * b]);
        p.init_uniform("dec2.w", &[b, 2 * b + 2 * b, 3, 3], bound, &mut rng);
        p.init_zeros("dec2.b", &[b]);
        p.init_uniform("dec1.w", &[b, b + b, 3, 3], bound, &mut rng);
        p.init_zeros("dec1.b", &[b]);
        p.init_uniform("out.w", &[3, b, 3, 3], bound, &mut rng);
        p.init_zeros("out.b", &[3]);
        InpaintModel { config, params: p }
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Full generator pass on the tape. `anchor` is the `[3, H, W]` warped
    /// frame (variable or constant), `cond` holds `[C+1, H, W]` condition
    /// channels (soft map + dis-occlusion mask).
    pub fn generator_forward(
        &self,
        tape: &mut Tape,
        anchor: VarId,
        pyramid: &MaskPyramid,
        cond: VarId,
    ) -> VarId {
        let p = &self.params;
        let enc1_w = tape.param(p, "enc1.w");
        let enc1_b = tape.param(p, "enc1.b");
        let cond_w = tape.param(p, "cond.w");
        let cond_b = tape.param(p, "cond.b");
        let enc2_w = tape.param(p, "enc2.w");
        let enc2_b = tape.param(p, "enc2.b");
        let enc3_w = tape.param(p, "enc3.w");
        let enc3_b = tape.param(p, "enc3.b");
        let enc4_w = tape.param(p, "enc4.w");
        let enc4_b = tape.param(p, "enc4.b");
        let dec3_w = tape.param(p, "dec3.w");
        let dec3_b = tape.param(p, "dec3.b");
        let dec2_w = tape.param(p, "dec2.w");
        let dec2_b = tape.param(p, "dec2.b");
        let dec1_w = tape.param(p, "dec1.w");
        let dec1_b = tape.param(p, "dec1.b");
        let out_w = tape.param(p, "out.w");
        let out_b = tape.param(p, "out.b");

        let s = &pyramid.stages;
        let pc1 = tape.partial_conv2d(
            anchor, enc1_w, enc1_b, 1, 1, s[0].0.clone(), s[0].1.clone(), s[0].2.clone(),
        );
        let cv = tape.conv2d(cond, cond_w, cond_b, 1, 1, 1);
        let sum1 = tape.add(pc1, cv);
        let e1 = tape.leaky_relu(sum1, 0.2);
        let pc2 = tape.partial_conv2d(
            e1, enc2_w, enc2_b, 1, 2, s[1].0.clone(), s[1].1.clone(), s[1].2.clone(),
        );
        let e2 = tape.leaky_relu(pc2, 0.2);
        let pc3 = tape.partial_conv2d(
            e2, enc3_w, enc3_b, 1, 2, s[2].0.clone(), s[2].1.clone(), s[2].2.clone(),
        );
        let e3 = tape.leaky_relu(pc3, 0.2);
        let pc4 = tape.partial_conv2d(
            e3, enc4_w, enc4_b, 1, 2, s[3].0.clone(), s[3].1.clone(), s[3].2.clone(),
        );
        let e4 = tape.leaky_relu(pc4, 0.2);

        let u3 = tape.upsample_nearest(e4, 2);
        let c3 = tape.concat(&[u3, e3]);
        let d3c = tape.conv2d(c3, dec3_w, dec3_b, 1, 1, 1);
        let d3 = tape.leaky_relu(d3c, 0.2);
        let u2 = tape.upsample_nearest(d3, 2);
        let c2 = tape.concat(&[u2, e2]);
        let d2c = tape.conv2d(c2, dec2_w, dec2_b, 1, 1, 1);
        let d2 = tape.leaky_relu(d2c, 0.2);
        let u1 = tape.upsample_nearest(d2, 2);
        let c1 = tape.concat(&[u1, e1]);
        let d1c = tape.conv2d(c1, dec1_w, dec1_b, 1, 1, 1);
        let d1 = tape.leaky_relu(d1c, 0.2);
        let pre = tape.conv2d(d1, out_w, out_b, 1, 1, 1);
        tape.sigmoid(pre)
    }

    /// Inference entry: complete the dis-occluded regions of one anchor
    /// frame.
    pub fn inpaint(&self, input: &InpaintInput) -> Result<Frame> {
        let c = self.config.num_classes;
        if input.condition.num_classes() != c {
            return Err(Error::ShapeMismatch(format!(
                "condition has {} classes, model expects {c}",
                input.condition.num_classes()
            )));
        }
        let (h, w) = (input.mask.height(), input.mask.width());
        if input.anchor.pixels.shape() != [3, h, w] {
            return Err(Error::ShapeMismatch("anchor / mask size".into()));
        }
        let mut tape = Tape::new();
        let anchor = tape.constant(input.anchor.pixels.clone());
        let pyramid = MaskPyramid::build(&input.mask.validity());
        let cond = tape.constant(condition_channels(&input.condition, &input.mask));
        let out = self.generator_forward(&mut tape, anchor, &pyramid, cond);
        Frame::new(tape.value(out).clone(), 0)
    }
}

/// `[C+1, H, W]` condition input: soft map channels plus the
/// dis-occlusion mask as an explicit channel.
pub fn condition_channels(condition: &SoftSemanticMap, mask: &DisocclusionMask) -> Tensor {
    let (c, h, w) = (
        condition.probs.shape()[0],
        condition.probs.shape()[1],
        condition.probs.shape()[2],
    );
    let mut out = Tensor::zeros(&[c + 1, h, w]);
    for k in 0..c {
        out.plane_mut(k).copy_from_slice(condition.probs.plane(k));
    }
    for (i, &m) in mask.as_slice().iter().enumerate() {
        out.plane_mut(c)[i] = if m { 1.0 } else { 0.0 };
    }
    out
}

/// Frame discriminator (patch scores over `[3+C, H, W]`) and clip
/// discriminator (3-D convolutions over `[3+C, K, H, W]`).
pub struct Discriminators {
    pub num_classes: usize,
    pub params: ParamSet,
}

impl Discriminators {
    pub fn new(num_classes: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = channels;
        let cin = 3 + num_classes;
        let bound = 0.05;
        let mut p = ParamSet::new();
        p.init_uniform("fx.c1.w", &[d, cin, 3, 3], bound, &mut rng);
        p.init_zeros("fx.c1.b", &[d]);
        p.init_uniform("fx.c2.w", &[2 * d, d, 3, 3], bound, &mut rng);
        p.init_zeros("fx.c2.b", &[2 * d]);
        p.init_uniform("fx.c3.w", &[4 * d, 2 * d, 3, 3], bound, &mut rng);
        p.init_zeros("fx.c3.b", &[4 * d]);
        p.init_uniform("fx.out.w", &[1, 4 * d, 3, 3], bound, &mut rng);
        p.init_zeros("fx.out.b", &[1]);
        p.init_uniform("fv.c1.w", &[d, cin, 3, 3, 3], bound, &mut rng);
        p.init_zeros("fv.c1.b", &[d]);
        p.init_uniform("fv.c2.w", &[2 * d, d, 3, 3, 3], bound, &mut rng);
        p.init_zeros("fv.c2.b", &[2 * d]);
        p.init_uniform("fv.c3.w", &[4 * d, 2 * d, 3, 3, 3], bound, &mut rng);
        p.init_zeros("fv.c3.b", &[4 * d]);
        p.init_uniform("fv.out.w", &[1, 4 * d, 3, 3, 3], bound, &mut rng);
        p.init_zeros("fv.out.b", &[1]);
        Discriminators {
            num_classes,
            params: p,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    /// Patch realness scores of one frame conditioned on its soft map.
    pub fn score_frame(&self, tape: &mut Tape, frame: VarId, cond: VarId) -> VarId {
        let p = &self.params;
        let w1 = tape.param(p, "fx.c1.w");
        let b1 = tape.param(p, "fx.c1.b");
        let w2 = tape.param(p, "fx.c2.w");
        let b2 = tape.param(p, "fx.c2.b");
        let w3 = tape.param(p, "fx.c3.w");
        let b3 = tape.param(p, "fx.c3.b");
        let wo = tape.param(p, "fx.out.w");
        let bo = tape.param(p, "fx.out.b");
        let x = tape.concat(&[frame, cond]);
        let a = tape.conv2d(x, w1, b1, 1, 2, 1);
        let a = tape.leaky_relu(a, 0.2);
        let a = tape.conv2d(a, w2, b2, 1, 2, 1);
        let a = tape.leaky_relu(a, 0.2);
        let a = tape.conv2d(a, w3, b3, 1, 2, 1);
        let a = tape.leaky_relu(a, 0.2);
        tape.conv2d(a, wo, bo, 1, 1, 1)
    }

    /// Patch realness scores of a K-frame clip; input is the stacked
    /// `[3+C, K, H, W]` volume built by [`clip_volume`].
    pub fn score_clip(&self, tape: &mut Tape, volume: VarId) -> VarId {
        let p = &self.params;
        let w1 = tape.param(p, "fv.c1.w");
        let b1 = tape.param(p, "fv.c1.b");
        let w2 = tape.param(p, "fv.c2.w");
        let b2 = tape.param(p, "fv.c2.b");
        let w3 = tape.param(p, "fv.c3.w");
        let b3 = tape.param(p, "fv.c3.b");
        let wo = tape.param(p, "fv.out.w");
        let bo = tape.param(p, "fv.out.b");
        let a = tape.conv3d(volume, w1, b1, (1, 1, 1), (1, 2, 2));
        let a = tape.leaky_relu(a, 0.2);
        let a = tape.conv3d(a, w2, b2, (1, 1, 1), (2, 2, 2));
        let a = tape.leaky_relu(a, 0.2);
        let a = tape.conv3d(a, w3, b3, (1, 1, 1), (1, 2, 2));
        let a = tape.leaky_relu(a, 0.2);
        tape.conv3d(a, wo, bo, (1, 1, 1), (1, 1, 1))
    }
}

/// Stack per-step frame and condition vars into the `[3+C, K, H, W]` clip
/// volume consumed by the clip discriminator. Frames and conditions are
/// `[3, H, W]` / `[C, H, W]` vars; the volume interleaves channel-major.
pub fn clip_volume(tape: &mut Tape, frames: &[VarId], conds: &[VarId]) -> VarId {
    assert_eq!(frames.len(), conds.len());
    let k = frames.len();
    // concat along axis 0 then treat as [K*(3+C), H, W] -> reshape to
    // channel-major volume by interleaving: use interleave_groups with K
    // groups, then a groups->channels transpose via slice/concat.
    let mut per_step = Vec::with_capacity(k);
    for i in 0..k {
        per_step.push(tape.concat(&[frames[i], conds[i]]));
    }
    let cpf = {
        let t = tape.value(per_step[0]);
        t.shape()[0]
    };
    // channel c of the volume is [frame0_c, frame1_c, ...]: build channel
    // planes step-major then reorder
    let stacked = tape.concat(&per_step); // [K*cpf, H, W]
    let mut channel_parts = Vec::with_capacity(cpf);
    for c in 0..cpf {
        // per-group slice with groups = K picks channel c of every step
        channel_parts.push(tape.slice_groups(stacked, k, cpf, c, 1));
    }
    let vol = tape.concat(&channel_parts); // [cpf*K, H, W]
    let (h, w) = {
        let t = tape.value(vol);
        (t.shape()[1], t.shape()[2])
    };
    // reinterpret as [cpf, K, H, W]; memory layout already matches
    tape.reshape(vol, &[cpf, k, h, w])
}

/// Fixed random convolutional pyramid standing in for a pretrained
/// perceptual network: three scales, each compared by feature L1.
pub fn perceptual_weights() -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
    (0..3)
        .map(|_| {
            let shape = [8usize, 3, 3, 3];
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| rand::Rng::random_range(&mut rng, -0.3..0.3))
                .collect();
            Tensor::from_vec(&shape, data)
        })
        .collect()
}

/// Multi-scale feature L1 between prediction (var) and reference (const).
pub fn loss_perceptual(tape: &mut Tape, pred: VarId, real: &Tensor) -> VarId {
    let weights = perceptual_weights();
    let zero_b = Tensor::zeros(&[8]);
    let mut terms = Vec::with_capacity(weights.len());
    let mut cur_pred = pred;
    let mut cur_real = real.clone();
    for w in &weights {
        let wv = tape.constant(w.clone());
        let bv = tape.constant(zero_b.clone());
        let fp = tape.conv2d(cur_pred, wv, bv, 1, 1, 1);
        let fp = tape.relu(fp);
        let freal = {
            let wv2 = w.clone();
            let fr = crate::nn::kernels::conv2d(&cur_real, &wv2, &zero_b, 1, 1, 1);
            fr.map(|v| v.max(0.0))
        };
        let frv = tape.constant(freal);
        let n = tape.value(fp).numel() as f64;
        let l1 = tape.weighted_l1(fp, frv, None);
        terms.push(tape.scale(l1, 1.0 / n));
        cur_pred = tape.avg_pool2(cur_pred);
        cur_real = crate::nn::kernels::avg_pool2(&cur_real);
    }
    tape.add_all(&terms)
}

/// Generator objective: co-visible L1 reconstruction against the anchor,
/// perceptual similarity to the real frames, and LSGAN terms pushing both
/// discriminators toward "real".
#[allow(clippy::too_many_arguments)]
pub fn loss_inpaint(
    tape: &mut Tape,
    preds: &[VarId],
    anchors: &[VarId],
    reals: &[&Tensor],
    masks: &[&DisocclusionMask],
    frame_scores: &[VarId],
    clip_score: Option<VarId>,
    weights: &InpaintLossWeights,
) -> VarId {
    assert_eq!(preds.len(), anchors.len());
    assert_eq!(preds.len(), masks.len());
    let mut terms = Vec::new();
    for ((&p, &a), m) in preds.iter().zip(anchors).zip(masks) {
        let (h, w) = (m.height(), m.width());
        let validity = m.validity();
        let mut w3 = Tensor::zeros(&[3, h, w]);
        for c in 0..3 {
            w3.plane_mut(c).copy_from_slice(validity.data());
        }
        terms.push(tape.weighted_l1(p, a, Some(w3)));
    }
    for (&p, r) in preds.iter().zip(reals) {
        let per = loss_perceptual(tape, p, r);
        terms.push(tape.scale(per, weights.lambda));
    }
    for &s in frame_scores {
        let adv = tape.mse_scalar_target(s, 1.0);
        terms.push(tape.scale(adv, weights.gamma));
    }
    if let Some(s) = clip_score {
        let adv = tape.mse_scalar_target(s, 1.0);
        terms.push(tape.scale(adv, weights.eta));
    }
    tape.add_all(&terms)
}
