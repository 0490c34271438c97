//! Semantic-aware dynamics: per-class recurrent encoding of past masks and
//! flows, context-conditioned decoding of future steps, late fusion into a
//! whole-image soft map and flow field, a stochastic posterior over the
//! future, and the combined training loss.
//!
//! Per-class computation is realized with grouped convolutions (one group
//! per class); the single-class baseline is the same wiring with one group
//! and naively concatenated inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradStore, ParamSet, Tape, VarId};
use crate::scene::{avg_downsample, boundary_weights, decompose, Clip, FlowField, SemanticMap, SoftSemanticMap};
use crate::synthworld::derive_seed;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DynamicsConfig {
    /// Number of semantic classes C.
    pub num_classes: usize,
    /// Hidden channels per class.
    pub hidden: usize,
    /// Spatial downsample factor between image and latent resolution.
    pub downsample: usize,
    /// Hidden width of the fusion ConvNet.
    pub fusion_hidden: usize,
    /// Hidden width of the per-class context MLP.
    pub context_hidden: usize,
    /// Observed steps T and prediction horizon K (defaults; the forward
    /// pass follows the clip's own split).
    pub observed: usize,
    pub horizon: usize,
    /// Boundary-weight emphasis.
    pub alpha: f64,
    /// Variance of the boundary-smoothing Gaussian.
    pub boundary_variance: f64,
    /// KL weight.
    pub beta: f64,
    /// Train with the stochastic posterior (otherwise deterministic).
    pub stochastic: bool,
    /// Per-class grouping; `false` gives the single-class baseline with
    /// ordinary (ungrouped) layers of larger parameter count.
    pub grouped: bool,
    /// Output scaling of the flow head (pixels per unit activation).
    pub flow_scale: f64,
}

impl Default for DynamicsConfig {
    fn default() -> Self {
        DynamicsConfig {
            num_classes: 3,
            hidden: 32,
            downsample: 4,
            fusion_hidden: 16,
            context_hidden: 64,
            observed: 5,
            horizon: 5,
            alpha: 5.0,
            boundary_variance: 9.0,
            beta: 0.1,
            stochastic: true,
            grouped: true,
            flow_scale: 4.0,
        }
    }
}

impl DynamicsConfig {
    pub fn groups(&self) -> usize {
        if self.grouped {
            self.num_classes
        } else {
            1
        }
    }

    /// Hidden channels per group.
    pub fn per_group(&self) -> usize {
        if self.grouped {
            self.hidden
        } else {
            self.num_classes * self.hidden
        }
    }

    /// Input channels per group.
    pub fn in_per_group(&self) -> usize {
        if self.grouped {
            3
        } else {
            self.num_classes + 2
        }
    }

    /// Total hidden channels across classes.
    pub fn hidden_total(&self) -> usize {
        self.num_classes * self.hidden
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.hidden == 0 || self.downsample == 0 {
            return Err(Error::Config("dynamics dimensions must be positive".into()));
        }
        if self.alpha < 0.0 || self.boundary_variance <= 0.0 || self.beta < 0.0 {
            return Err(Error::Config("invalid loss constants".into()));
        }
        Ok(())
    }
}

/// How the decoder is driven at prediction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// No noise; output is a pure function of the inputs.
    Deterministic,
    /// Per-class standard-normal noise added to the encoder summary
    /// (prior sampling), seeded for reproducibility.
    Stochastic { seed: u64 },
}

/// Recurrent state of the (grouped) encoder or decoder.
#[derive(Debug, Clone, Copy)]
pub struct EncoderState {
    pub hidden: VarId,
    pub cell: VarId,
}

/// Posterior mean/variance state.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorState {
    pub mean: VarId,
    pub variance: VarId,
}

/// One decoded step: updated state, shared embedding and the two heads.
#[derive(Debug, Clone, Copy)]
pub struct DecoderStep {
    pub state: EncoderState,
    pub embedding: VarId,
    /// `[C, h, w]` per-class mask logits at latent resolution.
    pub mask_logits: VarId,
    /// `[2C, h, w]` (grouped) or `[2, h, w]` (baseline) flow prediction.
    pub flow_pred: VarId,
}

pub struct DynamicsModel {
    pub config: DynamicsConfig,
    pub params: ParamSet,
}

/// Tape-bound parameter ids for one forward pass.
pub struct BoundDynamics {
    cfg: DynamicsConfig,
    enc_w: VarId,
    enc_b: VarId,
    post_w: VarId,
    post_b: VarId,
    ctx_fc1_w: VarId,
    ctx_fc1_b: VarId,
    ctx_fc2_w: VarId,
    ctx_fc2_b: VarId,
    dec_w: VarId,
    dec_b: VarId,
    emb_w: VarId,
    emb_b: VarId,
    mask_w: VarId,
    mask_b: VarId,
    flow_w: VarId,
    flow_b: VarId,
    fuse_w1: VarId,
    fuse_b1: VarId,
    fuse_w2: VarId,
    fuse_b2: VarId,
    fuse_w3: VarId,
    fuse_b3: VarId,
}

/// Outputs of one full prediction rollout.
pub struct Prediction {
    pub soft_maps: Vec<SoftSemanticMap>,
    pub flows: Vec<FlowField>,
}

/// Tape handles of the training-loss components.
pub struct LossHandles {
    pub total: VarId,
    pub flow: VarId,
    pub semantic: VarId,
    pub kl: Option<VarId>,
    pub fused_maps: Vec<VarId>,
    pub fused_flows: Vec<VarId>,
}

impl DynamicsModel {
    /// Initialize parameters: small uniform weights (+-0.05), zero biases,
    /// forget-gate bias +1.
    pub fn new(config: DynamicsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = config.groups();
        let npg = config.per_group();
        let inpg = config.in_per_group();
        let ht = config.hidden_total();
        let mid = config.context_hidden;
        let c = config.num_classes;
        let f = config.fusion_hidden;
        let bound = 0.05;

        let mut p = ParamSet::new();
        p.init_uniform("enc.gates.w", &[g * 4 * npg, inpg + npg, 3, 3], bound, &mut rng);
        p.insert("enc.gates.b", forget_bias(g, npg));
        p.init_uniform("post.w", &[g * 2 * npg, inpg + 2 * npg, 3, 3], bound, &mut rng);
        p.init_zeros("post.b", &[g * 2 * npg]);
        p.init_uniform("ctx.fc1.w", &[g, mid, ht], bound, &mut rng);
        p.init_zeros("ctx.fc1.b", &[g, mid]);
        p.init_uniform("ctx.fc2.w", &[g, npg, mid], bound, &mut rng);
        p.init_zeros("ctx.fc2.b", &[g, npg]);
        p.init_uniform("dec.gates.w", &[g * 4 * npg, 2 * npg, 3, 3], bound, &mut rng);
        p.insert("dec.gates.b", forget_bias(g, npg));
        p.init_uniform("dec.embed.w", &[g * npg, npg, 3, 3], bound, &mut rng);
        p.init_zeros("dec.embed.b", &[g * npg]);
        // heads: one mask channel and one 2-channel flow per class
        // (grouped) or C mask channels and one flow field (baseline)
        let (mask_out, flow_out) = if config.grouped { (c, 2 * c) } else { (c, 2) };
        p.init_uniform("dec.mask.w", &[mask_out, npg, 3, 3], bound, &mut rng);
        p.init_zeros("dec.mask.b", &[mask_out]);
        p.init_uniform("dec.flow.w", &[flow_out, npg, 3, 3], bound, &mut rng);
        p.init_zeros("dec.flow.b", &[flow_out]);
        p.init_uniform("fuse.c1.w", &[f, c, 3, 3], bound, &mut rng);
        p.init_zeros("fuse.c1.b", &[f]);
        p.init_uniform("fuse.c2.w", &[f, f, 3, 3], bound, &mut rng);
        p.init_zeros("fuse.c2.b", &[f]);
        p.init_uniform("fuse.c3.w", &[c, f, 3, 3], bound, &mut rng);
        p.init_zeros("fuse.c3.b", &[c]);
        Ok(DynamicsModel { config, params: p })
    }

    pub fn param_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundDynamics {
        let p = &self.params;
        BoundDynamics {
            cfg: self.config.clone(),
            enc_w: tape.param(p, "enc.gates.w"),
            enc_b: tape.param(p, "enc.gates.b"),
            post_w: tape.param(p, "post.w"),
            post_b: tape.param(p, "post.b"),
            ctx_fc1_w: tape.param(p, "ctx.fc1.w"),
            ctx_fc1_b: tape.param(p, "ctx.fc1.b"),
            ctx_fc2_w: tape.param(p, "ctx.fc2.w"),
            ctx_fc2_b: tape.param(p, "ctx.fc2.b"),
            dec_w: tape.param(p, "dec.gates.w"),
            dec_b: tape.param(p, "dec.gates.b"),
            emb_w: tape.param(p, "dec.embed.w"),
            emb_b: tape.param(p, "dec.embed.b"),
            mask_w: tape.param(p, "dec.mask.w"),
            mask_b: tape.param(p, "dec.mask.b"),
            flow_w: tape.param(p, "dec.flow.w"),
            flow_b: tape.param(p, "dec.flow.b"),
            fuse_w1: tape.param(p, "fuse.c1.w"),
            fuse_b1: tape.param(p, "fuse.c1.b"),
            fuse_w2: tape.param(p, "fuse.c2.w"),
            fuse_b2: tape.param(p, "fuse.c2.b"),
            fuse_w3: tape.param(p, "fuse.c3.w"),
            fuse_b3: tape.param(p, "fuse.c3.b"),
        }
    }

    /// Per-step encoder input constants at latent resolution for steps in
    /// `range`. Grouped models interleave `[mask_c, u_c, v_c]` per class;
    /// the baseline concatenates all masks with the raw flow. `route`
    /// redirects class c's decomposition into slot `route.position(c)`, in
    /// other words slot g receives class `route[g]`.
    pub fn encoder_inputs(
        &self,
        clip: &Clip,
        range: std::ops::Range<usize>,
        route: Option<&[usize]>,
    ) -> Result<Vec<Tensor>> {
        let cfg = &self.config;
        if clip.num_classes() != cfg.num_classes {
            return Err(Error::Config(format!(
                "clip has {} classes, model expects {}",
                clip.num_classes(),
                cfg.num_classes
            )));
        }
        let c = cfg.num_classes;
        let (h, w) = (clip.height(), clip.width());
        if h % cfg.downsample != 0 || w % cfg.downsample != 0 {
            return Err(Error::Config("canvas not divisible by downsample".into()));
        }
        let mut out = Vec::with_capacity(range.len());
        for t in range {
            let d = decompose(&clip.maps[t], &clip.flows[t])?;
            let full = if cfg.grouped {
                let mut full = Tensor::zeros(&[c * 3, h, w]);
                for k in 0..c {
                    let src_k = route.map_or(k, |r| r[k]);
                    full.plane_mut(3 * k).copy_from_slice(d.masks.plane(src_k));
                    let hw = h * w;
                    let flows = d.masked_flows.data();
                    full.plane_mut(3 * k + 1)
                        .copy_from_slice(&flows[(src_k * 2) * hw..(src_k * 2 + 1) * hw]);
                    full.plane_mut(3 * k + 2)
                        .copy_from_slice(&flows[(src_k * 2 + 1) * hw..(src_k * 2 + 2) * hw]);
                }
                full
            } else {
                let mut full = Tensor::zeros(&[c + 2, h, w]);
                for k in 0..c {
                    full.plane_mut(k).copy_from_slice(d.masks.plane(k));
                }
                full.plane_mut(c).copy_from_slice(clip.flows[t].vectors.plane(0));
                full.plane_mut(c + 1)
                    .copy_from_slice(clip.flows[t].vectors.plane(1));
                full
            };
            out.push(avg_downsample(&full, cfg.downsample));
        }
        Ok(out)
    }

    /// Full prediction rollout on observed inputs; returns K fused soft
    /// maps and flow fields.
    pub fn predict_sequence(
        &self,
        clip: &Clip,
        mode: PredictMode,
        route: Option<&[usize]>,
    ) -> Result<Prediction> {
        let mut tape = Tape::new();
        let handles = self.rollout(&mut tape, clip, mode, route, false)?;
        let mut soft_maps = Vec::with_capacity(handles.fused_maps.len());
        let mut flows = Vec::with_capacity(handles.fused_flows.len());
        for (&m, &f) in handles.fused_maps.iter().zip(&handles.fused_flows) {
            soft_maps.push(SoftSemanticMap::new(tape.value(m).clone())?);
            flows.push(FlowField::new(tape.value(f).clone())?);
        }
        Ok(Prediction { soft_maps, flows })
    }

    /// Build the training forward pass and loss on a fresh tape.
    /// In stochastic mode the posterior consumes the ground-truth future
    /// and the reparameterized sample feeds the decoder; `noise_seed`
    /// fixes the sample.
    pub fn training_loss(
        &self,
        tape: &mut Tape,
        clip: &Clip,
        noise_seed: u64,
    ) -> Result<LossHandles> {
        let mode = if self.config.stochastic {
            PredictMode::Stochastic { seed: noise_seed }
        } else {
            PredictMode::Deterministic
        };
        let handles = self.rollout(tape, clip, mode, None, true)?;
        Ok(handles)
    }

    /// One training step's gradients and loss values for a single clip.
    pub fn clip_gradients(&self, clip: &Clip, noise_seed: u64) -> Result<(f64, GradStore)> {
        let mut tape = Tape::new();
        let handles = self.training_loss(&mut tape, clip, noise_seed)?;
        let total = tape.value(handles.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite("dynamics loss".into()));
        }
        let grads = tape.backward(handles.total);
        let mut store = GradStore::new();
        tape.collect_param_grads(&grads, &mut store);
        Ok((total, store))
    }

    /// Shared rollout used by prediction and training.
    fn rollout(
        &self,
        tape: &mut Tape,
        clip: &Clip,
        mode: PredictMode,
        route: Option<&[usize]>,
        with_loss: bool,
    ) -> Result<LossHandles> {
        let cfg = &self.config;
        let t_obs = clip.observed_len;
        let k_hor = clip.horizon;
        let bound = self.bind(tape);
        let (h_img, w_img) = (clip.height(), clip.width());
        let (h_lat, w_lat) = (h_img / cfg.downsample, w_img / cfg.downsample);
        let ht = cfg.hidden_total();

        if with_loss && matches!(mode, PredictMode::Stochastic { .. }) && !cfg.stochastic {
            return Err(Error::Contract("noise requested for deterministic model".into()));
        }

        // encode the past
        let enc_in = self.encoder_inputs(clip, 0..t_obs, route)?;
        let mut state = EncoderState {
            hidden: tape.constant(Tensor::zeros(&[ht, h_lat, w_lat])),
            cell: tape.constant(Tensor::zeros(&[ht, h_lat, w_lat])),
        };
        for x in enc_in {
            let xv = tape.constant(x);
            state = bound.encode_step(tape, xv, state);
        }

        // stochastic path
        let mut kl = None;
        let dec_init_hidden = match mode {
            PredictMode::Deterministic => state.hidden,
            PredictMode::Stochastic { seed } => {
                let eps = standard_normal(&[ht, h_lat, w_lat], seed);
                let eps = tape.constant(eps);
                if with_loss {
                    // posterior over the ground-truth future, initialized
                    // at (h^T, 1)
                    let post_in = self.encoder_inputs(clip, t_obs..t_obs + k_hor, route)?;
                    let ones = tape.constant(Tensor::full(&[ht, h_lat, w_lat], 1.0));
                    let mut post = PosteriorState {
                        mean: state.hidden,
                        variance: ones,
                    };
                    for x in post_in {
                        let xv = tape.constant(x);
                        post = bound.posterior_step(tape, xv, post);
                    }
                    kl = Some(tape.kl_std_normal(post.mean, post.variance));
                    // z = u + sqrt(v) * eps, added to the encoder summary
                    let sd = tape.sqrt(post.variance);
                    let noise = tape.mul(sd, eps);
                    let z = tape.add(post.mean, noise);
                    tape.add(state.hidden, z)
                } else {
                    // test time samples the prior N(0, I)
                    tape.add(state.hidden, eps)
                }
            }
        };
        let dec_state0 = EncoderState {
            hidden: dec_init_hidden,
            cell: state.cell,
        };

        // context from all classes, broadcast back to the latent grid
        let ctx = bound.context_summary(tape, dec_init_hidden);
        let ctx_map = tape.broadcast_spatial(ctx, h_lat, w_lat);

        // decode K steps and fuse
        let mut dec_state = dec_state0;
        let mut fused_maps = Vec::with_capacity(k_hor);
        let mut fused_flows = Vec::with_capacity(k_hor);
        for _ in 0..k_hor {
            let step = bound.decode_step(tape, dec_state, ctx_map);
            dec_state = step.state;
            let (logits, flows) = match route {
                Some(r) if cfg.grouped => {
                    // place slot outputs back at their source classes
                    let inv = invert_route(r);
                    let l = tape.permute_groups(step.mask_logits, &inv, cfg.num_classes);
                    let f = tape.permute_groups(step.flow_pred, &inv, cfg.num_classes);
                    (l, f)
                }
                _ => (step.mask_logits, step.flow_pred),
            };
            let logits_up = tape.upsample_bilinear(logits, cfg.downsample);
            let soft = bound.fuse_masks(tape, logits_up);
            let flow_up = tape.upsample_bilinear(flows, cfg.downsample);
            let flow_scaled = tape.scale(flow_up, cfg.flow_scale);
            let fused_flow = if cfg.grouped {
                tape.fuse_flows(soft, flow_scaled)
            } else {
                flow_scaled
            };
            fused_maps.push(soft);
            fused_flows.push(fused_flow);
        }

        if !with_loss {
            // placeholder scalar; prediction callers ignore loss handles
            let zero = tape.constant(Tensor::scalar(0.0));
            return Ok(LossHandles {
                total: zero,
                flow: zero,
                semantic: zero,
                kl: None,
                fused_maps,
                fused_flows,
            });
        }

        let truth_flows: Vec<&FlowField> = (t_obs..t_obs + k_hor).map(|t| &clip.flows[t]).collect();
        let truth_maps: Vec<&SemanticMap> = (t_obs..t_obs + k_hor).map(|t| &clip.maps[t]).collect();
        let l_f = loss_flow(tape, &fused_flows, &truth_flows);
        let l_m = loss_semantic(tape, &fused_maps, &truth_maps, cfg.alpha, cfg.boundary_variance)?;
        let total = match kl {
            Some(kl_id) => {
                let kl_w = tape.scale(kl_id, cfg.beta);
                let fm = tape.add(l_f, l_m);
                tape.add(fm, kl_w)
            }
            None => tape.add(l_f, l_m),
        };
        Ok(LossHandles {
            total,
            flow: l_f,
            semantic: l_m,
            kl,
            fused_maps,
            fused_flows,
        })
    }
}

impl BoundDynamics {
    /// One grouped ConvLSTM step over the class-decomposed inputs.
    pub fn encode_step(&self, tape: &mut Tape, inputs: VarId, prev: EncoderState) -> EncoderState {
        let g = self.cfg.groups();
        let npg = self.cfg.per_group();
        let cat = tape.interleave_groups(&[inputs, prev.hidden], g);
        let gates = tape.conv2d(cat, self.enc_w, self.enc_b, 1, 1, g);
        let hc = tape.lstm_update(gates, prev.cell, g, npg);
        EncoderState {
            hidden: tape.slice_groups(hc, g, 2 * npg, 0, npg),
            cell: tape.slice_groups(hc, g, 2 * npg, npg, npg),
        }
    }

    /// One posterior recurrence step over ground-truth future inputs:
    /// raw = conv([x, u, v]); u' = raw_u, v' = softplus(raw_v) + 1e-6.
    pub fn posterior_step(
        &self,
        tape: &mut Tape,
        inputs: VarId,
        prev: PosteriorState,
    ) -> PosteriorState {
        let g = self.cfg.groups();
        let npg = self.cfg.per_group();
        let cat = tape.interleave_groups(&[inputs, prev.mean, prev.variance], g);
        let raw = tape.conv2d(cat, self.post_w, self.post_b, 1, 1, g);
        let mean = tape.slice_groups(raw, g, 2 * npg, 0, npg);
        let vraw = tape.slice_groups(raw, g, 2 * npg, npg, npg);
        let vsp = tape.softplus(vraw);
        let variance = tape.add_scalar(vsp, 1e-6);
        PosteriorState { mean, variance }
    }

    /// Per-class context vectors: every class's two-layer MLP reads the
    /// spatially pooled states of *all* classes. Returns the stacked
    /// `[C*n]` context vector.
    pub fn context_summary(&self, tape: &mut Tape, hidden: VarId) -> VarId {
        let g = self.cfg.groups();
        let pooled = tape.global_avg_pool(hidden);
        let mut parts = Vec::with_capacity(g);
        for c in 0..g {
            let w1 = tape.slice_outer(self.ctx_fc1_w, c);
            let b1 = tape.slice_outer(self.ctx_fc1_b, c);
            let w2 = tape.slice_outer(self.ctx_fc2_w, c);
            let b2 = tape.slice_outer(self.ctx_fc2_b, c);
            let a = tape.linear(pooled, w1, b1);
            let a = tape.relu(a);
            let ctx = tape.linear(a, w2, b2);
            parts.push(ctx);
        }
        tape.concat(&parts)
    }

    /// One decoder step: grouped ConvLSTM driven by the broadcast context,
    /// shared embedding, then separate mask and flow heads.
    pub fn decode_step(&self, tape: &mut Tape, prev: EncoderState, ctx_map: VarId) -> DecoderStep {
        let g = self.cfg.groups();
        let npg = self.cfg.per_group();
        let cat = tape.interleave_groups(&[ctx_map, prev.hidden], g);
        let gates = tape.conv2d(cat, self.dec_w, self.dec_b, 1, 1, g);
        let hc = tape.lstm_update(gates, prev.cell, g, npg);
        let hidden = tape.slice_groups(hc, g, 2 * npg, 0, npg);
        let cell = tape.slice_groups(hc, g, 2 * npg, npg, npg);
        let pre = tape.conv2d(hidden, self.emb_w, self.emb_b, 1, 1, g);
        let embedding = tape.relu(pre);
        let mask_logits = tape.conv2d(embedding, self.mask_w, self.mask_b, 1, 1, g);
        let flow_pred = tape.conv2d(embedding, self.flow_w, self.flow_b, 1, 1, g);
        DecoderStep {
            state: EncoderState { hidden, cell },
            embedding,
            mask_logits,
            flow_pred,
        }
    }

    /// Late fusion of per-class mask logits: three-layer ConvNet with a
    /// final per-pixel softmax.
    pub fn fuse_masks(&self, tape: &mut Tape, logits: VarId) -> VarId {
        let a = tape.conv2d(logits, self.fuse_w1, self.fuse_b1, 1, 1, 1);
        let a = tape.relu(a);
        let b = tape.conv2d(a, self.fuse_w2, self.fuse_b2, 1, 1, 1);
        let b = tape.relu(b);
        let c = tape.conv2d(b, self.fuse_w3, self.fuse_b3, 1, 1, 1);
        tape.softmax_channels(c)
    }
}

/// Sum over the horizon of elementwise L1 between predicted and true flows.
pub fn loss_flow(tape: &mut Tape, preds: &[VarId], truths: &[&FlowField]) -> VarId {
    assert_eq!(preds.len(), truths.len());
    let mut terms = Vec::with_capacity(preds.len());
    for (&p, t) in preds.iter().zip(truths) {
        let tv = tape.constant(t.vectors.clone());
        terms.push(tape.weighted_l1(p, tv, None));
    }
    tape.add_all(&terms)
}

/// Boundary-weighted cross-entropy summed over pixels and horizon.
pub fn loss_semantic(
    tape: &mut Tape,
    preds: &[VarId],
    truths: &[&SemanticMap],
    alpha: f64,
    variance: f64,
) -> Result<VarId> {
    assert_eq!(preds.len(), truths.len());
    let mut terms = Vec::with_capacity(preds.len());
    for (&p, map) in preds.iter().zip(truths) {
        let bw = boundary_weights(map, alpha, variance)?;
        terms.push(tape.weighted_cross_entropy(p, map.labels(), bw.weights, 1e-8));
    }
    Ok(tape.add_all(&terms))
}

/// Closed-form KL of diagonal Gaussians to the standard normal, summed
/// over classes and dimensions (plain-tensor version for callers outside
/// a tape).
pub fn kl_to_standard_normal(mean: &Tensor, variance: &Tensor) -> f64 {
    assert_eq!(mean.shape(), variance.shape());
    mean.data()
        .iter()
        .zip(variance.data())
        .map(|(&u, &v)| 0.5 * (u * u + v - 1.0 - v.ln()))
        .sum()
}

/// Weighted loss combination: `L_f + L_m + beta * L_kl`, with the KL term
/// dropped in deterministic mode.
pub fn loss_dynamic(l_f: f64, l_m: f64, l_kl: Option<f64>, beta: f64) -> f64 {
    l_f + l_m + l_kl.map_or(0.0, |kl| beta * kl)
}

fn forget_bias(groups: usize, per: usize) -> Tensor {
    let mut b = Tensor::zeros(&[groups * 4 * per]);
    for g in 0..groups {
        for j in 0..per {
            b.data_mut()[g * 4 * per + per + j] = 1.0;
        }
    }
    b
}

fn invert_route(route: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; route.len()];
    for (slot, &src) in route.iter().enumerate() {
        inv[src] = slot;
    }
    inv
}

/// Seed-deterministic standard normal tensor.
pub fn standard_normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6e6f_6973));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();
    Tensor::from_vec(shape, data)
}
