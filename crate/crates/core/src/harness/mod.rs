//! Training, evaluation and experiment harness: two-stage training with
//! the decayed learning-rate schedule, dataset access (in-memory synthetic
//! or on-disk), the full predict/warp/detect/inpaint evaluation pipeline,
//! and machine-readable reports.

pub mod ablate;
pub mod viz;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsConfig, DynamicsModel, PredictMode};
use crate::error::{Error, Result};
use crate::inpaint::{
    clip_volume, condition_channels, loss_inpaint, Discriminators, InpaintConfig, InpaintModel,
    MaskPyramid,
};
use crate::io::{self, ManifestEntry};
use crate::metrics;
use crate::nn::{self, Adam, GradStore, Tape};
use crate::scene::{Clip, FlowField, Frame, SemanticMap, SoftSemanticMap};
use crate::synthworld::{self, derive_seed, OracleClip, WorldSpec};
use crate::tensor::Tensor;
use crate::warp::{detect_disocclusion, flow_to_coords, DisocclusionMask};

/// Training stage selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Dynamics,
    Inpaint,
}

/// Training configuration; constants default to the recorded values
/// (learning rate 0.001 decayed by 0.8 every 20 epochs, 10-frame clips,
/// loss weights alpha 5.0, beta 0.1, lambda 2.0, gamma 2.0, eta 1.0).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub clip_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub eta: f64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Dynamics,
            learning_rate: 0.001,
            lr_decay: 0.8,
            lr_decay_every: 20,
            batch_size: 8,
            clip_len: 10,
            epochs: 5,
            seed: 0,
            alpha: 5.0,
            beta: 0.1,
            lambda: 2.0,
            gamma: 2.0,
            eta: 1.0,
            checkpoint_every: 20,
        }
    }
}

/// Learning rate at a (0-based) epoch under the decay schedule.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.lr_decay.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Top-level configuration document mirroring the world and training
/// parameters; serialized as TOML.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub world: WorldSpec,
    pub train_clips: usize,
    pub test_clips: usize,
    pub train: TrainConfig,
    pub model: DynamicsConfig,
    pub inpaint: InpaintConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            world: synthworld::default_world(0),
            train_clips: 500,
            test_clips: 100,
            train: TrainConfig::default(),
            model: DynamicsConfig::default(),
            inpaint: InpaintConfig::default(),
        }
    }
}

pub fn load_config(path: &Path) -> Result<AppConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{e}")))
}

pub fn config_to_toml(cfg: &AppConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("{e}")))
}

/// Clip source: regenerated in memory from world specs, or loaded from an
/// emitted dataset directory.
pub enum Dataset {
    Synth(Vec<WorldSpec>),
    Disk {
        root: PathBuf,
        entries: Vec<ManifestEntry>,
    },
    /// Materialized clips (used by merged-class ablations).
    Memory(Vec<Clip>),
}

impl Dataset {
    pub fn synth(specs: Vec<WorldSpec>) -> Self {
        Dataset::Synth(specs)
    }

    /// Load the manifest of an emitted dataset, optionally filtering by
    /// split tag.
    pub fn from_dir(root: &Path, split: Option<&str>) -> Result<Self> {
        let entries = io::read_manifest(&root.join("manifest.jsonl"))?;
        let entries = match split {
            Some(s) => entries.into_iter().filter(|e| e.split == s).collect(),
            None => entries,
        };
        Ok(Dataset::Disk {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Synth(specs) => specs.len(),
            Dataset::Disk { entries, .. } => entries.len(),
            Dataset::Memory(clips) => clips.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn clip(&self, i: usize) -> Result<Clip> {
        match self {
            Dataset::Synth(specs) => Ok(synthworld::generate(&specs[i])?.clip),
            Dataset::Disk { root, entries } => {
                let e = &entries[i];
                let mut frames = Vec::with_capacity(e.frames.len());
                let mut flows = Vec::with_capacity(e.flows.len());
                let mut maps = Vec::with_capacity(e.maps.len());
                for (t, f) in e.frames.iter().enumerate() {
                    frames.push(io::read_frame_png(&root.join(f), t)?);
                }
                for f in &e.flows {
                    flows.push(io::read_flo(&root.join(f))?);
                }
                for m in &e.maps {
                    maps.push(io::read_map_png(&root.join(m), e.num_classes)?);
                }
                Clip::new(frames, flows, maps, e.observed_len, e.horizon)
            }
            Dataset::Memory(clips) => Ok(clips[i].clone()),
        }
    }

    /// Analytic ground truth; only spec-backed synthetic datasets carry it.
    pub fn oracle(&self, i: usize) -> Result<Option<OracleClip>> {
        match self {
            Dataset::Synth(specs) => Ok(Some(synthworld::generate(&specs[i])?)),
            _ => Ok(None),
        }
    }
}

/// Result of one training run.
#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub epochs_run: usize,
    pub epoch_losses: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Stage-1 training: the dynamics model under `L_f + L_m + beta*L_kl`.
///
/// Deterministic given (config, seed): data order, noise and parameter
/// init all derive from the seed, and per-epoch randomness depends only on
/// (seed, epoch) so resuming from a checkpoint reproduces the remaining
/// epochs bitwise.
pub fn train_dynamics(
    cfg: &TrainConfig,
    model_cfg: &DynamicsConfig,
    data: &Dataset,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    let mut model_cfg = model_cfg.clone();
    model_cfg.alpha = cfg.alpha;
    model_cfg.beta = cfg.beta;

    let (mut model, mut adam, start_epoch) = match resume {
        Some(path) => {
            let (model, adam, epoch) = load_dynamics_checkpoint_full(path)?;
            (model, adam, epoch + 1)
        }
        None => (
            DynamicsModel::new(model_cfg.clone(), derive_seed(cfg.seed, 1))?,
            Adam::new(),
            0,
        ),
    };

    let mut epoch_losses = Vec::new();
    let ckpt_path = out_dir.join("dynamics.ckpt");
    for epoch in start_epoch..cfg.epochs {
        let lr = lr_schedule(cfg, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1000 + epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = GradStore::new();
            for &i in batch {
                let clip = data.clip(i)?;
                let noise_seed = derive_seed(derive_seed(cfg.seed, 2000 + epoch as u64), i as u64);
                let (loss, g) = model.clip_gradients(&clip, noise_seed)?;
                grads.merge(&g);
                epoch_loss += loss;
                count += 1;
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.params, &grads, lr);
        }
        let mean_loss = epoch_loss / count.max(1) as f64;
        epoch_losses.push(mean_loss);
        log::info!("dynamics epoch {epoch}: lr {lr:.6} mean loss {mean_loss:.4}");
        if (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs {
            save_dynamics_checkpoint(&ckpt_path, &model, &adam, cfg, epoch)?;
        }
    }
    if start_epoch >= cfg.epochs {
        // nothing to do; still materialize the checkpoint
        save_dynamics_checkpoint(&ckpt_path, &model, &adam, cfg, cfg.epochs.saturating_sub(1))?;
    }
    Ok(TrainSummary {
        stage: Stage::Dynamics,
        epochs_run: cfg.epochs.saturating_sub(start_epoch),
        epoch_losses,
        checkpoint: ckpt_path,
    })
}

pub fn save_dynamics_checkpoint(
    path: &Path,
    model: &DynamicsModel,
    adam: &Adam,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<()> {
    let meta = serde_json::json!({
        "stage": "dynamics",
        "epoch": epoch,
        "seed": cfg.seed,
        "model": serde_json::to_value(&model.config)?,
        "train": serde_json::to_value(cfg)?,
    });
    let opt = adam.export_state("opt");
    let arrays = nn::prefixed_arrays(&[("dynamics", &model.params), ("state", &opt)]);
    nn::save_checkpoint(path, &meta, &arrays)
}

/// Load the dynamics model from a stage-1 checkpoint.
pub fn load_dynamics_checkpoint(path: &Path) -> Result<DynamicsModel> {
    let (model, _, _) = load_dynamics_checkpoint_full(path)?;
    Ok(model)
}

fn load_dynamics_checkpoint_full(path: &Path) -> Result<(DynamicsModel, Adam, usize)> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let (meta, arrays) = nn::load_checkpoint(path)?;
    let config: DynamicsConfig = serde_json::from_value(meta["model"].clone())?;
    let params = nn::extract_prefixed(&arrays, "dynamics");
    if params.is_empty() {
        return Err(Error::Format("checkpoint holds no dynamics parameters".into()));
    }
    let state: std::collections::BTreeMap<String, Tensor> = nn::extract_prefixed(&arrays, "state")
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let adam = Adam::import_state("opt", &state);
    let epoch = meta["epoch"].as_u64().unwrap_or(0) as usize;
    Ok((DynamicsModel { config, params }, adam, epoch))
}

/// Stage-2 training: the conditional inpainting network against frozen
/// stage-1 predictions, with LSGAN frame and clip discriminators.
pub fn train_inpaint(
    cfg: &TrainConfig,
    inpaint_cfg: &InpaintConfig,
    data: &Dataset,
    dynamics_ckpt: &Path,
    out_dir: &Path,
) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    let dynamics = load_dynamics_checkpoint(dynamics_ckpt)?;
    let mut inpaint_cfg = inpaint_cfg.clone();
    inpaint_cfg.weights.lambda = cfg.lambda;
    inpaint_cfg.weights.gamma = cfg.gamma;
    inpaint_cfg.weights.eta = cfg.eta;
    inpaint_cfg.num_classes = dynamics.config.num_classes;

    let mut gen = InpaintModel::new(inpaint_cfg.clone(), derive_seed(cfg.seed, 3));
    let mut disc = Discriminators::new(
        inpaint_cfg.num_classes,
        inpaint_cfg.disc_channels,
        derive_seed(cfg.seed, 4),
    );
    let mut g_opt = Adam::new();
    let mut d_opt = Adam::new();

    let mut epoch_losses = Vec::new();
    let ckpt_path = out_dir.join("inpaint.ckpt");
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 5000 + epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut g_grads = GradStore::new();
            let mut d_grads = GradStore::new();
            for &i in batch {
                let clip = data.clip(i)?;
                let stage = inpaint_clip_pass(&dynamics, &gen, &disc, &inpaint_cfg, &clip)?;
                g_grads.merge(&stage.gen_grads);
                d_grads.merge(&stage.disc_grads);
                epoch_loss += stage.gen_loss;
                count += 1;
            }
            g_grads.scale(1.0 / batch.len() as f64);
            d_grads.scale(1.0 / batch.len() as f64);
            g_opt.step(&mut gen.params, &g_grads, lr);
            d_opt.step(&mut disc.params, &d_grads, lr);
        }
        let mean = epoch_loss / count.max(1) as f64;
        epoch_losses.push(mean);
        log::info!("inpaint epoch {epoch}: lr {lr:.6} mean generator loss {mean:.4}");
        if (epoch + 1) % cfg.checkpoint_every == 0 || epoch + 1 == cfg.epochs {
            let meta = serde_json::json!({
                "stage": "inpaint",
                "epoch": epoch,
                "seed": cfg.seed,
                "inpaint": serde_json::to_value(&inpaint_cfg)?,
                "train": serde_json::to_value(cfg)?,
                "dynamics_checkpoint": dynamics_ckpt.display().to_string(),
            });
            let g_state = g_opt.export_state("gopt");
            let d_state = d_opt.export_state("dopt");
            let arrays = nn::prefixed_arrays(&[
                ("inpaint", &gen.params),
                ("disc", &disc.params),
                ("gstate", &g_state),
                ("dstate", &d_state),
            ]);
            nn::save_checkpoint(&ckpt_path, &meta, &arrays)?;
        }
    }
    Ok(TrainSummary {
        stage: Stage::Inpaint,
        epochs_run: cfg.epochs,
        epoch_losses,
        checkpoint: ckpt_path,
    })
}

pub fn load_inpaint_checkpoint(path: &Path) -> Result<InpaintModel> {
    if !path.exists() {
        return Err(Error::MissingCheckpoint(path.display().to_string()));
    }
    let (meta, arrays) = nn::load_checkpoint(path)?;
    let config: InpaintConfig = serde_json::from_value(meta["inpaint"].clone())?;
    let params = nn::extract_prefixed(&arrays, "inpaint");
    if params.is_empty() {
        return Err(Error::Format("checkpoint holds no inpaint parameters".into()));
    }
    Ok(InpaintModel { config, params })
}

struct InpaintClipPass {
    gen_grads: GradStore,
    disc_grads: GradStore,
    gen_loss: f64,
}

/// One clip's generator and discriminator gradients. The dynamics model
/// is evaluated forward-only; its outputs enter the inpainting tape as
/// constants so stage-1 parameters receive no updates.
fn inpaint_clip_pass(
    dynamics: &DynamicsModel,
    gen: &InpaintModel,
    disc: &Discriminators,
    cfg: &InpaintConfig,
    clip: &Clip,
) -> Result<InpaintClipPass> {
    let rollout = rollout_predictions(dynamics, clip)?;
    let k = clip.horizon;
    let t_obs = clip.observed_len;

    // generator tape: autoregressive warp chain through the predictions
    let mut tape = Tape::new();
    let mut preds = Vec::with_capacity(k);
    let mut anchors = Vec::with_capacity(k);
    let mut frame_scores = Vec::with_capacity(k);
    let mut cond_vars = Vec::with_capacity(k);
    let mut prev_frame = tape.constant(clip.frames[t_obs - 1].pixels.clone());
    for t in 0..k {
        let coords = flow_to_coords(&rollout.flows[t]);
        let anchor = tape.warp_gather(prev_frame, coords);
        let pyramid = MaskPyramid::build(&rollout.disocc[t].validity());
        let cond = tape.constant(condition_channels(&rollout.soft_maps[t], &rollout.disocc[t]));
        let pred = gen.generator_forward(&mut tape, anchor, &pyramid, cond);
        let cond_soft = tape.constant(rollout.soft_maps[t].probs.clone());
        frame_scores.push(disc.score_frame(&mut tape, pred, cond_soft));
        cond_vars.push(cond_soft);
        preds.push(pred);
        anchors.push(anchor);
        prev_frame = pred;
    }
    let volume = clip_volume(&mut tape, &preds, &cond_vars);
    let clip_score = disc.score_clip(&mut tape, volume);
    let reals: Vec<&Tensor> = (0..k).map(|t| &clip.frames[t_obs + t].pixels).collect();
    let masks: Vec<&DisocclusionMask> = rollout.disocc.iter().collect();
    let total = loss_inpaint(
        &mut tape,
        &preds,
        &anchors,
        &reals,
        &masks,
        &frame_scores,
        Some(clip_score),
        &cfg.weights,
    );
    let gen_loss = tape.value(total).item();
    if !gen_loss.is_finite() {
        return Err(Error::NonFinite("inpaint generator loss".into()));
    }
    let fake_frames: Vec<Tensor> = preds.iter().map(|&p| tape.value(p).clone()).collect();
    let grads = tape.backward(total);
    let mut all = GradStore::new();
    tape.collect_param_grads(&grads, &mut all);
    let mut gen_grads = GradStore::new();
    for (name, g) in all.iter() {
        if gen.params.get(name).is_some() {
            gen_grads.accumulate(name, g);
        }
    }

    // discriminator tape on detached fakes and real frames
    let mut dtape = Tape::new();
    let mut terms = Vec::new();
    let mut fake_vars = Vec::with_capacity(k);
    let mut real_vars = Vec::with_capacity(k);
    let mut dcond_vars = Vec::with_capacity(k);
    for t in 0..k {
        let fake = dtape.constant(fake_frames[t].clone());
        let real = dtape.constant(clip.frames[t_obs + t].pixels.clone());
        let cond = dtape.constant(rollout.soft_maps[t].probs.clone());
        let s_fake = disc.score_frame(&mut dtape, fake, cond);
        let cond2 = dtape.constant(rollout.soft_maps[t].probs.clone());
        let s_real = disc.score_frame(&mut dtape, real, cond2);
        let lf = dtape.mse_scalar_target(s_fake, 0.0);
        let lr_ = dtape.mse_scalar_target(s_real, 1.0);
        terms.push(lf);
        terms.push(lr_);
        fake_vars.push(fake);
        real_vars.push(real);
        let dc = dtape.constant(rollout.soft_maps[t].probs.clone());
        dcond_vars.push(dc);
    }
    let fake_vol = clip_volume(&mut dtape, &fake_vars, &dcond_vars);
    let s_fake_clip = disc.score_clip(&mut dtape, fake_vol);
    let mut dcond2 = Vec::with_capacity(k);
    for t in 0..k {
        let dc = dtape.constant(rollout.soft_maps[t].probs.clone());
        dcond2.push(dc);
    }
    let real_vol = clip_volume(&mut dtape, &real_vars, &dcond2);
    let s_real_clip = disc.score_clip(&mut dtape, real_vol);
    let lfc = dtape.mse_scalar_target(s_fake_clip, 0.0);
    let lrc = dtape.mse_scalar_target(s_real_clip, 1.0);
    terms.push(lfc);
    terms.push(lrc);
    let d_total = dtape.add_all(&terms);
    let d_half = dtape.scale(d_total, 0.5);
    let dgrads = dtape.backward(d_half);
    let mut disc_grads = GradStore::new();
    dtape.collect_param_grads(&dgrads, &mut disc_grads);

    Ok(InpaintClipPass {
        gen_grads,
        disc_grads,
        gen_loss,
    })
}

/// Frozen stage-1 rollout: predicted soft maps, flows and the detected
/// dis-occlusion masks for each future step.
struct Rollout {
    soft_maps: Vec<SoftSemanticMap>,
    flows: Vec<FlowField>,
    disocc: Vec<DisocclusionMask>,
}

fn rollout_predictions(dynamics: &DynamicsModel, clip: &Clip) -> Result<Rollout> {
    let pred = dynamics.predict_sequence(clip, PredictMode::Deterministic, None)?;
    let t_obs = clip.observed_len;
    let mut disocc = Vec::with_capacity(clip.horizon);
    let mut prev_map = clip.maps[t_obs - 1].clone();
    for t in 0..clip.horizon {
        let hard = pred.soft_maps[t].harden();
        let mask = detect_disocclusion(&hard, &prev_map, &pred.flows[t])?;
        disocc.push(mask);
        prev_map = hard;
    }
    Ok(Rollout {
        soft_maps: pred.soft_maps,
        flows: pred.flows,
        disocc,
    })
}

/// Per-horizon metric record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub step: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    pub miou: f64,
    pub epe: f64,
    pub epe_boundary: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub clips: usize,
    pub num_classes: usize,
    pub canvas: (usize, usize),
    pub mode: String,
    pub dynamics_checkpoint: String,
    pub inpaint_checkpoint: Option<String>,
}

/// Evaluation report: one record per horizon step plus metadata. The JSON
/// form is byte-deterministic for identical inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub per_horizon: Vec<HorizonMetrics>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table rendering.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str("step    psnr     ssim  ms_ssim     miou      epe  epe_bnd\n");
        for m in &self.per_horizon {
            out.push_str(&format!(
                "t+{:<3} {:7.3} {:8.4} {:8.4} {:8.4} {:8.4} {:8.4}\n",
                m.step, m.psnr, m.ssim, m.ms_ssim, m.miou, m.epe, m.epe_boundary
            ));
        }
        out
    }
}

/// Full-pipeline evaluation: predict, warp, detect, inpaint, and score
/// against ground truth per horizon step. Without an inpainting model the
/// warped anchor (holes left as warped content) is scored instead.
pub fn evaluate(
    dynamics: &DynamicsModel,
    inpaint: Option<&InpaintModel>,
    data: &Dataset,
    seed: u64,
    dynamics_label: &str,
    inpaint_label: Option<&str>,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Contract("empty evaluation dataset".into()));
    }
    let first = data.clip(0)?;
    let k = first.horizon;
    let mut acc = vec![[0.0f64; 6]; k];
    for i in 0..data.len() {
        let clip = data.clip(i)?;
        let rollout = rollout_predictions(dynamics, &clip)?;
        let t_obs = clip.observed_len;
        let mut prev_frame = clip.frames[t_obs - 1].pixels.clone();
        for t in 0..k {
            let truth_frame = &clip.frames[t_obs + t];
            let truth_map = &clip.maps[t_obs + t];
            let truth_flow = &clip.flows[t_obs + t];
            let coords = flow_to_coords(&rollout.flows[t]);
            let anchor = crate::scene::bilinear_sample(&prev_frame, &coords)?;
            let final_frame = match inpaint {
                Some(model) => {
                    let input = crate::inpaint::InpaintInput {
                        anchor: crate::warp::WarpedFrame::with_validity(
                            anchor.clone(),
                            &rollout.disocc[t],
                        ),
                        mask: rollout.disocc[t].clone(),
                        condition: rollout.soft_maps[t].clone(),
                    };
                    model.inpaint(&input)?.pixels
                }
                None => anchor,
            };
            let hard = rollout.soft_maps[t].harden();
            let band = metrics::boundary_band(truth_map, 3);
            acc[t][0] += metrics::psnr(&final_frame, &truth_frame.pixels);
            acc[t][1] += metrics::ssim(&final_frame, &truth_frame.pixels);
            acc[t][2] += metrics::ms_ssim(&final_frame, &truth_frame.pixels);
            acc[t][3] += metrics::miou(&hard, truth_map);
            acc[t][4] += metrics::endpoint_error(&rollout.flows[t], truth_flow, None);
            acc[t][5] += metrics::endpoint_error(&rollout.flows[t], truth_flow, Some(&band));
            prev_frame = final_frame;
        }
    }
    let n = data.len() as f64;
    let per_horizon = acc
        .iter()
        .enumerate()
        .map(|(t, a)| HorizonMetrics {
            step: t + 1,
            psnr: a[0] / n,
            ssim: a[1] / n,
            ms_ssim: a[2] / n,
            miou: a[3] / n,
            epe: a[4] / n,
            epe_boundary: a[5] / n,
        })
        .collect();
    Ok(EvalReport {
        meta: ReportMeta {
            seed,
            clips: data.len(),
            num_classes: first.num_classes(),
            canvas: (first.height(), first.width()),
            mode: "deterministic".into(),
            dynamics_checkpoint: dynamics_label.to_string(),
            inpaint_checkpoint: inpaint_label.map(str::to_string),
        },
        per_horizon,
    })
}

/// Predicted artifacts of one clip, exposed for the CLI `predict`
/// subcommand and visualization.
pub struct ClipPrediction {
    pub soft_maps: Vec<SoftSemanticMap>,
    pub hard_maps: Vec<SemanticMap>,
    pub flows: Vec<FlowField>,
    pub disocc: Vec<DisocclusionMask>,
    pub anchors: Vec<Tensor>,
    pub frames: Vec<Frame>,
}

/// Run the full pipeline on one clip.
pub fn predict_clip(
    dynamics: &DynamicsModel,
    inpaint: Option<&InpaintModel>,
    clip: &Clip,
    mode: PredictMode,
) -> Result<ClipPrediction> {
    let pred = dynamics.predict_sequence(clip, mode, None)?;
    let t_obs = clip.observed_len;
    let mut prev_map = clip.maps[t_obs - 1].clone();
    let mut prev_frame = clip.frames[t_obs - 1].pixels.clone();
    let mut out = ClipPrediction {
        soft_maps: Vec::new(),
        hard_maps: Vec::new(),
        flows: Vec::new(),
        disocc: Vec::new(),
        anchors: Vec::new(),
        frames: Vec::new(),
    };
    for t in 0..clip.horizon {
        let hard = pred.soft_maps[t].harden();
        let mask = detect_disocclusion(&hard, &prev_map, &pred.flows[t])?;
        let coords = flow_to_coords(&pred.flows[t]);
        let anchor = crate::scene::bilinear_sample(&prev_frame, &coords)?;
        let frame_pixels = match inpaint {
            Some(model) => {
                let input = crate::inpaint::InpaintInput {
                    anchor: crate::warp::WarpedFrame::with_validity(anchor.clone(), &mask),
                    mask: mask.clone(),
                    condition: pred.soft_maps[t].clone(),
                };
                model.inpaint(&input)?.pixels
            }
            None => anchor.clone(),
        };
        prev_frame = frame_pixels.clone();
        prev_map = hard.clone();
        out.soft_maps.push(pred.soft_maps[t].clone());
        out.hard_maps.push(hard);
        out.flows.push(pred.flows[t].clone());
        out.disocc.push(mask);
        out.anchors.push(anchor);
        out.frames.push(Frame::new(frame_pixels, t_obs + t)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{dataset_specs, default_world};

    fn tiny_world(seed: u64) -> WorldSpec {
        let mut w = default_world(seed);
        w.height = 16;
        w.width = 16;
        w.classes.truncate(1);
        w.classes[0].shape = crate::synthworld::ShapeKind::Rect { w: 5.0, h: 5.0 };
        w.clip_len = 4;
        w.observed_len = 2;
        w
    }

    fn tiny_model_cfg() -> DynamicsConfig {
        DynamicsConfig {
            num_classes: 2,
            hidden: 3,
            downsample: 4,
            fusion_hidden: 4,
            context_hidden: 6,
            observed: 2,
            horizon: 2,
            stochastic: true,
            ..DynamicsConfig::default()
        }
    }

    fn tiny_train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 2,
            clip_len: 4,
            seed: 7,
            checkpoint_every: 100,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_matches_published_points() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(&cfg, 0), 0.001);
        assert_eq!(lr_schedule(&cfg, 19), 0.001);
        assert!((lr_schedule(&cfg, 20) - 0.0008).abs() < 1e-12);
        assert!((lr_schedule(&cfg, 40) - 0.00064).abs() < 1e-12);
    }

    #[test]
    fn smoke_training_reduces_loss() {
        let specs = dataset_specs(&tiny_world(0), 11, 6);
        let data = Dataset::synth(specs);
        let dir = tempfile::tempdir().unwrap();
        let summary = train_dynamics(
            &tiny_train_cfg(3),
            &tiny_model_cfg(),
            &data,
            dir.path(),
            None,
        )
        .unwrap();
        assert_eq!(summary.epoch_losses.len(), 3);
        assert!(
            summary.epoch_losses[2] < summary.epoch_losses[0],
            "loss should drop: {:?}",
            summary.epoch_losses
        );
        assert!(summary.checkpoint.exists());
    }

    #[test]
    fn resume_reproduces_bitwise() {
        let specs = dataset_specs(&tiny_world(1), 12, 4);
        let data = Dataset::synth(specs);
        // full run of 2 epochs
        let dir_a = tempfile::tempdir().unwrap();
        let full = train_dynamics(
            &tiny_train_cfg(2),
            &tiny_model_cfg(),
            &data,
            dir_a.path(),
            None,
        )
        .unwrap();
        // 1 epoch, checkpoint, resume 1 more
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg1 = tiny_train_cfg(1);
        cfg1.checkpoint_every = 1;
        train_dynamics(&cfg1, &tiny_model_cfg(), &data, dir_b.path(), None).unwrap();
        let ckpt = dir_b.path().join("dynamics.ckpt");
        let resumed = train_dynamics(
            &tiny_train_cfg(2),
            &tiny_model_cfg(),
            &data,
            dir_b.path(),
            Some(&ckpt),
        )
        .unwrap();
        assert_eq!(resumed.epoch_losses.len(), 1);
        assert_eq!(
            resumed.epoch_losses[0], full.epoch_losses[1],
            "resumed epoch must reproduce the full run bitwise"
        );
        let a = load_dynamics_checkpoint(&full.checkpoint).unwrap();
        let b = load_dynamics_checkpoint(&dir_b.path().join("dynamics.ckpt")).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn stage2_requires_stage1_checkpoint() {
        let specs = dataset_specs(&tiny_world(2), 13, 2);
        let data = Dataset::synth(specs);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.ckpt");
        let err = train_inpaint(
            &tiny_train_cfg(1),
            &InpaintConfig {
                num_classes: 2,
                base_channels: 4,
                disc_channels: 4,
                ..InpaintConfig::default()
            },
            &data,
            &missing,
            dir.path(),
        );
        assert!(matches!(err, Err(Error::MissingCheckpoint(_))));
    }

    #[test]
    fn stage2_leaves_stage1_parameters_bit_identical() {
        let specs = dataset_specs(&tiny_world(3), 14, 3);
        let data = Dataset::synth(specs);
        let dir = tempfile::tempdir().unwrap();
        let s1 = train_dynamics(
            &tiny_train_cfg(1),
            &tiny_model_cfg(),
            &data,
            dir.path(),
            None,
        )
        .unwrap();
        let before = std::fs::read(&s1.checkpoint).unwrap();
        let mut cfg2 = tiny_train_cfg(1);
        cfg2.stage = Stage::Inpaint;
        train_inpaint(
            &cfg2,
            &InpaintConfig {
                num_classes: 2,
                base_channels: 4,
                disc_channels: 4,
                ..InpaintConfig::default()
            },
            &data,
            &s1.checkpoint,
            dir.path(),
        )
        .unwrap();
        let after = std::fs::read(&s1.checkpoint).unwrap();
        assert_eq!(before, after, "stage-2 must not touch the stage-1 checkpoint");
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let specs = dataset_specs(&tiny_world(4), 15, 3);
        let data = Dataset::synth(specs);
        let model = DynamicsModel::new(tiny_model_cfg(), 9).unwrap();
        let a = evaluate(&model, None, &data, 1, "ck", None).unwrap();
        let b = evaluate(&model, None, &data, 1, "ck", None).unwrap();
        assert_eq!(a.to_json(), b.to_json(), "evaluation must be bit-deterministic");
        for m in &a.per_horizon {
            assert!(m.ssim >= -1.0 && m.ssim <= 1.0);
            assert!(m.ms_ssim >= -1.0 && m.ms_ssim <= 1.0);
            assert!(m.miou >= 0.0 && m.miou <= 1.0);
            assert!(m.psnr.is_finite() && m.epe.is_finite());
        }
    }

    #[test]
    fn config_roundtrip_through_toml() {
        let cfg = AppConfig::default();
        let text = config_to_toml(&cfg).unwrap();
        let back: AppConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.train.learning_rate, 0.001);
        assert_eq!(back.train.alpha, 5.0);
        assert_eq!(back.train.beta, 0.1);
        assert_eq!(back.train.lambda, 2.0);
        assert_eq!(back.train.gamma, 2.0);
        assert_eq!(back.train.eta, 1.0);
        assert_eq!(back.world.clip_len, 10);
        assert_eq!(back.train_clips, 500);
    }

    #[test]
    fn dataset_disk_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let specs: Vec<(WorldSpec, &str)> = dataset_specs(&tiny_world(5), 16, 2)
            .into_iter()
            .map(|s| (s, "train"))
            .collect();
        synthworld::emit_dataset(dir.path(), &specs).unwrap();
        let data = Dataset::from_dir(dir.path(), Some("train")).unwrap();
        assert_eq!(data.len(), 2);
        let clip = data.clip(0).unwrap();
        let direct = synthworld::generate(&specs[0].0).unwrap().clip;
        assert_eq!(clip.maps[1], direct.maps[1], "maps survive the disk roundtrip");
        // flows survive up to f32 quantization
        for (a, b) in clip.flows[2]
            .vectors
            .data()
            .iter()
            .zip(direct.flows[2].vectors.data())
        {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
