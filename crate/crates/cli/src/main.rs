//! Command-line driver: dataset generation, two-stage training, prediction,
//! evaluation and the ablation experiments.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use semflow_core::dynamics::PredictMode;
use semflow_core::harness::{
    self, ablate, evaluate, load_config, load_dynamics_checkpoint, load_inpaint_checkpoint,
    train_dynamics, train_inpaint, viz, AppConfig, Dataset,
};
use semflow_core::synthworld::{self, dataset_specs};
use semflow_core::{io as sfio, warp};

#[derive(Parser)]
#[command(name = "semflow", about = "Semantic-aware video prediction pipeline", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset (frames, .flo flows, semantic maps, manifest).
    GenerateData {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: train the semantic-aware dynamics model.
    TrainDynamics {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (from generate-data); synthesized in memory
        /// when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage 2: train the dis-occlusion inpainting network.
    TrainInpaint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Stage-1 checkpoint (required).
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Predict one clip and write visualizations.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        inpaint_checkpoint: Option<PathBuf>,
        /// Clip index within the test split.
        #[arg(long, default_value_t = 0)]
        clip: usize,
        /// "deterministic" or "stochastic".
        #[arg(long, default_value = "deterministic")]
        mode: String,
    },
    /// Full-pipeline evaluation on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        inpaint_checkpoint: Option<PathBuf>,
    },
    /// Ablation experiments.
    Ablate {
        #[command(subcommand)]
        experiment: AblateCommand,
    },
    /// Print the effective configuration as TOML.
    DumpConfig {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum AblateCommand {
    /// Grouped model vs. the matched single-class baseline.
    SingleClass {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Swap two classes through each other's encoders.
    Swap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// External (1-based) class ids to swap.
        #[arg(long, default_value_t = 2)]
        class_a: usize,
        #[arg(long, default_value_t = 3)]
        class_b: usize,
    },
    /// Retrain with merged classes.
    ClassCount {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Merge map over external ids, e.g. "1:1,2:2,3:2".
        #[arg(long)]
        merge_map: String,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::GenerateData { common } => generate_data(&common),
        Command::TrainDynamics {
            common,
            data,
            resume,
        } => cmd_train_dynamics(&common, data.as_deref(), resume.as_deref()),
        Command::TrainInpaint {
            common,
            data,
            checkpoint,
        } => cmd_train_inpaint(&common, data.as_deref(), &checkpoint),
        Command::Predict {
            common,
            data,
            checkpoint,
            inpaint_checkpoint,
            clip,
            mode,
        } => cmd_predict(
            &common,
            data.as_deref(),
            &checkpoint,
            inpaint_checkpoint.as_deref(),
            clip,
            &mode,
        ),
        Command::Evaluate {
            common,
            data,
            checkpoint,
            inpaint_checkpoint,
        } => cmd_evaluate(&common, data.as_deref(), &checkpoint, inpaint_checkpoint.as_deref()),
        Command::Ablate { experiment } => match experiment {
            AblateCommand::SingleClass { common, data } => {
                cmd_ablate_single_class(&common, data.as_deref())
            }
            AblateCommand::Swap {
                common,
                data,
                checkpoint,
                class_a,
                class_b,
            } => cmd_ablate_swap(&common, data.as_deref(), &checkpoint, class_a, class_b),
            AblateCommand::ClassCount {
                common,
                data,
                merge_map,
            } => cmd_ablate_class_count(&common, data.as_deref(), &merge_map),
        },
        Command::DumpConfig { common } => {
            let cfg = resolve_config(&common)?;
            println!("{}", harness::config_to_toml(&cfg)?);
            Ok(())
        }
    }
}

fn resolve_config(common: &Common) -> Result<AppConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path).with_context(|| format!("loading {}", path.display()))?,
        None => AppConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        cfg.world.seed = seed;
    }
    if cfg.world.clip_len != cfg.train.clip_len {
        bail!(
            "world clip_len {} != train clip_len {}",
            cfg.world.clip_len,
            cfg.train.clip_len
        );
    }
    cfg.model.num_classes = cfg.world.num_classes();
    cfg.model.observed = cfg.world.observed_len;
    cfg.model.horizon = cfg.world.clip_len - cfg.world.observed_len;
    cfg.inpaint.num_classes = cfg.model.num_classes;
    Ok(cfg)
}

/// Training and test splits either loaded from disk or synthesized from
/// the configured world.
fn datasets(cfg: &AppConfig, data: Option<&Path>) -> Result<(Dataset, Dataset)> {
    match data {
        Some(dir) => Ok((
            Dataset::from_dir(dir, Some("train"))?,
            Dataset::from_dir(dir, Some("test"))?,
        )),
        None => {
            let train = dataset_specs(&cfg.world, cfg.train.seed, cfg.train_clips);
            let test = dataset_specs(&cfg.world, cfg.train.seed ^ 0x7465_7374, cfg.test_clips);
            Ok((Dataset::synth(train), Dataset::synth(test)))
        }
    }
}

fn generate_data(common: &Common) -> Result<()> {
    let cfg = resolve_config(common)?;
    let train = dataset_specs(&cfg.world, cfg.train.seed, cfg.train_clips);
    let test = dataset_specs(&cfg.world, cfg.train.seed ^ 0x7465_7374, cfg.test_clips);
    let specs: Vec<(synthworld::WorldSpec, &str)> = train
        .into_iter()
        .map(|s| (s, "train"))
        .chain(test.into_iter().map(|s| (s, "test")))
        .collect();
    let entries = synthworld::emit_dataset(&common.out, &specs)?;
    println!(
        "wrote {} clips ({} train / {} test) to {}",
        entries.len(),
        cfg.train_clips,
        cfg.test_clips,
        common.out.display()
    );
    Ok(())
}

fn cmd_train_dynamics(common: &Common, data: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(common)?;
    let (train_set, _) = datasets(&cfg, data)?;
    let summary = train_dynamics(&cfg.train, &cfg.model, &train_set, &common.out, resume)?;
    println!(
        "stage-1 done: {} epochs, final mean loss {:.4}, checkpoint {}",
        summary.epochs_run,
        summary.epoch_losses.last().copied().unwrap_or(f64::NAN),
        summary.checkpoint.display()
    );
    Ok(())
}

fn cmd_train_inpaint(common: &Common, data: Option<&Path>, checkpoint: &Path) -> Result<()> {
    let cfg = resolve_config(common)?;
    let (train_set, _) = datasets(&cfg, data)?;
    let summary = train_inpaint(&cfg.train, &cfg.inpaint, &train_set, checkpoint, &common.out)?;
    println!(
        "stage-2 done: {} epochs, final mean generator loss {:.4}, checkpoint {}",
        summary.epochs_run,
        summary.epoch_losses.last().copied().unwrap_or(f64::NAN),
        summary.checkpoint.display()
    );
    Ok(())
}

fn cmd_predict(
    common: &Common,
    data: Option<&Path>,
    checkpoint: &Path,
    inpaint_ckpt: Option<&Path>,
    clip_idx: usize,
    mode: &str,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    let (_, test_set) = datasets(&cfg, data)?;
    if clip_idx >= test_set.len() {
        bail!("clip index {clip_idx} out of range ({} test clips)", test_set.len());
    }
    let dynamics = load_dynamics_checkpoint(checkpoint)?;
    let inpaint = inpaint_ckpt.map(load_inpaint_checkpoint).transpose()?;
    let mode = match mode {
        "deterministic" => PredictMode::Deterministic,
        "stochastic" => PredictMode::Stochastic {
            seed: common.seed.unwrap_or(cfg.train.seed),
        },
        other => bail!("unknown mode {other}"),
    };
    let clip = test_set.clip(clip_idx)?;
    let pred = harness::predict_clip(&dynamics, inpaint.as_ref(), &clip, mode)?;
    std::fs::create_dir_all(&common.out)?;
    let t_obs = clip.observed_len;
    for (t, frame) in pred.frames.iter().enumerate() {
        sfio::write_frame_png(&common.out.join(format!("pred_frame{t:02}.png")), frame)?;
        sfio::write_flo(&common.out.join(format!("pred_flow{t:02}.flo")), &pred.flows[t])?;
        sfio::write_map_png(&common.out.join(format!("pred_map{t:02}.png")), &pred.hard_maps[t])?;
        sfio::write_mask_png(
            &common.out.join(format!("pred_disocc{t:02}.png")),
            pred.disocc[t].as_slice(),
            clip.height(),
            clip.width(),
        )?;
        // provenance sidecar
        let provenance: Vec<serde_json::Value> = (0..clip.height())
            .flat_map(|y| (0..clip.width()).map(move |x| (y, x)))
            .filter(|&(y, x)| pred.disocc[t].is_set(y, x))
            .map(|(y, x)| {
                let p = pred.disocc[t].provenance_at(y, x);
                serde_json::json!({
                    "y": y,
                    "x": x,
                    "occupancy": p & warp::PROV_OCCUPANCY != 0,
                    "semantic": p & warp::PROV_SEMANTIC != 0,
                })
            })
            .collect();
        std::fs::write(
            common.out.join(format!("pred_disocc{t:02}.json")),
            serde_json::to_string(&provenance)?,
        )?;
    }
    // grid: ground truth row, prediction row, flow row, overlay row
    let truth_row: Vec<_> = (0..clip.horizon)
        .map(|t| clip.frames[t_obs + t].pixels.clone())
        .collect();
    let pred_row: Vec<_> = pred.frames.iter().map(|f| f.pixels.clone()).collect();
    let flow_row: Vec<_> = pred.flows.iter().map(|f| viz::flow_to_color(f, None)).collect();
    let overlay_row: Vec<_> = pred
        .anchors
        .iter()
        .zip(&pred.disocc)
        .map(|(a, m)| viz::disocc_overlay(a, m))
        .collect();
    viz::write_frame_grid(
        &common.out.join("prediction_grid.png"),
        &[truth_row, pred_row, flow_row, overlay_row],
    )?;
    println!("wrote prediction artifacts to {}", common.out.display());
    Ok(())
}

fn cmd_evaluate(
    common: &Common,
    data: Option<&Path>,
    checkpoint: &Path,
    inpaint_ckpt: Option<&Path>,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    let (_, test_set) = datasets(&cfg, data)?;
    let dynamics = load_dynamics_checkpoint(checkpoint)?;
    let inpaint = inpaint_ckpt.map(load_inpaint_checkpoint).transpose()?;
    let report = evaluate(
        &dynamics,
        inpaint.as_ref(),
        &test_set,
        cfg.train.seed,
        &checkpoint.display().to_string(),
        inpaint_ckpt.map(|p| p.display().to_string()).as_deref(),
    )?;
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(common.out.join("eval_report.json"), report.to_json())?;
    print!("{}", report.render_table());
    println!("report written to {}", common.out.join("eval_report.json").display());
    Ok(())
}

fn cmd_ablate_single_class(common: &Common, data: Option<&Path>) -> Result<()> {
    let cfg = resolve_config(common)?;
    let (train_set, test_set) = datasets(&cfg, data)?;
    let report =
        ablate::ablate_single_class(&cfg.train, &cfg.model, &train_set, &test_set, &common.out)?;
    println!(
        "grouped params {} vs baseline params {}",
        report.grouped.param_count, report.baseline.param_count
    );
    println!("grouped:\n{}", report.grouped.report.render_table());
    println!("single-class baseline:\n{}", report.baseline.report.render_table());
    println!(
        "final-step mIoU delta {:+.4}, boundary EPE ratio {:.4}",
        report.miou_delta_final, report.boundary_epe_ratio
    );
    Ok(())
}

fn cmd_ablate_swap(
    common: &Common,
    data: Option<&Path>,
    checkpoint: &Path,
    class_a: usize,
    class_b: usize,
) -> Result<()> {
    let cfg = resolve_config(common)?;
    let (_, test_set) = datasets(&cfg, data)?;
    let dynamics = load_dynamics_checkpoint(checkpoint)?;
    if class_a < 1 || class_b < 1 {
        bail!("class ids are 1-based");
    }
    let report = ablate::ablate_class_swap(&dynamics, &test_set, class_a - 1, class_b - 1)?;
    std::fs::create_dir_all(&common.out)?;
    std::fs::write(
        common.out.join("swap_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "swapped classes {} and {}: {} clips, fraction with both segments closer to the \
         swapped law: {:.3}",
        report.class_a, report.class_b, report.clips_evaluated, report.fraction_both_closer
    );
    println!(
        "segment {}: own {:.4} vs swapped {:.4}; segment {}: own {:.4} vs swapped {:.4}",
        report.class_a,
        report.mean_dist_a_own,
        report.mean_dist_a_swapped,
        report.class_b,
        report.mean_dist_b_own,
        report.mean_dist_b_swapped
    );
    Ok(())
}

fn cmd_ablate_class_count(common: &Common, data: Option<&Path>, merge_map: &str) -> Result<()> {
    let cfg = resolve_config(common)?;
    let (train_set, test_set) = datasets(&cfg, data)?;
    let c = cfg.model.num_classes;
    let mut map = vec![usize::MAX; c];
    for part in merge_map.split(',') {
        let (from, to) = part
            .split_once(':')
            .with_context(|| format!("bad merge entry {part}; expected old:new"))?;
        let from: usize = from.trim().parse()?;
        let to: usize = to.trim().parse()?;
        if from < 1 || from > c || to < 1 {
            bail!("merge entries are 1-based external class ids");
        }
        map[from - 1] = to - 1;
    }
    if map.iter().any(|&m| m == usize::MAX) {
        bail!("merge map must cover all {c} classes");
    }
    let report = ablate::ablate_class_count(
        &cfg.train,
        &cfg.model,
        &train_set,
        &test_set,
        &map,
        &common.out,
    )?;
    println!(
        "retrained with C = {} ({} params):",
        report.num_classes, report.param_count
    );
    println!("{}", report.report.render_table());
    Ok(())
}
