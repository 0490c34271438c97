//! Ablation experiments: the single-class (ungrouped) baseline
//! comparison, class-swapped encoders, and class-count merging.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsConfig, DynamicsModel, PredictMode};
use crate::error::{Error, Result};
use crate::scene::{Clip, FlowField, SemanticMap};

use super::{evaluate, train_dynamics, Dataset, EvalReport, TrainConfig};

/// One trained model's side of the single-class comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSide {
    pub label: String,
    pub param_count: usize,
    pub final_loss: f64,
    pub report: EvalReport,
}

/// Comparison of the semantic-aware model against the matched
/// single-class baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SingleClassReport {
    pub grouped: ModelSide,
    pub baseline: ModelSide,
    /// mIoU difference (grouped - baseline) at the final horizon step.
    pub miou_delta_final: f64,
    /// Boundary-band EPE ratio grouped / baseline at the final step.
    pub boundary_epe_ratio: f64,
}

/// Train both models under identical schedules and compare. The baseline
/// uses the same architecture with ordinary convolutions (one group) over
/// naively concatenated masks and flow, which gives it the larger
/// parameter count.
pub fn ablate_single_class(
    cfg: &TrainConfig,
    model_cfg: &DynamicsConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    out_dir: &Path,
) -> Result<SingleClassReport> {
    let mut grouped_cfg = model_cfg.clone();
    grouped_cfg.grouped = true;
    let mut baseline_cfg = model_cfg.clone();
    baseline_cfg.grouped = false;

    let grouped_dir = out_dir.join("grouped");
    let baseline_dir = out_dir.join("single_class");
    let g_summary = train_dynamics(cfg, &grouped_cfg, train_data, &grouped_dir, None)?;
    let b_summary = train_dynamics(cfg, &baseline_cfg, train_data, &baseline_dir, None)?;

    let g_model = super::load_dynamics_checkpoint(&g_summary.checkpoint)?;
    let b_model = super::load_dynamics_checkpoint(&b_summary.checkpoint)?;
    let g_params = g_model.param_count();
    let b_params = b_model.param_count();
    log::info!("grouped params {g_params}, single-class baseline params {b_params}");
    if b_params < g_params {
        return Err(Error::Contract(format!(
            "baseline must have at least as many parameters ({b_params} < {g_params})"
        )));
    }

    let g_report = evaluate(&g_model, None, test_data, cfg.seed, "grouped", None)?;
    let b_report = evaluate(&b_model, None, test_data, cfg.seed, "single_class", None)?;
    let last = g_report.per_horizon.len() - 1;
    let miou_delta_final = g_report.per_horizon[last].miou - b_report.per_horizon[last].miou;
    let boundary_epe_ratio =
        g_report.per_horizon[last].epe_boundary / b_report.per_horizon[last].epe_boundary.max(1e-12);

    let report = SingleClassReport {
        grouped: ModelSide {
            label: "grouped".into(),
            param_count: g_params,
            final_loss: *g_summary.epoch_losses.last().unwrap_or(&f64::NAN),
            report: g_report,
        },
        baseline: ModelSide {
            label: "single_class".into(),
            param_count: b_params,
            final_loss: *b_summary.epoch_losses.last().unwrap_or(&f64::NAN),
            report: b_report,
        },
        miou_delta_final,
        boundary_epe_ratio,
    };
    std::fs::write(
        out_dir.join("single_class_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// Mean flow over the pixels of one class; `None` when the class is
/// absent.
pub fn segment_mean_flow(flow: &FlowField, map: &SemanticMap, class: usize) -> Option<(f64, f64)> {
    let (h, w) = (map.height(), map.width());
    let mut n = 0usize;
    let (mut su, mut sv) = (0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            if map.label(y, x) as usize == class {
                let (u, v) = flow.uv(y, x);
                su += u;
                sv += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        None
    } else {
        Some((su / n as f64, sv / n as f64))
    }
}

/// Result of routing two classes through each other's encoders.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwapReport {
    /// External (1-based) ids of the swapped classes.
    pub class_a: usize,
    pub class_b: usize,
    pub clips_evaluated: usize,
    pub clips_skipped: usize,
    /// Fraction of clips where both swapped segments' mean predicted flow
    /// is strictly closer (L2 over the horizon) to the other class's
    /// realized motion than to their own.
    pub fraction_both_closer: f64,
    /// Mean L2 distance of segment a's prediction to its own law and to
    /// the swapped law, and likewise for segment b.
    pub mean_dist_a_own: f64,
    pub mean_dist_a_swapped: f64,
    pub mean_dist_b_own: f64,
    pub mean_dist_b_swapped: f64,
}

/// Swap two classes' encoder/decoder routing and measure whose motion law
/// each segment now follows. `class_a`/`class_b` are internal (0-based)
/// indices; the report records external ids.
pub fn ablate_class_swap(
    model: &DynamicsModel,
    data: &Dataset,
    class_a: usize,
    class_b: usize,
) -> Result<SwapReport> {
    let c = model.config.num_classes;
    if class_a >= c || class_b >= c || class_a == class_b {
        return Err(Error::Config(format!(
            "swap classes must be distinct and < {c}"
        )));
    }
    if !model.config.grouped {
        return Err(Error::Contract("class swap needs the grouped model".into()));
    }
    let mut route: Vec<usize> = (0..c).collect();
    route.swap(class_a, class_b);

    let mut evaluated = 0usize;
    let mut skipped = 0usize;
    let mut both_closer = 0usize;
    let mut sums = [0.0f64; 4];
    for i in 0..data.len() {
        let clip = data.clip(i)?;
        let pred = model.predict_sequence(&clip, PredictMode::Deterministic, Some(&route))?;
        let t_obs = clip.observed_len;
        let mut ok = true;
        let mut dists = [0.0f64; 4]; // a_own, a_swapped, b_own, b_swapped
        for t in 0..clip.horizon {
            let truth_map = &clip.maps[t_obs + t];
            let truth_flow = &clip.flows[t_obs + t];
            let law_a = segment_mean_flow(truth_flow, truth_map, class_a);
            let law_b = segment_mean_flow(truth_flow, truth_map, class_b);
            let pred_a = segment_mean_flow(&pred.flows[t], truth_map, class_a);
            let pred_b = segment_mean_flow(&pred.flows[t], truth_map, class_b);
            match (law_a, law_b, pred_a, pred_b) {
                (Some(la), Some(lb), Some(pa), Some(pb)) => {
                    dists[0] += sq_dist(pa, la);
                    dists[1] += sq_dist(pa, lb);
                    dists[2] += sq_dist(pb, lb);
                    dists[3] += sq_dist(pb, la);
                }
                _ => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            skipped += 1;
            continue;
        }
        evaluated += 1;
        for k in 0..4 {
            sums[k] += dists[k].sqrt();
        }
        if dists[1] < dists[0] && dists[3] < dists[2] {
            both_closer += 1;
        }
    }
    if evaluated == 0 {
        return Err(Error::Contract("no clips with both segments present".into()));
    }
    Ok(SwapReport {
        class_a: class_a + 1,
        class_b: class_b + 1,
        clips_evaluated: evaluated,
        clips_skipped: skipped,
        fraction_both_closer: both_closer as f64 / evaluated as f64,
        mean_dist_a_own: sums[0] / evaluated as f64,
        mean_dist_a_swapped: sums[1] / evaluated as f64,
        mean_dist_b_own: sums[2] / evaluated as f64,
        mean_dist_b_swapped: sums[3] / evaluated as f64,
    })
}

fn sq_dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Relabel a clip under a class-merge mapping (old internal index ->
/// new internal index).
pub fn merge_clip(clip: &Clip, map: &[usize], c_new: usize) -> Result<Clip> {
    let mut maps = Vec::with_capacity(clip.maps.len());
    for m in &clip.maps {
        let labels: Vec<u8> = m.labels().iter().map(|&l| map[l as usize] as u8).collect();
        maps.push(SemanticMap::new(labels, m.height(), m.width(), c_new)?);
    }
    Clip::new(
        clip.frames.clone(),
        clip.flows.clone(),
        maps,
        clip.observed_len,
        clip.horizon,
    )
}

/// Validate a merge map: every new index in 0..c_new must be hit.
pub fn validate_merge_map(map: &[usize], num_old: usize) -> Result<usize> {
    if map.len() != num_old {
        return Err(Error::Config(format!(
            "merge map must have {num_old} entries, got {}",
            map.len()
        )));
    }
    let c_new = map.iter().max().map_or(0, |m| m + 1);
    for target in 0..c_new {
        if !map.contains(&target) {
            return Err(Error::Config(format!(
                "merge map must be surjective onto 0..{c_new}; {target} unused"
            )));
        }
    }
    Ok(c_new)
}

/// A merged-class view over another dataset.
pub struct MergedData<'a> {
    base: &'a Dataset,
    map: Vec<usize>,
    c_new: usize,
}

impl<'a> MergedData<'a> {
    pub fn new(base: &'a Dataset, map: Vec<usize>, c_new: usize) -> Self {
        MergedData { base, map, c_new }
    }

    fn materialize(&self, count: usize) -> Result<Vec<Clip>> {
        (0..count.min(self.base.len()))
            .map(|i| merge_clip(&self.base.clip(i)?, &self.map, self.c_new))
            .collect()
    }
}

/// Metrics of one retrained merged-class model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassCountReport {
    /// Merge map in external (1-based) labels: entry i is the new class
    /// of old class i+1.
    pub merge_map: Vec<usize>,
    pub num_classes: usize,
    pub param_count: usize,
    pub final_loss: f64,
    pub report: EvalReport,
}

/// Retrain with merged classes and evaluate against the merged ground
/// truth. In-memory only: clips are materialized through the merge map.
pub fn ablate_class_count(
    cfg: &TrainConfig,
    model_cfg: &DynamicsConfig,
    train_data: &Dataset,
    test_data: &Dataset,
    merge_map: &[usize],
    out_dir: &Path,
) -> Result<ClassCountReport> {
    let c_old = model_cfg.num_classes;
    let c_new = validate_merge_map(merge_map, c_old)?;
    let merged_train = MergedData::new(train_data, merge_map.to_vec(), c_new);
    let merged_test = MergedData::new(test_data, merge_map.to_vec(), c_new);
    // materialized in-memory datasets keep the Dataset API uniform
    let train_set = Dataset::Memory(merged_train.materialize(train_data.len())?);
    let test_set = Dataset::Memory(merged_test.materialize(test_data.len())?);

    let mut cfg_new = model_cfg.clone();
    cfg_new.num_classes = c_new;
    let summary = train_dynamics(cfg, &cfg_new, &train_set, &out_dir.join(format!("c{c_new}")), None)?;
    let model = super::load_dynamics_checkpoint(&summary.checkpoint)?;
    let report = evaluate(&model, None, &test_set, cfg.seed, &format!("c{c_new}"), None)?;
    let out = ClassCountReport {
        merge_map: merge_map.iter().map(|&m| m + 1).collect(),
        num_classes: c_new,
        param_count: model.param_count(),
        final_loss: *summary.epoch_losses.last().unwrap_or(&f64::NAN),
        report,
    };
    std::fs::write(
        out_dir.join(format!("class_count_c{c_new}.json")),
        serde_json::to_string_pretty(&out)?,
    )?;
    Ok(out)
}
