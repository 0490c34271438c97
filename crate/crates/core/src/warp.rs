//! Backward warping and dis-occlusion detection.
//!
//! Future frames are anchored by gathering pixels from the past along the
//! predicted backward flow. Pixels with no valid source (newly revealed
//! content) are found with two complementary criteria: *pixel occupancy*
//! (several targets compete for one source pixel, or the source is off
//! canvas) and *semantic consistency* (the predicted label at the target
//! disagrees with the source label it maps onto).

use crate::error::{Error, Result};
use crate::scene::{bilinear_sample, identity_grid, FlowField, Frame, SemanticMap};
use crate::tensor::Tensor;

/// Provenance bit: flagged by the occupancy criterion.
pub const PROV_OCCUPANCY: u8 = 1;
/// Provenance bit: flagged by the semantic-consistency criterion.
pub const PROV_SEMANTIC: u8 = 2;

/// Boolean dis-occlusion field with per-pixel criterion provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DisocclusionMask {
    mask: Vec<bool>,
    provenance: Vec<u8>,
    h: usize,
    w: usize,
}

impl DisocclusionMask {
    pub fn empty(h: usize, w: usize) -> Self {
        DisocclusionMask {
            mask: vec![false; h * w],
            provenance: vec![0; h * w],
            h,
            w,
        }
    }

    /// Ground-truth mask (both provenance bits set where true).
    pub fn from_oracle(mask: Vec<bool>, h: usize, w: usize) -> Self {
        assert_eq!(mask.len(), h * w);
        let provenance = mask
            .iter()
            .map(|&m| if m { PROV_OCCUPANCY | PROV_SEMANTIC } else { 0 })
            .collect();
        DisocclusionMask {
            mask,
            provenance,
            h,
            w,
        }
    }

    pub fn flag(&mut self, idx: usize, prov: u8) {
        self.mask[idx] = true;
        self.provenance[idx] |= prov;
    }

    pub fn is_set(&self, y: usize, x: usize) -> bool {
        self.mask[y * self.w + x]
    }

    pub fn provenance_at(&self, y: usize, x: usize) -> u8 {
        self.provenance[y * self.w + x]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Set-union, merging provenance.
    pub fn union(&self, other: &DisocclusionMask) -> DisocclusionMask {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let mut out = self.clone();
        for i in 0..self.mask.len() {
            if other.mask[i] {
                out.mask[i] = true;
                out.provenance[i] |= other.provenance[i];
            }
        }
        out
    }

    /// Validity field (complement of the mask) as 0/1 values.
    pub fn validity(&self) -> Tensor {
        let data = self.mask.iter().map(|&m| if m { 0.0 } else { 1.0 }).collect();
        Tensor::from_vec(&[self.h, self.w], data)
    }
}

/// A warped (anchor) frame; `valid` is the complement of the
/// dis-occlusion mask and marks where the pixels are contractually
/// meaningful.
#[derive(Debug, Clone)]
pub struct WarpedFrame {
    /// `[3, H, W]` pixels, defined everywhere.
    pub pixels: Tensor,
    pub valid: Vec<bool>,
}

impl WarpedFrame {
    pub fn with_validity(pixels: Tensor, disocc: &DisocclusionMask) -> Self {
        WarpedFrame {
            pixels,
            valid: disocc.as_slice().iter().map(|&m| !m).collect(),
        }
    }
}

/// Gather `src` pixels along the backward flow: `out(p) = src(p + flow(p))`
/// with bilinear interpolation and border clamping. Validity is attached
/// by the caller once dis-occlusions are known.
pub fn warp_frame(src: &Frame, flow: &FlowField) -> Result<WarpedFrame> {
    let (h, w) = (src.height(), src.width());
    if flow.height() != h || flow.width() != w {
        return Err(Error::ShapeMismatch("warp_frame flow size".into()));
    }
    let coords = flow_to_coords(flow);
    let pixels = bilinear_sample(&src.pixels, &coords)?;
    Ok(WarpedFrame {
        pixels,
        valid: vec![true; h * w],
    })
}

/// Absolute sampling coordinates `p + flow(p)`.
pub fn flow_to_coords(flow: &FlowField) -> Tensor {
    let (h, w) = (flow.height(), flow.width());
    let mut coords = identity_grid(h, w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.uv(y, x);
            *coords.at3_mut(0, y, x) += u;
            *coords.at3_mut(1, y, x) += v;
        }
    }
    coords
}

/// Pixel-occupancy criterion. Every target pixel splats unit mass onto
/// its (bilinear) source location; a target is flagged when its source
/// lies off canvas, or when the source cell holding its largest weight
/// accumulates more than `1.5` total mass and the target is not the
/// dominant contributor there. Returns the accumulated occupancy field
/// and the mask contribution.
pub fn detect_occupancy(flow: &FlowField) -> (Tensor, DisocclusionMask) {
    detect_occupancy_with_labels(flow, None, None)
}

/// Occupancy criterion with optional semantic tie-breaking: when two
/// contributors tie on weight, the one whose predicted label agrees with
/// the source label wins dominance; remaining ties go to the lowest
/// target raster index.
pub fn detect_occupancy_with_labels(
    flow: &FlowField,
    prev_map: Option<&SemanticMap>,
    pred_map: Option<&SemanticMap>,
) -> (Tensor, DisocclusionMask) {
    let (h, w) = (flow.height(), flow.width());
    let mut occ = Tensor::zeros(&[h, w]);
    let mut mask = DisocclusionMask::empty(h, w);
    // contributions per source cell: (weight, target raster index)
    let mut contributions: Vec<Vec<(f64, usize)>> = vec![Vec::new(); h * w];
    // primary source cell per target (cell receiving its largest weight)
    let mut primary: Vec<Option<usize>> = vec![None; h * w];

    for y in 0..h {
        for x in 0..w {
            let t_idx = y * w + x;
            let (u, v) = flow.uv(y, x);
            let qx = x as f64 + u;
            let qy = y as f64 + v;
            if qx < 0.0 || qy < 0.0 || qx > (w - 1) as f64 || qy > (h - 1) as f64 {
                // no source pixel at all
                mask.flag(t_idx, PROV_OCCUPANCY);
                continue;
            }
            let x0 = qx.floor() as usize;
            let y0 = qy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = qx - x0 as f64;
            let fy = qy - y0 as f64;
            let cells = [
                (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
                (y0 * w + x1, fx * (1.0 - fy)),
                (y1 * w + x0, (1.0 - fx) * fy),
                (y1 * w + x1, fx * fy),
            ];
            let mut best_cell = cells[0].0;
            let mut best_w = -1.0;
            for &(cell, weight) in &cells {
                if weight <= 0.0 {
                    continue;
                }
                occ.data_mut()[cell] += weight;
                contributions[cell].push((weight, t_idx));
                if weight > best_w {
                    best_w = weight;
                    best_cell = cell;
                }
            }
            primary[t_idx] = Some(best_cell);
        }
    }

    for t_idx in 0..h * w {
        let cell = match primary[t_idx] {
            Some(c) => c,
            None => continue,
        };
        if occ.data()[cell] <= 1.5 {
            continue;
        }
        let dominant = dominant_contributor(&contributions[cell], cell, prev_map, pred_map, w);
        if dominant != t_idx {
            mask.flag(t_idx, PROV_OCCUPANCY);
        }
    }
    (occ, mask)
}

fn dominant_contributor(
    contribs: &[(f64, usize)],
    cell: usize,
    prev_map: Option<&SemanticMap>,
    pred_map: Option<&SemanticMap>,
    w: usize,
) -> usize {
    let max_w = contribs.iter().fold(0.0f64, |m, &(wt, _)| m.max(wt));
    let tied: Vec<usize> = contribs
        .iter()
        .filter(|&&(wt, _)| (max_w - wt) < 1e-12)
        .map(|&(_, t)| t)
        .collect();
    if tied.len() > 1 {
        if let (Some(prev), Some(pred)) = (prev_map, pred_map) {
            let src_label = prev.label(cell / w, cell % w);
            let agreeing: Vec<usize> = tied
                .iter()
                .copied()
                .filter(|&t| pred.label(t / w, t % w) == src_label)
                .collect();
            if !agreeing.is_empty() {
                return agreeing.into_iter().min().unwrap();
            }
        }
    }
    tied.into_iter().min().unwrap()
}

/// Semantic-consistency criterion: target `p` is flagged when its
/// predicted label differs from the source label sampled (nearest
/// neighbour) at `p + flow(p)`.
pub fn detect_semantic(
    pred_map: &SemanticMap,
    prev_map: &SemanticMap,
    flow: &FlowField,
) -> Result<DisocclusionMask> {
    let (h, w) = (prev_map.height(), prev_map.width());
    if pred_map.height() != h || pred_map.width() != w {
        return Err(Error::ShapeMismatch("semantic criterion map sizes".into()));
    }
    if pred_map.num_classes() != prev_map.num_classes() {
        return Err(Error::ShapeMismatch(format!(
            "class counts {} vs {}",
            pred_map.num_classes(),
            prev_map.num_classes()
        )));
    }
    let mut mask = DisocclusionMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.uv(y, x);
            let qx = (x as f64 + u).round().clamp(0.0, (w - 1) as f64) as usize;
            let qy = (y as f64 + v).round().clamp(0.0, (h - 1) as f64) as usize;
            if pred_map.label(y, x) != prev_map.label(qy, qx) {
                mask.flag(y * w + x, PROV_SEMANTIC);
            }
        }
    }
    Ok(mask)
}

/// Literal reading of the consistency rule (compares labels at the same
/// location instead of along the flow); kept for criterion comparisons in
/// the ablation harness.
pub fn detect_semantic_colocated(
    pred_map: &SemanticMap,
    prev_map: &SemanticMap,
) -> Result<DisocclusionMask> {
    let (h, w) = (prev_map.height(), prev_map.width());
    if pred_map.height() != h || pred_map.width() != w {
        return Err(Error::ShapeMismatch("semantic criterion map sizes".into()));
    }
    let mut mask = DisocclusionMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            if pred_map.label(y, x) != prev_map.label(y, x) {
                mask.flag(y * w + x, PROV_SEMANTIC);
            }
        }
    }
    Ok(mask)
}

/// Combined detector: union of the occupancy and semantic criteria, with
/// provenance recording which criterion fired.
pub fn detect_disocclusion(
    pred_map: &SemanticMap,
    prev_map: &SemanticMap,
    flow: &FlowField,
) -> Result<DisocclusionMask> {
    let (_, occ_mask) = detect_occupancy_with_labels(flow, Some(prev_map), Some(pred_map));
    let sem_mask = detect_semantic(pred_map, prev_map, flow)?;
    Ok(occ_mask.union(&sem_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::binary_prf;
    use crate::synthworld::{default_world, generate};
    use crate::tensor::Tensor;

    fn flow_from(h: usize, w: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> FlowField {
        let mut v = Tensor::zeros(&[2, h, w]);
        for y in 0..h {
            for x in 0..w {
                let (u, vv) = f(y, x);
                *v.at3_mut(0, y, x) = u;
                *v.at3_mut(1, y, x) = vv;
            }
        }
        FlowField::new(v).unwrap()
    }

    #[test]
    fn zero_flow_warp_is_identity() {
        let oracle = generate(&default_world(3)).unwrap();
        let frame = &oracle.clip.frames[0];
        let flow = FlowField::zeros(frame.height(), frame.width());
        let warped = warp_frame(frame, &flow).unwrap();
        for (a, b) in warped.pixels.data().iter().zip(frame.pixels.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_flow_shifts_by_one_with_border_clamp() {
        let oracle = generate(&default_world(4)).unwrap();
        let frame = &oracle.clip.frames[0];
        let (h, w) = (frame.height(), frame.width());
        let flow = flow_from(h, w, |_, _| (-1.0, 0.0));
        let warped = warp_frame(frame, &flow).unwrap();
        for y in 0..h {
            for c in 0..3 {
                // interior: out(x) = src(x - 1)
                for x in 1..w {
                    assert!(
                        (warped.pixels.at3(c, y, x) - frame.pixels.at3(c, y, x - 1)).abs() < 1e-12
                    );
                }
                // border clamps to column 0
                assert!((warped.pixels.at3(c, y, 0) - frame.pixels.at3(c, y, 0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_matches_next_frame_in_covisible_region() {
        let oracle = generate(&default_world(5)).unwrap();
        let (h, w) = (oracle.clip.height(), oracle.clip.width());
        for t in 1..oracle.clip.len() {
            let warped = warp_frame(&oracle.clip.frames[t - 1], &oracle.clip.flows[t]).unwrap();
            let mut err = 0.0;
            let mut n = 0;
            for y in 0..h {
                for x in 0..w {
                    if oracle.disocc[t][y * w + x] {
                        continue;
                    }
                    for c in 0..3 {
                        err += (warped.pixels.at3(c, y, x)
                            - oracle.clip.frames[t].pixels.at3(c, y, x))
                        .abs();
                        n += 1;
                    }
                }
            }
            assert!(err / (n as f64) < 1e-3);
        }
    }

    #[test]
    fn zero_flow_occupancy_is_one_everywhere_no_flags() {
        let flow = FlowField::zeros(6, 7);
        let (occ, mask) = detect_occupancy(&flow);
        assert!(occ.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn bijective_integer_flow_occupancy_is_one() {
        // Uniform shift by (1, 0) with wraparound avoided: pixels at the
        // right edge leave the canvas and get flagged as having no source,
        // every interior source cell keeps occupancy 1.
        let (h, w) = (5, 5);
        let flow = flow_from(h, w, |_, _| (1.0, 0.0));
        let (occ, mask) = detect_occupancy(&flow);
        for y in 0..h {
            for x in 1..w {
                assert!((occ.data()[y * w + x] - 1.0).abs() < 1e-12);
            }
            // only the column whose source is off canvas is flagged
            for x in 0..w {
                assert_eq!(mask.is_set(y, x), x == w - 1);
            }
        }
    }

    #[test]
    fn shared_integer_source_flags_non_dominant_target() {
        let (h, w) = (4, 4);
        // target (x=1,y=0) stays put; target (x=2,y=0) also points at (1,0)
        let flow = flow_from(h, w, |y, x| {
            if (y, x) == (0, 2) {
                (-1.0, 0.0)
            } else {
                (0.0, 0.0)
            }
        });
        let (occ, mask) = detect_occupancy(&flow);
        assert!((occ.data()[1] - 2.0).abs() < 1e-12, "source cell holds two claims");
        // weight tie, no labels: lowest raster index (pixel (0,1)) wins
        assert!(!mask.is_set(0, 1));
        assert!(mask.is_set(0, 2));
        // cell (0,2)'s own occupancy dropped to 0, nothing else flagged
        assert_eq!(mask.count(), 1);

        // with labels the semantically consistent contributor dominates
        let prev = SemanticMap::new(vec![0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], 4, 4, 2)
            .unwrap();
        let pred = SemanticMap::new(vec![0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0], 4, 4, 2)
            .unwrap();
        let (_, mask2) = detect_occupancy_with_labels(&flow, Some(&prev), Some(&pred));
        // source label at (0,1) is 1; target (0,2) predicts 1 and agrees
        assert!(mask2.is_set(0, 1));
        assert!(!mask2.is_set(0, 2));
    }

    /// The two-criteria scenario: a foreground object moves right by 2,
    /// the flow at a dis-occluded background pixel erroneously points
    /// into the object's old footprint midway between cells. Occupancy
    /// accumulates at most 1.5 per cell and misses it; the semantic
    /// criterion catches the label mismatch.
    #[test]
    fn semantic_criterion_catches_what_occupancy_misses() {
        let (h, w) = (8, 16);
        let object = |x: usize| (4..=7).contains(&x);
        let prev_labels: Vec<u8> = (0..h * w)
            .map(|i| if object(i % w) { 1 } else { 0 })
            .collect();
        let pred_labels: Vec<u8> = (0..h * w)
            .map(|i| if (6..=9).contains(&(i % w)) { 1 } else { 0 })
            .collect();
        let prev = SemanticMap::new(prev_labels, h, w, 2).unwrap();
        let pred = SemanticMap::new(pred_labels, h, w, 2).unwrap();
        // correct flows: object pixels (-2, 0), background 0; the trailing
        // strip (x in 4..=5, background now) gets erroneous flows pointing
        // half a pixel into the object's old footprint, two cells apart so
        // no source cell accumulates more than 1.5 mass.
        let flow = flow_from(h, w, |_, x| {
            if (6..=9).contains(&x) {
                (-2.0, 0.0)
            } else if x == 4 {
                (0.5, 0.0) // q = 4.5, between old-object cells 4 and 5
            } else if x == 5 {
                (1.5, 0.0) // q = 6.5, between old-object cells 6 and 7
            } else {
                (0.0, 0.0)
            }
        });
        let (occ, occ_mask) = detect_occupancy_with_labels(&flow, Some(&prev), Some(&pred));
        let sem_mask = detect_semantic(&pred, &prev, &flow).unwrap();
        let union = detect_disocclusion(&pred, &prev, &flow).unwrap();
        for y in 0..h {
            for x in 4..=5usize {
                // occupancy never exceeds 1.5 anywhere near the strip
                for qx in 4..=7usize {
                    assert!(occ.data()[y * w + qx] <= 1.5 + 1e-12);
                }
                assert!(!occ_mask.is_set(y, x), "occupancy should miss ({y},{x})");
                assert!(sem_mask.is_set(y, x), "semantic should flag ({y},{x})");
                assert!(union.is_set(y, x));
                assert_eq!(union.provenance_at(y, x) & PROV_SEMANTIC, PROV_SEMANTIC);
            }
        }
    }

    #[test]
    fn static_scene_produces_empty_mask() {
        let map = SemanticMap::uniform(6, 6, 3, 1);
        let flow = FlowField::zeros(6, 6);
        let mask = detect_disocclusion(&map, &map, &flow).unwrap();
        assert_eq!(mask.count(), 0);
    }

    #[test]
    fn union_contains_both_criteria() {
        let oracle = generate(&default_world(17)).unwrap();
        let t = 3;
        let pred = &oracle.clip.maps[t];
        let prev = &oracle.clip.maps[t - 1];
        let flow = &oracle.clip.flows[t];
        let (_, occ_mask) = detect_occupancy_with_labels(flow, Some(prev), Some(pred));
        let sem_mask = detect_semantic(pred, prev, flow).unwrap();
        let union = detect_disocclusion(pred, prev, flow).unwrap();
        for i in 0..36 * 64 {
            let y = i / 64;
            let x = i % 64;
            if occ_mask.is_set(y, x) || sem_mask.is_set(y, x) {
                assert!(union.is_set(y, x));
            }
        }
        assert!(union.count() >= occ_mask.count().max(sem_mask.count()));
    }

    #[test]
    fn occupancy_recall_with_exact_flow() {
        // Exact flow: the occupancy criterion alone recovers most of the
        // oracle dis-occlusions.
        let mut hits = 0usize;
        let mut total = 0usize;
        for seed in 0..5 {
            let oracle = generate(&default_world(100 + seed)).unwrap();
            let (h, w) = (oracle.clip.height(), oracle.clip.width());
            for t in 1..oracle.clip.len() {
                let (_, mask) = detect_occupancy_with_labels(
                    &oracle.clip.flows[t],
                    Some(&oracle.clip.maps[t - 1]),
                    Some(&oracle.clip.maps[t]),
                );
                for y in 0..h {
                    for x in 0..w {
                        if oracle.disocc[t][y * w + x] {
                            total += 1;
                            if mask.is_set(y, x) {
                                hits += 1;
                            }
                        }
                    }
                }
            }
        }
        let recall = hits as f64 / total as f64;
        assert!(recall >= 0.8, "occupancy-only recall {recall}");
    }

    #[test]
    fn semantic_recovers_occupancy_misses_under_corrupted_flow() {
        // Corrupt the flow inside oracle dis-occlusions so it points a
        // half-pixel into the occluder's old footprint (over-smoothed
        // boundary flow). Occupancy misses most of them; the semantic
        // criterion recovers >= 90% of those misses.
        let oracle = generate(&default_world(55)).unwrap();
        let (h, w) = (oracle.clip.height(), oracle.clip.width());
        let mut recovered = 0usize;
        let mut missed = 0usize;
        for t in 1..oracle.clip.len() {
            let mut corrupted = oracle.clip.flows[t].clone();
            for y in 0..h {
                for x in 0..w {
                    if !oracle.disocc[t][y * w + x] {
                        continue;
                    }
                    let (u, v) = oracle.clip.flows[t].uv(y, x);
                    *corrupted.vectors.at3_mut(0, y, x) = u - 0.5;
                    *corrupted.vectors.at3_mut(1, y, x) = v;
                }
            }
            let pred = &oracle.clip.maps[t];
            let prev = &oracle.clip.maps[t - 1];
            let (_, occ_mask) = detect_occupancy_with_labels(&corrupted, Some(prev), Some(pred));
            let sem_mask = detect_semantic(pred, prev, &corrupted).unwrap();
            for y in 0..h {
                for x in 0..w {
                    if oracle.disocc[t][y * w + x] && !occ_mask.is_set(y, x) {
                        missed += 1;
                        if sem_mask.is_set(y, x) {
                            recovered += 1;
                        }
                    }
                }
            }
        }
        assert!(missed > 0, "corruption should defeat occupancy somewhere");
        let rate = recovered as f64 / missed as f64;
        assert!(rate >= 0.9, "semantic recovery rate {rate}");
    }

    #[test]
    fn combined_f1_against_oracle_with_exact_inputs() {
        let mut pred_all = Vec::new();
        let mut truth_all = Vec::new();
        for seed in 0..5 {
            let oracle = generate(&default_world(200 + seed)).unwrap();
            for t in 1..oracle.clip.len() {
                let mask = detect_disocclusion(
                    &oracle.clip.maps[t],
                    &oracle.clip.maps[t - 1],
                    &oracle.clip.flows[t],
                )
                .unwrap();
                pred_all.extend_from_slice(mask.as_slice());
                truth_all.extend_from_slice(&oracle.disocc[t]);
            }
        }
        let (_, _, f1) = binary_prf(&pred_all, &truth_all);
        assert!(f1 >= 0.90, "combined F1 {f1}");
    }
}
