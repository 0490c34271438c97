//! Synthetic layered world with analytic ground truth.
//!
//! A clip is a stack of rigid layers over an infinite textured background:
//! each semantic class moves under its own motion law, later layers
//! occlude earlier ones, and the camera pans the background. Because the
//! composition is analytic, every frame comes with exact backward flow,
//! exact semantic maps, exact dis-occlusion masks and exact per-source
//! occupancy counts. This is both the training corpus and the oracle for
//! the dis-occlusion and metric checks.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, ManifestEntry};
use crate::scene::{Clip, FlowField, Frame, SemanticMap};
use crate::tensor::Tensor;
use crate::warp::DisocclusionMask;

/// Shape of a moving layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeKind {
    Rect { w: f64, h: f64 },
    Disc { radius: f64 },
}

impl ShapeKind {
    fn covers(&self, dx: f64, dy: f64) -> bool {
        match self {
            ShapeKind::Rect { w, h } => dx >= 0.0 && dx < *w && dy >= 0.0 && dy < *h,
            ShapeKind::Disc { radius } => {
                let (cx, cy) = (dx - radius, dy - radius);
                cx * cx + cy * cy <= radius * radius
            }
        }
    }

    fn extent(&self) -> (f64, f64) {
        match self {
            ShapeKind::Rect { w, h } => (*w, *h),
            ShapeKind::Disc { radius } => (2.0 * radius, 2.0 * radius),
        }
    }
}

/// Procedural texture: per-channel base color, linear gradient and smooth
/// value noise, evaluated in the layer's material coordinates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextureSpec {
    pub base: [f64; 3],
    /// Per-channel (gx, gy) gradient in value per 64 px.
    pub gradient: [[f64; 2]; 3],
    pub noise_amp: f64,
}

impl TextureSpec {
    fn eval(&self, channel: usize, mx: f64, my: f64, noise_seed: u64) -> f64 {
        let g = self.gradient[channel];
        let mut v = self.base[channel] + (g[0] * mx + g[1] * my) / 64.0;
        if self.noise_amp > 0.0 {
            v += self.noise_amp * value_noise(mx / 4.0, my / 4.0, noise_seed ^ channel as u64);
        }
        v.clamp(0.0, 1.0)
    }
}

/// Bilinearly interpolated lattice noise in [-1, 1].
fn value_noise(x: f64, y: f64, seed: u64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let v00 = lattice(x0 as i64, y0 as i64, seed);
    let v01 = lattice(x0 as i64 + 1, y0 as i64, seed);
    let v10 = lattice(x0 as i64, y0 as i64 + 1, seed);
    let v11 = lattice(x0 as i64 + 1, y0 as i64 + 1, seed);
    v00 * (1.0 - fx) * (1.0 - fy) + v01 * fx * (1.0 - fy) + v10 * (1.0 - fx) * fy + v11 * fx * fy
}

fn lattice(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(ix as u64)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9)
        .wrapping_add(iy as u64);
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h as f64 / u64::MAX as f64) * 2.0 - 1.0
}

/// Per-frame motion of a layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum MotionLaw {
    Static,
    /// Constant velocity in px/frame.
    Drift { vx: f64, vy: f64 },
    /// Velocity sign flips every `period` frames.
    Zigzag { vx: f64, vy: f64, period: usize },
    /// Sinusoidal position offset with the given amplitude and period.
    Sinusoid {
        amp_x: f64,
        amp_y: f64,
        period: f64,
        phase: f64,
    },
}

impl MotionLaw {
    /// Cumulative position offset after `t` frames.
    pub fn offset(&self, t: usize) -> (f64, f64) {
        match self {
            MotionLaw::Static => (0.0, 0.0),
            MotionLaw::Drift { vx, vy } => (vx * t as f64, vy * t as f64),
            MotionLaw::Zigzag { vx, vy, period } => {
                let mut ox = 0.0;
                let mut oy = 0.0;
                for tau in 0..t {
                    let sign = if (tau / period) % 2 == 0 { 1.0 } else { -1.0 };
                    ox += sign * vx;
                    oy += sign * vy;
                }
                (ox, oy)
            }
            MotionLaw::Sinusoid {
                amp_x,
                amp_y,
                period,
                phase,
            } => {
                let arg = |tt: f64| (2.0 * std::f64::consts::PI * (tt + phase) / period).sin();
                let base = arg(0.0);
                (amp_x * (arg(t as f64) - base), amp_y * (arg(t as f64) - base))
            }
        }
    }

    /// Forward displacement from frame `t` to frame `t + 1`.
    pub fn displacement(&self, t: usize) -> (f64, f64) {
        let (x0, y0) = self.offset(t);
        let (x1, y1) = self.offset(t + 1);
        (x1 - x0, y1 - y0)
    }
}

/// A moving foreground layer; `id` is the 1-based external class index
/// (background is class 1, movers start at 2). Later entries render in
/// front of earlier ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub shape: ShapeKind,
    pub texture: TextureSpec,
    pub motion: MotionLaw,
}

/// Full description of one synthetic clip family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorldSpec {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassSpec>,
    pub background: TextureSpec,
    /// Camera pan velocity in px/frame (background content drifts by this).
    pub pan: (f64, f64),
    pub clip_len: usize,
    pub observed_len: usize,
    pub seed: u64,
}

impl WorldSpec {
    pub fn num_classes(&self) -> usize {
        self.classes.len() + 1
    }

    /// Stable content hash for manifests.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("spec serializes");
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    fn validate(&self) -> Result<()> {
        if self.clip_len < 2 || self.observed_len < 1 || self.observed_len >= self.clip_len {
            return Err(Error::InvalidSpec(format!(
                "bad clip_len {} / observed_len {}",
                self.clip_len, self.observed_len
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, c) in self.classes.iter().enumerate() {
            if c.id != i + 2 {
                return Err(Error::InvalidSpec(format!(
                    "class ids must be 2..=C in order; entry {} has id {}",
                    i, c.id
                )));
            }
            if !seen.insert(c.id) {
                return Err(Error::InvalidSpec(format!("duplicate class id {}", c.id)));
            }
        }
        if self.num_classes() > 250 {
            return Err(Error::InvalidSpec("too many classes".into()));
        }
        Ok(())
    }
}

/// A clip plus its analytic ground truth: exact per-step dis-occlusion
/// masks (index t marks pixels of frame t with no source in frame t-1;
/// index 0 is empty) and exact occupancy counts over the source frame.
#[derive(Debug, Clone)]
pub struct OracleClip {
    pub clip: Clip,
    pub disocc: Vec<Vec<bool>>,
    pub occupancy: Vec<Tensor>,
}

/// Runtime state of one generated clip: resolved start positions.
struct LayerState {
    start: (f64, f64),
    noise_seed: u64,
}

/// Deterministically generate a clip with analytic ground truth.
pub fn generate(spec: &WorldSpec) -> Result<OracleClip> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let len = spec.clip_len;

    // Sample integer start positions keeping each mover fully on-canvas
    // over the whole clip.
    let mut layers = Vec::with_capacity(spec.classes.len());
    for class in &spec.classes {
        let (ew, eh) = class.shape.extent();
        let (mut min_ox, mut max_ox, mut min_oy, mut max_oy) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for t in 0..len {
            let (ox, oy) = class.motion.offset(t);
            min_ox = min_ox.min(ox);
            max_ox = max_ox.max(ox);
            min_oy = min_oy.min(oy);
            max_oy = max_oy.max(oy);
        }
        let lo_x = (-min_ox).ceil() as i64;
        let hi_x = (w as f64 - ew - max_ox).floor() as i64;
        let lo_y = (-min_oy).ceil() as i64;
        let hi_y = (h as f64 - eh - max_oy).floor() as i64;
        if hi_x < lo_x || hi_y < lo_y {
            return Err(Error::InvalidSpec(format!(
                "class {} cannot stay on a {}x{} canvas under its motion law",
                class.id, w, h
            )));
        }
        let sx = rng.random_range(lo_x..=hi_x) as f64;
        let sy = rng.random_range(lo_y..=hi_y) as f64;
        let noise_seed = rng.random::<u64>();
        layers.push(LayerState {
            start: (sx, sy),
            noise_seed,
        });
    }
    let bg_noise_seed = rng.random::<u64>();

    // Visible layer at real coordinates; returns the internal class index.
    let layer_at = |t: usize, x: f64, y: f64| -> usize {
        for (i, class) in spec.classes.iter().enumerate().rev() {
            let (ox, oy) = class.motion.offset(t);
            let px = layers[i].start.0 + ox;
            let py = layers[i].start.1 + oy;
            if class.shape.covers(x - px, y - py) {
                return i + 1;
            }
        }
        0
    };

    // Forward displacement of an internal class from frame t to t+1.
    let displacement = |internal: usize, t: usize| -> (f64, f64) {
        if internal == 0 {
            spec.pan
        } else {
            spec.classes[internal - 1].motion.displacement(t)
        }
    };

    let texture_value = |internal: usize, channel: usize, t: usize, x: f64, y: f64| -> f64 {
        if internal == 0 {
            let mx = x - spec.pan.0 * t as f64;
            let my = y - spec.pan.1 * t as f64;
            spec.background.eval(channel, mx, my, bg_noise_seed)
        } else {
            let class = &spec.classes[internal - 1];
            let (ox, oy) = class.motion.offset(t);
            let mx = x - (layers[internal - 1].start.0 + ox);
            let my = y - (layers[internal - 1].start.1 + oy);
            class.texture.eval(channel, mx, my, layers[internal - 1].noise_seed)
        }
    };

    let num_classes = spec.num_classes();
    let mut frames = Vec::with_capacity(len);
    let mut flows = Vec::with_capacity(len);
    let mut maps = Vec::with_capacity(len);
    let mut disocc = Vec::with_capacity(len);
    let mut occupancy = Vec::with_capacity(len);

    for t in 0..len {
        let mut labels = vec![0u8; h * w];
        let mut pixels = Tensor::zeros(&[3, h, w]);
        let mut vectors = Tensor::zeros(&[2, h, w]);
        let mut dis = vec![false; h * w];
        let mut occ = Tensor::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                let internal = layer_at(t, x as f64, y as f64);
                labels[y * w + x] = internal as u8;
                for c in 0..3 {
                    *pixels.at3_mut(c, y, x) = texture_value(internal, c, t, x as f64, y as f64);
                }
                if t > 0 {
                    let (dx, dy) = displacement(internal, t - 1);
                    let (u, v) = (-dx, -dy);
                    *vectors.at3_mut(0, y, x) = u;
                    *vectors.at3_mut(1, y, x) = v;
                    let (qx, qy) = (x as f64 + u, y as f64 + v);
                    let oob = qx < 0.0 || qy < 0.0 || qx > (w - 1) as f64 || qy > (h - 1) as f64;
                    if oob || layer_at(t - 1, qx, qy) != internal {
                        dis[y * w + x] = true;
                    }
                    if !oob {
                        // exact bilinear splat into the source frame
                        let x0 = qx.floor() as usize;
                        let y0 = qy.floor() as usize;
                        let x1 = (x0 + 1).min(w - 1);
                        let y1 = (y0 + 1).min(h - 1);
                        let fx = qx - x0 as f64;
                        let fy = qy - y0 as f64;
                        occ.data_mut()[y0 * w + x0] += (1.0 - fx) * (1.0 - fy);
                        occ.data_mut()[y0 * w + x1] += fx * (1.0 - fy);
                        occ.data_mut()[y1 * w + x0] += (1.0 - fx) * fy;
                        occ.data_mut()[y1 * w + x1] += fx * fy;
                    }
                }
            }
        }
        frames.push(Frame::new(pixels, t)?);
        flows.push(FlowField::new(vectors)?);
        maps.push(SemanticMap::new(labels, h, w, num_classes)?);
        disocc.push(dis);
        occupancy.push(occ);
    }

    let clip = Clip::new(
        frames,
        flows,
        maps,
        spec.observed_len,
        len - spec.observed_len,
    )?;
    Ok(OracleClip {
        clip,
        disocc,
        occupancy,
    })
}

/// Exact dis-occlusion mask of frame `t` (pixels not propagated from
/// frame `t-1`). Provenance is marked on both criteria: the oracle is
/// ground truth, not a detector.
pub fn oracle_disocclusion(oracle: &OracleClip, t: usize) -> DisocclusionMask {
    let h = oracle.clip.height();
    let w = oracle.clip.width();
    let mask = oracle.disocc[t].clone();
    DisocclusionMask::from_oracle(mask, h, w)
}

/// The default acceptance-scale world: 64x64 canvas, background pan plus
/// two movers with visibly different laws, 10-frame clips split 5 observed
/// / 5 future.
pub fn default_world(seed: u64) -> WorldSpec {
    WorldSpec {
        height: 64,
        width: 64,
        classes: vec![
            ClassSpec {
                id: 2,
                shape: ShapeKind::Rect { w: 16.0, h: 12.0 },
                texture: TextureSpec {
                    base: [0.72, 0.32, 0.26],
                    gradient: [[0.25, 0.0], [0.0, 0.2], [0.1, 0.1]],
                    noise_amp: 0.06,
                },
                motion: MotionLaw::Drift { vx: -1.0, vy: 1.0 },
            },
            ClassSpec {
                id: 3,
                shape: ShapeKind::Disc { radius: 7.0 },
                texture: TextureSpec {
                    base: [0.22, 0.42, 0.78],
                    gradient: [[0.0, 0.2], [0.15, 0.0], [0.0, 0.0]],
                    noise_amp: 0.06,
                },
                motion: MotionLaw::Zigzag {
                    vx: 2.0,
                    vy: 0.0,
                    period: 2,
                },
            },
        ],
        background: TextureSpec {
            base: [0.48, 0.52, 0.45],
            gradient: [[0.12, 0.05], [0.05, 0.12], [0.08, 0.08]],
            noise_amp: 0.08,
        },
        pan: (1.0, 0.0),
        clip_len: 10,
        observed_len: 5,
        seed,
    }
}

/// Specs for a whole dataset: `count` clips whose per-clip seeds are
/// derived from `base_seed`.
pub fn dataset_specs(template: &WorldSpec, base_seed: u64, count: usize) -> Vec<WorldSpec> {
    (0..count)
        .map(|i| {
            let mut s = template.clone();
            s.seed = derive_seed(base_seed, i as u64);
            s
        })
        .collect()
}

/// Split a seed into decorrelated streams.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Render clips to disk in the standard formats plus a JSONL manifest.
pub fn emit_dataset(dir: &Path, specs: &[(WorldSpec, &str)]) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(specs.len());
    for (id, (spec, split)) in specs.iter().enumerate() {
        let oracle = generate(spec)?;
        let clip = &oracle.clip;
        let clip_dir = dir.join(format!("clip{id:04}"));
        std::fs::create_dir_all(&clip_dir)?;
        let mut frames = Vec::new();
        let mut flows = Vec::new();
        let mut maps = Vec::new();
        for t in 0..clip.len() {
            let f = format!("clip{id:04}/frame{t:02}.png");
            let fl = format!("clip{id:04}/flow{t:02}.flo");
            let m = format!("clip{id:04}/map{t:02}.png");
            io::write_frame_png(&dir.join(&f), &clip.frames[t])?;
            io::write_flo(&dir.join(&fl), &clip.flows[t])?;
            io::write_map_png(&dir.join(&m), &clip.maps[t])?;
            frames.push(f);
            flows.push(fl);
            maps.push(m);
        }
        entries.push(ManifestEntry {
            id,
            split: split.to_string(),
            spec_hash: spec.hash(),
            observed_len: clip.observed_len,
            horizon: clip.horizon,
            num_classes: clip.num_classes(),
            frames,
            flows,
            maps,
        });
    }
    io::write_manifest(&dir.join("manifest.jsonl"), &entries)?;
    Ok(entries)
}
