//! Prediction visualizations: the standard optical-flow color wheel,
//! frame grids and dis-occlusion overlays.

use std::path::Path;

use crate::error::Result;
use crate::scene::FlowField;
use crate::tensor::Tensor;
use crate::warp::DisocclusionMask;

/// Segment sizes of the standard flow color wheel.
const WHEEL_SEGMENTS: [(usize, [f64; 3], [f64; 3]); 6] = [
    (15, [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]), // red -> yellow
    (6, [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]),  // yellow -> green
    (4, [0.0, 1.0, 0.0], [0.0, 1.0, 1.0]),  // green -> cyan
    (11, [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]), // cyan -> blue
    (13, [0.0, 0.0, 1.0], [1.0, 0.0, 1.0]), // blue -> magenta
    (6, [1.0, 0.0, 1.0], [1.0, 0.0, 0.0]),  // magenta -> red
];

fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::new();
    for (len, from, to) in WHEEL_SEGMENTS {
        for i in 0..len {
            let t = i as f64 / len as f64;
            wheel.push([
                from[0] + t * (to[0] - from[0]),
                from[1] + t * (to[1] - from[1]),
                from[2] + t * (to[2] - from[2]),
            ]);
        }
    }
    wheel
}

/// Colorize a flow field with the standard color wheel: hue encodes
/// direction, saturation magnitude. `max_magnitude` fixes the
/// normalization (defaults to the field's own maximum).
pub fn flow_to_color(flow: &FlowField, max_magnitude: Option<f64>) -> Tensor {
    let (h, w) = (flow.height(), flow.width());
    let wheel = color_wheel();
    let n = wheel.len();
    let mut max_mag = max_magnitude.unwrap_or(0.0);
    if max_magnitude.is_none() {
        for y in 0..h {
            for x in 0..w {
                let (u, v) = flow.uv(y, x);
                max_mag = max_mag.max((u * u + v * v).sqrt());
            }
        }
    }
    let max_mag = max_mag.max(1e-9);
    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = flow.uv(y, x);
            let mag = ((u * u + v * v).sqrt() / max_mag).min(1.0);
            let angle = (-v).atan2(-u) / std::f64::consts::PI; // [-1, 1]
            let fk = (angle + 1.0) / 2.0 * (n as f64 - 1.0);
            let k0 = fk.floor() as usize;
            let k1 = (k0 + 1) % n;
            let f = fk - k0 as f64;
            for c in 0..3 {
                let col = (1.0 - f) * wheel[k0][c] + f * wheel[k1][c];
                // desaturate toward white for small magnitudes
                let val = 1.0 - mag * (1.0 - col);
                *out.at3_mut(c, y, x) = val;
            }
        }
    }
    out
}

/// Overlay dis-occluded pixels in red on top of a frame.
pub fn disocc_overlay(frame: &Tensor, mask: &DisocclusionMask) -> Tensor {
    let (h, w) = (mask.height(), mask.width());
    let mut out = frame.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.is_set(y, x) {
                *out.at3_mut(0, y, x) = 1.0;
                *out.at3_mut(1, y, x) *= 0.25;
                *out.at3_mut(2, y, x) *= 0.25;
            }
        }
    }
    out
}

/// Compose rows of equally sized `[3, H, W]` images into one grid image
/// with 2-pixel separators and write it as PNG.
pub fn write_frame_grid(path: &Path, rows: &[Vec<Tensor>]) -> Result<()> {
    assert!(!rows.is_empty() && !rows[0].is_empty());
    let (h, w) = (rows[0][0].shape()[1], rows[0][0].shape()[2]);
    let cols = rows.iter().map(Vec::len).max().unwrap();
    let sep = 2;
    let gh = rows.len() * h + (rows.len() - 1) * sep;
    let gw = cols * w + (cols - 1) * sep;
    let mut grid = Tensor::full(&[3, gh, gw], 1.0);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            let oy = ri * (h + sep);
            let ox = ci * (w + sep);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        *grid.at3_mut(c, oy + y, ox + x) = img.at3(c, y, x).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    let frame = crate::scene::Frame::new(grid, 0)?;
    crate::io::write_frame_png(path, &frame)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wheel_has_55_colors() {
        assert_eq!(color_wheel().len(), 55);
    }

    #[test]
    fn zero_flow_is_white() {
        let flow = FlowField::zeros(4, 4);
        let img = flow_to_color(&flow, Some(1.0));
        assert!(img.data().iter().all(|&v| (v - 1.0).abs() < 1e-9));
    }

    #[test]
    fn colors_distinguish_directions() {
        let mut v = Tensor::zeros(&[2, 1, 2]);
        *v.at3_mut(0, 0, 0) = 1.0; // rightward
        *v.at3_mut(0, 0, 1) = -1.0; // leftward
        let flow = FlowField::new(v).unwrap();
        let img = flow_to_color(&flow, Some(1.0));
        let a: Vec<f64> = (0..3).map(|c| img.at3(c, 0, 0)).collect();
        let b: Vec<f64> = (0..3).map(|c| img.at3(c, 0, 1)).collect();
        assert_ne!(a, b);
    }

    #[test]
    fn grid_write_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        let img = Tensor::full(&[3, 4, 4], 0.5);
        write_frame_grid(&path, &[vec![img.clone(), img.clone()], vec![img.clone()]]).unwrap();
        assert!(path.exists());
    }
}
