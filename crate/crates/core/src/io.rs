//! File formats: 8-bit RGB PNG frames, Middlebury `.flo` flow fields,
//! single-channel PNG semantic maps and dis-occlusion masks, and the
//! dataset manifest.
//!
//! Semantic maps are 1-based on disk (pixel value = class index, 1..=C)
//! and 0-based in memory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use image::{GrayImage, ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{FlowField, Frame, SemanticMap};
use crate::tensor::Tensor;

/// Magic float at the head of a Middlebury `.flo` file.
pub const FLO_MAGIC: f32 = 202021.25;

/// Write a frame as 8-bit RGB PNG, mapping [0,1] linearly to 0..=255.
pub fn write_frame_png(path: &Path, frame: &Frame) -> Result<()> {
    let (h, w) = (frame.height(), frame.width());
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = image::Rgb([
                quantize(frame.pixels.at3(0, y, x)),
                quantize(frame.pixels.at3(1, y, x)),
                quantize(frame.pixels.at3(2, y, x)),
            ]);
            img.put_pixel(x as u32, y as u32, px);
        }
    }
    img.save(path)?;
    Ok(())
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Read an 8-bit RGB PNG as a frame with values in [0,1].
pub fn read_frame_png(path: &Path, timestamp: usize) -> Result<Frame> {
    let img = ImageReader::open(path)?.decode()?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut pixels = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                *pixels.at3_mut(c, y, x) = px[c] as f64 / 255.0;
            }
        }
    }
    Frame::new(pixels, timestamp)
}

/// Write a flow field in Middlebury `.flo` format: magic, width, height,
/// then row-major interleaved float32 (u, v) pairs.
pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_f32::<LittleEndian>(FLO_MAGIC)?;
    w.write_i32::<LittleEndian>(flow.width() as i32)?;
    w.write_i32::<LittleEndian>(flow.height() as i32)?;
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            let (u, v) = flow.uv(y, x);
            w.write_f32::<LittleEndian>(u as f32)?;
            w.write_f32::<LittleEndian>(v as f32)?;
        }
    }
    Ok(())
}

/// Read a Middlebury `.flo` file.
pub fn read_flo(path: &Path) -> Result<FlowField> {
    let mut r = BufReader::new(File::open(path)?);
    let magic = r.read_f32::<LittleEndian>()?;
    if magic != FLO_MAGIC {
        return Err(Error::Format(format!("bad .flo magic {magic}")));
    }
    let w = r.read_i32::<LittleEndian>()?;
    let h = r.read_i32::<LittleEndian>()?;
    if w <= 0 || h <= 0 || w > 1 << 16 || h > 1 << 16 {
        return Err(Error::Format(format!("bad .flo dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let mut vectors = Tensor::zeros(&[2, h, w]);
    for y in 0..h {
        for x in 0..w {
            let u = r.read_f32::<LittleEndian>()? as f64;
            let v = r.read_f32::<LittleEndian>()? as f64;
            *vectors.at3_mut(0, y, x) = u;
            *vectors.at3_mut(1, y, x) = v;
        }
    }
    FlowField::new(vectors)
}

/// Write a semantic map as single-channel 8-bit PNG, 1-based labels.
pub fn write_map_png(path: &Path, map: &SemanticMap) -> Result<()> {
    let (h, w) = (map.height(), map.width());
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([map.label(y, x) + 1]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Read a single-channel PNG semantic map (1-based labels on disk).
pub fn read_map_png(path: &Path, num_classes: usize) -> Result<SemanticMap> {
    let img = ImageReader::open(path)?.decode()?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let v = img.get_pixel(x as u32, y as u32)[0];
            if v == 0 || v as usize > num_classes {
                return Err(Error::Format(format!(
                    "map pixel value {v} outside 1..={num_classes}"
                )));
            }
            labels[y * w + x] = v - 1;
        }
    }
    SemanticMap::new(labels, h, w, num_classes)
}

/// Write a boolean mask as single-channel PNG (0 = false, 255 = true).
pub fn write_mask_png(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    if mask.len() != h * w {
        return Err(Error::ShapeMismatch("mask length".into()));
    }
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = if mask[y * w + x] { 255 } else { 0 };
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Per-clip record in a dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub split: String,
    pub spec_hash: u64,
    pub observed_len: usize,
    pub horizon: usize,
    pub num_classes: usize,
    pub frames: Vec<String>,
    pub flows: Vec<String>,
    pub maps: Vec<String>,
}

/// Write manifest entries as JSON lines.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Read a JSON-lines manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let mut buf = String::new();
    BufReader::new(File::open(path)?).read_to_string(&mut buf)?;
    let mut entries = Vec::new();
    for line in buf.lines() {
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(line)?);
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flo_roundtrip_preserves_f32_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (h, w) = (5, 9);
        let data: Vec<f64> = (0..2 * h * w)
            .map(|_| rng.random_range(-10.0..10.0f64) as f32 as f64)
            .collect();
        let flow = FlowField::new(Tensor::from_vec(&[2, h, w], data)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.flo");
        write_flo(&path, &flow).unwrap();
        let back = read_flo(&path).unwrap();
        assert_eq!(back.vectors, flow.vectors);
    }

    #[test]
    fn flo_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.flo");
        std::fs::write(&path, [0u8; 12]).unwrap();
        assert!(read_flo(&path).is_err());
    }

    #[test]
    fn map_png_roundtrip_is_one_based_on_disk() {
        let map = SemanticMap::new(vec![0, 1, 2, 1], 2, 2, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.png");
        write_map_png(&path, &map).unwrap();
        // Raw pixel values on disk are label + 1.
        let img = image::open(&path).unwrap().into_luma8();
        assert_eq!(img.get_pixel(0, 0)[0], 1);
        assert_eq!(img.get_pixel(1, 0)[0], 2);
        assert_eq!(img.get_pixel(0, 1)[0], 3);
        let back = read_map_png(&path, 3).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn frame_png_roundtrip_within_quantization() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (h, w) = (6, 4);
        let data: Vec<f64> = (0..3 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let frame = Frame::new(Tensor::from_vec(&[3, h, w], data), 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frame.png");
        write_frame_png(&path, &frame).unwrap();
        let back = read_frame_png(&path, 0).unwrap();
        for (a, b) in frame.pixels.data().iter().zip(back.pixels.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn manifest_roundtrip() {
        let entries = vec![ManifestEntry {
            id: 3,
            split: "train".into(),
            spec_hash: 42,
            observed_len: 5,
            horizon: 5,
            num_classes: 3,
            frames: vec!["a.png".into()],
            flows: vec!["a.flo".into()],
            maps: vec!["a_map.png".into()],
        }];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].id, 3);
        assert_eq!(back[0].split, "train");
    }
}
