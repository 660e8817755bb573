//! Reference feature construction: object-level maps via masked average
//! pooling and part-level maps via per-box patch aggregation, plus the
//! latent decoder and the embedding oracle interface.

pub mod decoder;
pub mod oracle;

pub use decoder::{Activation, DecoderWeights};
pub use oracle::{EmbeddingOracle, EmbeddingTable, FrameRef, Patch, SyntheticOracle};

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::img::{ColorImage, Mask};

/// Side length patches are square-resized to before patch-feature inference.
pub const PATCH_SIZE: usize = 224;
/// Patch-feature grid resolution returned by the oracle.
pub const PATCH_GRID: usize = 28;

/// Dense per-pixel embedding map with a validity mask; unassigned pixels are
/// excluded from every reduction.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Pixel-major: `data[(y*width + x) * channels + c]`.
    pub data: Vec<f32>,
    pub assigned: Vec<bool>,
}

impl FeatureMap {
    pub fn unassigned(width: usize, height: usize, channels: usize) -> Self {
        FeatureMap {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
            assigned: vec![false; width * height],
        }
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    #[inline]
    pub fn is_assigned(&self, x: usize, y: usize) -> bool {
        self.assigned[y * self.width + x]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, value: &[f32]) {
        self.pixel_mut(x, y).copy_from_slice(value);
        self.assigned[y * self.width + x] = true;
    }

    pub fn assigned_count(&self) -> usize {
        self.assigned.iter().filter(|&&a| a).count()
    }

    /// Keeps only assigned pixels on a stride grid; used to thin feature
    /// supervision without touching the construction contract.
    pub fn thin_assigned(&mut self, stride: usize) {
        if stride <= 1 {
            return;
        }
        for y in 0..self.height {
            for x in 0..self.width {
                if x % stride != 0 || y % stride != 0 {
                    self.assigned[y * self.width + x] = false;
                }
            }
        }
    }
}

/// Axis-aligned pixel box (x, y, w, h).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl PixelBox {
    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 {
            return Err(Error::precondition("degenerate box"));
        }
        if self.x + self.w > width || self.y + self.h > height {
            return Err(Error::precondition("box outside image bounds"));
        }
        Ok(())
    }
}

/// Class-agnostic detector output: boxes plus per-object masks.
#[derive(Debug, Clone)]
pub struct DetectionSet {
    pub boxes: Vec<PixelBox>,
    pub masks: Vec<Mask>,
}

/// Masked average pooling: mean of unit-normalized features over the mask.
/// Unassigned and zero-norm feature pixels are skipped from both numerator
/// and denominator.
pub fn masked_average_pool(mask: &Mask, fc: &FeatureMap) -> Result<DVector<f64>> {
    if mask.width != fc.width || mask.height != fc.height {
        return Err(Error::precondition("mask and feature map sizes differ"));
    }
    let mut sum = DVector::zeros(fc.channels);
    let mut count = 0usize;
    for y in 0..fc.height {
        for x in 0..fc.width {
            if !mask.get(x, y) || !fc.is_assigned(x, y) {
                continue;
            }
            let px = fc.pixel(x, y);
            let norm: f64 = px.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
            if norm <= 0.0 {
                continue;
            }
            for (s, &v) in sum.iter_mut().zip(px) {
                *s += v as f64 / norm;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::precondition("empty effective mask in masked_average_pool"));
    }
    Ok(sum / count as f64)
}

/// Builds the object-level reference map: every pixel of mask k receives the
/// pooled vector of mask k. Where masks overlap, the smaller-area mask wins.
pub fn build_object_feature_map(detections: &DetectionSet, fc: &FeatureMap) -> FeatureMap {
    let mut out = FeatureMap::unassigned(fc.width, fc.height, fc.channels);
    // paint larger masks first so smaller (foreground) masks take overlaps
    let mut order: Vec<usize> = (0..detections.masks.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(detections.masks[i].count_set()));
    for &i in &order {
        let mask = &detections.masks[i];
        let pooled = match masked_average_pool(mask, fc) {
            Ok(v) => v,
            Err(_) => continue, // mask has no usable feature pixels
        };
        let pooled32: Vec<f32> = pooled.iter().map(|&v| v as f32).collect();
        for y in 0..mask.height {
            for x in 0..mask.width {
                if mask.get(x, y) {
                    out.set_pixel(x, y, &pooled32);
                }
            }
        }
    }
    out
}

/// Bilinear crop-and-resize of an RGB image region to `side`×`side`.
pub fn crop_resize_patch(image: &ColorImage, b: &PixelBox, side: usize) -> ColorImage {
    let mut out = ColorImage::filled(side, side, [0.0; 3]);
    for j in 0..side {
        for i in 0..side {
            // patch pixel center -> box-relative source position
            let sx = (i as f64 + 0.5) * b.w as f64 / side as f64 - 0.5;
            let sy = (j as f64 + 0.5) * b.h as f64 / side as f64 - 0.5;
            let sx = sx.clamp(0.0, (b.w - 1) as f64);
            let sy = sy.clamp(0.0, (b.h - 1) as f64);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(b.w - 1), (y0 + 1).min(b.h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                let v00 = image.get(b.x + x0, b.y + y0)[c] as f64;
                let v10 = image.get(b.x + x1, b.y + y0)[c] as f64;
                let v01 = image.get(b.x + x0, b.y + y1)[c] as f64;
                let v11 = image.get(b.x + x1, b.y + y1)[c] as f64;
                let top = v00 * (1.0 - fx) + v10 * fx;
                let bot = v01 * (1.0 - fx) + v11 * fx;
                px[c] = (top * (1.0 - fy) + bot * fy) as f32;
            }
            out.set(i, j, px);
        }
    }
    out
}

/// Validity-aware bilinear lookup into a patch-feature grid at fractional
/// grid coordinates. Weights of unassigned neighbours are dropped and the
/// rest renormalized; returns None when the assigned weight is too small.
fn sample_patch_grid(grid: &FeatureMap, gx: f64, gy: f64, out: &mut [f64]) -> bool {
    let gx = gx.clamp(0.0, (grid.width - 1) as f64);
    let gy = gy.clamp(0.0, (grid.height - 1) as f64);
    let (x0, y0) = (gx.floor() as usize, gy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(grid.width - 1), (y0 + 1).min(grid.height - 1));
    let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x1, y0, fx * (1.0 - fy)),
        (x0, y1, (1.0 - fx) * fy),
        (x1, y1, fx * fy),
    ];
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut wsum = 0.0;
    for (x, y, w) in corners {
        if w == 0.0 || !grid.is_assigned(x, y) {
            continue;
        }
        wsum += w;
        for (o, &v) in out.iter_mut().zip(grid.pixel(x, y)) {
            *o += w * v as f64;
        }
    }
    if wsum < 0.3 {
        return false;
    }
    out.iter_mut().for_each(|v| *v /= wsum);
    true
}

/// Builds the part-level reference map: each box is cropped, square-resized,
/// run through the oracle's patch-feature head, bilinearly remapped to the
/// box size, and pasted. Pixels covered by several boxes get the average of
/// their contributions; untouched pixels stay unassigned. Boxes thinner than
/// 2 px are skipped (count returned).
pub fn build_part_feature_map(
    boxes: &[PixelBox],
    image: &ColorImage,
    oracle: &dyn EmbeddingOracle,
    camera: usize,
    step: usize,
) -> Result<(FeatureMap, usize)> {
    let channels = oracle.channels();
    let mut sum = vec![0.0f64; image.width * image.height * channels];
    let mut hits = vec![0u32; image.width * image.height];
    let mut skipped = 0usize;

    for b in boxes {
        if b.w < 2 || b.h < 2 {
            skipped += 1;
            continue;
        }
        b.validate(image.width, image.height)?;
        let patch_pixels = crop_resize_patch(image, b, PATCH_SIZE);
        let patch = Patch {
            pixels: patch_pixels,
            source: Some(oracle::PatchSource {
                region: *b,
                camera,
                step,
            }),
        };
        let grid = oracle.patch_features(&patch)?;
        if grid.channels != channels {
            return Err(Error::precondition("oracle channel count changed"));
        }
        let mut value = vec![0.0f64; channels];
        for j in 0..b.h {
            for i in 0..b.w {
                // box pixel center -> patch-grid coordinates
                let gx = (i as f64 + 0.5) * grid.width as f64 / b.w as f64 - 0.5;
                let gy = (j as f64 + 0.5) * grid.height as f64 / b.h as f64 - 0.5;
                if !sample_patch_grid(&grid, gx, gy, &mut value) {
                    continue;
                }
                let pi = (b.y + j) * image.width + (b.x + i);
                hits[pi] += 1;
                for (c, &v) in value.iter().enumerate() {
                    sum[pi * channels + c] += v;
                }
            }
        }
    }

    let mut out = FeatureMap::unassigned(image.width, image.height, channels);
    for pi in 0..hits.len() {
        if hits[pi] == 0 {
            continue;
        }
        out.assigned[pi] = true;
        for c in 0..channels {
            out.data[pi * channels + c] = (sum[pi * channels + c] / hits[pi] as f64) as f32;
        }
    }
    Ok((out, skipped))
}

// ---------------------------------------------------------------------------
// FeatureMap on-disk format: JSON header + float32 planes + validity bitmap
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FeatureMapHeader {
    format: String,
    version: u32,
    width: usize,
    height: usize,
    channels: usize,
}

pub fn save_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = FeatureMapHeader {
        format: "featmap".into(),
        version: 1,
        width: map.width,
        height: map.height,
        channels: map.channels,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    // plane-major float32
    for c in 0..map.channels {
        for p in 0..map.width * map.height {
            w.write_all(&map.data[p * map.channels + c].to_le_bytes())?;
        }
    }
    // packed validity bits, row-major
    let mut byte = 0u8;
    for (i, &a) in map.assigned.iter().enumerate() {
        if a {
            byte |= 1 << (i % 8);
        }
        if i % 8 == 7 {
            w.write_all(&[byte])?;
            byte = 0;
        }
    }
    if map.assigned.len() % 8 != 0 {
        w.write_all(&[byte])?;
    }
    Ok(())
}

pub fn load_feature_map(path: &Path) -> Result<FeatureMap> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header_line = Vec::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        if b[0] == b'\n' {
            break;
        }
        header_line.push(b[0]);
    }
    let header: FeatureMapHeader = serde_json::from_slice(&header_line)?;
    if header.format != "featmap" {
        return Err(Error::format("not a featmap file"));
    }
    let n = header.width * header.height;
    let mut raw = vec![0u8; n * header.channels * 4];
    r.read_exact(&mut raw)?;
    let mut map = FeatureMap::unassigned(header.width, header.height, header.channels);
    let mut it = raw.chunks_exact(4);
    for c in 0..header.channels {
        for p in 0..n {
            let bytes = it.next().unwrap();
            map.data[p * header.channels + c] =
                f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        }
    }
    let mut bits = vec![0u8; n.div_ceil(8)];
    r.read_exact(&mut bits)?;
    for i in 0..n {
        map.assigned[i] = bits[i / 8] & (1 << (i % 8)) != 0;
    }
    Ok(map)
}
