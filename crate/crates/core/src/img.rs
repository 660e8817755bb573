//! Dense raster buffers shared across the pipeline, plus PFM/PNG I/O.
//!
//! Pixel sample positions are at integer coordinates: image pixel `(i, j)`
//! is sampled at continuous position `(u, v) = (i as f64, j as f64)`.
//! Back-projection, rasterization, and the synthetic ray tracer all share
//! this convention.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major H×W grid of `T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Plane<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "plane data size mismatch");
        Plane {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[self.idx(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        let i = self.idx(x, y);
        self.data[i] = value;
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub type DepthMap = Plane<f32>;
pub type ColorImage = Plane<[f32; 3]>;
pub type IdMap = Plane<u16>;
pub type Mask = Plane<bool>;
/// Full-precision targets used by the fitting loss.
pub type DepthBuffer = Plane<f64>;
pub type ColorBuffer = Plane<[f64; 3]>;

/// Treats NaN and non-positive values as "no measurement".
#[inline]
pub fn depth_valid(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

impl DepthMap {
    pub fn to_f64(&self) -> DepthBuffer {
        DepthBuffer::from_vec(self.width, self.height, self.data.iter().map(|&v| v as f64).collect())
    }
}

impl ColorImage {
    pub fn to_f64(&self) -> ColorBuffer {
        ColorBuffer::from_vec(
            self.width,
            self.height,
            self.data
                .iter()
                .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
                .collect(),
        )
    }
}

impl DepthBuffer {
    pub fn to_f32(&self) -> DepthMap {
        DepthMap::from_vec(self.width, self.height, self.data.iter().map(|&v| v as f32).collect())
    }
}

impl ColorBuffer {
    pub fn to_f32(&self) -> ColorImage {
        ColorImage::from_vec(
            self.width,
            self.height,
            self.data
                .iter()
                .map(|c| [c[0] as f32, c[1] as f32, c[2] as f32])
                .collect(),
        )
    }
}

impl Mask {
    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Morphological dilation with a square structuring element of the
    /// given radius (in pixels).
    pub fn dilate(&self, radius: usize) -> Mask {
        let mut out = Mask::filled(self.width, self.height, false);
        let r = radius as isize;
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                if !self.get(x as usize, y as usize) {
                    continue;
                }
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx >= 0 && ny >= 0 && nx < self.width as isize && ny < self.height as isize {
                            out.set(nx as usize, ny as usize, true);
                        }
                    }
                }
            }
        }
        out
    }

    /// Erosion by the given radius; pixels closer than `radius` to an unset
    /// pixel (or the image border) are cleared.
    pub fn erode(&self, radius: usize) -> Mask {
        let mut out = Mask::filled(self.width, self.height, false);
        let r = radius as isize;
        for y in 0..self.height as isize {
            'pix: for x in 0..self.width as isize {
                if !self.get(x as usize, y as usize) {
                    continue;
                }
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x + dx, y + dy);
                        if nx < 0 || ny < 0 || nx >= self.width as isize || ny >= self.height as isize {
                            continue 'pix;
                        }
                        if !self.get(nx as usize, ny as usize) {
                            continue 'pix;
                        }
                    }
                }
                out.set(x as usize, y as usize, true);
            }
        }
        out
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!((self.width, self.height), (other.width, other.height));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| *a || *b)
            .collect();
        Mask::from_vec(self.width, self.height, data)
    }
}

/// Bilinear sample of a scalar map; returns None if any of the four
/// neighbours is invalid (per `depth_valid`) or out of bounds.
pub fn sample_depth_bilinear(depth: &DepthMap, u: f64, v: f64) -> Option<f64> {
    let x0 = u.floor();
    let y0 = v.floor();
    let (ix, iy) = (x0 as isize, y0 as isize);
    if ix < 0 || iy < 0 || ix + 1 >= depth.width as isize || iy + 1 >= depth.height as isize {
        return None;
    }
    let (fx, fy) = (u - x0, v - y0);
    let (x, y) = (ix as usize, iy as usize);
    let d00 = depth.get(x, y);
    let d10 = depth.get(x + 1, y);
    let d01 = depth.get(x, y + 1);
    let d11 = depth.get(x + 1, y + 1);
    if ![d00, d10, d01, d11].iter().all(|&d| depth_valid(d as f64)) {
        return None;
    }
    let top = d00 as f64 * (1.0 - fx) + d10 as f64 * fx;
    let bot = d01 as f64 * (1.0 - fx) + d11 as f64 * fx;
    Some(top * (1.0 - fy) + bot * fy)
}

// ---------------------------------------------------------------------------
// PFM I/O (lossless float maps: depth, feature planes, normals)
// ---------------------------------------------------------------------------

/// Writes a single-channel PFM ("Pf", little-endian, bottom-up rows).
pub fn write_pfm_scalar(path: &Path, plane: &Plane<f32>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "Pf\n{} {}\n-1.0\n", plane.width, plane.height)?;
    for y in (0..plane.height).rev() {
        for x in 0..plane.width {
            f.write_all(&plane.get(x, y).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Writes a three-channel PFM ("PF").
pub fn write_pfm_rgb(path: &Path, plane: &Plane<[f32; 3]>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "PF\n{} {}\n-1.0\n", plane.width, plane.height)?;
    for y in (0..plane.height).rev() {
        for x in 0..plane.width {
            for c in plane.get(x, y) {
                f.write_all(&c.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_pfm_token(reader: &mut impl Read) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        reader.read_exact(&mut byte)?;
        if byte[0].is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            break;
        }
        tok.push(byte[0]);
    }
    String::from_utf8(tok).map_err(|_| Error::format("non-utf8 PFM header"))
}

/// Reads a PFM file; returns (width, height, channels, row-major top-down data).
pub fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let magic = read_pfm_token(&mut f)?;
    let channels = match magic.as_str() {
        "Pf" => 1,
        "PF" => 3,
        other => return Err(Error::format(format!("bad PFM magic {other:?}"))),
    };
    let width: usize = read_pfm_token(&mut f)?
        .parse()
        .map_err(|_| Error::format("bad PFM width"))?;
    let height: usize = read_pfm_token(&mut f)?
        .parse()
        .map_err(|_| Error::format("bad PFM height"))?;
    let scale: f64 = read_pfm_token(&mut f)?
        .parse()
        .map_err(|_| Error::format("bad PFM scale"))?;
    let little_endian = scale < 0.0;
    let mut raw = vec![0u8; width * height * channels * 4];
    f.read_exact(&mut raw)?;
    let mut bottom_up = Vec::with_capacity(width * height * channels);
    for chunk in raw.chunks_exact(4) {
        let bytes = [chunk[0], chunk[1], chunk[2], chunk[3]];
        bottom_up.push(if little_endian {
            f32::from_le_bytes(bytes)
        } else {
            f32::from_be_bytes(bytes)
        });
    }
    // flip to top-down row order
    let mut data = vec![0.0f32; bottom_up.len()];
    let row = width * channels;
    for y in 0..height {
        let src = (height - 1 - y) * row;
        data[y * row..(y + 1) * row].copy_from_slice(&bottom_up[src..src + row]);
    }
    Ok((width, height, channels, data))
}

pub fn read_pfm_scalar(path: &Path) -> Result<Plane<f32>> {
    let (w, h, c, data) = read_pfm(path)?;
    if c != 1 {
        return Err(Error::format("expected single-channel PFM"));
    }
    Ok(Plane::from_vec(w, h, data))
}

// ---------------------------------------------------------------------------
// PNG I/O (8-bit color, 16-bit id maps)
// ---------------------------------------------------------------------------

pub fn write_png_color(path: &Path, plane: &ColorImage) -> Result<()> {
    let mut img = image::RgbImage::new(plane.width as u32, plane.height as u32);
    for y in 0..plane.height {
        for x in 0..plane.width {
            let c = plane.get(x, y);
            let to8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([to8(c[0]), to8(c[1]), to8(c[2])]));
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn read_png_color(path: &Path) -> Result<ColorImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut plane = ColorImage::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            plane.set(x, y, [
                p[0] as f32 / 255.0,
                p[1] as f32 / 255.0,
                p[2] as f32 / 255.0,
            ]);
        }
    }
    Ok(plane)
}

/// Id maps use 16-bit grayscale PNG; 0 is background.
pub fn write_png_ids(path: &Path, plane: &IdMap) -> Result<()> {
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        plane.width as u32,
        plane.height as u32,
    );
    for y in 0..plane.height {
        for x in 0..plane.width {
            img.put_pixel(x as u32, y as u32, image::Luma([plane.get(x, y)]));
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn read_png_ids(path: &Path) -> Result<IdMap> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut plane = IdMap::filled(w, h, 0);
    for y in 0..h {
        for x in 0..w {
            plane.set(x, y, img.get_pixel(x as u32, y as u32)[0]);
        }
    }
    Ok(plane)
}

pub fn write_png_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut img = image::GrayImage::new(mask.width as u32, mask.height as u32);
    for y in 0..mask.height {
        for x in 0..mask.width {
            img.put_pixel(x as u32, y as u32, image::Luma([if mask.get(x, y) { 255 } else { 0 }]));
        }
    }
    img.save(path)?;
    Ok(())
}
