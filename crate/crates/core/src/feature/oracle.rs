//! Embedding oracle: the pluggable stand-in for pretrained vision/text
//! backbones. The synthetic implementation derives features from
//! ground-truth id maps and a seeded embedding table; the precomputed
//! implementation ingests maps exported by external model runners.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::{DetectionSet, FeatureMap, PixelBox, PATCH_GRID};
use crate::img::{ColorImage, IdMap, Mask};

/// Identifies the frame an oracle query refers to.
pub struct FrameRef<'a> {
    pub color: &'a ColorImage,
    pub camera: usize,
    pub step: usize,
}

/// Where a 224×224 patch was cropped from.
#[derive(Debug, Clone, Copy)]
pub struct PatchSource {
    pub region: PixelBox,
    pub camera: usize,
    pub step: usize,
}

/// Square patch handed to the patch-feature head. `source` carries the crop
/// geometry; model-backed oracles only need `pixels`.
pub struct Patch {
    pub pixels: ColorImage,
    pub source: Option<PatchSource>,
}

/// Deterministic embedding backbone interface.
pub trait EmbeddingOracle: Send + Sync {
    /// Embedding dimensionality C shared by all outputs.
    fn channels(&self) -> usize;

    /// Coarse per-pixel features of the whole image.
    fn image_features(&self, frame: &FrameRef) -> Result<FeatureMap>;

    /// Class-agnostic boxes and object masks.
    fn detections(&self, frame: &FrameRef) -> Result<DetectionSet>;

    /// PATCH_GRID×PATCH_GRID×C features for one square patch.
    fn patch_features(&self, patch: &Patch) -> Result<FeatureMap>;

    /// Unit-norm embedding of a vocabulary word.
    fn text_embedding(&self, text: &str) -> Result<DVector<f64>>;
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Box-Muller standard normal draw.
pub fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Maps label strings to fixed random unit vectors, deterministic per seed.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTable {
    pub seed: u64,
    pub dim: usize,
}

impl EmbeddingTable {
    pub fn new(seed: u64, dim: usize) -> Self {
        EmbeddingTable { seed, dim }
    }

    pub fn embedding(&self, text: &str) -> DVector<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(text.as_bytes()));
        let mut v = DVector::from_fn(self.dim, |_, _| standard_normal(&mut rng));
        let n = v.norm();
        if n > 0.0 {
            v /= n;
        }
        v
    }
}

struct FrameGt {
    objid: IdMap,
    partid: IdMap,
}

/// Oracle backed by ground-truth id maps: per-pixel features are the label
/// embeddings plus seeded Gaussian noise; detections are exact masks/boxes.
pub struct SyntheticOracle {
    table: EmbeddingTable,
    /// object id (1-based) -> vocabulary word
    object_names: Vec<String>,
    /// global part id (1-based) -> vocabulary word
    part_names: Vec<String>,
    frames: HashMap<(usize, usize), FrameGt>,
    pub noise_sigma: f64,
}

impl SyntheticOracle {
    pub fn new(
        table: EmbeddingTable,
        object_names: Vec<String>,
        part_names: Vec<String>,
        noise_sigma: f64,
    ) -> Self {
        SyntheticOracle {
            table,
            object_names,
            part_names,
            frames: HashMap::new(),
            noise_sigma,
        }
    }

    pub fn insert_frame(&mut self, camera: usize, step: usize, objid: IdMap, partid: IdMap) {
        self.frames.insert((camera, step), FrameGt { objid, partid });
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    fn frame(&self, camera: usize, step: usize) -> Result<&FrameGt> {
        self.frames.get(&(camera, step)).ok_or_else(|| {
            Error::precondition(format!("oracle has no ground truth for cam {camera} step {step}"))
        })
    }

    fn object_word(&self, id: u16) -> Option<&str> {
        (id > 0)
            .then(|| self.object_names.get(id as usize - 1).map(|s| s.as_str()))
            .flatten()
    }

    fn part_word(&self, id: u16) -> Option<&str> {
        (id > 0)
            .then(|| self.part_names.get(id as usize - 1).map(|s| s.as_str()))
            .flatten()
    }
}

impl EmbeddingOracle for SyntheticOracle {
    fn channels(&self) -> usize {
        self.table.dim
    }

    fn image_features(&self, frame: &FrameRef) -> Result<FeatureMap> {
        let gt = self.frame(frame.camera, frame.step)?;
        let (w, h) = (gt.objid.width, gt.objid.height);
        let mut out = FeatureMap::unassigned(w, h, self.table.dim);
        let mut cache: HashMap<u16, Vec<f32>> = HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.table.seed ^ fnv1a(format!("imgfeat/{}/{}", frame.camera, frame.step).as_bytes()),
        );
        for y in 0..h {
            for x in 0..w {
                let id = gt.objid.get(x, y);
                let Some(word) = self.object_word(id) else {
                    continue;
                };
                let base = cache.entry(id).or_insert_with(|| {
                    self.table.embedding(word).iter().map(|&v| v as f32).collect()
                });
                let pi = (y * w + x) * self.table.dim;
                for (c, &b) in base.iter().enumerate() {
                    out.data[pi + c] = b + (self.noise_sigma * standard_normal(&mut rng)) as f32;
                }
                out.assigned[y * w + x] = true;
            }
        }
        Ok(out)
    }

    fn detections(&self, frame: &FrameRef) -> Result<DetectionSet> {
        let gt = self.frame(frame.camera, frame.step)?;
        let (w, h) = (gt.objid.width, gt.objid.height);
        let mut boxes = Vec::new();
        let mut masks = Vec::new();
        for id in 1..=self.object_names.len() as u16 {
            let mut mask = Mask::filled(w, h, false);
            let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0usize, 0usize);
            let mut any = false;
            for y in 0..h {
                for x in 0..w {
                    if gt.objid.get(x, y) == id {
                        mask.set(x, y, true);
                        any = true;
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x);
                        y1 = y1.max(y);
                    }
                }
            }
            if !any {
                continue;
            }
            // pad by one pixel, clamped; detector boxes are deliberately loose
            let x0 = x0.saturating_sub(1);
            let y0 = y0.saturating_sub(1);
            let x1 = (x1 + 1).min(w - 1);
            let y1 = (y1 + 1).min(h - 1);
            boxes.push(PixelBox {
                x: x0,
                y: y0,
                w: x1 - x0 + 1,
                h: y1 - y0 + 1,
            });
            masks.push(mask);
        }
        Ok(DetectionSet { boxes, masks })
    }

    fn patch_features(&self, patch: &Patch) -> Result<FeatureMap> {
        let source = patch.source.ok_or_else(|| {
            Error::precondition("synthetic oracle needs patch crop provenance")
        })?;
        let gt = self.frame(source.camera, source.step)?;
        let b = source.region;
        let mut out = FeatureMap::unassigned(PATCH_GRID, PATCH_GRID, self.table.dim);
        let mut cache: HashMap<u16, Vec<f32>> = HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.table.seed ^ fnv1a(
            format!("patch/{}/{}/{}/{}/{}/{}", source.camera, source.step, b.x, b.y, b.w, b.h)
                .as_bytes(),
        ));
        for j in 0..PATCH_GRID {
            for i in 0..PATCH_GRID {
                // grid cell center -> box pixel (nearest)
                let bx = (i as f64 + 0.5) * b.w as f64 / PATCH_GRID as f64 - 0.5;
                let by = (j as f64 + 0.5) * b.h as f64 / PATCH_GRID as f64 - 0.5;
                let px = b.x + bx.round().clamp(0.0, (b.w - 1) as f64) as usize;
                let py = b.y + by.round().clamp(0.0, (b.h - 1) as f64) as usize;
                if px >= gt.partid.width || py >= gt.partid.height {
                    continue;
                }
                let id = gt.partid.get(px, py);
                let Some(word) = self.part_word(id) else {
                    continue;
                };
                let base = cache.entry(id).or_insert_with(|| {
                    self.table.embedding(word).iter().map(|&v| v as f32).collect()
                });
                let pi = (j * PATCH_GRID + i) * self.table.dim;
                for (c, &v) in base.iter().enumerate() {
                    out.data[pi + c] = v + (self.noise_sigma * standard_normal(&mut rng)) as f32;
                }
                out.assigned[j * PATCH_GRID + i] = true;
            }
        }
        Ok(out)
    }

    fn text_embedding(&self, text: &str) -> Result<DVector<f64>> {
        Ok(self.table.embedding(text))
    }
}

/// Text-embedding-only oracle over an explicit vocabulary table; image-side
/// queries are rejected. Useful when a scene is already fitted and only
/// querying is needed.
pub struct TextTableOracle {
    dim: usize,
    entries: HashMap<String, DVector<f64>>,
}

impl TextTableOracle {
    pub fn new(dim: usize) -> Self {
        TextTableOracle {
            dim,
            entries: HashMap::new(),
        }
    }

    pub fn insert(&mut self, word: &str, embedding: DVector<f64>) {
        assert_eq!(embedding.len(), self.dim);
        self.entries.insert(word.to_string(), embedding);
    }
}

impl EmbeddingOracle for TextTableOracle {
    fn channels(&self) -> usize {
        self.dim
    }

    fn image_features(&self, _frame: &FrameRef) -> Result<FeatureMap> {
        Err(Error::precondition("text-only oracle has no image features"))
    }

    fn detections(&self, _frame: &FrameRef) -> Result<DetectionSet> {
        Err(Error::precondition("text-only oracle has no detections"))
    }

    fn patch_features(&self, _patch: &Patch) -> Result<FeatureMap> {
        Err(Error::precondition("text-only oracle has no patch features"))
    }

    fn text_embedding(&self, text: &str) -> Result<DVector<f64>> {
        self.entries
            .get(text)
            .cloned()
            .ok_or_else(|| Error::precondition(format!("no embedding for {text:?}")))
    }
}

// ---------------------------------------------------------------------------
// Precomputed oracle: ingests maps exported by external model runners
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DetectionFile {
    boxes: Vec<PixelBox>,
    mask_files: Vec<String>,
}

/// Directory layout:
///   text_embeddings.json                  word -> [f32; C]
///   cam{c}_step{s}.objfeat.featmap        image features
///   cam{c}_step{s}.detections.json        boxes + mask file names
///   cam{c}_step{s}.mask{k}.png            binary masks
///   cam{c}_step{s}.patch{k}.featmap       patch grid per detection box
pub struct PrecomputedOracle {
    dir: PathBuf,
    channels: usize,
    text: HashMap<String, Vec<f64>>,
}

impl PrecomputedOracle {
    pub fn open(dir: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(dir.join("text_embeddings.json"))?;
        let text: HashMap<String, Vec<f64>> = serde_json::from_str(&raw)?;
        let channels = text
            .values()
            .next()
            .map(|v| v.len())
            .ok_or_else(|| Error::format("empty text embedding table"))?;
        Ok(PrecomputedOracle {
            dir: dir.to_path_buf(),
            channels,
            text,
        })
    }

    fn stem(&self, camera: usize, step: usize) -> String {
        format!("cam{camera}_step{step}")
    }

    fn load_detection_file(&self, camera: usize, step: usize) -> Result<DetectionFile> {
        let raw = std::fs::read_to_string(
            self.dir.join(format!("{}.detections.json", self.stem(camera, step))),
        )?;
        Ok(serde_json::from_str(&raw)?)
    }
}

impl EmbeddingOracle for PrecomputedOracle {
    fn channels(&self) -> usize {
        self.channels
    }

    fn image_features(&self, frame: &FrameRef) -> Result<FeatureMap> {
        crate::feature::load_feature_map(
            &self.dir.join(format!("{}.objfeat.featmap", self.stem(frame.camera, frame.step))),
        )
    }

    fn detections(&self, frame: &FrameRef) -> Result<DetectionSet> {
        let file = self.load_detection_file(frame.camera, frame.step)?;
        let mut masks = Vec::new();
        for name in &file.mask_files {
            let img = image::open(self.dir.join(name)).map_err(crate::error::Error::from)?;
            let gray = img.to_luma8();
            let (w, h) = (gray.width() as usize, gray.height() as usize);
            let mut mask = Mask::filled(w, h, false);
            for y in 0..h {
                for x in 0..w {
                    mask.set(x, y, gray.get_pixel(x as u32, y as u32)[0] > 127);
                }
            }
            masks.push(mask);
        }
        Ok(DetectionSet {
            boxes: file.boxes,
            masks,
        })
    }

    fn patch_features(&self, patch: &Patch) -> Result<FeatureMap> {
        let source = patch
            .source
            .ok_or_else(|| Error::precondition("precomputed oracle needs patch provenance"))?;
        let file = self.load_detection_file(source.camera, source.step)?;
        let k = file
            .boxes
            .iter()
            .position(|b| *b == source.region)
            .ok_or_else(|| Error::precondition("patch box not in precomputed detections"))?;
        crate::feature::load_feature_map(
            &self.dir.join(format!("{}.patch{}.featmap", self.stem(source.camera, source.step), k)),
        )
    }

    fn text_embedding(&self, text: &str) -> Result<DVector<f64>> {
        let v = self
            .text
            .get(text)
            .ok_or_else(|| Error::precondition(format!("no precomputed embedding for {text:?}")))?;
        Ok(DVector::from_iterator(v.len(), v.iter().copied()))
    }
}

/// Dumps everything another oracle would answer for the given frames and
/// vocabulary into the precomputed-oracle directory layout.
pub fn export_oracle_dir(
    oracle: &dyn EmbeddingOracle,
    frames: &[(usize, usize, &ColorImage)],
    words: &[&str],
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut text = HashMap::new();
    for &w in words {
        let e = oracle.text_embedding(w)?;
        text.insert(w.to_string(), e.iter().copied().collect::<Vec<f64>>());
    }
    std::fs::write(dir.join("text_embeddings.json"), serde_json::to_string(&text)?)?;
    for &(camera, step, color) in frames {
        let stem = format!("cam{camera}_step{step}");
        let fref = FrameRef { color, camera, step };
        let feat = oracle.image_features(&fref)?;
        crate::feature::save_feature_map(&dir.join(format!("{stem}.objfeat.featmap")), &feat)?;
        let det = oracle.detections(&fref)?;
        let mut mask_files = Vec::new();
        for (k, mask) in det.masks.iter().enumerate() {
            let name = format!("{stem}.mask{k}.png");
            crate::img::write_png_mask(&dir.join(&name), mask)?;
            mask_files.push(name);
        }
        for (k, b) in det.boxes.iter().enumerate() {
            let pixels = crate::feature::crop_resize_patch(color, b, crate::feature::PATCH_SIZE);
            let patch = Patch {
                pixels,
                source: Some(PatchSource {
                    region: *b,
                    camera,
                    step,
                }),
            };
            let grid = oracle.patch_features(&patch)?;
            crate::feature::save_feature_map(&dir.join(format!("{stem}.patch{k}.featmap")), &grid)?;
        }
        let det_file = DetectionFile {
            boxes: det.boxes,
            mask_files,
        };
        std::fs::write(
            dir.join(format!("{stem}.detections.json")),
            serde_json::to_string(&det_file)?,
        )?;
    }
    Ok(())
}
