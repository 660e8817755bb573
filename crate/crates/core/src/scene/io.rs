//! `.gsplat` scene file: a single JSON header line followed by raw
//! little-endian float32 attribute arrays.
//!
//! Blob order after the header:
//!   centers ×3, quaternions ×4 (w,x,y,z), scales ×3, opacity ×1,
//!   color ×3, latent ×16, then decoder weights
//!   (trunk_w row-major, trunk_b, obj_w, obj_b, part_w, part_b),
//!   then optional u16 label arrays (object ids, part ids).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::decoder::{Activation, DecoderWeights, HIDDEN_DIM};
use crate::scene::{GaussianPrimitive, PrimitiveLabel, Scene};
use crate::LATENT_DIM;

pub const GSPLAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DecoderShape {
    latent_dim: usize,
    hidden_dim: usize,
    embed_dim: usize,
    activation: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    primitive_count: usize,
    decoder: DecoderShape,
    has_labels: bool,
}

fn write_f32s(w: &mut impl Write, values: impl Iterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

fn read_f32s(r: &mut impl Read, count: usize) -> Result<Vec<f32>> {
    let mut raw = vec![0u8; count * 4];
    r.read_exact(&mut raw)?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_scene(path: &Path, scene: &Scene) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        format: "gsplat".into(),
        version: GSPLAT_VERSION,
        primitive_count: scene.primitives.len(),
        decoder: DecoderShape {
            latent_dim: LATENT_DIM,
            hidden_dim: HIDDEN_DIM,
            embed_dim: scene.decoder.embed_dim(),
            activation: scene.decoder.activation.name().into(),
        },
        has_labels: scene.labels.is_some(),
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;

    let prims = &scene.primitives;
    write_f32s(&mut w, prims.iter().flat_map(|p| p.center.iter().copied().collect::<Vec<_>>()))?;
    write_f32s(
        &mut w,
        prims.iter().flat_map(|p| {
            let q = p.rotation.quaternion();
            vec![q.w, q.i, q.j, q.k]
        }),
    )?;
    write_f32s(&mut w, prims.iter().flat_map(|p| p.scale.iter().copied().collect::<Vec<_>>()))?;
    write_f32s(&mut w, prims.iter().map(|p| p.opacity))?;
    write_f32s(&mut w, prims.iter().flat_map(|p| p.color.iter().copied().collect::<Vec<_>>()))?;
    write_f32s(&mut w, prims.iter().flat_map(|p| p.feature_latent.to_vec()))?;

    let d = &scene.decoder;
    for (m, b) in [
        (&d.trunk_w, &d.trunk_b),
        (&d.obj_w, &d.obj_b),
        (&d.part_w, &d.part_b),
    ] {
        // row-major
        write_f32s(
            &mut w,
            (0..m.nrows()).flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)])),
        )?;
        write_f32s(&mut w, b.iter().copied())?;
    }

    if let Some(labels) = &scene.labels {
        for l in labels {
            w.write_all(&l.object.to_le_bytes())?;
        }
        for l in labels {
            w.write_all(&l.part.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut header_line = Vec::new();
    loop {
        let mut b = [0u8; 1];
        r.read_exact(&mut b)?;
        if b[0] == b'\n' {
            break;
        }
        header_line.push(b[0]);
        if header_line.len() > 1 << 16 {
            return Err(Error::format("unterminated gsplat header"));
        }
    }
    let header: Header = serde_json::from_slice(&header_line)?;
    if header.format != "gsplat" || header.version != GSPLAT_VERSION {
        return Err(Error::format("unsupported gsplat format/version"));
    }
    if header.decoder.latent_dim != LATENT_DIM || header.decoder.hidden_dim != HIDDEN_DIM {
        return Err(Error::format("unsupported decoder shape"));
    }
    let n = header.primitive_count;

    let centers = read_f32s(&mut r, n * 3)?;
    let quats = read_f32s(&mut r, n * 4)?;
    let scales = read_f32s(&mut r, n * 3)?;
    let opacity = read_f32s(&mut r, n)?;
    let color = read_f32s(&mut r, n * 3)?;
    let latent = read_f32s(&mut r, n * LATENT_DIM)?;

    let mut primitives = Vec::with_capacity(n);
    for i in 0..n {
        let q = Quaternion::new(
            quats[i * 4] as f64,
            quats[i * 4 + 1] as f64,
            quats[i * 4 + 2] as f64,
            quats[i * 4 + 3] as f64,
        );
        let mut feature_latent = [0.0; LATENT_DIM];
        for (k, f) in feature_latent.iter_mut().enumerate() {
            *f = latent[i * LATENT_DIM + k] as f64;
        }
        primitives.push(GaussianPrimitive {
            center: Vector3::new(
                centers[i * 3] as f64,
                centers[i * 3 + 1] as f64,
                centers[i * 3 + 2] as f64,
            ),
            rotation: UnitQuaternion::new_normalize(q),
            scale: Vector3::new(
                scales[i * 3] as f64,
                scales[i * 3 + 1] as f64,
                scales[i * 3 + 2] as f64,
            ),
            opacity: opacity[i] as f64,
            color: Vector3::new(
                color[i * 3] as f64,
                color[i * 3 + 1] as f64,
                color[i * 3 + 2] as f64,
            ),
            feature_latent,
        });
    }

    let embed = header.decoder.embed_dim;
    let activation = Activation::from_name(&header.decoder.activation)
        .ok_or_else(|| Error::format("unknown decoder activation"))?;
    let mut read_matrix = |rows: usize, cols: usize| -> Result<(DMatrix<f64>, DVector<f64>)> {
        let wv = read_f32s(&mut r, rows * cols)?;
        let bv = read_f32s(&mut r, rows)?;
        let m = DMatrix::from_fn(rows, cols, |rr, cc| wv[rr * cols + cc] as f64);
        let b = DVector::from_iterator(rows, bv.iter().map(|&v| v as f64));
        Ok((m, b))
    };
    let (trunk_w, trunk_b) = read_matrix(HIDDEN_DIM, LATENT_DIM)?;
    let (obj_w, obj_b) = read_matrix(embed, HIDDEN_DIM)?;
    let (part_w, part_b) = read_matrix(embed, HIDDEN_DIM)?;
    let decoder = DecoderWeights {
        trunk_w,
        trunk_b,
        obj_w,
        obj_b,
        part_w,
        part_b,
        activation,
    };

    let labels = if header.has_labels {
        let mut raw = vec![0u8; n * 2];
        r.read_exact(&mut raw)?;
        let objects: Vec<u16> = raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        let mut raw = vec![0u8; n * 2];
        r.read_exact(&mut raw)?;
        let parts: Vec<u16> = raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Some(
            objects
                .into_iter()
                .zip(parts)
                .map(|(object, part)| PrimitiveLabel { object, part })
                .collect(),
        )
    } else {
        None
    };

    let mut scene = Scene::new(primitives, decoder);
    scene.labels = labels;
    Ok(scene)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scene_roundtrip_preserves_attributes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let prims: Vec<_> = (0..17)
            .map(|_| {
                let mut p = GaussianPrimitive::new(
                    Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                    Vector3::new(0.01 + rng.gen::<f64>() * 0.1, 0.05, 0.02),
                    rng.gen(),
                    Vector3::new(rng.gen(), rng.gen(), rng.gen()),
                );
                p.rotation = UnitQuaternion::from_euler_angles(rng.gen(), rng.gen(), rng.gen());
                for f in p.feature_latent.iter_mut() {
                    *f = rng.gen::<f64>() - 0.5;
                }
                p
            })
            .collect();
        let mut scene = Scene::new(prims, DecoderWeights::seeded_with_dim(9, 32));
        scene.labels = Some(
            (0..17u16)
                .map(|i| PrimitiveLabel {
                    object: i % 3,
                    part: i % 5,
                })
                .collect(),
        );

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.gsplat");
        save_scene(&path, &scene).unwrap();
        let back = load_scene(&path).unwrap();

        assert_eq!(back.primitives.len(), scene.primitives.len());
        assert_eq!(back.labels, scene.labels);
        for (a, b) in scene.primitives.iter().zip(&back.primitives) {
            assert!((a.center - b.center).norm() < 1e-6);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-6);
            assert!((a.scale - b.scale).norm() < 1e-7);
            assert!((a.opacity - b.opacity).abs() < 1e-7);
            for k in 0..LATENT_DIM {
                assert!((a.feature_latent[k] - b.feature_latent[k]).abs() < 1e-6);
            }
        }
        assert!((&scene.decoder.obj_w - &back.decoder.obj_w).norm() < 1e-4);
        assert_eq!(scene.decoder.activation, back.decoder.activation);
    }
}
