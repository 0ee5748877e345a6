//! Binary PGM images and the on-disk dataset layout:
//! `scene_%05d.pgm`, `scene_%05d_mask_%02d.pgm`, `scene_%05d.json`, `manifest.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, Image, Instance, Scene, ShapeKind};
use crate::error::{Error, Result};
use crate::field::Field2D;
use crate::geometry::{BinaryMask, OrientedBox};

/// 8-bit binary (P5) PGM. Values are clamped to `[0, 1]` and rounded.
pub fn encode_pgm(width: usize, height: usize, values: &[f64]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Parses a binary PGM with maxval at most 255 into values in `[0, 1]`.
pub fn decode_pgm(bytes: &[u8]) -> Result<Field2D> {
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::TruncatedFile("PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::Format("PGM header".into()))?);
    }
    if fields[0] != "P5" {
        return Err(Error::Format(format!("unsupported PGM magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s:?}")));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PGM maxval {maxval}")));
    }
    pos += 1;
    let end = pos + w * h;
    if end > bytes.len() {
        return Err(Error::TruncatedFile("PGM pixel data".into()));
    }
    let values = bytes[pos..end].iter().map(|&b| b as f64 / maxval as f64).collect();
    Field2D::new(h, w, values)
}

pub fn write_image(path: &Path, image: &Image) -> Result<()> {
    std::fs::write(path, encode_pgm(image.width, image.height, &image.values))?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Image> {
    decode_pgm(&std::fs::read(path)?)
}

pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let f = Field2D::from_mask(mask);
    std::fs::write(path, encode_pgm(f.width, f.height, &f.values))?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    Ok(read_image(path)?.threshold(0.5))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub obb: OrientedBox,
    pub class_id: u32,
    pub shape: ShapeKind,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub seed: u64,
    pub image: String,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub scenes: Vec<String>,
    pub seeds: Vec<u64>,
}

pub fn to_json_pretty<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// Writes every scene plus a manifest into `dir` (created if missing).
pub fn write_dataset(dir: &Path, spec: &DatasetSpec, scenes: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let image = format!("scene_{i:05}.pgm");
        write_image(&dir.join(&image), &scene.image)?;
        let mut instances = Vec::with_capacity(scene.instances.len());
        for (k, inst) in scene.instances.iter().enumerate() {
            let mask = format!("scene_{i:05}_mask_{k:02}.pgm");
            write_mask(&dir.join(&mask), &inst.gt_mask)?;
            instances.push(InstanceRecord {
                obb: inst.gt_obb,
                class_id: inst.class_id,
                shape: inst.shape,
                mask,
            });
        }
        let rec = SceneRecord {
            seed: scene.seed,
            image,
            instances,
        };
        let name = format!("scene_{i:05}.json");
        std::fs::write(dir.join(&name), to_json_pretty(&rec)?)?;
        names.push(name);
    }
    let manifest = Manifest {
        spec: spec.clone(),
        scenes: names,
        seeds: scenes.iter().map(|s| s.seed).collect(),
    };
    std::fs::write(dir.join("manifest.json"), to_json_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(Manifest, Vec<Scene>)> {
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for name in &manifest.scenes {
        let rec: SceneRecord = serde_json::from_str(&std::fs::read_to_string(dir.join(name))?)?;
        let image = read_image(&dir.join(&rec.image))?;
        let mut instances = Vec::with_capacity(rec.instances.len());
        for r in rec.instances {
            let gt_mask = read_mask(&dir.join(&r.mask))?;
            if (gt_mask.height(), gt_mask.width()) != (image.height, image.width) {
                return Err(Error::DimMismatch(format!("mask {} vs image {}", r.mask, rec.image)));
            }
            instances.push(Instance {
                gt_mask,
                gt_obb: r.obb,
                class_id: r.class_id,
                shape: r.shape,
            });
        }
        scenes.push(Scene {
            image,
            instances,
            seed: rec.seed,
        });
    }
    Ok((manifest, scenes))
}
