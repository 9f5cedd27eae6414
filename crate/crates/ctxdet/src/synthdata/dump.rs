//! Scene export: PNG images plus a JSON-lines annotation file.

use super::{Benchmark, Domain, Scene};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
pub struct DumpObject {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// One line of `annotations.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
pub struct DumpRecord {
    pub scene_id: usize,
    pub domain: Domain,
    pub objects: Vec<DumpObject>,
}

fn to_rgb8(scene: &Scene) -> Vec<u8> {
    scene
        .image
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Writes `scene_NNNN.png` files and `annotations.jsonl` under `dir`.
/// Output bytes are a pure function of the scenes.
pub fn dump_scenes(dir: &Path, scenes: &[Scene], _bench: &Benchmark) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let ann_path = dir.join("annotations.jsonl");
    let mut ann = fs::File::create(&ann_path)
        .map_err(|e| Error::io(ann_path.display().to_string(), e))?;
    for (i, scene) in scenes.iter().enumerate() {
        let size = scene.image.shape()[0] as u32;
        let png_path = dir.join(format!("scene_{i:04}.png"));
        let img = image::RgbImage::from_raw(size, size, to_rgb8(scene))
            .ok_or_else(|| Error::Serde("image buffer size mismatch".into()))?;
        img.save_with_format(&png_path, image::ImageFormat::Png)
            .map_err(|e| Error::Serde(format!("png encode: {e}")))?;

        let record = DumpRecord {
            scene_id: i,
            domain: scene.domain,
            objects: scene
                .annotations
                .iter()
                .map(|a| DumpObject {
                    class: a.class_id,
                    cx: a.bbox.cx,
                    cy: a.bbox.cy,
                    w: a.bbox.w,
                    h: a.bbox.h,
                })
                .collect(),
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Serde(e.to_string()))?;
        writeln!(ann, "{line}").map_err(|e| Error::io(ann_path.display().to_string(), e))?;
    }
    Ok(())
}
