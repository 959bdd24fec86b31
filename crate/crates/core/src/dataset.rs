//! Procedural colored-shape detection data and on-disk dataset manifests.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{self, AnalysisError, ImageAnnotation, ObjectAnnotation, Sample};
use crate::image::{ImageError, ImageTensor};
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 4] = ["square", "circle", "triangle", "diamond"];

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("between 1 and 4 classes are supported, got {0}")]
    Classes(usize),
    #[error("invalid synthetic config: {0}")]
    Config(&'static str),
    #[error("image `{0}` listed in the manifest does not exist")]
    MissingImage(PathBuf),
    #[error("image `{0}` appears in more than one split")]
    OverlappingSplits(String),
    #[error("unknown split `{0}`")]
    UnknownSplit(String),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Annotation(#[from] AnalysisError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub count: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 500,
            classes: 3,
            height: 64,
            width: 64,
            seed: 0,
            min_objects: 1,
            max_objects: 3,
            min_size: 12,
            max_size: 28,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), DatasetError> {
        if self.classes == 0 || self.classes > SHAPE_NAMES.len() {
            return Err(DatasetError::Classes(self.classes));
        }
        if self.min_objects > self.max_objects || self.max_objects == 0 {
            return Err(DatasetError::Config("object count range"));
        }
        if self.min_size < 4 || self.min_size > self.max_size || self.max_size + 2 > self.height.min(self.width) {
            return Err(DatasetError::Config("object size range"));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        SHAPE_NAMES[..self.classes].iter().map(|s| s.to_string()).collect()
    }
}

/// Renders image `index`; each image has its own RNG stream, so any subset
/// can be regenerated independently.
pub fn render(cfg: &SyntheticConfig, index: usize) -> Result<Sample, DatasetError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (h, w) = (cfg.height, cfg.width);
    let mut px = background(&mut rng, h, w);
    let bg_mean = [0, 1, 2].map(|c| px[c * h * w..(c + 1) * h * w].iter().sum::<f64>() / (h * w) as f64);
    let target = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<ObjectAnnotation> = Vec::new();
    let mut tries = 0;
    while objects.len() < target && tries < 200 {
        tries += 1;
        let class = rng.gen_range(0..cfg.classes);
        let bw = rng.gen_range(cfg.min_size..=cfg.max_size);
        let bh = if class == 1 { bw } else { rng.gen_range(cfg.min_size..=cfg.max_size) };
        let x0 = rng.gen_range(0..=w - bw);
        let y0 = rng.gen_range(0..=h - bh);
        let bbox = [x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64];
        // One pixel of clearance between objects.
        let padded = [bbox[0] - 1.0, bbox[1] - 1.0, bbox[2] + 1.0, bbox[3] + 1.0];
        if objects.iter().any(|o| crate::metrics::iou(&o.bbox, &padded) > 0.0) {
            continue;
        }
        let color = contrasting_color(&mut rng, bg_mean);
        for yy in 0..bh {
            for xx in 0..bw {
                if inside(class, xx, yy, bw, bh) {
                    let shade = 1.0 + rng.gen_range(-0.04..0.04);
                    for (c, &base) in color.iter().enumerate() {
                        px[(c * h + y0 + yy) * w + x0 + xx] = (base * shade).clamp(0.0, 1.0);
                    }
                }
            }
        }
        objects.push(ObjectAnnotation { class, bbox });
    }
    // Quantize to 8 bits so in-memory samples equal their PNG files.
    let image = ImageTensor::new(Tensor::from_vec([1, 3, h, w], px))?;
    let image = ImageTensor::from_rgb8(h, w, &image.to_rgb8())?;
    Ok(Sample {
        image,
        annotation: ImageAnnotation {
            image: format!("img_{index:05}.png"),
            objects,
        },
    })
}

pub fn generate(cfg: &SyntheticConfig) -> Result<Vec<Sample>, DatasetError> {
    (0..cfg.count).map(|i| render(cfg, i)).collect()
}

/// Smooth colour gradient plus oriented stripes and fine grain.
fn background(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let base: [f64; 3] = [rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75), rng.gen_range(0.25..0.75)];
    let grad: [f64; 2] = [rng.gen_range(-0.15..0.15), rng.gen_range(-0.15..0.15)];
    let theta = rng.gen_range(0.0..std::f64::consts::PI);
    let freq = rng.gen_range(0.25..0.7);
    let amp = rng.gen_range(0.04..0.12);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut px = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f64 / w as f64 - 0.5, y as f64 / h as f64 - 0.5);
            let stripe = amp * ((x as f64 * ct + y as f64 * st) * freq + phase).sin();
            let grain = rng.gen_range(-0.04..0.04);
            for c in 0..3 {
                let val = base[c] + grad[0] * u + grad[1] * v + stripe * (1.0 - 0.3 * c as f64) + grain;
                px[(c * h + y) * w + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    px
}

fn contrasting_color(rng: &mut ChaCha8Rng, bg: [f64; 3]) -> [f64; 3] {
    loop {
        let c: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
        let d = c.iter().zip(&bg).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if d > 0.45 {
            return c;
        }
    }
}

/// Pixel-centre rasterization of each shape inside a `bw x bh` box; every
/// shape touches all four sides of its box.
fn inside(class: usize, x: usize, y: usize, bw: usize, bh: usize) -> bool {
    let u = (x as f64 + 0.5) / bw as f64;
    let v = (y as f64 + 0.5) / bh as f64;
    let edge = |t: f64, n: usize| t < 1.0 / n as f64 || t > 1.0 - 1.0 / n as f64;
    match class {
        0 => true,
        1 => {
            let (dx, dy) = (u - 0.5, v - 0.5);
            dx * dx + dy * dy <= 0.25 || (y == bh / 2 && edge(u, bw)) || (x == bw / 2 && edge(v, bh))
        }
        2 => (u - 0.5).abs() <= 0.5 * v || y == bh - 1 || (y == 0 && x == bw / 2),
        _ => (u - 0.5).abs() + (v - 0.5).abs() <= 0.5 || (y == bh / 2 && edge(u, bw)) || (x == bw / 2 && edge(v, bh)),
    }
}

/// `manifest.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    /// Split name to annotation file (JSON lines), relative to the manifest.
    pub splits: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes images and `train.jsonl` / `val.jsonl`, with the last `val_count`
/// samples forming the validation split.
pub fn write_dataset(
    dir: &Path,
    samples: &[Sample],
    classes: Vec<String>,
    val_count: usize,
    seed: Option<u64>,
    config_hash: Option<String>,
) -> Result<DatasetManifest, DatasetError> {
    std::fs::create_dir_all(dir.join("images"))?;
    let split_at = samples.len().saturating_sub(val_count);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{}", s.annotation.image);
        s.image.save(&dir.join(&rel))?;
        let rec = ImageAnnotation {
            image: rel,
            objects: s.annotation.objects.clone(),
        };
        if i < split_at {
            train.push(rec);
        } else {
            val.push(rec);
        }
    }
    analysis::write_annotations(&dir.join("train.jsonl"), &train)?;
    analysis::write_annotations(&dir.join("val.jsonl"), &val)?;
    let manifest = DatasetManifest {
        classes,
        splits: vec![("train".into(), "train.jsonl".into()), ("val".into(), "val.jsonl".into())],
        seed,
        config_hash,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    Ok(m)
}

/// Annotation records of every split, checking that files exist and that
/// no image is shared between splits.
pub fn validate_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<(), DatasetError> {
    let mut seen = std::collections::HashSet::new();
    for (_, file) in &manifest.splits {
        for rec in analysis::read_annotations(&dir.join(file))? {
            let p = dir.join(&rec.image);
            if !p.exists() {
                return Err(DatasetError::MissingImage(p));
            }
            if !seen.insert(rec.image.clone()) {
                return Err(DatasetError::OverlappingSplits(rec.image));
            }
        }
    }
    Ok(())
}

pub fn load_split(dir: &Path, split: &str) -> Result<(Vec<Sample>, Vec<String>), DatasetError> {
    let manifest = read_manifest(dir)?;
    let file = manifest
        .splits
        .iter()
        .find(|(name, _)| name == split)
        .map(|(_, f)| f.clone())
        .ok_or_else(|| DatasetError::UnknownSplit(split.to_string()))?;
    let mut out = Vec::new();
    for rec in analysis::read_annotations(&dir.join(file))? {
        let p = dir.join(&rec.image);
        if !p.exists() {
            return Err(DatasetError::MissingImage(p));
        }
        let image = ImageTensor::load(&p)?;
        out.push(Sample { image, annotation: rec });
    }
    crate::analysis::GroundTruthSet::new(manifest.classes.clone(), out.iter().map(|s| s.annotation.clone()).collect())?;
    Ok((out, manifest.classes))
}
