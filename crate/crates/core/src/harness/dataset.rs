//! Dataset manifests, image ingestion and dataset statistics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{BinaryMask, DatasetStats, Image};
use crate::oracle::synthetic::{generate_scene, Ellipse, Label, SceneConfig, SyntheticScene, CLASS_NAMES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub class_label: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_mask_path: Option<String>,
}

/// A JSON list of labelled images. Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Ingestion("manifest has no entries".into()));
        }
        for e in &self.entries {
            if e.class_label >= self.class_names.len() {
                return Err(Error::Ingestion(format!(
                    "{}: label {} has no class name",
                    e.image_path, e.class_label
                )));
            }
            let p = self.resolve(&e.image_path);
            if !p.is_file() {
                return Err(Error::Ingestion(format!("{}: file not found", p.display())));
            }
            if let Some(gt) = &e.ground_truth_mask_path {
                let p = self.resolve(gt);
                if !p.is_file() {
                    return Err(Error::Ingestion(format!("{}: file not found", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.base_dir.join(relative)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Reads an 8-bit grayscale or colour raster and normalizes it to `[0, 1]`.
/// Grayscale files give one channel, everything else three.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let channels = if img.color().has_color() { 3 } else { 1 };
    let raw: Vec<u8> = if channels == 3 {
        img.to_rgb8().into_raw()
    } else {
        img.to_luma8().into_raw()
    };
    Image::new(w, h, channels, raw.into_iter().map(|v| v as f32 / 255.0).collect())
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
}

/// Any pixel brighter than mid-gray counts as set.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    BinaryMask::from_bits(w, h, img.into_raw().into_iter().map(|v| v > 127).collect())
}

/// Writes a single-channel image as 8-bit grayscale.
pub fn save_gray(image: &Image, path: &Path) -> Result<()> {
    if image.channels() != 1 {
        return Err(Error::contract("save_gray needs a single-channel image"));
    }
    let raw: Vec<u8> = image.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(image.width() as u32, image.height() as u32, raw)
        .expect("buffer sized to image")
        .save(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
}

pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let raw: Vec<u8> = mask.bits().iter().map(|b| if *b { 255 } else { 0 }).collect();
    image::GrayImage::from_raw(mask.width() as u32, mask.height() as u32, raw)
        .expect("buffer sized to mask")
        .save(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
}

/// One manifest entry with its decoded pixels, or the reason decoding failed.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub class_label: usize,
    pub image: std::result::Result<Image, String>,
    pub ground_truth: Option<std::result::Result<BinaryMask, String>>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Loads every entry; unreadable files become per-sample errors.
    pub fn load(manifest: &DatasetManifest) -> Self {
        let samples = manifest
            .entries
            .iter()
            .map(|e| Sample {
                id: e.image_path.clone(),
                class_label: e.class_label,
                image: load_image(&manifest.resolve(&e.image_path)).map_err(|e| e.to_string()),
                ground_truth: e
                    .ground_truth_mask_path
                    .as_ref()
                    .map(|p| load_mask(&manifest.resolve(p)).map_err(|e| e.to_string())),
            })
            .collect();
        Self {
            class_names: manifest.class_names.clone(),
            samples,
        }
    }

    pub fn from_images(class_names: Vec<String>, images: Vec<(String, Image, usize)>) -> Self {
        Self {
            class_names,
            samples: images
                .into_iter()
                .map(|(id, image, class_label)| Sample {
                    id,
                    class_label,
                    image: Ok(image),
                    ground_truth: None,
                })
                .collect(),
        }
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }

    /// Statistics over every readable image; unreadable ones are skipped
    /// with a warning.
    pub fn lenient_stats(&self) -> Result<DatasetStats> {
        let images: Vec<&Image> = self
            .samples
            .iter()
            .filter_map(|s| match &s.image {
                Ok(img) => Some(img),
                Err(e) => {
                    log::warn!("excluding {} from dataset stats: {e}", s.id);
                    None
                }
            })
            .collect();
        dataset_stats(&images)
    }
}

/// Smallest std reported; a uniform dataset would otherwise give zero.
pub const STD_FLOOR: f64 = 1e-9;

/// Per-channel mean and population std over all pixels of all images.
pub fn dataset_stats(images: &[&Image]) -> Result<DatasetStats> {
    let Some(first) = images.first() else {
        return Err(Error::Ingestion("no readable images for dataset stats".into()));
    };
    let ch = first.channels();
    if images.iter().any(|i| i.channels() != ch) {
        return Err(Error::Ingestion("images disagree on channel count".into()));
    }
    let mut count = 0usize;
    let mut sums = vec![0.0f64; ch];
    for img in images {
        for px in img.data().chunks_exact(ch) {
            for (s, v) in sums.iter_mut().zip(px) {
                *s += *v as f64;
            }
        }
        count += img.pixel_count();
    }
    let mean: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
    let mut sq = vec![0.0f64; ch];
    for img in images {
        for px in img.data().chunks_exact(ch) {
            for c in 0..ch {
                sq[c] += (px[c] as f64 - mean[c]).powi(2);
            }
        }
    }
    let std = sq
        .iter()
        .map(|s| (s / count as f64).sqrt().max(STD_FLOOR))
        .collect();
    DatasetStats::new(mean, std)
}

/// Strict statistics over a manifest: any unreadable image is an error
/// naming the file.
pub fn compute_dataset_stats(manifest: &DatasetManifest) -> Result<DatasetStats> {
    if manifest.entries.is_empty() {
        return Err(Error::Ingestion("manifest has no entries".into()));
    }
    let images = manifest
        .entries
        .iter()
        .map(|e| load_image(&manifest.resolve(&e.image_path)))
        .collect::<Result<Vec<_>>>()?;
    dataset_stats(&images.iter().collect::<Vec<_>>())
}

/// One generated scene as listed in `scenes.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub image_path: String,
    pub seed: u64,
    pub label: Label,
    pub ellipse: Ellipse,
}

/// Writes `n` synthetic scenes with ground-truth masks, a manifest and a
/// scene list into `dir`. Scene `i` uses seed `seed + i`.
pub fn write_synthetic_dataset(
    dir: &Path,
    n: usize,
    seed: u64,
    size: usize,
    config: &SceneConfig,
) -> Result<(DatasetManifest, Vec<SyntheticScene>)> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(n);
    let mut scenes = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let scene = generate_scene(seed.wrapping_add(i as u64), size, size, config)?;
        let image_path = format!("scene_{i:04}.png");
        let gt_path = format!("scene_{i:04}_gt.png");
        save_gray(&scene.image, &dir.join(&image_path))?;
        save_mask(&scene.ground_truth(), &dir.join(&gt_path))?;
        entries.push(ManifestEntry {
            image_path: image_path.clone(),
            class_label: scene.label.class_index(),
            ground_truth_mask_path: Some(gt_path),
        });
        records.push(SceneRecord {
            image_path,
            seed: scene.seed,
            label: scene.label,
            ellipse: scene.ellipse,
        });
        scenes.push(scene);
    }
    let manifest = DatasetManifest {
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        entries,
        base_dir: dir.to_path_buf(),
    };
    manifest.save(&dir.join("manifest.json"))?;
    std::fs::write(dir.join("scenes.json"), serde_json::to_string_pretty(&records)? + "\n")?;
    Ok((manifest, scenes))
}
