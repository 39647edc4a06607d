//! On-disk layout of a run.
//!
//! ```text
//! <run>/run.json
//! <run>/reports.csv
//! <run>/images/0000/{concepts,shapley,explanation,units,report}.json
//! <run>/images/0000/{insertion,deletion}.csv
//! ```
//!
//! Image directories follow manifest order. Files of a stage that did not
//! run or failed are absent.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{ImageResult, ImageRun, LceArtifacts, MethodRun, ReportRow, RunConfig};
use crate::concepts::ConceptSetDocument;
use crate::error::{Error, Result};
use crate::faithfulness::FaithfulnessReport;
use crate::mask::{BinaryMask, DatasetStats};
use crate::rle;
use crate::shapley::{Explanation, ShapleyResult};

/// Ranked units of one image, most important first, as run-length masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitsFile {
    pub image_path: String,
    pub method: String,
    pub units: Vec<String>,
}

impl UnitsFile {
    pub fn new(image_path: &str, method: &str, units: &[BinaryMask]) -> Self {
        Self {
            image_path: image_path.to_string(),
            method: method.to_string(),
            units: units.iter().map(rle::encode).collect(),
        }
    }

    pub fn decode(&self, width: usize, height: usize) -> Result<Vec<BinaryMask>> {
        self.units
            .iter()
            .map(|u| rle::decode(u, width, height))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Reads every `*.json` units file in a directory, keyed by image path.
/// Returns the method name shared by the files.
pub fn read_units_dir(dir: &Path) -> Result<(String, HashMap<String, Vec<String>>)> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut method: Option<String> = None;
    let mut units = HashMap::new();
    for p in paths {
        let file: UnitsFile = read_json(&p)?;
        match &method {
            Some(m) if *m != file.method => {
                return Err(Error::Ingestion(format!(
                    "{}: method `{}` differs from `{m}`",
                    p.display(),
                    file.method
                )));
            }
            _ => method = Some(file.method.clone()),
        }
        if units.insert(file.image_path.clone(), file.units).is_some() {
            return Err(Error::Ingestion(format!(
                "{}: duplicate units for {}",
                p.display(),
                file.image_path
            )));
        }
    }
    let method = method.ok_or_else(|| Error::Ingestion(format!("{}: no units files", dir.display())))?;
    Ok((method, units))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub dir: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub fill_stats: DatasetStats,
    pub manifest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmenter: Option<String>,
    pub config: RunConfig,
    pub images: Vec<ImageRecord>,
}

/// Endpoint and manifest details stored next to a run.
#[derive(Debug, Clone, Default)]
pub struct RunMeta {
    pub manifest: String,
    pub model: Option<String>,
    pub segmenter: Option<String>,
    pub config: RunConfig,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Ingestion(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Ingestion(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Ingestion(format!("{}: {e}", path.display()))))
        .collect()
}

/// Writes a run directory, replacing any files of an earlier write.
pub fn write_run(dir: &Path, run: &MethodRun, meta: &RunMeta) -> Result<()> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let mut records = Vec::with_capacity(run.images.len());
    for (i, img) in run.images.iter().enumerate() {
        let name = format!("{i:04}");
        let d = images_dir.join(&name);
        std::fs::create_dir_all(&d)?;
        for f in ["concepts.json", "shapley.json", "explanation.json", "units.json", "report.json", "insertion.csv", "deletion.csv"] {
            let p = d.join(f);
            if p.exists() {
                std::fs::remove_file(p)?;
            }
        }
        let mut record = ImageRecord {
            image_id: img.image_id.clone(),
            dir: format!("images/{name}"),
            width: None,
            height: None,
            target_class: None,
            target_probability: None,
            error: None,
        };
        match &img.outcome {
            Err(e) => record.error = Some(e.clone()),
            Ok(res) => {
                if res.report.is_some() || res.lce.is_some() {
                    record.target_class = Some(res.target_class);
                    record.target_probability = Some(res.target_probability);
                }
                if let Some(u) = res.units.first() {
                    record.width = Some(u.width());
                    record.height = Some(u.height());
                }
                if let Some(lce) = &res.lce {
                    let (w, h) = (record.width.unwrap_or_default(), record.height.unwrap_or_default());
                    write_json(&d.join("concepts.json"), &ConceptSetDocument::from_set(&img.image_id, w, h, &lce.concepts))?;
                    write_json(&d.join("shapley.json"), &lce.shapley)?;
                    write_json(&d.join("explanation.json"), &lce.explanation)?;
                }
                if !res.units.is_empty() {
                    write_json(&d.join("units.json"), &UnitsFile::new(&img.image_id, &run.method, &res.units))?;
                }
                if let Some(rep) = &res.report {
                    write_json(&d.join("report.json"), rep)?;
                    std::fs::write(d.join("insertion.csv"), rep.insertion_curve.to_csv())?;
                    std::fs::write(d.join("deletion.csv"), rep.deletion_curve.to_csv())?;
                }
            }
        }
        records.push(record);
    }
    write_report_csv(&dir.join("reports.csv"), &run.report_rows())?;
    write_json(
        &dir.join("run.json"),
        &RunRecord {
            method: run.method.clone(),
            seed: run.seed,
            fill_stats: run.fill_stats.clone(),
            manifest: meta.manifest.clone(),
            model: meta.model.clone(),
            segmenter: meta.segmenter.clone(),
            config: meta.config.clone(),
            images: records,
        },
    )
}

/// Reads a run directory back into memory.
pub fn read_run(dir: &Path) -> Result<(RunRecord, MethodRun)> {
    let record: RunRecord = read_json(&dir.join("run.json"))?;
    let mut images = Vec::with_capacity(record.images.len());
    for r in &record.images {
        let outcome = match &r.error {
            Some(e) => Err(e.clone()),
            None => Ok(read_image(&dir.join(&r.dir), r)?),
        };
        images.push(ImageRun {
            image_id: r.image_id.clone(),
            outcome,
        });
    }
    let run = MethodRun {
        method: record.method.clone(),
        seed: record.seed,
        fill_stats: record.fill_stats.clone(),
        images,
    };
    Ok((record, run))
}

fn read_image(d: &Path, record: &ImageRecord) -> Result<ImageResult> {
    let concepts = d.join("concepts.json");
    let lce = if concepts.exists() {
        let doc: ConceptSetDocument = read_json(&concepts)?;
        let shapley: ShapleyResult = read_json(&d.join("shapley.json"))?;
        let explanation: Explanation = read_json(&d.join("explanation.json"))?;
        Some(LceArtifacts {
            concepts: doc.to_set()?,
            shapley,
            explanation,
        })
    } else {
        None
    };
    let units_path = d.join("units.json");
    let units = if units_path.exists() {
        let (Some(w), Some(h)) = (record.width, record.height) else {
            return Err(Error::Ingestion(format!("{}: image size not recorded", d.display())));
        };
        read_json::<UnitsFile>(&units_path)?.decode(w, h)?
    } else {
        Vec::new()
    };
    let report_path = d.join("report.json");
    let report: Option<FaithfulnessReport> = if report_path.exists() {
        Some(read_json(&report_path)?)
    } else {
        None
    };
    Ok(ImageResult {
        target_class: record.target_class.unwrap_or_default(),
        target_probability: record.target_probability.unwrap_or_default(),
        lce,
        units,
        report,
    })
}
