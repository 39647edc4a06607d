//! Benchmark harness: runs explanation methods over a dataset and compares
//! their faithfulness.
//!
//! A run has two stages. The explain stage produces, per image, an ordered
//! list of explanation units (LCE concepts ranked by φ, imported units, or a
//! seeded shuffle of superpixels). The evaluate stage turns each unit list
//! into a [`FaithfulnessReport`] with the same fill and target class policy
//! for every method, so methods differ only in their units.

pub mod dataset;
pub mod run_dir;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::concepts::{self, ConceptSet, DiscoveryConfig, SelectionVector};
use crate::error::{Error, Result};
use crate::faithfulness::{self, ExplanationSequence, FaithfulnessReport};
use crate::mask::{BinaryMask, DatasetStats, Image};
use crate::oracle::client::{ConnectOptions, EndpointSpec, RemoteOracle};
use crate::oracle::synthetic::SyntheticOracle;
use crate::oracle::{self, Capability, Oracle};
use crate::rle;
use crate::shapley::{self, Explanation, ShapleyResult};

pub use dataset::{compute_dataset_stats, Dataset, DatasetManifest, ManifestEntry, Sample};

pub const LCE_METHOD: &str = "lce";
pub const RANDOM_METHOD: &str = "random";
pub const GUIDE_RANKING_METHOD: &str = "superpixel-ranking";

/// Harness configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub q: SelectionVector,
    pub k: usize,
    pub max_concepts: usize,
    pub overlap_threshold: f64,
    /// Superpixels requested for unit baselines.
    pub baseline_superpixels: usize,
    pub workers: usize,
    pub timeout_ms: u64,
    pub max_batch: usize,
    pub model: Option<String>,
    pub segmenter: Option<String>,
    pub output_dir: Option<String>,
    /// Overrides statistics computed from the dataset.
    pub fill_stats: Option<DatasetStats>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let d = DiscoveryConfig::default();
        let c = ConnectOptions::default();
        Self {
            q: d.q,
            k: d.k,
            max_concepts: d.max_concepts,
            overlap_threshold: d.overlap_threshold,
            baseline_superpixels: 16,
            workers: 1,
            timeout_ms: c.timeout_ms,
            max_batch: c.max_batch,
            model: None,
            segmenter: None,
            output_dir: None,
            fill_stats: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn discovery(&self) -> DiscoveryConfig {
        DiscoveryConfig {
            q: self.q.clone(),
            k: self.k,
            max_concepts: self.max_concepts,
            overlap_threshold: self.overlap_threshold,
        }
    }

    pub fn connect_options(&self) -> ConnectOptions {
        ConnectOptions {
            timeout_ms: self.timeout_ms,
            max_batch: self.max_batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.discovery().validate()?;
        if self.max_concepts > shapley::MAX_PLAYERS {
            return Err(Error::Config(format!(
                "max_concepts {} exceeds the exact Shapley limit of {}",
                self.max_concepts,
                shapley::MAX_PLAYERS
            )));
        }
        if self.workers == 0 || self.max_batch == 0 || self.baseline_superpixels == 0 {
            return Err(Error::Config(
                "workers, max_batch and baseline_superpixels must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Per-image fill seed: the global seed offset by a stable hash of the
/// image path.
pub fn fill_seed(global_seed: u64, image_id: &str) -> u64 {
    let digest = Sha256::digest(image_id.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    global_seed.wrapping_add(u64::from_le_bytes(bytes))
}

/// Creates one oracle connection per worker.
pub type OracleFactory<'a> = dyn Fn() -> Result<Box<dyn Oracle>> + Sync + 'a;

/// Factory for an endpoint spec; synthetic specs share nothing between
/// workers, remote specs open a fresh connection each time.
pub fn endpoint_factory(
    spec: EndpointSpec,
    options: ConnectOptions,
    required: Vec<Capability>,
) -> impl Fn() -> Result<Box<dyn Oracle>> + Sync {
    move || -> Result<Box<dyn Oracle>> {
        match &spec {
            EndpointSpec::Synthetic => Ok(Box::new(SyntheticOracle::default())),
            other => Ok(Box::new(RemoteOracle::connect(other, options, &required)?)),
        }
    }
}

pub fn model_capabilities() -> Vec<Capability> {
    vec![Capability::Predict, Capability::Heatmap, Capability::Superpixels]
}

pub fn segmenter_capabilities() -> Vec<Capability> {
    vec![Capability::SegmentPoints, Capability::SegmentBoxes]
}

/// Everything the LCE explain stage produces for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct LceArtifacts {
    pub concepts: ConceptSet,
    pub shapley: ShapleyResult,
    pub explanation: Explanation,
}

impl LceArtifacts {
    /// Concept masks in φ-descending order.
    pub fn ranked_units(&self) -> Vec<BinaryMask> {
        self.explanation
            .ranked_concepts
            .iter()
            .map(|id| self.concepts.get(*id).expect("ranked ids come from the set").mask.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    pub target_class: usize,
    pub target_probability: f64,
    pub lce: Option<LceArtifacts>,
    pub units: Vec<BinaryMask>,
    pub report: Option<FaithfulnessReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRun {
    pub image_id: String,
    pub outcome: std::result::Result<ImageResult, String>,
}

/// One method evaluated over a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodRun {
    pub method: String,
    pub seed: u64,
    pub fill_stats: DatasetStats,
    pub images: Vec<ImageRun>,
}

impl MethodRun {
    pub fn failures(&self) -> Vec<(&str, &str)> {
        self.images
            .iter()
            .filter_map(|r| r.outcome.as_ref().err().map(|e| (r.image_id.as_str(), e.as_str())))
            .collect()
    }

    pub fn reports(&self) -> Vec<(&str, &FaithfulnessReport)> {
        self.images
            .iter()
            .filter_map(|r| {
                r.outcome
                    .as_ref()
                    .ok()
                    .and_then(|o| o.report.as_ref())
                    .map(|rep| (r.image_id.as_str(), rep))
            })
            .collect()
    }

    pub fn report_rows(&self) -> Vec<ReportRow> {
        self.reports()
            .into_iter()
            .map(|(id, r)| ReportRow::new(&self.method, id, r))
            .collect()
    }
}

/// Flat CSV row of a faithfulness report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub image_id: String,
    pub insertion: f64,
    pub deletion: f64,
    pub insertion_w: f64,
    pub deletion_w: f64,
    pub effect_score: f64,
    pub p_s: f64,
    pub p_o: f64,
}

impl ReportRow {
    pub fn new(method: &str, image_id: &str, r: &FaithfulnessReport) -> Self {
        Self {
            method: method.to_string(),
            image_id: image_id.to_string(),
            insertion: r.insertion,
            deletion: r.deletion,
            insertion_w: r.insertion_w,
            deletion_w: r.deletion_w,
            effect_score: r.effect_score,
            p_s: r.p_s,
            p_o: r.p_o,
        }
    }
}

/// Runs `job` over every sample on `workers` threads. Each worker builds its
/// own oracles with `connect`; results come back in sample order.
fn run_pool<C, J>(dataset: &Dataset, workers: usize, connect: C, job: J) -> Vec<ImageRun>
where
    C: Fn() -> Result<Vec<Box<dyn Oracle>>> + Sync,
    J: Fn(&Sample, &[Box<dyn Oracle>]) -> Result<ImageResult> + Sync,
{
    let n = dataset.samples.len();
    let workers = workers.clamp(1, n.max(1));
    let mut slots: Vec<Option<ImageRun>> = vec![None; n];
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (connect, job) = (&connect, &job);
                scope.spawn(move || {
                    let mine: Vec<usize> = (w..n).step_by(workers).collect();
                    let oracles = connect();
                    mine.into_iter()
                        .map(|i| {
                            let sample = &dataset.samples[i];
                            let outcome = match &oracles {
                                Ok(o) => job(sample, o).map_err(|e| e.to_string()),
                                Err(e) => Err(format!("endpoint connection failed: {e}")),
                            };
                            if let Err(e) = &outcome {
                                log::warn!("{}: {e}", sample.id);
                            }
                            (
                                i,
                                ImageRun {
                                    image_id: sample.id.clone(),
                                    outcome,
                                },
                            )
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, run) in h.join().expect("worker panicked") {
                slots[i] = Some(run);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every sample assigned")).collect()
}

fn sample_image(sample: &Sample) -> Result<&Image> {
    sample
        .image
        .as_ref()
        .map_err(|e| Error::Ingestion(e.clone()))
}

/// Discovery, exact Shapley and ranking for one image.
pub fn explain_image(
    image: &Image,
    image_id: &str,
    model: &dyn Oracle,
    segmenter: &dyn Oracle,
    config: &RunConfig,
    stats: &DatasetStats,
    seed: u64,
) -> Result<LceArtifacts> {
    let concepts = concepts::discover_concepts(image, model, segmenter, &config.discovery())?;
    let shapley = shapley::exact_shapley(image, &concepts, model, stats, fill_seed(seed, image_id))?;
    let explanation = shapley::select_explanation(&shapley, &concepts)?;
    Ok(LceArtifacts {
        concepts,
        shapley,
        explanation,
    })
}

/// Faithfulness of an ordered unit list under the shared fill policy.
pub fn evaluate_units(
    image: &Image,
    image_id: &str,
    units: Vec<BinaryMask>,
    method: &str,
    model: &dyn Oracle,
    stats: &DatasetStats,
    seed: u64,
) -> Result<(usize, f64, FaithfulnessReport)> {
    let (target, p) = oracle::target_class(model, image)?;
    let seq = ExplanationSequence::new(units, method)?;
    let fill = shapley::baseline_fill(
        stats,
        image.width(),
        image.height(),
        image.channels(),
        fill_seed(seed, image_id),
    )?;
    let report = faithfulness::evaluate(image, &seq, model, target, &fill)?;
    Ok((target, p, report))
}

fn resolve_stats(dataset: &Dataset, config: &RunConfig) -> Result<DatasetStats> {
    match &config.fill_stats {
        Some(s) => Ok(s.clone()),
        None => dataset.lenient_stats(),
    }
}

/// Explain stage only: concepts, Shapley values and ranking per image.
pub fn explain_lce(
    dataset: &Dataset,
    model: &OracleFactory,
    segmenter: &OracleFactory,
    config: &RunConfig,
    seed: u64,
) -> Result<MethodRun> {
    config.validate()?;
    let stats = resolve_stats(dataset, config)?;
    let images = run_pool(
        dataset,
        config.workers,
        || Ok(vec![model()?, segmenter()?]),
        |sample, o| {
            let image = sample_image(sample)?;
            let (target_class, target_probability) = oracle::target_class(o[0].as_ref(), image)?;
            let lce = explain_image(image, &sample.id, o[0].as_ref(), o[1].as_ref(), config, &stats, seed)?;
            Ok(ImageResult {
                target_class,
                target_probability,
                units: lce.ranked_units(),
                lce: Some(lce),
                report: None,
            })
        },
    );
    Ok(MethodRun {
        method: LCE_METHOD.into(),
        seed,
        fill_stats: stats,
        images,
    })
}

/// Evaluate stage: fills in the report of every successfully explained image.
pub fn evaluate_run(dataset: &Dataset, run: MethodRun, model: &OracleFactory, workers: usize) -> Result<MethodRun> {
    let by_id: HashMap<&str, &ImageRun> = run.images.iter().map(|r| (r.image_id.as_str(), r)).collect();
    if run.images.len() != dataset.samples.len() || dataset.ids().iter().any(|id| !by_id.contains_key(id)) {
        return Err(Error::contract("run does not cover the manifest images"));
    }
    let images = run_pool(
        dataset,
        workers,
        || Ok(vec![model()?]),
        |sample, o| {
            let prior = by_id[sample.id.as_str()]
                .outcome
                .as_ref()
                .map_err(|e| Error::Ingestion(format!("explain stage failed: {e}")))?;
            let image = sample_image(sample)?;
            let (target_class, target_probability, report) = evaluate_units(
                image,
                &sample.id,
                prior.units.clone(),
                &run.method,
                o[0].as_ref(),
                &run.fill_stats,
                run.seed,
            )?;
            Ok(ImageResult {
                target_class,
                target_probability,
                lce: prior.lce.clone(),
                units: prior.units.clone(),
                report: Some(report),
            })
        },
    );
    Ok(MethodRun { images, ..run })
}

/// Full LCE pipeline: explain, then evaluate.
pub fn run_lce(
    dataset: &Dataset,
    model: &OracleFactory,
    segmenter: &OracleFactory,
    config: &RunConfig,
    seed: u64,
) -> Result<MethodRun> {
    let explained = explain_lce(dataset, model, segmenter, config, seed)?;
    evaluate_run(dataset, explained, model, config.workers)
}

/// Where ranked units for a non-LCE method come from.
#[derive(Debug, Clone)]
pub enum UnitsSource {
    /// Run-length masks per image id, most important first.
    Imported { method: String, units: HashMap<String, Vec<String>> },
    /// Superpixels from the model endpoint, shuffled with the given seed.
    Random { seed: u64 },
    /// Superpixels from the model endpoint in the guide's own ranking.
    GuideRanking,
}

impl UnitsSource {
    pub fn method(&self) -> &str {
        match self {
            UnitsSource::Imported { method, .. } => method,
            UnitsSource::Random { .. } => RANDOM_METHOD,
            UnitsSource::GuideRanking => GUIDE_RANKING_METHOD,
        }
    }

    pub fn needs_superpixels(&self) -> bool {
        !matches!(self, UnitsSource::Imported { .. })
    }

    /// Produces the unit list of one image.
    pub fn units_for(
        &self,
        image: &Image,
        image_id: &str,
        model: Option<&dyn Oracle>,
        config: &RunConfig,
    ) -> Result<Vec<BinaryMask>> {
        let superpixels = || {
            model
                .ok_or_else(|| Error::contract("superpixel units need a model endpoint"))?
                .superpixels(image, config.baseline_superpixels)
        };
        match self {
            UnitsSource::Imported { units, .. } => {
                let encoded = units
                    .get(image_id)
                    .ok_or_else(|| Error::Ingestion(format!("no imported units for {image_id}")))?;
                if encoded.is_empty() {
                    return Err(Error::Ingestion(format!("imported unit list for {image_id} is empty")));
                }
                encoded
                    .iter()
                    .map(|m| rle::decode(m, image.width(), image.height()))
                    .collect()
            }
            UnitsSource::Random { seed } => {
                let sp = superpixels()?;
                let mut ids = sp.region_ids().to_vec();
                ids.shuffle(&mut ChaCha8Rng::seed_from_u64(fill_seed(*seed, image_id)));
                Ok(ids.into_iter().map(|id| sp.region_mask(id)).collect())
            }
            UnitsSource::GuideRanking => {
                let sp = superpixels()?;
                let mut ids = sp.ranking().map(<[u32]>::to_vec).unwrap_or_default();
                let rest: Vec<u32> = sp.region_ids().iter().copied().filter(|id| !ids.contains(id)).collect();
                ids.extend(rest);
                Ok(ids.into_iter().map(|id| sp.region_mask(id)).collect())
            }
        }
    }
}

/// Unit stage only for a ranked-unit method.
pub fn collect_units(
    dataset: &Dataset,
    model: &OracleFactory,
    source: &UnitsSource,
    config: &RunConfig,
    seed: u64,
) -> Result<MethodRun> {
    config.validate()?;
    let stats = resolve_stats(dataset, config)?;
    let images = run_pool(
        dataset,
        config.workers,
        || {
            if source.needs_superpixels() {
                Ok(vec![model()?])
            } else {
                Ok(Vec::new())
            }
        },
        |sample, o| {
            let image = sample_image(sample)?;
            let units = source.units_for(image, &sample.id, o.first().map(|m| m.as_ref()), config)?;
            Ok(ImageResult {
                target_class: 0,
                target_probability: 0.0,
                lce: None,
                units,
                report: None,
            })
        },
    );
    Ok(MethodRun {
        method: source.method().to_string(),
        seed,
        fill_stats: stats,
        images,
    })
}

/// Faithfulness of a ranked-unit method, scored exactly as LCE is.
pub fn run_ranked_units(
    dataset: &Dataset,
    model: &OracleFactory,
    source: &UnitsSource,
    config: &RunConfig,
    seed: u64,
) -> Result<MethodRun> {
    let collected = collect_units(dataset, model, source, config, seed)?;
    evaluate_run(dataset, collected, model, config.workers)
}

/// Means of one method's per-image reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub images: usize,
    pub failures: usize,
    pub insertion: f64,
    pub deletion: f64,
    pub insertion_w: f64,
    pub deletion_w: f64,
    pub effect_score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    pub per_image: Vec<ReportRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Per-method means over per-image report rows. `image_ids` lists the
/// manifest images of every run, which must agree.
pub fn aggregate_rows(runs: &[(String, Vec<String>, Vec<ReportRow>)]) -> Result<ComparisonTable> {
    let Some((_, reference, _)) = runs.first() else {
        return Err(Error::contract("nothing to aggregate"));
    };
    let mut rows = Vec::new();
    let mut per_image = Vec::new();
    for (method, ids, reports) in runs {
        if ids != reference {
            return Err(Error::contract(format!(
                "run `{method}` covers a different manifest than `{}`",
                runs[0].0
            )));
        }
        rows.push(ComparisonRow {
            method: method.clone(),
            images: reports.len(),
            failures: ids.len() - reports.len(),
            insertion: mean(reports.iter().map(|r| r.insertion)),
            deletion: mean(reports.iter().map(|r| r.deletion)),
            insertion_w: mean(reports.iter().map(|r| r.insertion_w)),
            deletion_w: mean(reports.iter().map(|r| r.deletion_w)),
            effect_score: mean(reports.iter().map(|r| r.effect_score)),
        });
        per_image.extend(reports.iter().cloned());
    }
    Ok(ComparisonTable { rows, per_image })
}

pub fn aggregate(runs: &[MethodRun]) -> Result<ComparisonTable> {
    let prepared: Vec<_> = runs
        .iter()
        .map(|r| {
            (
                r.method.clone(),
                r.images.iter().map(|i| i.image_id.clone()).collect::<Vec<_>>(),
                r.report_rows(),
            )
        })
        .collect();
    aggregate_rows(&prepared)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_seed_is_stable() {
        assert_eq!(fill_seed(0, "a.png"), fill_seed(0, "a.png"));
        assert_ne!(fill_seed(0, "a.png"), fill_seed(0, "b.png"));
        assert_eq!(fill_seed(5, "a.png"), fill_seed(0, "a.png").wrapping_add(5));
    }

    #[test]
    fn config_defaults_and_validation() {
        let c = RunConfig::default();
        assert_eq!(c.q.fractions(), &[0.05, 0.15, 0.30]);
        assert_eq!((c.k, c.max_concepts), (6, 12));
        c.validate().unwrap();
        let parsed: RunConfig = serde_json::from_str(r#"{"k": 3, "workers": 2}"#).unwrap();
        assert_eq!(parsed.k, 3);
        assert_eq!(parsed.max_concepts, 12);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        let too_many = RunConfig {
            max_concepts: 17,
            ..RunConfig::default()
        };
        assert!(too_many.validate().is_err());
    }

    fn row(method: &str, id: &str, ins: f64, del: f64, ratio: f64) -> ReportRow {
        let w = faithfulness::weighted_report(ins, del, ratio * 100.0, 100.0).unwrap();
        ReportRow {
            method: method.into(),
            image_id: id.into(),
            insertion: ins,
            deletion: del,
            insertion_w: w.insertion_w,
            deletion_w: w.deletion_w,
            effect_score: w.effect_score,
            p_s: ratio * 100.0,
            p_o: 100.0,
        }
    }

    #[test]
    fn aggregate_means() {
        let ids = vec!["a".to_string(), "b".to_string()];
        let lce = vec![row("lce", "a", 0.8, 0.2, 0.1), row("lce", "b", 0.6, 0.4, 0.3)];
        let single = aggregate_rows(&[("lce".into(), vec!["a".into()], vec![lce[0].clone()])]).unwrap();
        assert_eq!(single.rows[0].insertion, lce[0].insertion);
        assert_eq!(single.rows[0].effect_score, lce[0].effect_score);

        let t = aggregate_rows(&[("lce".into(), ids.clone(), lce.clone())]).unwrap();
        assert_eq!(t.rows[0].insertion, (0.8 + 0.6) / 2.0);
        assert_eq!(t.rows[0].deletion, (0.2 + 0.4) / 2.0);
        assert_eq!(t.rows[0].effect_score, (lce[0].effect_score + lce[1].effect_score) / 2.0);
        let r = &t.rows[0];
        assert!((r.effect_score - (r.insertion_w + r.deletion_w) / 2.0).abs() < 1e-12);

        let rnd = vec![row("random", "a", 0.5, 0.5, 0.5)];
        let t2 = aggregate_rows(&[("lce".into(), ids.clone(), lce.clone()), ("random".into(), ids.clone(), rnd)]).unwrap();
        assert_eq!(t2.rows[0], t.rows[0]);
        assert_eq!(t2.rows[1].failures, 1);

        assert!(aggregate_rows(&[("lce".into(), ids, lce.clone()), ("x".into(), vec!["a".into()], vec![])]).is_err());
    }
}
