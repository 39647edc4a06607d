//! Guided concept discovery.
//!
//! Attribution guides are turned into segmenter prompts: heatmap scores become
//! point prompts picked at importance quantiles, superpixels become box
//! prompts. The segmenter's masks are then deduplicated into the concept set
//! handed to the Shapley engine.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{self, BinaryMask, BoundingBox, Image};
use crate::oracle::{self, Capability, Oracle};
use crate::rle;

/// Per-pixel attribution scores, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatMap {
    width: usize,
    height: usize,
    scores: Vec<f32>,
}

impl HeatMap {
    pub fn new(width: usize, height: usize, scores: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Ingestion("heatmap has zero area".into()));
        }
        if scores.len() != width * height {
            return Err(Error::Ingestion(format!(
                "heatmap of {width}x{height} needs {} scores, got {}",
                width * height,
                scores.len()
            )));
        }
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Ingestion(format!("non-finite heatmap score {bad}")));
        }
        Ok(Self {
            width,
            height,
            scores,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn scores(&self) -> &[f32] {
        &self.scores
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.scores[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuideTriplet {
    pub score: f32,
    pub x: usize,
    pub y: usize,
}

/// Heatmap triplets sorted by score, highest first, ties in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct GuideParams {
    triplets: Vec<GuideTriplet>,
}

impl GuideParams {
    pub fn triplets(&self) -> &[GuideTriplet] {
        &self.triplets
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }
}

/// Importance quantiles at which point prompts are picked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SelectionVector(Vec<f64>);

impl SelectionVector {
    pub fn new(fractions: Vec<f64>) -> Result<Self> {
        if fractions.is_empty() {
            return Err(Error::Config("selection vector is empty".into()));
        }
        if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::Config(format!(
                "selection fractions must lie in (0, 1]: {fractions:?}"
            )));
        }
        if fractions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "selection fractions must be strictly increasing: {fractions:?}"
            )));
        }
        Ok(Self(fractions))
    }

    pub fn fractions(&self) -> &[f64] {
        &self.0
    }
}

impl Default for SelectionVector {
    fn default() -> Self {
        Self(vec![0.05, 0.15, 0.30])
    }
}

impl TryFrom<Vec<f64>> for SelectionVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SelectionVector> for Vec<f64> {
    fn from(q: SelectionVector) -> Self {
        q.0
    }
}

/// An oversegmentation of an image with an optional importance ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelSet {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    region_ids: Vec<u32>,
    ranking: Option<Vec<u32>>,
}

impl SuperpixelSet {
    pub fn new(
        width: usize,
        height: usize,
        labels: Vec<u32>,
        ranking: Option<Vec<u32>>,
    ) -> Result<Self> {
        if labels.len() != width * height || labels.is_empty() {
            return Err(Error::Ingestion(format!(
                "superpixel labels of {width}x{height} need {} entries, got {}",
                width * height,
                labels.len()
            )));
        }
        let ids: BTreeSet<u32> = labels.iter().copied().collect();
        if let Some(rank) = &ranking {
            let mut seen = BTreeSet::new();
            for id in rank {
                if !ids.contains(id) || !seen.insert(*id) {
                    return Err(Error::Ingestion(format!(
                        "ranking entry {id} is unknown or repeated"
                    )));
                }
            }
        }
        Ok(Self {
            width,
            height,
            labels,
            region_ids: ids.into_iter().collect(),
            ranking,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Distinct ids in ascending order.
    pub fn region_ids(&self) -> &[u32] {
        &self.region_ids
    }

    pub fn ranking(&self) -> Option<&[u32]> {
        self.ranking.as_deref()
    }

    /// Ranked ids, or every id ascending when unranked.
    pub fn ordered_ids(&self) -> &[u32] {
        self.ranking.as_deref().unwrap_or(&self.region_ids)
    }

    pub fn region_mask(&self, id: u32) -> BinaryMask {
        let bits = self.labels.iter().map(|l| *l == id).collect();
        BinaryMask::from_bits(self.width, self.height, bits).expect("labels sized to image")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PromptSet {
    pub points: Vec<(usize, usize)>,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    HeatmapPoint,
    SuperpixelBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prompt {
    Point([usize; 2]),
    Box([usize; 4]),
}

impl Prompt {
    pub fn from_box(b: BoundingBox) -> Self {
        Prompt::Box([b.x1, b.y1, b.x2, b.y2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMask {
    pub id: u32,
    pub mask: BinaryMask,
    pub provenance: Provenance,
    pub prompt: Prompt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptSet {
    concepts: Vec<ConceptMask>,
}

impl ConceptSet {
    pub fn new(concepts: Vec<ConceptMask>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for c in &concepts {
            if !ids.insert(c.id) {
                return Err(Error::contract(format!("duplicate concept id {}", c.id)));
            }
            if !c.mask.same_dims(&concepts[0].mask) {
                return Err(Error::contract("concept masks differ in size"));
            }
        }
        Ok(Self { concepts })
    }

    pub fn concepts(&self) -> &[ConceptMask] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn get(&self, id: u32) -> Option<&ConceptMask> {
        self.concepts.iter().find(|c| c.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoveryConfig {
    pub q: SelectionVector,
    pub k: usize,
    pub max_concepts: usize,
    pub overlap_threshold: f64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            q: SelectionVector::default(),
            k: 6,
            max_concepts: 12,
            overlap_threshold: 0.9,
        }
    }
}

impl DiscoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.max_concepts == 0 {
            return Err(Error::Config("max_concepts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap_threshold) {
            return Err(Error::Config("overlap_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn extract_guide_params(map: &HeatMap) -> GuideParams {
    let mut triplets: Vec<GuideTriplet> = map
        .scores
        .iter()
        .enumerate()
        .map(|(i, &score)| GuideTriplet {
            score,
            x: i % map.width,
            y: i / map.width,
        })
        .collect();
    // Stable sort over raster order keeps ties in (y, x) order.
    triplets.sort_by(|a, b| b.score.total_cmp(&a.score));
    GuideParams { triplets }
}

/// 0-based rank of the triplet at importance fraction `f` out of `n`.
///
/// `ceil(f·n) − 1`, with a small slack so that products such as
/// `0.07 · 100 = 7.000000000000001` land on the intended integer.
pub fn quantile_rank(f: f64, n: usize) -> usize {
    let r = (f * n as f64 - 1e-9).ceil();
    (r.max(1.0) as usize).min(n) - 1
}

pub fn select_point_prompts(params: &GuideParams, q: &SelectionVector) -> PromptSet {
    let n = params.len();
    let mut points = Vec::new();
    if n == 0 {
        return PromptSet::default();
    }
    for &f in q.fractions() {
        let t = params.triplets[quantile_rank(f, n)];
        let p = (t.x, t.y);
        if !points.contains(&p) {
            points.push(p);
        }
    }
    PromptSet {
        points,
        boxes: Vec::new(),
    }
}

pub fn superpixel_boxes(s: &SuperpixelSet, k: usize) -> PromptSet {
    let boxes = s
        .ordered_ids()
        .iter()
        .take(k)
        .map(|id| mask::bounding_box(&s.region_mask(*id)).expect("region ids are non-empty"))
        .collect();
    PromptSet {
        points: Vec::new(),
        boxes,
    }
}

/// Removes near-duplicate concepts.
///
/// Candidates are visited by area (largest first, ties by id). A candidate is
/// discarded when more than `threshold` of it is covered by an already kept,
/// larger candidate. Survivors keep their input order.
pub fn dedup_concepts(candidates: Vec<ConceptMask>, threshold: f64) -> Result<ConceptSet> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(candidates[i].mask.area()), candidates[i].id));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let mut duplicate = false;
        for &j in &kept {
            if mask::overlap_ratio(&candidates[i].mask, &candidates[j].mask)? > threshold {
                duplicate = true;
                break;
            }
        }
        if !duplicate {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    let mut keep = vec![false; candidates.len()];
    for i in kept {
        keep[i] = true;
    }
    let survivors = candidates
        .into_iter()
        .zip(keep)
        .filter_map(|(c, k)| k.then_some(c))
        .collect();
    ConceptSet::new(survivors)
}

/// Keeps the `max` largest concepts (ties by id), preserving input order.
pub fn cap_concepts(set: ConceptSet, max: usize) -> ConceptSet {
    if set.len() <= max {
        return set;
    }
    let mut ranked: Vec<(usize, u32)> = set
        .concepts
        .iter()
        .map(|c| (c.mask.area(), c.id))
        .collect();
    ranked.sort_by_key(|&(area, id)| (std::cmp::Reverse(area), id));
    let chosen: BTreeSet<u32> = ranked.into_iter().take(max).map(|(_, id)| id).collect();
    ConceptSet {
        concepts: set
            .concepts
            .into_iter()
            .filter(|c| chosen.contains(&c.id))
            .collect(),
    }
}

/// Runs both guides, prompts the segmenter and post-processes the masks.
///
/// Candidate ids follow prompt order: heatmap points first, then superpixel
/// boxes.
pub fn discover_concepts(
    image: &Image,
    model: &dyn Oracle,
    segmenter: &dyn Oracle,
    config: &DiscoveryConfig,
) -> Result<ConceptSet> {
    config.validate()?;
    oracle::require(model, &[Capability::Predict, Capability::Heatmap, Capability::Superpixels])?;
    oracle::require(segmenter, &[Capability::SegmentPoints, Capability::SegmentBoxes])?;

    let (target, _) = oracle::target_class(model, image)?;
    let map = model.heatmap(image, target)?;
    if map.width != image.width() || map.height != image.height() {
        return Err(Error::Ingestion(format!(
            "heatmap is {}x{}, image is {}x{}",
            map.width,
            map.height,
            image.width(),
            image.height()
        )));
    }
    let points = select_point_prompts(&extract_guide_params(&map), &config.q).points;
    let point_masks = segmenter.segment_points(image, &points)?;

    let sp = model.superpixels(image, config.k)?;
    if sp.width != image.width() || sp.height != image.height() {
        return Err(Error::Ingestion("superpixel labels do not match image size".into()));
    }
    let boxes = superpixel_boxes(&sp, config.k).boxes;
    let box_masks = segmenter.segment_boxes(image, &boxes)?;

    if point_masks.len() != points.len() || box_masks.len() != boxes.len() {
        return Err(Error::Ingestion(
            "segmenter returned a different number of masks than prompts".into(),
        ));
    }

    let prompted = points
        .iter()
        .map(|&(x, y)| (Provenance::HeatmapPoint, Prompt::Point([x, y])))
        .chain(
            boxes
                .iter()
                .map(|b| (Provenance::SuperpixelBox, Prompt::from_box(*b))),
        );
    let mut candidates = Vec::new();
    for (id, ((provenance, prompt), mask)) in prompted
        .zip(point_masks.into_iter().chain(box_masks))
        .enumerate()
    {
        if mask.width() != image.width() || mask.height() != image.height() {
            return Err(Error::Ingestion(format!(
                "segmenter mask is {}x{}, image is {}x{}",
                mask.width(),
                mask.height(),
                image.width(),
                image.height()
            )));
        }
        if mask.is_empty() {
            log::warn!("dropping empty segmenter mask for prompt {prompt:?}");
            continue;
        }
        candidates.push(ConceptMask {
            id: id as u32,
            mask,
            provenance,
            prompt,
        });
    }
    if candidates.is_empty() {
        return Err(Error::EmptyConceptSet);
    }
    let set = dedup_concepts(candidates, config.overlap_threshold)?;
    Ok(cap_concepts(set, config.max_concepts))
}

/// One concept as stored in a concept-set document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptRecord {
    pub id: u32,
    pub provenance: Provenance,
    pub prompt: Prompt,
    pub rle_mask: String,
    pub pixel_count: usize,
}

/// Interchange file between the `explain` and `evaluate` stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSetDocument {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub concepts: Vec<ConceptRecord>,
}

impl ConceptSetDocument {
    pub fn from_set(image: impl Into<String>, width: usize, height: usize, set: &ConceptSet) -> Self {
        Self {
            image: image.into(),
            width,
            height,
            concepts: set
                .concepts
                .iter()
                .map(|c| ConceptRecord {
                    id: c.id,
                    provenance: c.provenance,
                    prompt: c.prompt,
                    rle_mask: rle::encode(&c.mask),
                    pixel_count: c.mask.area(),
                })
                .collect(),
        }
    }

    pub fn to_set(&self) -> Result<ConceptSet> {
        let concepts = self
            .concepts
            .iter()
            .map(|r| {
                let mask = rle::decode(&r.rle_mask, self.width, self.height)?;
                if mask.area() != r.pixel_count {
                    return Err(Error::Ingestion(format!(
                        "concept {} records {} pixels but its mask has {}",
                        r.id,
                        r.pixel_count,
                        mask.area()
                    )));
                }
                Ok(ConceptMask {
                    id: r.id,
                    mask,
                    provenance: r.provenance,
                    prompt: r.prompt,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ConceptSet::new(concepts)
    }
}
