//! Oracle boundary between the engine and every learned component.
//!
//! The classifier, the promptable segmenter and both attribution guides are
//! reached through [`Oracle`]. [`synthetic::SyntheticOracle`] answers in
//! process; [`client::RemoteOracle`] speaks the newline-delimited JSON
//! protocol in [`wire`] to a subprocess or TCP peer, and [`server`] exposes
//! any oracle over that protocol.

pub mod client;
pub mod server;
pub mod synthetic;
pub mod wire;

use serde::{Deserialize, Serialize};

use crate::concepts::{HeatMap, SuperpixelSet};
use crate::error::{EndpointError, Error, Result};
use crate::mask::{BinaryMask, BoundingBox, Image};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capability {
    Predict,
    SegmentPoints,
    SegmentBoxes,
    Heatmap,
    Superpixels,
}

impl Capability {
    pub const ALL: [Capability; 5] = [
        Capability::Predict,
        Capability::SegmentPoints,
        Capability::SegmentBoxes,
        Capability::Heatmap,
        Capability::Superpixels,
    ];

    pub fn method(self) -> &'static str {
        match self {
            Capability::Predict => "predict",
            Capability::SegmentPoints => "segment_points",
            Capability::SegmentBoxes => "segment_boxes",
            Capability::Heatmap => "heatmap",
            Capability::Superpixels => "superpixels",
        }
    }
}

/// A classifier, segmenter or guide, local or remote.
///
/// Implementations must be deterministic: identical requests get identical
/// answers.
pub trait Oracle: Send + Sync {
    fn capabilities(&self) -> Vec<Capability>;

    /// One probability vector per image.
    fn predict(&self, images: &[Image]) -> Result<Vec<Vec<f64>>>;

    /// One mask per point, in prompt order. Masks may be empty.
    fn segment_points(&self, image: &Image, points: &[(usize, usize)]) -> Result<Vec<BinaryMask>>;

    /// One mask per box, in prompt order. Masks may be empty.
    fn segment_boxes(&self, image: &Image, boxes: &[BoundingBox]) -> Result<Vec<BinaryMask>>;

    fn heatmap(&self, image: &Image, target_class: usize) -> Result<HeatMap>;

    fn superpixels(&self, image: &Image, k: usize) -> Result<SuperpixelSet>;
}

impl<T: Oracle + ?Sized> Oracle for Box<T> {
    fn capabilities(&self) -> Vec<Capability> {
        (**self).capabilities()
    }
    fn predict(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        (**self).predict(images)
    }
    fn segment_points(&self, image: &Image, points: &[(usize, usize)]) -> Result<Vec<BinaryMask>> {
        (**self).segment_points(image, points)
    }
    fn segment_boxes(&self, image: &Image, boxes: &[BoundingBox]) -> Result<Vec<BinaryMask>> {
        (**self).segment_boxes(image, boxes)
    }
    fn heatmap(&self, image: &Image, target_class: usize) -> Result<HeatMap> {
        (**self).heatmap(image, target_class)
    }
    fn superpixels(&self, image: &Image, k: usize) -> Result<SuperpixelSet> {
        (**self).superpixels(image, k)
    }
}

/// Fails unless `oracle` advertises every capability in `required`.
pub fn require(oracle: &dyn Oracle, required: &[Capability]) -> Result<()> {
    let offered = oracle.capabilities();
    for cap in required {
        if !offered.contains(cap) {
            return Err(Error::endpoint(
                "handshake",
                EndpointError::MissingCapability(cap.method().to_string()),
            ));
        }
    }
    Ok(())
}

/// Index of the largest probability; ties go to the lowest class index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    best
}

/// The model's predicted class on `image` and its probability.
pub fn target_class(model: &dyn Oracle, image: &Image) -> Result<(usize, f64)> {
    let probs = model.predict(std::slice::from_ref(image))?;
    let v = probs
        .into_iter()
        .next()
        .ok_or_else(|| Error::endpoint("predict", EndpointError::Malformed("empty result".into())))?;
    if v.is_empty() {
        return Err(Error::endpoint(
            "predict",
            EndpointError::Malformed("empty probability vector".into()),
        ));
    }
    let c = argmax(&v);
    Ok((c, v[c]))
}

/// Number of composites built and sent per `predict` call by the engine.
pub const ENGINE_CHUNK: usize = 256;

/// Probability of `class` for `count` lazily built images, evaluated in
/// index order and chunks of [`ENGINE_CHUNK`].
pub fn class_probabilities(
    model: &dyn Oracle,
    class: usize,
    count: usize,
    mut make: impl FnMut(usize) -> Result<Image>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    while start < count {
        let end = (start + ENGINE_CHUNK).min(count);
        let batch = (start..end).map(&mut make).collect::<Result<Vec<_>>>()?;
        let probs = model.predict(&batch)?;
        if probs.len() != batch.len() {
            return Err(Error::endpoint(
                "predict",
                EndpointError::Malformed(format!(
                    "{} vectors for {} images",
                    probs.len(),
                    batch.len()
                )),
            ));
        }
        for v in probs {
            let p = *v.get(class).ok_or_else(|| {
                Error::endpoint(
                    "predict",
                    EndpointError::Malformed(format!("class {class} missing from vector")),
                )
            })?;
            out.push(p);
        }
        start = end;
    }
    Ok(out)
}
