//! Insertion and deletion curves, their AUCs, and size-weighted scores.
//!
//! Curves step over explanation units: after `i` of `m` units the x
//! coordinate is `i / m`. Insertion starts from pure baseline fill and
//! reveals the accumulated units; deletion starts from the original image and
//! replaces the accumulated units with the same fill. Both weighted scores are
//! scaled by `1 − P_s / P_o`, where `P_s` is the mean pixel count of the
//! accumulation images and `P_o` the image pixel count.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{self, BinaryMask, Image};
use crate::oracle::{self, Oracle};

/// Explanation units in evaluation order, most important first.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplanationSequence {
    units: Vec<BinaryMask>,
    source_method: String,
}

impl ExplanationSequence {
    pub fn new(units: Vec<BinaryMask>, source_method: impl Into<String>) -> Result<Self> {
        let Some(first) = units.first() else {
            return Err(Error::contract("an explanation sequence needs at least one unit"));
        };
        if units.iter().any(|u| !u.same_dims(first)) {
            return Err(Error::contract("explanation units differ in size"));
        }
        Ok(Self {
            units,
            source_method: source_method.into(),
        })
    }

    pub fn units(&self) -> &[BinaryMask] {
        &self.units
    }

    pub fn source_method(&self) -> &str {
        &self.source_method
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// `E_1 ..= E_m`, where `E_i` is the union of the first `i` units.
    pub fn accumulation_images(&self) -> Vec<BinaryMask> {
        let mut acc = BinaryMask::empty(self.units[0].width(), self.units[0].height());
        self.units
            .iter()
            .map(|u| {
                mask::union_into(&mut acc, u).expect("dims checked at construction");
                acc.clone()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Insertion,
    Deletion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithCurve {
    pub direction: Direction,
    /// `(fraction of units, target-class probability)`.
    pub points: Vec<(f64, f64)>,
}

impl FaithCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,probability\n");
        for (x, y) in &self.points {
            out.push_str(&format!("{x},{y}\n"));
        }
        out
    }
}

fn check_image(image: &Image, seq: &ExplanationSequence) -> Result<()> {
    let u = &seq.units[0];
    if u.width() != image.width() || u.height() != image.height() {
        return Err(Error::contract(format!(
            "units are {}x{}, image is {}x{}",
            u.width(),
            u.height(),
            image.width(),
            image.height()
        )));
    }
    Ok(())
}

fn curve(
    direction: Direction,
    image: &Image,
    seq: &ExplanationSequence,
    model: &dyn Oracle,
    target_class: usize,
    fill: &Image,
) -> Result<FaithCurve> {
    check_image(image, seq)?;
    let m = seq.len();
    let acc = seq.accumulation_images();
    let (w, h) = (image.width(), image.height());
    let probs = oracle::class_probabilities(model, target_class, m + 1, |step| {
        let keep = match (direction, step) {
            (Direction::Insertion, 0) => BinaryMask::empty(w, h),
            (Direction::Insertion, i) => acc[i - 1].clone(),
            (Direction::Deletion, 0) => BinaryMask::full(w, h),
            (Direction::Deletion, i) => acc[i - 1].complement(),
        };
        mask::composite(image, &keep, fill)
    })?;
    Ok(FaithCurve {
        direction,
        points: probs
            .into_iter()
            .enumerate()
            .map(|(i, p)| (i as f64 / m as f64, p))
            .collect(),
    })
}

pub fn insertion_curve(
    image: &Image,
    seq: &ExplanationSequence,
    model: &dyn Oracle,
    target_class: usize,
    fill: &Image,
) -> Result<FaithCurve> {
    curve(Direction::Insertion, image, seq, model, target_class, fill)
}

pub fn deletion_curve(
    image: &Image,
    seq: &ExplanationSequence,
    model: &dyn Oracle,
    target_class: usize,
    fill: &Image,
) -> Result<FaithCurve> {
    curve(Direction::Deletion, image, seq, model, target_class, fill)
}

/// Trapezoidal area under the curve.
pub fn auc(curve: &FaithCurve) -> f64 {
    curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

pub fn accumulation_pixel_average(seq: &ExplanationSequence) -> f64 {
    let acc = seq.accumulation_images();
    acc.iter().map(|e| e.area() as f64).sum::<f64>() / acc.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedScores {
    pub insertion_w: f64,
    pub deletion_w: f64,
    pub effect_score: f64,
}

pub fn weighted_report(insertion: f64, deletion: f64, p_s: f64, p_o: f64) -> Result<WeightedScores> {
    if !p_o.is_finite() || p_o <= 0.0 {
        return Err(Error::contract(format!("image pixel count {p_o} must be positive")));
    }
    if !(0.0..=p_o).contains(&p_s) {
        return Err(Error::contract(format!(
            "average explanation size {p_s} outside [0, {p_o}]"
        )));
    }
    if !(0.0..=1.0).contains(&insertion) || !(0.0..=1.0).contains(&deletion) {
        return Err(Error::contract(format!(
            "AUCs must lie in [0, 1]: insertion {insertion}, deletion {deletion}"
        )));
    }
    let weight = 1.0 - p_s / p_o;
    let insertion_w = weight * insertion;
    let deletion_w = weight * (1.0 - deletion);
    Ok(WeightedScores {
        insertion_w,
        deletion_w,
        effect_score: (insertion_w + deletion_w) / 2.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub insertion: f64,
    pub deletion: f64,
    pub p_s: f64,
    pub p_o: f64,
    pub insertion_w: f64,
    pub deletion_w: f64,
    pub effect_score: f64,
    pub insertion_curve: FaithCurve,
    pub deletion_curve: FaithCurve,
}

impl FaithfulnessReport {
    pub fn from_curves(insertion_curve: FaithCurve, deletion_curve: FaithCurve, p_s: f64, p_o: f64) -> Result<Self> {
        // Probabilities from the oracle are in [0, 1]; clamp away rounding residue.
        let insertion = auc(&insertion_curve).clamp(0.0, 1.0);
        let deletion = auc(&deletion_curve).clamp(0.0, 1.0);
        let w = weighted_report(insertion, deletion, p_s, p_o)?;
        Ok(Self {
            insertion,
            deletion,
            p_s,
            p_o,
            insertion_w: w.insertion_w,
            deletion_w: w.deletion_w,
            effect_score: w.effect_score,
            insertion_curve,
            deletion_curve,
        })
    }
}

/// Both curves plus the weighted scores for one explanation.
pub fn evaluate(
    image: &Image,
    seq: &ExplanationSequence,
    model: &dyn Oracle,
    target_class: usize,
    fill: &Image,
) -> Result<FaithfulnessReport> {
    let ins = insertion_curve(image, seq, model, target_class, fill)?;
    let del = deletion_curve(image, seq, model, target_class, fill)?;
    FaithfulnessReport::from_curves(
        ins,
        del,
        accumulation_pixel_average(seq),
        image.pixel_count() as f64,
    )
}
