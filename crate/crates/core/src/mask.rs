//! Pixel-level primitives: images, binary masks, mask algebra and compositing.
//!
//! Layout is fixed to row-major, channel-last: the intensity of channel `c` at
//! pixel `(x, y)` lives at `(y * width + x) * channels + c`. Intensities are
//! normalized to `[0, 1]` at ingestion.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense image with normalized intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Ingestion(format!(
                "images must have 1 or 3 channels, got {channels}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Ingestion("image has zero area".into()));
        }
        if data.len() != width * height * channels {
            return Err(Error::Ingestion(format!(
                "expected {} intensities for {width}x{height}x{channels}, got {}",
                width * height * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Ingestion(format!(
                "intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Uniform image; `value` is clamped into `[0, 1]`.
    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            width,
            height,
            channels,
            vec![value.clamp(0.0, 1.0); width * height * channels],
        )
    }

    /// Builds an image from `f(x, y, channel)`; outputs are clamped into `[0, 1]`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(width, height, channels, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, channel: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + channel]
    }

    /// Channel-averaged intensity of a pixel, by flat pixel index.
    pub fn luminance(&self, pixel: usize) -> f32 {
        let base = pixel * self.channels;
        if self.channels == 1 {
            self.data[base]
        } else {
            self.data[base..base + self.channels].iter().sum::<f32>() / self.channels as f32
        }
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Row-major binary mask with a cached population count.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
    pixel_count: usize,
}

impl BinaryMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
            pixel_count: 0,
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
            pixel_count: width * height,
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::contract(format!(
                "mask of {width}x{height} needs {} bits, got {}",
                width * height,
                bits.len()
            )));
        }
        let pixel_count = bits.iter().filter(|b| **b).count();
        Ok(Self {
            width,
            height,
            bits,
            pixel_count,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        let pixel_count = bits.iter().filter(|b| **b).count();
        Self {
            width,
            height,
            bits,
            pixel_count,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn area(&self) -> usize {
        self.pixel_count
    }

    pub fn is_empty(&self) -> bool {
        self.pixel_count == 0
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        let idx = y * self.width + x;
        match (self.bits[idx], value) {
            (false, true) => self.pixel_count += 1,
            (true, false) => self.pixel_count -= 1,
            _ => {}
        }
        self.bits[idx] = value;
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn complement(&self) -> BinaryMask {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
            pixel_count: self.width * self.height - self.pixel_count,
        }
    }

    /// Keeps only the bits inside the inclusive box.
    pub fn clip_to_box(&self, bbox: BoundingBox) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |x, y| {
            self.get(x, y) && bbox.contains(x, y)
        })
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_dims(other)
            && self
                .bits
                .iter()
                .zip(&other.bits)
                .all(|(a, b)| !*a || *b)
    }
}

/// Inclusive axis-aligned pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BoundingBox {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Self> {
        if x1 > x2 || y1 > y2 {
            return Err(Error::contract(format!(
                "degenerate box ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x1..=self.x2).contains(&x) && (self.y1..=self.y2).contains(&y)
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x2 < width && self.y2 < height
    }
}

/// Per-channel Gaussian moments of a dataset, in normalized intensity units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl DatasetStats {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != std.len() {
            return Err(Error::contract(
                "dataset stats need one (mean, std) pair per channel",
            ));
        }
        if std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::contract(
                "dataset std must be finite and strictly positive",
            ));
        }
        Ok(Self { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }
}

pub fn area(mask: &BinaryMask) -> usize {
    mask.area()
}

fn check_dims(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "mask dimensions differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )))
    }
}

pub fn intersection_count(a: &BinaryMask, b: &BinaryMask) -> Result<usize> {
    check_dims(a, b)?;
    Ok(a.bits.iter().zip(&b.bits).filter(|(x, y)| **x && **y).count())
}

/// `|a ∩ b| / min(|a|, |b|)`: the share of the smaller mask covered by the
/// larger one. Zero when either mask is empty.
pub fn overlap_ratio(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = intersection_count(a, b)?;
    let smaller = a.area().min(b.area());
    if smaller == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / smaller as f64)
}

/// Intersection over union; zero when both masks are empty.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let inter = intersection_count(a, b)?;
    let union = a.area() + b.area() - inter;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Takes `original` where `keep` is set and `fill` everywhere else.
pub fn composite(original: &Image, keep: &BinaryMask, fill: &Image) -> Result<Image> {
    if !original.same_shape(fill) {
        return Err(Error::contract(format!(
            "fill is {}x{}x{}, original is {}x{}x{}",
            fill.width, fill.height, fill.channels, original.width, original.height, original.channels
        )));
    }
    if keep.width != original.width || keep.height != original.height {
        return Err(Error::contract(format!(
            "keep mask is {}x{}, image is {}x{}",
            keep.width, keep.height, original.width, original.height
        )));
    }
    let ch = original.channels;
    let mut data = fill.data.clone();
    for (pixel, _) in keep.bits.iter().enumerate().filter(|(_, b)| **b) {
        let range = pixel * ch..(pixel + 1) * ch;
        data[range.clone()].copy_from_slice(&original.data[range]);
    }
    Ok(Image {
        width: original.width,
        height: original.height,
        channels: ch,
        data,
    })
}

/// Bitwise OR of `masks`; an empty list yields the all-zero mask of the given size.
pub fn union(masks: &[BinaryMask], width: usize, height: usize) -> Result<BinaryMask> {
    let mut out = BinaryMask::empty(width, height);
    for m in masks {
        union_into(&mut out, m)?;
    }
    Ok(out)
}

/// In-place OR of `other` into `acc`.
pub fn union_into(acc: &mut BinaryMask, other: &BinaryMask) -> Result<()> {
    check_dims(acc, other)?;
    let mut added = 0;
    for (a, b) in acc.bits.iter_mut().zip(&other.bits) {
        if *b && !*a {
            *a = true;
            added += 1;
        }
    }
    acc.pixel_count += added;
    Ok(())
}

/// Tightest inclusive box around the set bits.
pub fn bounding_box(mask: &BinaryMask) -> Result<BoundingBox> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
    for (idx, _) in mask.bits.iter().enumerate().filter(|(_, b)| **b) {
        let (x, y) = (idx % mask.width, idx / mask.width);
        x1 = x1.min(x);
        y1 = y1.min(y);
        x2 = x2.max(x);
        y2 = y2.max(y);
    }
    Ok(BoundingBox { x1, y1, x2, y2 })
}
