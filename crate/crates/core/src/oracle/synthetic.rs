//! Deterministic stand-ins for the learned components.
//!
//! Scenes are speckled bright backgrounds with one dark ellipse. The
//! classifier depends only on the fraction `d` of pixels darker than a
//! threshold `t`:
//!
//! ```text
//! p(malignant) = 1 / (1 + exp(-slope * (d - bias)))
//! p(benign)    = 1 - p(malignant)
//! ```
//!
//! so the pixels that drive a prediction are known exactly. The segmenter
//! returns dark connected components, the heatmap guide a blurred darkness
//! map and the superpixel guide a regular grid ranked by mean darkness.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Capability, Oracle};
use crate::concepts::{HeatMap, SuperpixelSet};
use crate::error::{Error, Result};
use crate::mask::{BinaryMask, BoundingBox, Image};

pub const CLASS_NAMES: [&str; 2] = ["benign", "malignant"];
pub const BENIGN: usize = 0;
pub const MALIGNANT: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Benign => BENIGN,
            Label::Malignant => MALIGNANT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub semi_major: f64,
    pub semi_minor: f64,
    /// Radians, counter-clockwise from the x axis.
    pub rotation: f64,
}

impl Ellipse {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.rotation.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.semi_major).powi(2) + (v / self.semi_minor).powi(2) <= 1.0
    }

    pub fn eccentricity(&self) -> f64 {
        (1.0 - (self.semi_minor / self.semi_major).powi(2)).max(0.0).sqrt()
    }

    /// Pixels whose integer coordinates fall inside the ellipse.
    pub fn rasterize(&self, width: usize, height: usize) -> BinaryMask {
        BinaryMask::from_fn(width, height, |x, y| self.contains(x as f64, y as f64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub background_mean: f64,
    /// Multiplicative speckle: each pixel is scaled by a uniform draw from
    /// `[1 - speckle, 1 + speckle]`.
    pub speckle: f64,
    pub lesion_mean: f64,
    /// Semi-major axis range as a fraction of `min(width, height)`.
    pub semi_major: (f64, f64),
    /// Semi-minor / semi-major ratio range.
    pub axis_ratio: (f64, f64),
    pub eccentricity_threshold: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            background_mean: 0.7,
            speckle: 0.2,
            lesion_mean: 0.1,
            semi_major: (0.2, 0.3),
            axis_ratio: (0.6, 1.0),
            eccentricity_threshold: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: Image,
    pub ellipse: Ellipse,
    pub label: Label,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn ground_truth(&self) -> BinaryMask {
        self.ellipse
            .rasterize(self.image.width(), self.image.height())
    }
}

pub fn generate_scene(seed: u64, width: usize, height: usize, config: &SceneConfig) -> Result<SyntheticScene> {
    generate_scene_with_ellipse(seed, width, height, config, None)
}

/// Like [`generate_scene`], but with a caller-chosen ellipse when `ellipse`
/// is given. The ellipse must lie inside the image.
pub fn generate_scene_with_ellipse(
    seed: u64,
    width: usize,
    height: usize,
    config: &SceneConfig,
    ellipse: Option<Ellipse>,
) -> Result<SyntheticScene> {
    if width < 32 || height < 32 {
        return Err(Error::contract(format!(
            "synthetic scenes need at least 32x32 pixels, got {width}x{height}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = width.min(height) as f64;
    let drawn = {
        let a = side * rng.random_range(config.semi_major.0..=config.semi_major.1);
        let b = a * rng.random_range(config.axis_ratio.0..=config.axis_ratio.1);
        let margin = a + 1.0;
        let cx = rng.random_range(margin..=width as f64 - 1.0 - margin);
        let cy = rng.random_range(margin..=height as f64 - 1.0 - margin);
        let rotation = rng.random_range(0.0..std::f64::consts::PI);
        Ellipse {
            cx,
            cy,
            semi_major: a,
            semi_minor: b,
            rotation,
        }
    };
    let ellipse = ellipse.unwrap_or(drawn);
    let r = ellipse.semi_major.max(ellipse.semi_minor);
    if ellipse.cx - r < 0.0
        || ellipse.cy - r < 0.0
        || ellipse.cx + r > (width - 1) as f64
        || ellipse.cy + r > (height - 1) as f64
    {
        return Err(Error::contract("ellipse extends past the image bounds"));
    }
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let speckle = 1.0 + config.speckle * (2.0 * rng.random::<f64>() - 1.0);
            let base = if ellipse.contains(x as f64, y as f64) {
                config.lesion_mean
            } else {
                config.background_mean
            };
            data.push((base * speckle).clamp(0.0, 1.0) as f32);
        }
    }
    let label = if ellipse.eccentricity() > config.eccentricity_threshold {
        Label::Malignant
    } else {
        Label::Benign
    };
    Ok(SyntheticScene {
        image: Image::new(width, height, 1, data)?,
        ellipse,
        label,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Intensity below which a pixel counts as dark.
    pub dark_threshold: f32,
    pub slope: f64,
    pub bias: f64,
    /// Half-size of the window a background point prompt may grow into.
    pub background_window: usize,
    pub heatmap_radius: usize,
    /// Superpixel grid is `grid x grid` cells.
    pub grid: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dark_threshold: 0.2,
            slope: 80.0,
            bias: 0.06,
            background_window: 5,
            heatmap_radius: 2,
            grid: 4,
        }
    }
}

/// In-process classifier, segmenter and guides over [`SyntheticConfig`].
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    config: SyntheticConfig,
    capabilities: Vec<Capability>,
}

impl Default for SyntheticOracle {
    fn default() -> Self {
        Self::new(SyntheticConfig::default())
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl SyntheticOracle {
    pub fn new(config: SyntheticConfig) -> Self {
        Self {
            config,
            capabilities: Capability::ALL.to_vec(),
        }
    }

    /// Restricts the advertised capabilities; calls outside them fail.
    pub fn with_capabilities(mut self, capabilities: &[Capability]) -> Self {
        self.capabilities = capabilities.to_vec();
        self
    }

    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    fn check(&self, cap: Capability) -> Result<()> {
        if self.capabilities.contains(&cap) {
            Ok(())
        } else {
            Err(Error::endpoint(
                cap.method(),
                crate::error::EndpointError::MissingCapability(cap.method().to_string()),
            ))
        }
    }

    fn is_dark(&self, image: &Image, pixel: usize) -> bool {
        image.luminance(pixel) < self.config.dark_threshold
    }

    pub fn dark_fraction(&self, image: &Image) -> f64 {
        let dark = (0..image.pixel_count()).filter(|&p| self.is_dark(image, p)).count();
        dark as f64 / image.pixel_count() as f64
    }

    pub fn malignant_probability(&self, dark_fraction: f64) -> f64 {
        sigmoid(self.config.slope * (dark_fraction - self.config.bias))
    }

    /// 4-connected component of pixels sharing `pred`, seeded at `start`
    /// and confined to `window`.
    fn flood(
        &self,
        image: &Image,
        start: (usize, usize),
        window: BoundingBox,
        pred: impl Fn(usize) -> bool,
    ) -> BinaryMask {
        let (w, h) = (image.width(), image.height());
        let mut out = BinaryMask::empty(w, h);
        if !pred(start.1 * w + start.0) {
            return out;
        }
        let mut queue = VecDeque::from([start]);
        out.set(start.0, start.1, true);
        while let Some((x, y)) = queue.pop_front() {
            let neighbours = [
                (x.wrapping_sub(1), y),
                (x + 1, y),
                (x, y.wrapping_sub(1)),
                (x, y + 1),
            ];
            for (nx, ny) in neighbours {
                if nx < w && ny < h && window.contains(nx, ny) && !out.get(nx, ny) && pred(ny * w + nx) {
                    out.set(nx, ny, true);
                    queue.push_back((nx, ny));
                }
            }
        }
        out
    }

    fn whole(image: &Image) -> BoundingBox {
        BoundingBox {
            x1: 0,
            y1: 0,
            x2: image.width() - 1,
            y2: image.height() - 1,
        }
    }

    /// Darkness in `[0, 1]` per pixel: `max(0, t - I) / t`.
    fn darkness(&self, image: &Image) -> Vec<f64> {
        let t = self.config.dark_threshold as f64;
        (0..image.pixel_count())
            .map(|p| ((t - image.luminance(p) as f64).max(0.0) / t).min(1.0))
            .collect()
    }

    fn point_mask(&self, image: &Image, (x, y): (usize, usize)) -> BinaryMask {
        let p = y * image.width() + x;
        if self.is_dark(image, p) {
            self.flood(image, (x, y), Self::whole(image), |q| self.is_dark(image, q))
        } else {
            let r = self.config.background_window;
            let window = BoundingBox {
                x1: x.saturating_sub(r),
                y1: y.saturating_sub(r),
                x2: (x + r).min(image.width() - 1),
                y2: (y + r).min(image.height() - 1),
            };
            self.flood(image, (x, y), window, |q| !self.is_dark(image, q))
        }
    }

    fn box_mask(&self, image: &Image, bbox: BoundingBox) -> BinaryMask {
        let (w, h) = (image.width(), image.height());
        let mut seen = BinaryMask::empty(w, h);
        let mut best: Option<BinaryMask> = None;
        for y in bbox.y1..=bbox.y2 {
            for x in bbox.x1..=bbox.x2 {
                if seen.get(x, y) || !self.is_dark(image, y * w + x) {
                    continue;
                }
                let comp = self.flood(image, (x, y), Self::whole(image), |q| self.is_dark(image, q));
                crate::mask::union_into(&mut seen, &comp).expect("same dims");
                if best.as_ref().is_none_or(|b| comp.area() > b.area()) {
                    best = Some(comp);
                }
            }
        }
        best.map(|c| c.clip_to_box(bbox))
            .unwrap_or_else(|| BinaryMask::empty(w, h))
    }

    fn check_class(class: usize) -> Result<()> {
        if class < CLASS_NAMES.len() {
            Ok(())
        } else {
            Err(Error::contract(format!("class {class} out of range")))
        }
    }
}

impl Oracle for SyntheticOracle {
    fn capabilities(&self) -> Vec<Capability> {
        self.capabilities.clone()
    }

    fn predict(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        self.check(Capability::Predict)?;
        Ok(images
            .iter()
            .map(|img| {
                let p = self.malignant_probability(self.dark_fraction(img));
                vec![1.0 - p, p]
            })
            .collect())
    }

    fn segment_points(&self, image: &Image, points: &[(usize, usize)]) -> Result<Vec<BinaryMask>> {
        self.check(Capability::SegmentPoints)?;
        points
            .iter()
            .map(|&(x, y)| {
                if x >= image.width() || y >= image.height() {
                    return Err(Error::contract(format!("point ({x}, {y}) outside image")));
                }
                Ok(self.point_mask(image, (x, y)))
            })
            .collect()
    }

    fn segment_boxes(&self, image: &Image, boxes: &[BoundingBox]) -> Result<Vec<BinaryMask>> {
        self.check(Capability::SegmentBoxes)?;
        boxes
            .iter()
            .map(|b| {
                if !b.fits(image.width(), image.height()) {
                    return Err(Error::contract(format!("box {b:?} outside image")));
                }
                Ok(self.box_mask(image, *b))
            })
            .collect()
    }

    /// Box-blurred darkness for the malignant class, its complement for benign.
    fn heatmap(&self, image: &Image, target_class: usize) -> Result<HeatMap> {
        self.check(Capability::Heatmap)?;
        Self::check_class(target_class)?;
        let (w, h) = (image.width(), image.height());
        let dark = self.darkness(image);
        let r = self.config.heatmap_radius as isize;
        let mut scores = Vec::with_capacity(w * h);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut sum, mut count) = (0.0, 0usize);
                for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                    for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                        sum += dark[yy as usize * w + xx as usize];
                        count += 1;
                    }
                }
                let v = sum / count as f64;
                scores.push(if target_class == MALIGNANT { v } else { 1.0 - v } as f32);
            }
        }
        HeatMap::new(w, h, scores)
    }

    fn superpixels(&self, image: &Image, k: usize) -> Result<SuperpixelSet> {
        self.check(Capability::Superpixels)?;
        let (w, h) = (image.width(), image.height());
        let g = self.config.grid.clamp(1, w.min(h));
        let labels: Vec<u32> = (0..w * h)
            .map(|p| {
                let (x, y) = (p % w, p / w);
                ((y * g / h) * g + x * g / w) as u32
            })
            .collect();
        let dark = self.darkness(image);
        let mut sums = vec![(0.0f64, 0usize); g * g];
        for (p, l) in labels.iter().enumerate() {
            sums[*l as usize].0 += dark[p];
            sums[*l as usize].1 += 1;
        }
        let mut ranked: Vec<(f64, u32)> = sums
            .iter()
            .enumerate()
            .map(|(id, (s, n))| (s / *n as f64, id as u32))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let ranking = ranked.into_iter().take(k).map(|(_, id)| id).collect();
        SuperpixelSet::new(w, h, labels, Some(ranking))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask;

    fn scene(seed: u64) -> SyntheticScene {
        generate_scene(seed, 64, 64, &SceneConfig::default()).unwrap()
    }

    /// Independent component oracle: grow a label set by repeated sweeps
    /// until it stops changing.
    fn sweep_component(image: &Image, t: f32, start: (usize, usize), window: BoundingBox, dark: bool) -> BinaryMask {
        let (w, h) = (image.width(), image.height());
        let ok = |x: usize, y: usize| window.contains(x, y) && ((image.get(x, y, 0) < t) == dark);
        let mut m = BinaryMask::empty(w, h);
        if !ok(start.0, start.1) {
            return m;
        }
        m.set(start.0, start.1, true);
        loop {
            let mut changed = false;
            for y in 0..h {
                for x in 0..w {
                    if m.get(x, y) || !ok(x, y) {
                        continue;
                    }
                    let touch = (x > 0 && m.get(x - 1, y))
                        || (x + 1 < w && m.get(x + 1, y))
                        || (y > 0 && m.get(x, y - 1))
                        || (y + 1 < h && m.get(x, y + 1));
                    if touch {
                        m.set(x, y, true);
                        changed = true;
                    }
                }
            }
            if !changed {
                return m;
            }
        }
    }

    #[test]
    fn scenes_are_deterministic_and_dark_inside() {
        let a = scene(11);
        assert_eq!(a, scene(11));
        assert_ne!(a.image, scene(12).image);
        let gt = a.ground_truth();
        let (mut inside, mut outside) = ((0.0, 0), (0.0, 0));
        for p in 0..a.image.pixel_count() {
            let v = a.image.data()[p] as f64;
            if gt.bits()[p] {
                inside = (inside.0 + v, inside.1 + 1);
            } else {
                outside = (outside.0 + v, outside.1 + 1);
            }
        }
        assert!(inside.0 / inside.1 as f64 > 0.0);
        assert!(inside.0 / (inside.1 as f64) < outside.0 / outside.1 as f64);
    }

    #[test]
    fn circle_is_benign() {
        let circle = Ellipse {
            cx: 32.0,
            cy: 32.0,
            semi_major: 10.0,
            semi_minor: 10.0,
            rotation: 0.3,
        };
        assert_eq!(circle.eccentricity(), 0.0);
        let s = generate_scene_with_ellipse(1, 64, 64, &SceneConfig::default(), Some(circle)).unwrap();
        assert_eq!(s.label, Label::Benign);
        let flat = Ellipse {
            semi_minor: 4.0,
            ..circle
        };
        let s = generate_scene_with_ellipse(1, 64, 64, &SceneConfig::default(), Some(flat)).unwrap();
        assert_eq!(s.label, Label::Malignant);
    }

    #[test]
    fn scene_preconditions() {
        assert!(generate_scene(0, 31, 64, &SceneConfig::default()).is_err());
        let off = Ellipse {
            cx: 3.0,
            cy: 32.0,
            semi_major: 10.0,
            semi_minor: 5.0,
            rotation: 0.0,
        };
        assert!(generate_scene_with_ellipse(0, 64, 64, &SceneConfig::default(), Some(off)).is_err());
    }

    #[test]
    fn classifier_matches_closed_form() {
        let o = SyntheticOracle::default();
        let c = o.config().clone();
        let clear = Image::filled(64, 64, 1, 0.7).unwrap();
        let p = o.predict(&[clear]).unwrap();
        let expect_mal = 1.0 / (1.0 + (c.slope * c.bias).exp());
        assert!((p[0][1] - expect_mal).abs() < 1e-15);
        assert!(p[0][0] >= 0.95);

        let s = scene(5);
        let dark = s.image.data().iter().filter(|v| **v < c.dark_threshold).count() as f64 / 4096.0;
        let p = o.predict(&[s.image.clone(), s.image.clone()]).unwrap();
        assert_eq!(p[0], p[1]);
        let expect = 1.0 / (1.0 + (-c.slope * (dark - c.bias)).exp());
        assert!((p[0][1] - expect).abs() < 1e-15);
    }

    #[test]
    fn probability_vectors_sum_to_one() {
        let o = SyntheticOracle::default();
        let images: Vec<Image> = (0..100).map(|s| scene(s).image).collect();
        for v in o.predict(&images).unwrap() {
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(v.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn point_segmentation_matches_sweep_oracle() {
        let o = SyntheticOracle::default();
        let t = o.config().dark_threshold;
        let s = scene(21);
        let (cx, cy) = (s.ellipse.cx.round() as usize, s.ellipse.cy.round() as usize);
        let whole = BoundingBox { x1: 0, y1: 0, x2: 63, y2: 63 };
        let masks = o.segment_points(&s.image, &[(cx, cy), (cx + 1, cy)]).unwrap();
        let expect = sweep_component(&s.image, t, (cx, cy), whole, true);
        assert_eq!(masks[0], expect);
        assert_eq!(masks[0], masks[1]);
        assert_eq!(masks[0], s.ground_truth());

        // Background prompt: bright component clipped to the window.
        let bg = (1, 1);
        assert!(!s.ground_truth().get(1, 1));
        let r = o.config().background_window;
        let window = BoundingBox { x1: 0, y1: 0, x2: 1 + r, y2: 1 + r };
        let m = o.segment_points(&s.image, &[bg]).unwrap();
        assert_eq!(m[0], sweep_component(&s.image, t, bg, window, false));
    }

    #[test]
    fn box_segmentation() {
        let o = SyntheticOracle::default();
        let s = scene(33);
        let gt = s.ground_truth();
        let tight = mask::bounding_box(&gt).unwrap();
        let m = &o.segment_boxes(&s.image, &[tight]).unwrap()[0];
        assert!(mask::iou(m, &gt).unwrap() >= 0.8);

        // Pick a corner box that misses the ellipse.
        let corners = [
            BoundingBox { x1: 0, y1: 0, x2: 3, y2: 3 },
            BoundingBox { x1: 60, y1: 60, x2: 63, y2: 63 },
        ];
        let empty = corners.iter().find(|b| !(b.x1..=b.x2).any(|x| (b.y1..=b.y2).any(|y| gt.get(x, y)))).unwrap();
        assert!(o.segment_boxes(&s.image, &[*empty]).unwrap()[0].is_empty());

        let (cx, cy) = (s.ellipse.cx as usize, s.ellipse.cy as usize);
        let outer = BoundingBox { x1: cx - 6, y1: cy - 6, x2: cx + 6, y2: cy + 6 };
        let inner = BoundingBox { x1: cx - 2, y1: cy - 3, x2: cx + 4, y2: cy + 1 };
        let ms = o.segment_boxes(&s.image, &[inner, outer]).unwrap();
        assert!(!ms[0].is_empty());
        assert!(ms[0].is_subset_of(&ms[1]));
    }

    #[test]
    fn heatmap_contract() {
        let o = SyntheticOracle::default();
        for seed in 0..100 {
            let s = scene(seed);
            let map = o.heatmap(&s.image, MALIGNANT).unwrap();
            assert_eq!((map.width(), map.height()), (64, 64));
            let best = (0..4096).max_by(|a, b| map.scores()[*a].total_cmp(&map.scores()[*b]).then(b.cmp(a))).unwrap();
            assert!(s.ground_truth().bits()[best], "seed {seed}");
        }
        for v in [0.7, 0.1] {
            let uniform = Image::filled(40, 33, 1, v).unwrap();
            let map = o.heatmap(&uniform, MALIGNANT).unwrap();
            assert!(map.scores().iter().all(|s| *s == map.scores()[0]));
        }
        assert!(o.heatmap(&scene(0).image, 2).is_err());
    }

    #[test]
    fn superpixel_grid() {
        let o = SyntheticOracle::default();
        let s = scene(3);
        let sp = o.superpixels(&s.image, 16).unwrap();
        assert_eq!(sp.region_ids().len(), 16);
        for id in sp.region_ids() {
            assert_eq!(sp.region_mask(*id).area(), 256);
        }
        assert_eq!(sp.labels().len(), 4096);
        assert_eq!(o.superpixels(&s.image, 3).unwrap().ranking().unwrap().len(), 3);

        // Centered lesion: the ellipse center sits in the middle of cell (1, 1).
        let e = Ellipse { cx: 24.0, cy: 24.0, semi_major: 6.0, semi_minor: 4.0, rotation: 0.0 };
        let s = generate_scene_with_ellipse(9, 64, 64, &SceneConfig::default(), Some(e)).unwrap();
        let sp = o.superpixels(&s.image, 1).unwrap();
        let top = sp.ranking().unwrap()[0];
        assert!(sp.region_mask(top).get(24, 24));
    }

    #[test]
    fn restricted_capabilities_fail() {
        let o = SyntheticOracle::default().with_capabilities(&[Capability::Predict]);
        assert!(o.heatmap(&scene(0).image, 1).is_err());
        assert!(o.predict(&[scene(0).image]).is_ok());
    }
}
