use lce_core::concepts::{self, ConceptMask, ConceptSet, DiscoveryConfig, HeatMap, Prompt, Provenance, SuperpixelSet};
use lce_core::faithfulness::{self, ExplanationSequence};
use lce_core::harness::{self, run_dir, Dataset, RunConfig, UnitsSource};
use lce_core::mask::{self, BinaryMask, BoundingBox, DatasetStats, Image};
use lce_core::oracle::synthetic::{generate_scene, SceneConfig, SyntheticOracle, SyntheticScene, CLASS_NAMES, MALIGNANT};
use lce_core::shapley::{self, Coalition};
use lce_core::{Capability, Error, Oracle, Result};

type PredictFn = Box<dyn Fn(&Image) -> Vec<f64> + Send + Sync>;
type PointFn = Box<dyn Fn(&Image, (usize, usize)) -> BinaryMask + Send + Sync>;
type BoxFn = Box<dyn Fn(&Image, BoundingBox) -> BinaryMask + Send + Sync>;

/// An oracle assembled from closures; unset parts fall back to the
/// synthetic backends.
struct Stub {
    predict: Option<PredictFn>,
    point: Option<PointFn>,
    boxes: Option<BoxFn>,
    heatmap: Option<HeatMap>,
    superpixels: Option<SuperpixelSet>,
    inner: SyntheticOracle,
}

impl Stub {
    fn new() -> Self {
        Self {
            predict: None,
            point: None,
            boxes: None,
            heatmap: None,
            superpixels: None,
            inner: SyntheticOracle::default(),
        }
    }

    fn predicting(f: impl Fn(&Image) -> Vec<f64> + Send + Sync + 'static) -> Self {
        Self {
            predict: Some(Box::new(f)),
            ..Self::new()
        }
    }
}

impl Oracle for Stub {
    fn capabilities(&self) -> Vec<Capability> {
        Capability::ALL.to_vec()
    }

    fn predict(&self, images: &[Image]) -> Result<Vec<Vec<f64>>> {
        match &self.predict {
            Some(f) => Ok(images.iter().map(f).collect()),
            None => self.inner.predict(images),
        }
    }

    fn segment_points(&self, image: &Image, points: &[(usize, usize)]) -> Result<Vec<BinaryMask>> {
        match &self.point {
            Some(f) => Ok(points.iter().map(|p| f(image, *p)).collect()),
            None => self.inner.segment_points(image, points),
        }
    }

    fn segment_boxes(&self, image: &Image, boxes: &[BoundingBox]) -> Result<Vec<BinaryMask>> {
        match &self.boxes {
            Some(f) => Ok(boxes.iter().map(|b| f(image, *b)).collect()),
            None => self.inner.segment_boxes(image, boxes),
        }
    }

    fn heatmap(&self, image: &Image, target_class: usize) -> Result<HeatMap> {
        match &self.heatmap {
            Some(m) => Ok(m.clone()),
            None => self.inner.heatmap(image, target_class),
        }
    }

    fn superpixels(&self, image: &Image, k: usize) -> Result<SuperpixelSet> {
        match &self.superpixels {
            Some(s) => Ok(s.clone()),
            None => self.inner.superpixels(image, k),
        }
    }
}

fn scene(seed: u64) -> SyntheticScene {
    generate_scene(seed, 64, 64, &SceneConfig::default()).unwrap()
}

fn tiny_stats() -> DatasetStats {
    DatasetStats::new(vec![0.0], vec![1e-9]).unwrap()
}

fn zero_fill(w: usize, h: usize) -> Image {
    Image::filled(w, h, 1, 0.0).unwrap()
}

fn concept(id: u32, mask: BinaryMask) -> ConceptMask {
    ConceptMask {
        id,
        mask,
        provenance: Provenance::HeatmapPoint,
        prompt: Prompt::Point([0, 0]),
    }
}

/// One-pixel concepts on an `n`×1 white image; pixel `i` is player `i`.
fn pixel_players(n: usize) -> (Image, ConceptSet) {
    let image = Image::filled(n, 1, 1, 1.0).unwrap();
    let set = ConceptSet::new(
        (0..n)
            .map(|i| concept(i as u32, BinaryMask::from_fn(n, 1, |x, _| x == i)))
            .collect(),
    )
    .unwrap();
    (image, set)
}

/// A model whose class-0 probability is `table[coalition]`, reading the
/// coalition off the composite's bright pixels.
fn table_model(table: Vec<f64>) -> Stub {
    Stub::predicting(move |img| {
        let bits = (0..img.width()).filter(|&x| img.get(x, 0, 0) > 0.5).fold(0usize, |b, x| b | (1 << x));
        vec![table[bits], 1.0 - table[bits]]
    })
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn permutation_shapley(n: usize, u: &[f64]) -> Vec<f64> {
    let perms = permutations(n);
    let mut phi = vec![0.0; n];
    for p in &perms {
        let mut s = 0usize;
        for &i in p {
            phi[i] += u[s | (1 << i)] - u[s];
            s |= 1 << i;
        }
    }
    phi.iter().map(|v| v / perms.len() as f64).collect()
}

#[test]
fn discovery_finds_the_lesion() {
    let s = scene(3);
    let oracle = SyntheticOracle::default();
    let cfg = DiscoveryConfig {
        k: 3,
        ..DiscoveryConfig::default()
    };
    let set = concepts::discover_concepts(&s.image, &oracle, &oracle, &cfg).unwrap();
    let gt = s.ground_truth();
    assert!(set.concepts().iter().any(|c| mask::iou(&c.mask, &gt).unwrap() >= 0.5));
}

#[test]
fn identical_masks_collapse_to_one_concept() {
    let s = scene(4);
    let blob = BinaryMask::from_fn(64, 64, |x, y| x < 20 && y < 20);
    let (a, b) = (blob.clone(), blob.clone());
    let seg = Stub {
        point: Some(Box::new(move |_, _| a.clone())),
        boxes: Some(Box::new(move |_, _| b.clone())),
        ..Stub::new()
    };
    let set = concepts::discover_concepts(&s.image, &SyntheticOracle::default(), &seg, &DiscoveryConfig::default()).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.concepts()[0].mask, blob);
}

#[test]
fn disjoint_prompts_give_one_concept_each() {
    // Scores fall in raster order, so point quantiles 5/15/30% of 900 pixels
    // land on rows 1, 4 and 8; the two superpixel bands end on rows 14 and 29.
    let (w, h) = (30, 30);
    let heat = HeatMap::new(w, h, (0..w * h).map(|i| -(i as f32)).collect()).unwrap();
    let labels = (0..w * h).map(|i| if i / w < 15 { 0 } else { 1 }).collect();
    let model = Stub {
        heatmap: Some(heat),
        superpixels: Some(SuperpixelSet::new(w, h, labels, Some(vec![1, 0])).unwrap()),
        ..Stub::new()
    };
    let row = move |r: usize| BinaryMask::from_fn(w, h, |_, y| y == r);
    let seg = Stub {
        point: Some(Box::new(move |_, (_, y)| row(y))),
        boxes: Some(Box::new(move |_, b| row(b.y2))),
        ..Stub::new()
    };
    let image = Image::filled(w, h, 1, 0.5).unwrap();
    let set = concepts::discover_concepts(&image, &model, &seg, &DiscoveryConfig::default()).unwrap();
    assert_eq!(set.len(), 5);
    let rows: Vec<usize> = set.concepts().iter().map(|c| mask::bounding_box(&c.mask).unwrap().y1).collect();
    assert_eq!(rows, vec![1, 4, 8, 29, 14]);
    let kinds: Vec<Provenance> = set.concepts().iter().map(|c| c.provenance).collect();
    assert_eq!(kinds[..3], [Provenance::HeatmapPoint; 3]);
    assert_eq!(kinds[3..], [Provenance::SuperpixelBox; 2]);
}

#[test]
fn all_empty_masks_is_an_error() {
    let seg = Stub {
        point: Some(Box::new(|img, _| BinaryMask::empty(img.width(), img.height()))),
        boxes: Some(Box::new(|img, _| BinaryMask::empty(img.width(), img.height()))),
        ..Stub::new()
    };
    let s = scene(5);
    let err = concepts::discover_concepts(&s.image, &SyntheticOracle::default(), &seg, &DiscoveryConfig::default());
    assert!(matches!(err, Err(Error::EmptyConceptSet)));
}

#[test]
fn full_coalition_covering_everything_is_the_original() {
    let s = scene(6);
    let oracle = SyntheticOracle::default();
    let halves = ConceptSet::new(vec![
        concept(0, BinaryMask::from_fn(64, 64, |x, _| x < 32)),
        concept(1, BinaryMask::from_fn(64, 64, |x, _| x >= 32)),
    ])
    .unwrap();
    let (target, p) = lce_core::oracle::target_class(&oracle, &s.image).unwrap();
    let fill = shapley::baseline_fill(&DatasetStats::new(vec![0.5], vec![0.1]).unwrap(), 64, 64, 1, 1).unwrap();
    let u = shapley::utility(&s.image, &halves, Coalition::full(2), &oracle, target, &fill).unwrap();
    assert_eq!(u, p);
}

#[test]
fn empty_coalition_is_the_fill_score() {
    let s = scene(7);
    let oracle = SyntheticOracle::default();
    let gt = s.ground_truth();
    let set = ConceptSet::new(vec![concept(0, gt.clone())]).unwrap();
    let fill = shapley::baseline_fill(&DatasetStats::new(vec![0.6], vec![0.1]).unwrap(), 64, 64, 1, 2).unwrap();
    let u = shapley::utility(&s.image, &set, Coalition::empty(), &oracle, MALIGNANT, &fill).unwrap();
    // Closed form: the fill's dark fraction through the logistic rule.
    let cfg = oracle.config();
    let dark = fill.data().iter().filter(|v| **v < cfg.dark_threshold).count() as f64 / 4096.0;
    let expected = 1.0 / (1.0 + (-cfg.slope * (dark - cfg.bias)).exp());
    assert!((u - expected).abs() < 1e-12, "{u} vs {expected}");
}

#[test]
fn adding_the_lesion_never_lowers_malignancy() {
    let oracle = SyntheticOracle::default();
    let fill = shapley::baseline_fill(&DatasetStats::new(vec![0.6], vec![0.1]).unwrap(), 64, 64, 1, 3).unwrap();
    for seed in 0..5 {
        let s = scene(seed);
        let gt = s.ground_truth();
        let others = [
            BinaryMask::from_fn(64, 64, |x, y| x < 10 && y < 10),
            BinaryMask::from_fn(64, 64, |x, y| x > 50 && y > 50),
            BinaryMask::from_fn(64, 64, |x, _| x == 32),
        ];
        let mut all = vec![concept(0, gt)];
        all.extend(others.into_iter().enumerate().map(|(i, m)| concept(i as u32 + 1, m)));
        let set = ConceptSet::new(all).unwrap();
        for bits in 0..16u32 {
            let c = Coalition::new(bits, 4).unwrap();
            if c.contains(0) {
                continue;
            }
            let without = shapley::utility(&s.image, &set, c, &oracle, MALIGNANT, &fill).unwrap();
            let with = shapley::utility(&s.image, &set, c.with(0), &oracle, MALIGNANT, &fill).unwrap();
            assert!(with >= without, "seed {seed} coalition {bits:04b}");
        }
    }
}

#[test]
fn tabulated_three_players_match_permutations() {
    let table = vec![0.1, 0.25, 0.3, 0.55, 0.2, 0.6, 0.45, 0.9];
    let (image, set) = pixel_players(3);
    let r = shapley::exact_shapley(&image, &set, &table_model(table.clone()), &tiny_stats(), 0).unwrap();
    let expected = permutation_shapley(3, &table);
    for (p, e) in r.phis.iter().zip(&expected) {
        assert!((p.phi - e).abs() < 1e-12);
    }
    assert_eq!(r.u_empty, 0.1);
    assert_eq!(r.u_full, 0.9);
    assert!((r.phi_sum() - 0.8).abs() < 1e-12);
}

#[test]
fn symmetric_players_share_credit() {
    // Players 1 and 2 are interchangeable.
    let table = vec![0.1, 0.3, 0.2, 0.5, 0.2, 0.5, 0.4, 0.8];
    let (image, set) = pixel_players(3);
    let r = shapley::exact_shapley(&image, &set, &table_model(table), &tiny_stats(), 0).unwrap();
    assert!((r.phis[1].phi - r.phis[2].phi).abs() < 1e-12);
}

#[test]
fn rescaled_utilities_keep_the_ranking() {
    let table = vec![0.1, 0.25, 0.3, 0.55, 0.2, 0.6, 0.45, 0.9];
    let (image, set) = pixel_players(3);
    let base = shapley::exact_shapley(&image, &set, &table_model(table.clone()), &tiny_stats(), 0).unwrap();
    let base_rank = shapley::select_explanation(&base, &set).unwrap().ranked_concepts;
    // Factors keep class 0 the argmax of the original image.
    for c in [0.7, 0.9, 1.1] {
        let scaled: Vec<f64> = table.iter().map(|u| u * c).collect();
        let r = shapley::exact_shapley(&image, &set, &table_model(scaled), &tiny_stats(), 0).unwrap();
        assert_eq!(shapley::select_explanation(&r, &set).unwrap().ranked_concepts, base_rank);
    }
}

#[test]
fn too_many_concepts_are_refused() {
    let (image, set) = pixel_players(17);
    let err = shapley::exact_shapley(&image, &set, &table_model(vec![0.5; 1 << 17]), &tiny_stats(), 0);
    assert!(matches!(err, Err(Error::TooManyConcepts { count: 17, max: 16 })));
}

#[test]
fn constant_model_curves() {
    let model = Stub::predicting(|_| vec![1.0, 0.0]);
    let image = Image::filled(8, 8, 1, 0.5).unwrap();
    let units = vec![
        BinaryMask::from_fn(8, 8, |x, _| x < 4),
        BinaryMask::from_fn(8, 8, |x, _| x >= 4),
    ];
    let seq = ExplanationSequence::new(units, "t").unwrap();
    let fill = zero_fill(8, 8);
    let ins = faithfulness::insertion_curve(&image, &seq, &model, 0, &fill).unwrap();
    let del = faithfulness::deletion_curve(&image, &seq, &model, 0, &fill).unwrap();
    assert_eq!(faithfulness::auc(&ins), 1.0);
    assert_eq!(faithfulness::auc(&del), 1.0);
    assert_eq!(ins.points.iter().map(|p| p.0).collect::<Vec<_>>(), vec![0.0, 0.5, 1.0]);
}

#[test]
fn whole_image_unit_endpoints() {
    let s = scene(8);
    let oracle = SyntheticOracle::default();
    let (target, p) = lce_core::oracle::target_class(&oracle, &s.image).unwrap();
    let fill = shapley::baseline_fill(&DatasetStats::new(vec![0.6], vec![0.1]).unwrap(), 64, 64, 1, 4).unwrap();
    let u_empty = oracle.predict(std::slice::from_ref(&fill)).unwrap()[0][target];
    let seq = ExplanationSequence::new(vec![BinaryMask::full(64, 64)], "t").unwrap();
    let ins = faithfulness::insertion_curve(&s.image, &seq, &oracle, target, &fill).unwrap();
    assert_eq!(ins.points, vec![(0.0, u_empty), (1.0, p)]);
    let del = faithfulness::deletion_curve(&s.image, &seq, &oracle, target, &fill).unwrap();
    assert_eq!(del.points.last().unwrap().1, u_empty);
}

#[test]
fn lesion_first_curves() {
    let oracle = SyntheticOracle::default();
    let fill = shapley::baseline_fill(&DatasetStats::new(vec![0.6], vec![0.1]).unwrap(), 64, 64, 1, 5).unwrap();
    for seed in 0..10 {
        let s = scene(seed);
        let gt = s.ground_truth();
        let rest = gt.complement();
        let seq = ExplanationSequence::new(vec![gt, rest], "t").unwrap();
        let p = oracle.predict(std::slice::from_ref(&s.image)).unwrap()[0][MALIGNANT];
        let ins = faithfulness::insertion_curve(&s.image, &seq, &oracle, MALIGNANT, &fill).unwrap();
        assert!((ins.points[1].1 - p).abs() <= 0.05, "seed {seed}: {} vs {p}", ins.points[1].1);
        let del = faithfulness::deletion_curve(&s.image, &seq, &oracle, MALIGNANT, &fill).unwrap();
        assert!(del.points[1].1 <= del.points[0].1);
    }
}

fn synthetic_dataset(n: u64) -> (Dataset, Vec<SyntheticScene>) {
    let scenes: Vec<_> = (0..n).map(scene).collect();
    let ds = Dataset::from_images(
        CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        scenes
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("scene_{i:04}.png"), s.image.clone(), s.label.class_index()))
            .collect(),
    );
    (ds, scenes)
}

fn synthetic() -> Result<Box<dyn Oracle>> {
    Ok(Box::new(SyntheticOracle::default()))
}

fn config(workers: usize) -> RunConfig {
    RunConfig {
        workers,
        ..RunConfig::default()
    }
}

#[test]
fn twenty_scenes_run_cleanly_and_reproducibly() {
    let (ds, _) = synthetic_dataset(20);
    let a = harness::run_lce(&ds, &synthetic, &synthetic, &config(4), 11).unwrap();
    assert_eq!(a.reports().len(), 20);
    assert!(a.failures().is_empty());
    let b = harness::run_lce(&ds, &synthetic, &synthetic, &config(1), 11).unwrap();
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let (da, db) = (dir.path().join("a"), dir.path().join("b"));
    let meta = run_dir::RunMeta::default();
    run_dir::write_run(&da, &a, &meta).unwrap();
    run_dir::write_run(&db, &b, &meta).unwrap();
    let csv_a = std::fs::read(da.join("reports.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read(db.join("reports.csv")).unwrap());
    assert_eq!(
        std::fs::read(da.join("images/0007/insertion.csv")).unwrap(),
        std::fs::read(db.join("images/0007/insertion.csv")).unwrap()
    );
    let c = harness::run_lce(&ds, &synthetic, &synthetic, &config(2), 12).unwrap();
    assert_ne!(a.report_rows(), c.report_rows());
}

#[test]
fn run_directory_round_trip() {
    let (ds, _) = synthetic_dataset(4);
    let explained = harness::explain_lce(&ds, &synthetic, &synthetic, &config(2), 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_dir::write_run(dir.path(), &explained, &run_dir::RunMeta::default()).unwrap();
    let (record, back) = run_dir::read_run(dir.path()).unwrap();
    assert_eq!(back, explained);
    assert_eq!(record.images.len(), 4);

    let evaluated = harness::evaluate_run(&ds, back, &synthetic, 2).unwrap();
    assert_eq!(evaluated, harness::run_lce(&ds, &synthetic, &synthetic, &config(1), 3).unwrap());
    run_dir::write_run(dir.path(), &evaluated, &run_dir::RunMeta::default()).unwrap();
    let (_, again) = run_dir::read_run(dir.path()).unwrap();
    assert_eq!(again, evaluated);
    let rows = run_dir::read_report_csv(&dir.path().join("reports.csv")).unwrap();
    assert_eq!(rows, evaluated.report_rows());
}

#[test]
fn imported_lce_order_reproduces_lce_reports() {
    let (ds, _) = synthetic_dataset(6);
    let lce = harness::run_lce(&ds, &synthetic, &synthetic, &config(2), 5).unwrap();
    let units = lce
        .images
        .iter()
        .map(|r| {
            let o = r.outcome.as_ref().unwrap();
            (r.image_id.clone(), o.units.iter().map(lce_core::rle::encode).collect())
        })
        .collect();
    let source = UnitsSource::Imported {
        method: "copy".into(),
        units,
    };
    let copy = harness::run_ranked_units(&ds, &synthetic, &source, &config(2), 5).unwrap();
    for ((_, a), (_, b)) in lce.reports().into_iter().zip(copy.reports()) {
        assert_eq!(a, b);
    }
}

#[test]
fn random_baseline_seeds() {
    let (ds, _) = synthetic_dataset(5);
    let a = harness::run_ranked_units(&ds, &synthetic, &UnitsSource::Random { seed: 1 }, &config(1), 9).unwrap();
    let b = harness::run_ranked_units(&ds, &synthetic, &UnitsSource::Random { seed: 2 }, &config(1), 9).unwrap();
    let (ra, rb) = (a.reports(), b.reports());
    assert!(ra.iter().zip(&rb).any(|((_, x), (_, y))| x.insertion_curve != y.insertion_curve));
    for ((_, x), (_, y)) in ra.iter().zip(&rb) {
        assert_eq!(x.p_o, y.p_o);
    }
}

#[test]
fn missing_or_corrupt_inputs_are_isolated() {
    let (mut ds, _) = synthetic_dataset(4);
    ds.samples[2].image = Err("scene_0002.png: truncated file".into());
    let lce = harness::run_lce(&ds, &synthetic, &synthetic, &config(2), 0).unwrap();
    assert_eq!(lce.reports().len(), 3);
    let failures = lce.failures();
    assert_eq!(failures.len(), 1);
    assert_eq!(failures[0].0, "scene_0002.png");

    let source = UnitsSource::Imported {
        method: "partial".into(),
        units: [("scene_0000.png".to_string(), vec![lce_core::rle::encode(&BinaryMask::full(64, 64))])].into(),
    };
    let partial = harness::run_ranked_units(&ds, &synthetic, &source, &config(1), 0).unwrap();
    assert_eq!(partial.reports().len(), 1);
    assert_eq!(partial.failures().len(), 3);

    let table = harness::aggregate(&[lce.clone(), partial]).unwrap();
    assert_eq!(table.rows[1].failures, 3);
    let alone = harness::aggregate(std::slice::from_ref(&lce)).unwrap();
    assert_eq!(alone.rows[0], table.rows[0]);
}

#[test]
fn aggregate_refuses_different_manifests() {
    let (ds, _) = synthetic_dataset(3);
    let (other, _) = synthetic_dataset(2);
    let a = harness::run_ranked_units(&ds, &synthetic, &UnitsSource::GuideRanking, &config(1), 0).unwrap();
    let b = harness::run_ranked_units(&other, &synthetic, &UnitsSource::GuideRanking, &config(1), 0).unwrap();
    assert!(matches!(harness::aggregate(&[a, b]), Err(Error::Contract(_))));
}

#[test]
fn endpoint_failure_is_recorded_per_image() {
    let (ds, _) = synthetic_dataset(2);
    let broken = || -> Result<Box<dyn Oracle>> { Err(Error::Config("no such endpoint".into())) };
    let run = harness::run_lce(&ds, &broken, &synthetic, &config(1), 0).unwrap();
    assert_eq!(run.failures().len(), 2);
}
