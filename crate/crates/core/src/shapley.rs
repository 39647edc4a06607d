//! Exact Shapley attribution over concept coalitions.
//!
//! A coalition keeps its concepts' pixels and replaces everything else with a
//! Gaussian baseline fill drawn once per run from dataset statistics. The
//! utility of a coalition is the model's probability for the class it
//! predicts on the untouched image. All `2^n` utilities are evaluated, so
//! the values are exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::concepts::ConceptSet;
use crate::error::{Error, Result};
use crate::mask::{self, BinaryMask, DatasetStats, Image};
use crate::oracle::{self, Oracle};

/// Largest concept count accepted for exact enumeration.
pub const MAX_PLAYERS: usize = 16;

/// Subset of concept indices `0..n`, one bit per index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coalition(u32);

impl Coalition {
    pub fn new(bits: u32, n: usize) -> Result<Self> {
        if n > MAX_PLAYERS || (n < 32 && bits >> n != 0) {
            return Err(Error::contract(format!(
                "coalition {bits:#b} has members outside 0..{n}"
            )));
        }
        Ok(Self(bits))
    }

    pub fn empty() -> Self {
        Self(0)
    }

    pub fn full(n: usize) -> Self {
        Self(((1u64 << n) - 1) as u32)
    }

    pub fn bits(self) -> u32 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    pub fn with(self, i: usize) -> Self {
        Self(self.0 | 1 << i)
    }

    pub fn size(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn members(self) -> impl Iterator<Item = usize> {
        (0..32).filter(move |i| self.0 >> i & 1 == 1)
    }
}

/// Utility of every coalition, indexed by coalition bitmask.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityCache {
    target_class: usize,
    players: usize,
    values: Vec<f64>,
}

impl UtilityCache {
    pub fn new(target_class: usize, players: usize, values: Vec<f64>) -> Result<Self> {
        if players == 0 {
            return Err(Error::contract("a utility cache needs at least one player"));
        }
        if players > MAX_PLAYERS {
            return Err(Error::TooManyConcepts {
                count: players,
                max: MAX_PLAYERS,
            });
        }
        if values.len() != 1 << players {
            return Err(Error::contract(format!(
                "{players} players need {} utilities, got {}",
                1usize << players,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("utility {bad} outside [0, 1]")));
        }
        Ok(Self {
            target_class,
            players,
            values,
        })
    }

    pub fn target_class(&self) -> usize {
        self.target_class
    }

    pub fn players(&self) -> usize {
        self.players
    }

    pub fn get(&self, coalition: Coalition) -> f64 {
        self.values[coalition.0 as usize]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// `|T|! (n − |T| − 1)! / n!` for every `|T|` in `0..n`.
fn coalition_weights(n: usize) -> Vec<f64> {
    let mut fact = vec![1.0f64; n + 1];
    for i in 1..=n {
        fact[i] = fact[i - 1] * i as f64;
    }
    (0..n)
        .map(|s| fact[s] * fact[n - s - 1] / fact[n])
        .collect()
}

/// Classical Shapley values from a complete utility table.
///
/// `values[t]` is the utility of the coalition whose bitmask is `t`.
pub fn shapley_values(players: usize, values: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), 1 << players, "utility table must be complete");
    let weights = coalition_weights(players);
    let mut phis = vec![0.0; players];
    for t in 0..values.len() {
        let size = (t as u32).count_ones() as usize;
        if size == players {
            continue;
        }
        let base = values[t];
        let w = weights[size];
        for (i, phi) in phis.iter_mut().enumerate() {
            if t >> i & 1 == 0 {
                *phi += w * (values[t | 1 << i] - base);
            }
        }
    }
    phis
}

/// Gaussian fill matched to dataset statistics, clamped to `[0, 1]`.
///
/// Samples are drawn in row-major, channel-last order from a ChaCha8 stream
/// seeded with `seed`.
pub fn baseline_fill(
    stats: &DatasetStats,
    width: usize,
    height: usize,
    channels: usize,
    seed: u64,
) -> Result<Image> {
    if stats.channels() != channels {
        return Err(Error::contract(format!(
            "stats cover {} channels, image has {channels}",
            stats.channels()
        )));
    }
    let dists = stats
        .mean()
        .iter()
        .zip(stats.std())
        .map(|(m, s)| Normal::new(*m, *s).map_err(|e| Error::contract(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(width * height * channels);
    for _ in 0..width * height {
        for d in &dists {
            data.push(d.sample(&mut rng).clamp(0.0, 1.0) as f32);
        }
    }
    Image::new(width, height, channels, data)
}

fn coalition_mask(concepts: &ConceptSet, coalition: Coalition, width: usize, height: usize) -> Result<BinaryMask> {
    let mut keep = BinaryMask::empty(width, height);
    for i in coalition.members() {
        mask::union_into(&mut keep, &concepts.concepts()[i].mask)?;
    }
    Ok(keep)
}

/// Model probability of `target_class` on the composite that keeps the
/// coalition's concepts and fills the rest.
pub fn utility(
    image: &Image,
    concepts: &ConceptSet,
    coalition: Coalition,
    model: &dyn Oracle,
    target_class: usize,
    fill: &Image,
) -> Result<f64> {
    let keep = coalition_mask(concepts, coalition, image.width(), image.height())?;
    let composite = mask::composite(image, &keep, fill)?;
    let probs = oracle::class_probabilities(model, target_class, 1, |_| Ok(composite.clone()))?;
    Ok(probs[0])
}

/// Evaluates every coalition in ascending bitmask order.
pub fn utility_cache(
    image: &Image,
    concepts: &ConceptSet,
    model: &dyn Oracle,
    target_class: usize,
    fill: &Image,
) -> Result<UtilityCache> {
    let n = concepts.len();
    if n > MAX_PLAYERS {
        return Err(Error::TooManyConcepts {
            count: n,
            max: MAX_PLAYERS,
        });
    }
    if n == 0 {
        return Err(Error::EmptyConceptSet);
    }
    let (w, h) = (image.width(), image.height());
    let values = oracle::class_probabilities(model, target_class, 1 << n, |t| {
        let keep = coalition_mask(concepts, Coalition(t as u32), w, h)?;
        mask::composite(image, &keep, fill)
    })?;
    UtilityCache::new(target_class, n, values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPhi {
    pub concept_id: u32,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyResult {
    pub target_class: usize,
    pub u_empty: f64,
    pub u_full: f64,
    pub phis: Vec<ConceptPhi>,
    pub seed: u64,
    pub fill_stats: DatasetStats,
}

impl ShapleyResult {
    pub fn from_cache(cache: &UtilityCache, concepts: &ConceptSet, seed: u64, fill_stats: DatasetStats) -> Self {
        let n = cache.players();
        let phis = shapley_values(n, cache.values())
            .into_iter()
            .zip(concepts.concepts())
            .map(|(phi, c)| ConceptPhi {
                concept_id: c.id,
                phi,
            })
            .collect();
        Self {
            target_class: cache.target_class(),
            u_empty: cache.get(Coalition::empty()),
            u_full: cache.get(Coalition::full(n)),
            phis,
            seed,
            fill_stats,
        }
    }

    pub fn phi_sum(&self) -> f64 {
        self.phis.iter().map(|p| p.phi).sum()
    }
}

/// Full exact-Shapley run: target class, fill, all utilities, values.
pub fn exact_shapley(
    image: &Image,
    concepts: &ConceptSet,
    model: &dyn Oracle,
    stats: &DatasetStats,
    seed: u64,
) -> Result<ShapleyResult> {
    if concepts.len() > MAX_PLAYERS {
        return Err(Error::TooManyConcepts {
            count: concepts.len(),
            max: MAX_PLAYERS,
        });
    }
    let (target, _) = oracle::target_class(model, image)?;
    let fill = baseline_fill(stats, image.width(), image.height(), image.channels(), seed)?;
    let cache = utility_cache(image, concepts, model, target, &fill)?;
    Ok(ShapleyResult::from_cache(&cache, concepts, seed, stats.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub ranked_concepts: Vec<u32>,
    pub top_concept: u32,
    pub phis: Vec<ConceptPhi>,
}

/// Ranks concepts by φ, highest first, ties by id ascending.
pub fn select_explanation(result: &ShapleyResult, concepts: &ConceptSet) -> Result<Explanation> {
    if result.phis.is_empty() {
        return Err(Error::EmptyConceptSet);
    }
    if let Some(p) = result.phis.iter().find(|p| concepts.get(p.concept_id).is_none()) {
        return Err(Error::contract(format!(
            "φ refers to unknown concept {}",
            p.concept_id
        )));
    }
    let mut ranked = result.phis.clone();
    ranked.sort_by(|a, b| b.phi.total_cmp(&a.phi).then(a.concept_id.cmp(&b.concept_id)));
    let ranked_concepts: Vec<u32> = ranked.iter().map(|p| p.concept_id).collect();
    Ok(Explanation {
        top_concept: ranked_concepts[0],
        ranked_concepts,
        phis: result.phis.clone(),
    })
}
