//! Named, swappable strategies: neighbour ordering and the stage stop rule.
//!
//! Both are trait objects created through a [`Registry`] so the config and CLI
//! can select them by name.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{SsgaConfig, StopThreshold};
use crate::error::{Result, SsgaError};
use crate::tensor::Tensor;
use crate::types::FrameId;

type Factory<T, A> = Box<dyn Fn(&A) -> Box<T> + Send + Sync>;

/// Name → factory table for one strategy kind.
pub struct Registry<T: ?Sized, A> {
    kind: &'static str,
    factories: BTreeMap<String, Factory<T, A>>,
}

impl<T: ?Sized, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            factories: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, factory: impl Fn(&A) -> Box<T> + Send + Sync + 'static) {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn create(&self, name: &str, arg: &A) -> Result<Box<T>> {
        match self.factories.get(name) {
            Some(f) => Ok(f(arg)),
            None => Err(SsgaError::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                registered: self.names().join(", "),
            }),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.factories.contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        self.factories.keys().cloned().collect()
    }
}

/// Orders previous frames for consumption by the refinement stages.
pub trait NeighborOrdering: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns a permutation of indices into `ids`; every id is `< current`.
    fn order(&self, ids: &[FrameId], current: FrameId) -> Vec<usize>;
}

/// Farthest frame first, closest frame last.
pub struct Descending;

/// Closest frame first.
pub struct Ascending;

/// Seeded shuffle; the seed is mixed with the current frame id.
pub struct RandomOrder {
    pub seed: u64,
}

fn by_distance(ids: &[FrameId], current: FrameId) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    // distance descending, ties by id so the result never depends on input order
    idx.sort_by(|&a, &b| {
        let (da, db) = (current - ids[a], current - ids[b]);
        db.cmp(&da).then(ids[a].cmp(&ids[b]))
    });
    idx
}

impl NeighborOrdering for Descending {
    fn name(&self) -> &'static str {
        "descending"
    }

    fn order(&self, ids: &[FrameId], current: FrameId) -> Vec<usize> {
        by_distance(ids, current)
    }
}

impl NeighborOrdering for Ascending {
    fn name(&self) -> &'static str {
        "ascending"
    }

    fn order(&self, ids: &[FrameId], current: FrameId) -> Vec<usize> {
        let mut idx = by_distance(ids, current);
        idx.reverse();
        idx
    }
}

impl NeighborOrdering for RandomOrder {
    fn name(&self) -> &'static str {
        "random"
    }

    fn order(&self, ids: &[FrameId], current: FrameId) -> Vec<usize> {
        let mut idx = by_distance(ids, current);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ current.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        idx.shuffle(&mut rng);
        idx
    }
}

pub fn ordering_registry() -> Registry<dyn NeighborOrdering, SsgaConfig> {
    let mut r: Registry<dyn NeighborOrdering, SsgaConfig> = Registry::new("sampling order");
    r.register("descending", |_| Box::new(Descending));
    r.register("ascending", |_| Box::new(Ascending));
    r.register("random", |c| Box::new(RandomOrder { seed: c.sampling_seed }));
    r
}

/// Decides whether the refinement loop halts after a stage.
pub trait StopCriterion: Send + Sync {
    fn name(&self) -> &'static str;

    fn should_stop(&self, curr: &Tensor, prev: &Tensor) -> bool;
}

/// Stops when the cosine of the flattened embeddings exceeds `delta`.
pub struct CosineStop {
    pub delta: f64,
}

/// Never stops early.
pub struct NeverStop;

/// Cosine similarity of two flattened tensors. Two zero vectors count as
/// identical (1); one zero vector against a non-zero one gives 0.
pub fn flattened_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na == 0.0, nb == 0.0) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => dot / (na.sqrt() * nb.sqrt()),
    }
}

impl StopCriterion for CosineStop {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn should_stop(&self, curr: &Tensor, prev: &Tensor) -> bool {
        flattened_cosine(curr, prev) > self.delta
    }
}

impl StopCriterion for NeverStop {
    fn name(&self) -> &'static str {
        "never"
    }

    fn should_stop(&self, _curr: &Tensor, _prev: &Tensor) -> bool {
        false
    }
}

/// Stop rules are built from the threshold alone; the never-stop sentinel
/// always yields [`NeverStop`] regardless of the registered name.
pub fn stop_registry() -> Registry<dyn StopCriterion, StopThreshold> {
    let mut r: Registry<dyn StopCriterion, StopThreshold> = Registry::new("stop criterion");
    r.register("cosine", |t| match *t {
        StopThreshold::Cosine(delta) => Box::new(CosineStop { delta }),
        StopThreshold::Never => Box::new(NeverStop),
    });
    r.register("never", |_| Box::new(NeverStop));
    r
}

/// Builds the configured stop rule.
pub fn stop_criterion(name: &str, delta: StopThreshold) -> Result<Box<dyn StopCriterion>> {
    stop_registry().create(name, &delta)
}

/// Builds the configured neighbour ordering.
pub fn neighbor_ordering(config: &SsgaConfig) -> Result<Box<dyn NeighborOrdering>> {
    ordering_registry().create(&config.sampling_order, config)
}
