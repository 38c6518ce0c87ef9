//! Pair-sum tasks: the MNIST even/odd construction over any labelled
//! feature store, and a Gaussian-cluster stand-in for fast runs.
//!
//! Training and validation pairs come only from the admissible digit
//! combinations (both orders); the test split draws both digits uniformly,
//! so it contains out-of-distribution pairs. Each digit's pool is split into
//! disjoint train/val/test partitions before any pair is drawn.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::episodic::SupportIndex;

/// Admissible unordered digit combinations: four even, four odd.
pub const EVEN_ODD_COMBINATIONS: [(usize, usize); 8] =
    [(0, 6), (2, 8), (4, 6), (4, 8), (1, 5), (3, 7), (1, 9), (3, 9)];

pub const DIGITS: usize = 10;

pub const FULL_SPLIT_SIZES: SplitSizes = SplitSizes {
    train: 6720,
    val: 1920,
    test: 960,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("{values} feature values do not fill {labels} rows of width {dim}")]
    Shape {
        values: usize,
        labels: usize,
        dim: usize,
    },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("no images of digit {digit} left for the {split} split")]
    InsufficientImages { digit: usize, split: &'static str },
    #[error("class {0} has no labelled candidates")]
    ClassAbsent(usize),
    #[error("class {class} has {available} candidates, {requested} requested")]
    ClassUnderpopulated {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("labels per class must be at least 1")]
    NoLabels,
    #[error("separation must be positive and finite, got {0}")]
    Separation(f64),
    #[error("dimension {dim} cannot hold {classes} orthogonal class means")]
    TooFewDims { dim: usize, classes: usize },
    #[error("no admissible combinations")]
    EmptyCombinations,
}

/// Row-major feature matrix with one class label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    values: Vec<f64>,
    labels: Vec<usize>,
}

impl FeatureStore {
    pub fn new(dim: usize, values: Vec<f64>, labels: Vec<usize>) -> Result<Self, TaskError> {
        if dim == 0 || values.len() != dim * labels.len() {
            return Err(TaskError::Shape {
                values: values.len(),
                labels: labels.len(),
                dim,
            });
        }
        Ok(Self { dim, values, labels })
    }

    /// Raw 8-bit pixels, scaled to `[0, 1]`.
    pub fn from_pixels(dim: usize, pixels: &[u8], labels: Vec<usize>) -> Result<Self, TaskError> {
        Self::new(
            dim,
            pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
            labels,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature(&self, id: usize) -> &[f64] {
        &self.values[id * self.dim..(id + 1) * self.dim]
    }

    pub fn label(&self, id: usize) -> usize {
        self.labels[id]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn scaled(&self, num: usize, den: usize) -> Self {
        let s = |n: usize| (n * num / den).max(1);
        Self {
            train: s(self.train),
            val: s(self.val),
            test: s(self.test),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One datapoint: a feature row per concept group, the ground-truth
/// concepts, and the final label.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TupleItem {
    pub inputs: Vec<usize>,
    pub concepts: Vec<usize>,
    pub label: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairDataset {
    pub train: Vec<TupleItem>,
    pub val: Vec<TupleItem>,
    pub test: Vec<TupleItem>,
    /// Sizes actually produced.
    pub sizes: SplitSizes,
    /// True when the store was too small for the requested sizes.
    pub scaled: bool,
}

impl PairDataset {
    pub fn split(&self, split: Split) -> &[TupleItem] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Cycles through a shuffled partition so every image is used once before
/// any is reused.
struct Pool {
    ids: Vec<usize>,
    cursor: usize,
}

impl Pool {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.cursor == self.ids.len() {
            self.ids.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.ids[self.cursor - 1]
    }
}

fn pair_item(a: usize, b: usize, pools: &mut [Pool], rng: &mut ChaCha8Rng) -> TupleItem {
    let left = pools[a].next(rng);
    let right = pools[b].next(rng);
    TupleItem {
        inputs: vec![left, right],
        concepts: vec![a, b],
        label: (a + b) as i64,
    }
}

fn draw_pairs(
    count: usize,
    combinations: &[(usize, usize)],
    restricted: bool,
    pools: &mut [Pool],
    rng: &mut ChaCha8Rng,
) -> Vec<TupleItem> {
    let classes = pools.len();
    (0..count)
        .map(|_| {
            let (a, b) = if restricted {
                let (a, b) = combinations[rng.gen_range(0..combinations.len())];
                if rng.gen_bool(0.5) {
                    (a, b)
                } else {
                    (b, a)
                }
            } else {
                (rng.gen_range(0..classes), rng.gen_range(0..classes))
            };
            pair_item(a, b, pools, rng)
        })
        .collect()
}

fn check_labels(store: &FeatureStore, classes: usize) -> Result<(), TaskError> {
    match store.labels().iter().find(|&&l| l >= classes) {
        Some(&label) => Err(TaskError::LabelOutOfRange { label, classes }),
        None => Ok(()),
    }
}

/// Builds the pair task over `classes` digit classes.
///
/// Each digit's images are shuffled and cut into train/val/test partitions
/// in proportion to the split sizes. When the store holds fewer than two
/// images per requested pair, all sizes shrink proportionally and `scaled`
/// is set.
pub fn build_even_odd(
    store: &FeatureStore,
    classes: usize,
    combinations: &[(usize, usize)],
    sizes: SplitSizes,
    seed: u64,
) -> Result<PairDataset, TaskError> {
    if combinations.is_empty() {
        return Err(TaskError::EmptyCombinations);
    }
    check_labels(store, classes)?;
    if let Some(&(a, b)) = combinations.iter().find(|(a, b)| *a >= classes || *b >= classes) {
        return Err(TaskError::LabelOutOfRange {
            label: a.max(b),
            classes,
        });
    }
    let needed = 2 * sizes.total();
    let (sizes, scaled) = if store.len() < needed {
        (sizes.scaled(store.len(), needed), true)
    } else {
        (sizes, false)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_digit: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for id in 0..store.len() {
        by_digit[store.label(id)].push(id);
    }
    let total = sizes.total();
    let mut pools: [Vec<Pool>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for ids in &mut by_digit {
        ids.shuffle(&mut rng);
        let n = ids.len();
        let train_end = n * sizes.train / total;
        let val_end = n * (sizes.train + sizes.val) / total;
        let parts = [&ids[..train_end], &ids[train_end..val_end], &ids[val_end..]];
        for (pool, part) in pools.iter_mut().zip(parts) {
            pool.push(Pool {
                ids: part.to_vec(),
                cursor: part.len(),
            });
        }
    }
    let required = |split: usize, restricted: bool| -> Result<(), TaskError> {
        let digits: Vec<usize> = if restricted {
            combinations.iter().flat_map(|&(a, b)| [a, b]).collect()
        } else {
            (0..classes).collect()
        };
        for digit in digits {
            if pools[split][digit].ids.is_empty() {
                return Err(TaskError::InsufficientImages {
                    digit,
                    split: Split::ALL[split].name(),
                });
            }
        }
        Ok(())
    };
    required(0, true)?;
    required(1, true)?;
    required(2, false)?;

    let [train_pools, val_pools, test_pools] = &mut pools;
    let train = draw_pairs(sizes.train, combinations, true, train_pools, &mut rng);
    let val = draw_pairs(sizes.val, combinations, true, val_pools, &mut rng);
    let test = draw_pairs(sizes.test, combinations, false, test_pools, &mut rng);
    Ok(PairDataset {
        train,
        val,
        test,
        sizes,
        scaled,
    })
}

/// Samples `labels_per_class` concept-labelled feature rows per class in
/// `classes`, drawn only from rows used by training pairs.
pub fn build_support(
    store: &FeatureStore,
    dataset: &PairDataset,
    num_classes: usize,
    classes: &[usize],
    labels_per_class: usize,
    seed: u64,
) -> Result<SupportIndex, TaskError> {
    if labels_per_class == 0 {
        return Err(TaskError::NoLabels);
    }
    let mut candidates: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    let mut ids: Vec<usize> = dataset
        .train
        .iter()
        .flat_map(|t| t.inputs.iter().copied())
        .collect();
    ids.sort_unstable();
    ids.dedup();
    for id in ids {
        let label = store.label(id);
        if label >= num_classes {
            return Err(TaskError::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        candidates[label].push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = vec![Vec::new(); num_classes];
    for &class in classes {
        let pool = candidates.get(class).ok_or(TaskError::ClassAbsent(class))?;
        if pool.is_empty() {
            return Err(TaskError::ClassAbsent(class));
        }
        if pool.len() < labels_per_class {
            return Err(TaskError::ClassUnderpopulated {
                class,
                available: pool.len(),
                requested: labels_per_class,
            });
        }
        let mut chosen: Vec<usize> = pool
            .choose_multiple(&mut rng, labels_per_class)
            .copied()
            .collect();
        chosen.sort_unstable();
        support[class] = chosen;
    }
    Ok(SupportIndex::new(support))
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: DIGITS,
            dim: 16,
            separation: 10.0,
            sizes: SplitSizes {
                train: 1000,
                val: 200,
                test: 200,
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub store: FeatureStore,
    pub dataset: PairDataset,
    pub means: Vec<Vec<f64>>,
}

/// Gaussian clusters with unit variance. Class `c` has mean
/// `(separation/√2)·e_c`, so any two means are exactly `separation` apart.
/// Every pair draws two fresh points; pairs follow the even/odd convention
/// (restricted train/val, unrestricted test).
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticTask, TaskError> {
    if !(spec.separation > 0.0 && spec.separation.is_finite()) {
        return Err(TaskError::Separation(spec.separation));
    }
    if spec.dim < spec.classes {
        return Err(TaskError::TooFewDims {
            dim: spec.dim,
            classes: spec.classes,
        });
    }
    let combinations: Vec<(usize, usize)> = EVEN_ODD_COMBINATIONS
        .iter()
        .copied()
        .filter(|&(a, b)| a < spec.classes && b < spec.classes)
        .collect();
    if combinations.is_empty() {
        return Err(TaskError::EmptyCombinations);
    }
    let scale = spec.separation / core::f64::consts::SQRT_2;
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| {
            let mut m = vec![0.0; spec.dim];
            m[c] = scale;
            m
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut values = Vec::with_capacity(2 * spec.sizes.total() * spec.dim);
    let mut labels = Vec::with_capacity(2 * spec.sizes.total());
    let mut sample = |class: usize, rng: &mut ChaCha8Rng| {
        for &m in &means[class] {
            let e: f64 = StandardNormal.sample(rng);
            values.push(m + e);
        }
        labels.push(class);
        labels.len() - 1
    };
    let mut splits: [Vec<TupleItem>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let counts = [spec.sizes.train, spec.sizes.val, spec.sizes.test];
    for (split, (items, &count)) in splits.iter_mut().zip(&counts).enumerate() {
        for _ in 0..count {
            let (a, b) = if split < 2 {
                let (a, b) = combinations[rng.gen_range(0..combinations.len())];
                if rng.gen_bool(0.5) {
                    (a, b)
                } else {
                    (b, a)
                }
            } else {
                (rng.gen_range(0..spec.classes), rng.gen_range(0..spec.classes))
            };
            let left = sample(a, &mut rng);
            let right = sample(b, &mut rng);
            items.push(TupleItem {
                inputs: vec![left, right],
                concepts: vec![a, b],
                label: (a + b) as i64,
            });
        }
    }
    let [train, val, test] = splits;
    let store = FeatureStore::new(spec.dim, values, labels)?;
    Ok(SyntheticTask {
        store,
        dataset: PairDataset {
            train,
            val,
            test,
            sizes: spec.sizes,
            scaled: false,
        },
        means,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_store(per_digit: usize) -> FeatureStore {
        let labels: Vec<usize> = (0..10 * per_digit).map(|i| i % 10).collect();
        let values = labels.iter().map(|&l| l as f64).collect();
        FeatureStore::new(1, values, labels).unwrap()
    }

    #[test]
    fn pixels_are_normalized() {
        let s = FeatureStore::from_pixels(2, &[0, 255, 51, 102], vec![1, 2]).unwrap();
        assert_eq!(s.feature(0), &[0.0, 1.0]);
        assert_eq!(s.feature(1), &[0.2, 0.4]);
        assert!(FeatureStore::new(3, vec![0.0; 5], vec![0, 1]).is_err());
    }

    #[test]
    fn even_odd_construction() {
        let store = toy_store(200);
        let sizes = SplitSizes {
            train: 300,
            val: 100,
            test: 100,
        };
        let d = build_even_odd(&store, 10, &EVEN_ODD_COMBINATIONS, sizes, 3).unwrap();
        assert!(!d.scaled);
        assert_eq!((d.train.len(), d.val.len(), d.test.len()), (300, 100, 100));
        for item in d.train.iter().chain(&d.val).chain(&d.test) {
            assert_eq!(item.label, (item.concepts[0] + item.concepts[1]) as i64);
            for (&id, &c) in item.inputs.iter().zip(&item.concepts) {
                assert_eq!(store.label(id), c);
            }
        }
        assert!(d.train.iter().all(|t| t.concepts[0] % 2 == t.concepts[1] % 2));
        assert!(d.test.iter().any(|t| t.concepts[0] % 2 != t.concepts[1] % 2));
        let mut seen = d
            .train
            .iter()
            .map(|t| (t.concepts[0], t.concepts[1]))
            .collect::<Vec<_>>();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 16);
        assert_eq!(
            d,
            build_even_odd(&store, 10, &EVEN_ODD_COMBINATIONS, sizes, 3).unwrap()
        );
    }

    #[test]
    fn splits_use_disjoint_images() {
        let store = toy_store(100);
        let sizes = SplitSizes {
            train: 200,
            val: 60,
            test: 60,
        };
        let d = build_even_odd(&store, 10, &EVEN_ODD_COMBINATIONS, sizes, 9).unwrap();
        let ids = |items: &[TupleItem]| {
            let mut v: Vec<usize> = items.iter().flat_map(|t| t.inputs.clone()).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        let (tr, va, te) = (ids(&d.train), ids(&d.val), ids(&d.test));
        assert!(tr
            .iter()
            .all(|i| va.binary_search(i).is_err() && te.binary_search(i).is_err()));
        assert!(va.iter().all(|i| te.binary_search(i).is_err()));
    }

    #[test]
    fn small_store_scales_down() {
        let store = toy_store(20);
        let d = build_even_odd(&store, 10, &EVEN_ODD_COMBINATIONS, FULL_SPLIT_SIZES, 0).unwrap();
        assert!(d.scaled);
        // 200 images for 9600 pairs needing 19200.
        assert_eq!(
            d.sizes,
            SplitSizes {
                train: 70,
                val: 20,
                test: 10
            }
        );
        assert_eq!(d.train.len(), 70);
    }

    #[test]
    fn missing_digit_is_reported() {
        let labels: Vec<usize> = (0..100).map(|i| i % 9).collect();
        let store = FeatureStore::new(1, vec![0.0; 100], labels).unwrap();
        let sizes = SplitSizes {
            train: 10,
            val: 5,
            test: 5,
        };
        assert!(matches!(
            build_even_odd(&store, 10, &EVEN_ODD_COMBINATIONS, sizes, 0),
            Err(TaskError::InsufficientImages { digit: 9, .. })
        ));
    }

    #[test]
    fn support_selection() {
        let store = toy_store(100);
        let sizes = SplitSizes {
            train: 400,
            val: 50,
            test: 50,
        };
        let d = build_even_odd(&store, 10, &EVEN_ODD_COMBINATIONS, sizes, 1).unwrap();
        let all: Vec<usize> = (0..10).collect();
        let s = build_support(&store, &d, 10, &all, 1, 5).unwrap();
        assert_eq!(s.total(), 10);
        for c in 0..10 {
            assert_eq!(s.class(c).len(), 1);
            assert_eq!(store.label(s.class(c)[0]), c);
        }
        assert_eq!(s, build_support(&store, &d, 10, &all, 1, 5).unwrap());
        let partial = build_support(&store, &d, 10, &(0..8).collect::<Vec<_>>(), 1, 5).unwrap();
        assert_eq!(partial.labelled_classes(), (0..8).collect::<Vec<_>>());
        assert_eq!(
            build_support(&store, &d, 10, &all, 0, 5),
            Err(TaskError::NoLabels)
        );
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = SyntheticSpec::default();
        let t = gen_synthetic(&spec).unwrap();
        assert_eq!(
            (t.dataset.train.len(), t.dataset.val.len(), t.dataset.test.len()),
            (1000, 200, 200)
        );
        assert_eq!(t.store.len(), 2800);
        assert_eq!(t, gen_synthetic(&spec).unwrap());
        let d = crate::prototypes::squared_distance(&t.means[0], &t.means[1]);
        assert!((d - 100.0).abs() < 1e-9);
        assert_eq!(
            gen_synthetic(&SyntheticSpec {
                separation: 0.0,
                ..spec.clone()
            }),
            Err(TaskError::Separation(0.0))
        );
        assert!(matches!(
            gen_synthetic(&SyntheticSpec { dim: 4, ..spec }),
            Err(TaskError::TooFewDims { .. })
        ));
    }
}
