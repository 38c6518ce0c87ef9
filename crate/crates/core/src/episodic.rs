//! Episodic prototype training with a semantic-loss term over weakly
//! labelled tuples, and a plain softmax baseline trained on the semantic
//! loss alone.
//!
//! Each concept group reads one feature row of a datapoint and is served by
//! a *head*: an extractor plus a centroid group. Groups may share a head
//! (one extractor classifies both digits of a pair).
//!
//! Per episode, for every head: labelled centroids are recomputed from a
//! fresh support draw, unlabelled classes get zero-shot centroids, query
//! rows contribute `−ln y_true`, and a batch of weakly labelled tuples
//! contributes the semantic loss. One optimizer step follows.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::backbone::{adam_step, AdamConfig, AdamState, BackboneError, Mlp, MlpSpec, Tape};
use crate::knowledge::{
    enumerate_models, tuple_knowledge, ConceptSpace, EnumerationMode, KnowledgeError, ModelSet,
};
use crate::metrics::{evaluate, Evaluation, MetricsError, Predictions};
use crate::prototypes::{
    distance_softmax, head_backward_with_probs, init_unlabelled_centroids, CentroidBank, CentroidStatus,
    GroupProbs, PrototypeError, DEFAULT_ZERO_SHOT_P,
};
use crate::semloss::{semantic_loss, OutputProbs, SemLossError};
use crate::tasks::{FeatureStore, TupleItem};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EpisodeError {
    #[error("class {class} has {available} support examples, {required} required")]
    InsufficientSupport {
        class: usize,
        available: usize,
        required: usize,
    },
    #[error("head {head} has {labelled} labelled classes; at least 2 required")]
    TooFewLabelled { head: usize, labelled: usize },
    #[error("classes per episode {requested} exceeds {labelled} labelled classes")]
    TooManyClasses { requested: usize, labelled: usize },
    #[error("no knowledge for label {0}")]
    UnknownLabel(i64),
    #[error("non-finite loss at epoch {epoch}, episode {episode}: proto {proto}, nesy {nesy}")]
    NonFinite {
        epoch: usize,
        episode: usize,
        proto: f64,
        nesy: f64,
    },
    #[error("datapoint has {got} inputs, model has {expected} groups")]
    GroupCount { expected: usize, got: usize },
    #[error("no weakly labelled training data")]
    EmptyTrainingSet,
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Prototype(#[from] PrototypeError),
    #[error(transparent)]
    SemLoss(#[from] SemLossError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Concept-labelled feature rows per class of one head.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SupportIndex {
    classes: Vec<Vec<usize>>,
}

impl SupportIndex {
    pub fn new(classes: Vec<Vec<usize>>) -> Self {
        Self { classes }
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn class(&self, class: usize) -> &[usize] {
        &self.classes[class]
    }

    pub fn labelled_classes(&self) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&c| !self.classes[c].is_empty())
            .collect()
    }

    pub fn total(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.classes.iter().flatten().copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpisodeConfig {
    /// Classes sampled per episode (`l`); `None` takes every labelled class.
    pub classes_per_episode: Option<usize>,
    pub support_per_class: usize,
    pub query_per_class: usize,
    pub episodes_per_epoch: usize,
    pub epochs: usize,
    pub nesy_weight: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub adam: AdamConfig,
    pub zero_shot_p: f64,
    pub seed: u64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            classes_per_episode: None,
            support_per_class: 1,
            query_per_class: 1,
            episodes_per_epoch: 100,
            epochs: 10,
            nesy_weight: 10.0,
            batch_size: 32,
            hidden: vec![256],
            embedding_dim: 64,
            adam: AdamConfig::default(),
            zero_shot_p: DEFAULT_ZERO_SHOT_P,
            seed: 0,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<(), EpisodeError> {
        if self.support_per_class == 0 {
            return Err(EpisodeError::Config("support_per_class must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(EpisodeError::Config("batch_size must be at least 1"));
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return Err(EpisodeError::Config("layer widths must be positive"));
        }
        if self.classes_per_episode == Some(0) {
            return Err(EpisodeError::Config("classes_per_episode must be positive"));
        }
        if !(self.nesy_weight >= 0.0 && self.nesy_weight.is_finite()) {
            return Err(EpisodeError::Config(
                "nesy_weight must be finite and non-negative",
            ));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(EpisodeError::Config("learning rate must be positive"));
        }
        if !(self.zero_shot_p > 0.0 && self.zero_shot_p < 1.0) {
            return Err(EpisodeError::Config("zero_shot_p must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; derives independent stream seeds from the master.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_INIT: u64 = 1;
const STREAM_EPISODE: u64 = 2;
const STREAM_ZERO_SHOT: u64 = 3;
const STREAM_BATCH: u64 = 4;
const FINAL_ZERO_SHOT: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDraw {
    pub class: usize,
    /// Whether the class was selected for query classification.
    pub chosen: bool,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeDraw {
    pub classes: Vec<ClassDraw>,
    pub chosen_count: usize,
    /// Chosen classes whose population could not cover a query draw.
    pub fallbacks: usize,
}

/// Draws supports for every labelled class and queries for `l` of them.
///
/// Supports and queries are disjoint and uniform without replacement. A
/// chosen class too small for `s + q` members keeps its support and skips
/// queries.
pub fn sample_episode(
    support: &SupportIndex,
    cfg: &EpisodeConfig,
    episode_seed: u64,
) -> Result<EpisodeDraw, EpisodeError> {
    let labelled = support.labelled_classes();
    let l = cfg.classes_per_episode.unwrap_or(labelled.len());
    if l > labelled.len() {
        return Err(EpisodeError::TooManyClasses {
            requested: l,
            labelled: labelled.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let mut chosen: Vec<usize> = labelled.choose_multiple(&mut rng, l).copied().collect();
    chosen.sort_unstable();
    let (s, q) = (cfg.support_per_class, cfg.query_per_class);
    let mut fallbacks = 0;
    let mut classes = Vec::with_capacity(labelled.len());
    for class in labelled {
        let mut members = support.class(class).to_vec();
        if members.len() < s {
            return Err(EpisodeError::InsufficientSupport {
                class,
                available: members.len(),
                required: s,
            });
        }
        members.shuffle(&mut rng);
        let is_chosen = chosen.binary_search(&class).is_ok();
        let query = if is_chosen && q > 0 {
            if members.len() >= s + q {
                members[s..s + q].to_vec()
            } else {
                fallbacks += 1;
                Vec::new()
            }
        } else {
            Vec::new()
        };
        members.truncate(s);
        classes.push(ClassDraw {
            class,
            chosen: is_chosen,
            support: members,
            query,
        });
    }
    Ok(EpisodeDraw {
        classes,
        chosen_count: l,
        fallbacks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoLoss {
    pub loss: f64,
    pub grad_z: Vec<f64>,
    pub grad_centroids: Vec<Vec<f64>>,
}

/// `‖z − c_true‖² + ln Σ_c exp(−‖z − c_c‖²)`, i.e. `−ln y_true`.
pub fn proto_query_loss(
    z: &[f64],
    bank: &CentroidBank,
    group: usize,
    true_class: usize,
) -> Result<ProtoLoss, EpisodeError> {
    let g = bank.group(group)?;
    let distances: Vec<f64> = (0..g.classes())
        .map(|c| crate::prototypes::squared_distance(z, g.centroid(c)))
        .collect();
    let shift = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let lse = -shift + libm::log(distances.iter().map(|d| libm::exp(-(d - shift))).sum::<f64>());
    let loss = distances[true_class] + lse;
    let y = distance_softmax(z, bank, group)?;
    let mut grad_y = vec![0.0; g.classes()];
    grad_y[true_class] = -1.0 / y.0[true_class].max(f64::MIN_POSITIVE);
    let hg = head_backward_with_probs(z, bank, group, &y, &grad_y)?;
    Ok(ProtoLoss {
        loss,
        grad_z: hg.grad_z,
        grad_centroids: hg.grad_centroids,
    })
}

/// Maps a final label to the models of its knowledge, and concept tuples to
/// labels.
pub trait KnowledgeProvider {
    fn space(&self) -> &ConceptSpace;
    fn models(&self, label: i64) -> Result<&ModelSet, EpisodeError>;
    fn label_of(&self, concepts: &[usize]) -> Option<i64>;
    /// Labels are `0..label_count()` for metric purposes.
    fn label_count(&self) -> usize;
}

/// Knowledge given as a total table from concept tuples to labels; each
/// label's formula is the pinned disjunction of its tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct TableKnowledge {
    space: ConceptSpace,
    table: BTreeMap<Vec<usize>, i64>,
    models: BTreeMap<i64, ModelSet>,
}

impl TableKnowledge {
    pub fn new(space: ConceptSpace, table: BTreeMap<Vec<usize>, i64>) -> Result<Self, EpisodeError> {
        let mut by_label: BTreeMap<i64, Vec<Vec<usize>>> = BTreeMap::new();
        for (tuple, &label) in &table {
            if label < 0 {
                return Err(EpisodeError::Config("labels must be non-negative"));
            }
            by_label.entry(label).or_default().push(tuple.clone());
        }
        let mut models = BTreeMap::new();
        for (label, tuples) in by_label {
            let f = tuple_knowledge(&tuples, &space)?;
            models.insert(label, enumerate_models(&f, &space, EnumerationMode::Free)?);
        }
        Ok(Self { space, table, models })
    }

    /// `Y = G_1 + G_2` over two digit groups.
    pub fn digit_sum() -> Self {
        let table = (0..10)
            .flat_map(|a| (0..10).map(move |b| (vec![a, b], (a + b) as i64)))
            .collect();
        Self::new(ConceptSpace::digit_pair(), table).expect("sum table is valid")
    }
}

impl KnowledgeProvider for TableKnowledge {
    fn space(&self) -> &ConceptSpace {
        &self.space
    }

    fn models(&self, label: i64) -> Result<&ModelSet, EpisodeError> {
        self.models.get(&label).ok_or(EpisodeError::UnknownLabel(label))
    }

    fn label_of(&self, concepts: &[usize]) -> Option<i64> {
        self.table.get(concepts).copied()
    }

    fn label_count(&self) -> usize {
        self.models.keys().next_back().map_or(0, |&m| m as usize + 1)
    }
}

/// Extractors, their optimizer state and the group-to-head assignment.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Heads {
    pub extractors: Vec<Mlp>,
    pub optimizers: Vec<AdamState>,
    pub group_heads: Vec<usize>,
    /// Classes per head.
    pub classes: Vec<usize>,
}

impl Heads {
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        output_dims: &[usize],
        classes: Vec<usize>,
        group_heads: Vec<usize>,
        seed: u64,
    ) -> Result<Self, EpisodeError> {
        if group_heads.iter().any(|&h| h >= classes.len()) || output_dims.len() != classes.len() {
            return Err(EpisodeError::Config("group mapped to a missing head"));
        }
        let extractors = output_dims
            .iter()
            .enumerate()
            .map(|(j, &out)| {
                Mlp::new(MlpSpec::new(
                    input_dim,
                    hidden.to_vec(),
                    out,
                    derive_seed(seed, STREAM_INIT, j as u64),
                ))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let optimizers = extractors
            .iter()
            .map(|m| AdamState::new(m.params.len()))
            .collect();
        Ok(Self {
            extractors,
            optimizers,
            group_heads,
            classes,
        })
    }

    pub fn head_count(&self) -> usize {
        self.extractors.len()
    }

    fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.extractors.iter().map(Mlp::zero_grads).collect()
    }

    fn step(&mut self, grads: &[Vec<f64>], adam: &AdamConfig) {
        for ((mlp, state), g) in self.extractors.iter_mut().zip(&mut self.optimizers).zip(grads) {
            adam_step(&mut mlp.params, state, g, adam);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NesyBatch {
    /// Mean semantic loss over the batch.
    pub loss: f64,
    /// Gradient of the mean loss per head.
    pub param_grads: Vec<Vec<f64>>,
    /// Gradient of the mean loss per head, per class centroid.
    pub centroid_grads: Vec<Vec<Vec<f64>>>,
}

fn check_groups(item: &TupleItem, groups: usize) -> Result<(), EpisodeError> {
    if item.inputs.len() != groups {
        return Err(EpisodeError::GroupCount {
            expected: groups,
            got: item.inputs.len(),
        });
    }
    Ok(())
}

/// Mean semantic loss of a weakly labelled batch under fixed centroids,
/// with gradients composed as semantic loss → distance softmax → extractor.
pub fn nesy_batch_loss(
    heads: &Heads,
    bank: &CentroidBank,
    store: &FeatureStore,
    batch: &[&TupleItem],
    knowledge: &dyn KnowledgeProvider,
) -> Result<NesyBatch, EpisodeError> {
    let mut param_grads = heads.zero_grads();
    let mut centroid_grads: Vec<Vec<Vec<f64>>> = bank
        .groups
        .iter()
        .map(|g| vec![vec![0.0; g.dim]; g.classes()])
        .collect();
    let mut total = 0.0;
    let scale = 1.0 / batch.len().max(1) as f64;
    let groups = heads.group_heads.len();
    for item in batch {
        check_groups(item, groups)?;
        let mut forward: Vec<(Vec<f64>, Tape, GroupProbs)> = Vec::with_capacity(groups);
        let mut flat = Vec::new();
        for (g, &id) in item.inputs.iter().enumerate() {
            let head = heads.group_heads[g];
            let (z, tape) = heads.extractors[head].forward(store.feature(id))?;
            let y = distance_softmax(&z, bank, head)?;
            flat.extend_from_slice(&y.0);
            forward.push((z, tape, y));
        }
        let models = knowledge.models(item.label)?;
        let r = semantic_loss(&OutputProbs::new(&flat), models)?;
        total += r.loss;
        let mut offset = 0;
        for (g, (z, tape, y)) in forward.iter().enumerate() {
            let head = heads.group_heads[g];
            let h = y.0.len();
            let grad_y: Vec<f64> = r.grad_y[offset..offset + h].iter().map(|v| v * scale).collect();
            offset += h;
            let hg = head_backward_with_probs(z, bank, head, y, &grad_y)?;
            heads.extractors[head].accumulate_backward(tape, &hg.grad_z, &mut param_grads[head])?;
            for (acc, gc) in centroid_grads[head].iter_mut().zip(&hg.grad_centroids) {
                acc.iter_mut().zip(gc).for_each(|(a, b)| *a += b);
            }
        }
    }
    Ok(NesyBatch {
        loss: total * scale,
        param_grads,
        centroid_grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpisodeLoss {
    pub proto_loss: f64,
    pub nesy_loss: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub epoch: usize,
    pub proto_loss: f64,
    pub nesy_loss: f64,
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub episodes: usize,
    /// Chosen classes whose query draw fell back to zero queries.
    pub query_fallbacks: usize,
}

impl TrainingLog {
    fn push_epoch(&mut self, epoch: usize, losses: &[EpisodeLoss]) {
        let n = losses.len().max(1) as f64;
        let mean = |f: fn(&EpisodeLoss) -> f64| losses.iter().map(f).sum::<f64>() / n;
        self.epochs.push(EpochLog {
            epoch,
            proto_loss: mean(|l| l.proto_loss),
            nesy_loss: mean(|l| l.nesy_loss),
            combined: mean(|l| l.combined),
        });
    }
}

/// Weakly labelled training data and the structure of the concept space.
pub struct TrainingSet<'a> {
    pub store: &'a FeatureStore,
    pub items: &'a [TupleItem],
    pub knowledge: &'a dyn KnowledgeProvider,
    /// Head serving each concept group.
    pub group_heads: Vec<usize>,
    /// Concept-labelled rows per head.
    pub supports: Vec<SupportIndex>,
}

impl TrainingSet<'_> {
    fn head_classes(&self) -> Result<Vec<usize>, EpisodeError> {
        let space = self.knowledge.space();
        if self.group_heads.len() != space.groups() {
            return Err(EpisodeError::GroupCount {
                expected: space.groups(),
                got: self.group_heads.len(),
            });
        }
        let heads = self.supports.len();
        let mut classes = vec![0; heads];
        for (g, &h) in self.group_heads.iter().enumerate() {
            if h >= heads {
                return Err(EpisodeError::Config("group mapped to a missing head"));
            }
            if classes[h] != 0 && classes[h] != space.group_size(g) {
                return Err(EpisodeError::Config("groups sharing a head differ in size"));
            }
            classes[h] = space.group_size(g);
        }
        Ok(classes)
    }
}

/// Cycles through a seeded permutation of the weakly labelled pool.
struct RoundRobin {
    order: Vec<usize>,
    cursor: usize,
}

impl RoundRobin {
    fn new(len: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_BATCH, 0)));
        Self { order, cursor: 0 }
    }

    fn take(&mut self, n: usize) -> Vec<usize> {
        (0..n)
            .map(|_| {
                let i = self.order[self.cursor];
                self.cursor = (self.cursor + 1) % self.order.len();
                i
            })
            .collect()
    }
}

/// A trained prototypical predictor.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PNetModel {
    pub heads: Heads,
    pub bank: CentroidBank,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedPNet {
    pub model: PNetModel,
    pub log: TrainingLog,
}

/// Embeds every support row of a head and builds its centroids; unlabelled
/// classes get zero-shot centroids. Returns the per-class tapes.
fn build_centroids(
    heads: &Heads,
    head: usize,
    store: &FeatureStore,
    draws: &[(usize, Vec<usize>)],
    bank: &mut CentroidBank,
    p: f64,
    zero_shot_seed: u64,
) -> Result<Vec<(usize, Vec<Tape>)>, EpisodeError> {
    let mlp = &heads.extractors[head];
    let mut tapes = Vec::with_capacity(draws.len());
    for (class, ids) in draws {
        let mut mean = vec![0.0; mlp.output_dim()];
        let mut class_tapes = Vec::with_capacity(ids.len());
        for &id in ids {
            let (z, tape) = mlp.forward(store.feature(id))?;
            mean.iter_mut().zip(&z).for_each(|(m, v)| *m += v);
            class_tapes.push(tape);
        }
        let n = ids.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        bank.set_centroid(head, *class, &mean, CentroidStatus::Labelled)?;
        tapes.push((*class, class_tapes));
    }
    if draws.len() < heads.classes[head] {
        init_unlabelled_centroids(bank, head, p, zero_shot_seed)?;
    }
    Ok(tapes)
}

fn empty_bank(heads: &Heads) -> CentroidBank {
    let dims: Vec<usize> = heads.extractors.iter().map(Mlp::output_dim).collect();
    CentroidBank::new(&heads.classes, &dims)
}

/// Runs `epochs × episodes_per_epoch` episodes, one optimizer step each.
pub fn train(data: &TrainingSet<'_>, cfg: &EpisodeConfig) -> Result<TrainedPNet, EpisodeError> {
    cfg.validate()?;
    let classes = data.head_classes()?;
    for (head, s) in data.supports.iter().enumerate() {
        let labelled = s.labelled_classes().len();
        if labelled < 2 {
            return Err(EpisodeError::TooFewLabelled { head, labelled });
        }
    }
    if data.items.is_empty() {
        return Err(EpisodeError::EmptyTrainingSet);
    }
    let outputs = vec![cfg.embedding_dim; classes.len()];
    let mut heads = Heads::new(
        data.store.dim(),
        &cfg.hidden,
        &outputs,
        classes,
        data.group_heads.clone(),
        cfg.seed,
    )?;
    let mut batches = RoundRobin::new(data.items.len(), cfg.seed);
    let mut log = TrainingLog::default();

    for epoch in 0..cfg.epochs {
        let mut losses = Vec::with_capacity(cfg.episodes_per_epoch);
        for episode in 0..cfg.episodes_per_epoch {
            let counter = (epoch * cfg.episodes_per_epoch + episode) as u64;
            let mut bank = empty_bank(&heads);
            let mut grads = heads.zero_grads();
            let mut centroid_grads: Vec<Vec<Vec<f64>>> = bank
                .groups
                .iter()
                .map(|g| vec![vec![0.0; g.dim]; g.classes()])
                .collect();
            let mut all_tapes = Vec::with_capacity(heads.head_count());
            let mut draws = Vec::with_capacity(heads.head_count());
            for (head, support) in data.supports.iter().enumerate() {
                let draw = sample_episode(
                    support,
                    cfg,
                    derive_seed(cfg.seed, STREAM_EPISODE, counter * 64 + head as u64),
                )?;
                log.query_fallbacks += draw.fallbacks;
                let pairs: Vec<(usize, Vec<usize>)> = draw
                    .classes
                    .iter()
                    .map(|d| (d.class, d.support.clone()))
                    .collect();
                let tapes = build_centroids(
                    &heads,
                    head,
                    data.store,
                    &pairs,
                    &mut bank,
                    cfg.zero_shot_p,
                    derive_seed(cfg.seed, STREAM_ZERO_SHOT, counter * 64 + head as u64),
                )?;
                all_tapes.push(tapes);
                draws.push(draw);
            }

            // Query classification on chosen classes.
            let mut proto = 0.0;
            for (head, draw) in draws.iter().enumerate() {
                let scale = 1.0 / (draw.chosen_count.max(1) * cfg.query_per_class.max(1)) as f64;
                for d in draw.classes.iter().filter(|d| d.chosen) {
                    for &id in &d.query {
                        let (z, tape) = heads.extractors[head].forward(data.store.feature(id))?;
                        let pl = proto_query_loss(&z, &bank, head, d.class)?;
                        proto += scale * pl.loss;
                        let gz: Vec<f64> = pl.grad_z.iter().map(|v| v * scale).collect();
                        heads.extractors[head].accumulate_backward(&tape, &gz, &mut grads[head])?;
                        for (acc, gc) in centroid_grads[head].iter_mut().zip(&pl.grad_centroids) {
                            acc.iter_mut().zip(gc).for_each(|(a, b)| *a += scale * b);
                        }
                    }
                }
            }

            // Semantic loss on a weakly labelled batch.
            let batch: Vec<&TupleItem> = batches
                .take(cfg.batch_size)
                .into_iter()
                .map(|i| &data.items[i])
                .collect();
            let nesy = nesy_batch_loss(&heads, &bank, data.store, &batch, data.knowledge)?;
            if cfg.nesy_weight != 0.0 {
                let w = cfg.nesy_weight;
                for (g, ng) in grads.iter_mut().zip(&nesy.param_grads) {
                    g.iter_mut().zip(ng).for_each(|(a, b)| *a += w * b);
                }
                for (head_acc, head_ng) in centroid_grads.iter_mut().zip(&nesy.centroid_grads) {
                    for (acc, gc) in head_acc.iter_mut().zip(head_ng) {
                        acc.iter_mut().zip(gc).for_each(|(a, b)| *a += w * b);
                    }
                }
            }

            let combined = proto + cfg.nesy_weight * nesy.loss;
            if !combined.is_finite() {
                return Err(EpisodeError::NonFinite {
                    epoch,
                    episode,
                    proto,
                    nesy: nesy.loss,
                });
            }

            // Labelled centroids are support means; zero-shot ones are constants.
            for (head, tapes) in all_tapes.iter().enumerate() {
                for (class, class_tapes) in tapes {
                    let n = class_tapes.len() as f64;
                    let g: Vec<f64> = centroid_grads[head][*class].iter().map(|v| v / n).collect();
                    for tape in class_tapes {
                        heads.extractors[head].accumulate_backward(tape, &g, &mut grads[head])?;
                    }
                }
            }
            heads.step(&grads, &cfg.adam);
            losses.push(EpisodeLoss {
                proto_loss: proto,
                nesy_loss: nesy.loss,
                combined,
            });
            log.episodes += 1;
        }
        log.push_epoch(epoch, &losses);
    }

    let bank = final_bank(&heads, data.store, &data.supports, cfg.zero_shot_p, cfg.seed)?;
    Ok(TrainedPNet {
        model: PNetModel { heads, bank },
        log,
    })
}

/// Centroids from every support row, zero-shot centroids from a fixed seed.
pub fn final_bank(
    heads: &Heads,
    store: &FeatureStore,
    supports: &[SupportIndex],
    p: f64,
    seed: u64,
) -> Result<CentroidBank, EpisodeError> {
    let mut bank = empty_bank(heads);
    for (head, support) in supports.iter().enumerate() {
        let draws: Vec<(usize, Vec<usize>)> = support
            .labelled_classes()
            .into_iter()
            .map(|c| (c, support.class(c).to_vec()))
            .collect();
        build_centroids(
            heads,
            head,
            store,
            &draws,
            &mut bank,
            p,
            derive_seed(seed, STREAM_ZERO_SHOT, FINAL_ZERO_SHOT),
        )?;
    }
    Ok(bank)
}

/// Any predictor producing a distribution over each group's classes.
pub trait ConceptModel {
    fn group_probs(&self, store: &FeatureStore, item: &TupleItem) -> Result<Vec<GroupProbs>, EpisodeError>;

    fn predict_concepts(&self, store: &FeatureStore, item: &TupleItem) -> Result<Vec<usize>, EpisodeError> {
        Ok(self
            .group_probs(store, item)?
            .iter()
            .map(GroupProbs::argmax)
            .collect())
    }
}

impl ConceptModel for PNetModel {
    fn group_probs(&self, store: &FeatureStore, item: &TupleItem) -> Result<Vec<GroupProbs>, EpisodeError> {
        check_groups(item, self.heads.group_heads.len())?;
        item.inputs
            .iter()
            .zip(&self.heads.group_heads)
            .map(|(&id, &head)| {
                let (z, _) = self.heads.extractors[head].forward(store.feature(id))?;
                Ok(distance_softmax(&z, &self.bank, head)?)
            })
            .collect()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| libm::exp(l - max)).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Softmax classifier over each group's classes, no prototype head.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BaselineModel {
    pub heads: Heads,
}

impl ConceptModel for BaselineModel {
    fn group_probs(&self, store: &FeatureStore, item: &TupleItem) -> Result<Vec<GroupProbs>, EpisodeError> {
        check_groups(item, self.heads.group_heads.len())?;
        item.inputs
            .iter()
            .zip(&self.heads.group_heads)
            .map(|(&id, &head)| {
                let (logits, _) = self.heads.extractors[head].forward(store.feature(id))?;
                Ok(GroupProbs(softmax(&logits)))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedBaseline {
    pub model: BaselineModel,
    pub log: TrainingLog,
}

/// Semantic loss only: the same step and batch schedule as [`train`], no
/// concept supervision.
pub fn train_baseline(data: &TrainingSet<'_>, cfg: &EpisodeConfig) -> Result<TrainedBaseline, EpisodeError> {
    cfg.validate()?;
    let classes = data.head_classes()?;
    if data.items.is_empty() {
        return Err(EpisodeError::EmptyTrainingSet);
    }
    let mut heads = Heads::new(
        data.store.dim(),
        &cfg.hidden,
        &classes.clone(),
        classes,
        data.group_heads.clone(),
        cfg.seed,
    )?;
    let mut batches = RoundRobin::new(data.items.len(), cfg.seed);
    let mut log = TrainingLog::default();
    let groups = heads.group_heads.len();
    for epoch in 0..cfg.epochs {
        let mut losses = Vec::with_capacity(cfg.episodes_per_epoch);
        for episode in 0..cfg.episodes_per_epoch {
            let idx = batches.take(cfg.batch_size);
            let scale = 1.0 / idx.len() as f64;
            let mut grads = heads.zero_grads();
            let mut total = 0.0;
            for &i in &idx {
                let item = &data.items[i];
                check_groups(item, groups)?;
                let mut forward = Vec::with_capacity(groups);
                let mut flat = Vec::new();
                for (g, &id) in item.inputs.iter().enumerate() {
                    let head = heads.group_heads[g];
                    let (logits, tape) = heads.extractors[head].forward(data.store.feature(id))?;
                    let y = softmax(&logits);
                    flat.extend_from_slice(&y);
                    forward.push((tape, y));
                }
                let r = semantic_loss(&OutputProbs::new(&flat), data.knowledge.models(item.label)?)?;
                total += r.loss;
                let mut offset = 0;
                for (g, (tape, y)) in forward.iter().enumerate() {
                    let head = heads.group_heads[g];
                    let gy = &r.grad_y[offset..offset + y.len()];
                    offset += y.len();
                    let mean: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                    let grad_logits: Vec<f64> =
                        gy.iter().zip(y).map(|(a, p)| scale * p * (a - mean)).collect();
                    heads.extractors[head].accumulate_backward(tape, &grad_logits, &mut grads[head])?;
                }
            }
            let nesy = total * scale;
            if !nesy.is_finite() {
                return Err(EpisodeError::NonFinite {
                    epoch,
                    episode,
                    proto: 0.0,
                    nesy,
                });
            }
            heads.step(&grads, &cfg.adam);
            losses.push(EpisodeLoss {
                proto_loss: 0.0,
                nesy_loss: nesy,
                combined: nesy,
            });
            log.episodes += 1;
        }
        log.push_epoch(epoch, &losses);
    }
    Ok(TrainedBaseline {
        model: BaselineModel { heads },
        log,
    })
}

/// Concept and label metrics; labels are predicted from concepts through
/// the knowledge's label table.
pub fn evaluate_model(
    model: &dyn ConceptModel,
    store: &FeatureStore,
    items: &[TupleItem],
    knowledge: &dyn KnowledgeProvider,
) -> Result<Evaluation, EpisodeError> {
    let classes = knowledge.space().sizes().iter().copied().max().unwrap_or(0);
    let mut predicted = Predictions {
        concepts: Vec::with_capacity(items.len()),
        labels: Vec::with_capacity(items.len()),
    };
    let mut truth = Predictions {
        concepts: Vec::with_capacity(items.len()),
        labels: Vec::with_capacity(items.len()),
    };
    for item in items {
        let concepts = model.predict_concepts(store, item)?;
        let label = knowledge
            .label_of(&concepts)
            .ok_or(EpisodeError::Config("label table is not total"))?;
        predicted.concepts.push(concepts);
        predicted.labels.push(label as usize);
        truth.concepts.push(item.concepts.clone());
        truth.labels.push(item.label as usize);
    }
    Ok(evaluate(&predicted, &truth, classes, knowledge.label_count())?)
}
