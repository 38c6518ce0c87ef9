use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protonesy_core::backbone::Mlp;
use protonesy_core::episodic::{
    evaluate_model, nesy_batch_loss, proto_query_loss, train, train_baseline, EpisodeConfig, EpisodeError,
    Heads, KnowledgeProvider, TableKnowledge, TrainingSet,
};
use protonesy_core::knowledge::{enumerate_models, ConceptSpace, EnumerationMode, Formula, ModelSet};
use protonesy_core::prototypes::{distance_softmax, CentroidBank, CentroidStatus};
use protonesy_core::tasks::{
    build_support, gen_synthetic, FeatureStore, SplitSizes, SyntheticSpec, TupleItem,
};

/// Labels `(a + b) mod 3` over two ternary groups.
fn mod3_table() -> BTreeMap<Vec<usize>, i64> {
    (0..3)
        .flat_map(|a| (0..3).map(move |b| (vec![a, b], ((a + b) % 3) as i64)))
        .collect()
}

/// Probabilities `exp(−‖z − c‖²) / Σ exp(−‖z − c'‖²)`, written out directly.
fn reference_softmax(z: &[f64], centroids: &[Vec<f64>]) -> Vec<f64> {
    let e: Vec<f64> = centroids
        .iter()
        .map(|c| (-c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()).exp())
        .collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Mean over the batch of `−ln Σ_{tuples with the label} Π_atoms w`, where an
/// atom weighs `p` if the tuple sets it and `1 − p` otherwise.
fn reference_nesy_loss(
    params: &[Vec<f64>],
    heads: &Heads,
    centroids: &[Vec<Vec<f64>>],
    store: &FeatureStore,
    items: &[TupleItem],
    table: &BTreeMap<Vec<usize>, i64>,
) -> f64 {
    let mut total = 0.0;
    for item in items {
        let probs: Vec<Vec<f64>> = item
            .inputs
            .iter()
            .enumerate()
            .map(|(g, &id)| {
                let h = heads.group_heads[g];
                let mlp = Mlp::from_params(heads.extractors[h].spec.clone(), params[h].clone()).unwrap();
                let (z, _) = mlp.forward(store.feature(id)).unwrap();
                reference_softmax(&z, &centroids[h])
            })
            .collect();
        let wmc: f64 = table
            .iter()
            .filter(|(_, &y)| y == item.label)
            .map(|(t, _)| {
                probs
                    .iter()
                    .zip(t)
                    .map(|(p, &c)| {
                        p.iter()
                            .enumerate()
                            .map(|(k, &v)| if k == c { v } else { 1.0 - v })
                            .product::<f64>()
                    })
                    .product::<f64>()
            })
            .sum();
        total -= wmc.ln();
    }
    total / items.len() as f64
}

struct Fixture {
    store: FeatureStore,
    items: Vec<TupleItem>,
    heads: Heads,
    bank: CentroidBank,
    centroids: Vec<Vec<Vec<f64>>>,
}

fn fixture(rng: &mut ChaCha8Rng, group_heads: Vec<usize>) -> Fixture {
    let dim = 3;
    let rows = 8;
    let values: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let store = FeatureStore::new(dim, values, vec![0; rows]).unwrap();
    let heads_n = group_heads.iter().max().unwrap() + 1;
    let heads = Heads::new(
        dim,
        &[4],
        &vec![2; heads_n],
        vec![3; heads_n],
        group_heads,
        rng.gen(),
    )
    .unwrap();
    let mut bank = CentroidBank::new(&vec![3; heads_n], &vec![2; heads_n]);
    let mut centroids = Vec::new();
    for h in 0..heads_n {
        let mut cs = Vec::new();
        for c in 0..3 {
            let v: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            bank.set_centroid(h, c, &v, CentroidStatus::Labelled).unwrap();
            cs.push(v);
        }
        centroids.push(cs);
    }
    let items = (0..4)
        .map(|_| {
            let (a, b) = (rng.gen_range(0..3), rng.gen_range(0..3));
            TupleItem {
                inputs: vec![rng.gen_range(0..rows), rng.gen_range(0..rows)],
                concepts: vec![a, b],
                label: ((a + b) % 3) as i64,
            }
        })
        .collect();
    Fixture {
        store,
        items,
        heads,
        bank,
        centroids,
    }
}

#[test]
fn nesy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let knowledge = TableKnowledge::new(ConceptSpace::new(vec![3, 3]).unwrap(), mod3_table()).unwrap();
    let h = 1e-6;
    for trial in 0..10 {
        let shared = trial % 2 == 0;
        let f = fixture(&mut rng, if shared { vec![0, 0] } else { vec![0, 1] });
        let batch: Vec<&TupleItem> = f.items.iter().collect();
        let out = nesy_batch_loss(&f.heads, &f.bank, &f.store, &batch, &knowledge).unwrap();
        let params: Vec<Vec<f64>> = f.heads.extractors.iter().map(|m| m.params.clone()).collect();
        let reference =
            reference_nesy_loss(&params, &f.heads, &f.centroids, &f.store, &f.items, &mod3_table());
        assert!((out.loss - reference).abs() < 1e-10);
        for (head, grads) in out.param_grads.iter().enumerate() {
            let mut worst: f64 = 0.0;
            let mut scale: f64 = 1e-6;
            for i in 0..grads.len() {
                let mut up = params.clone();
                up[head][i] += h;
                let mut down = params.clone();
                down[head][i] -= h;
                let numeric =
                    (reference_nesy_loss(&up, &f.heads, &f.centroids, &f.store, &f.items, &mod3_table())
                        - reference_nesy_loss(
                            &down,
                            &f.heads,
                            &f.centroids,
                            &f.store,
                            &f.items,
                            &mod3_table(),
                        ))
                        / (2.0 * h);
                worst = worst.max((numeric - grads[i]).abs());
                scale = scale.max(numeric.abs()).max(grads[i].abs());
            }
            assert!(worst / scale < 1e-4, "head {head}: {}", worst / scale);
        }
    }
}

/// Every assignment is a model, whatever the label.
struct Tautology {
    space: ConceptSpace,
    models: ModelSet,
}

impl KnowledgeProvider for Tautology {
    fn space(&self) -> &ConceptSpace {
        &self.space
    }
    fn models(&self, _label: i64) -> Result<&ModelSet, EpisodeError> {
        Ok(&self.models)
    }
    fn label_of(&self, _concepts: &[usize]) -> Option<i64> {
        Some(0)
    }
    fn label_count(&self) -> usize {
        1
    }
}

#[test]
fn tautological_knowledge_has_no_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let space = ConceptSpace::new(vec![3, 3]).unwrap();
    let models = enumerate_models(&Formula::True, &space, EnumerationMode::Free).unwrap();
    let k = Tautology { space, models };
    let f = fixture(&mut rng, vec![0, 1]);
    let batch: Vec<&TupleItem> = f.items.iter().collect();
    let out = nesy_batch_loss(&f.heads, &f.bank, &f.store, &batch, &k).unwrap();
    assert!(out.loss.abs() < 1e-12);
    assert!(out.param_grads.iter().flatten().all(|g| g.abs() < 1e-12));
    assert!(out
        .centroid_grads
        .iter()
        .flatten()
        .flatten()
        .all(|g| g.abs() < 1e-12));
}

#[test]
fn single_model_label_is_negative_log_of_its_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let knowledge = TableKnowledge::digit_sum();
    // Label 0 has the single decomposition (0, 0).
    assert_eq!(knowledge.models(0).unwrap().len(), 1);
    let dim = 2;
    let store = FeatureStore::new(dim, vec![0.3, -0.4, 1.0, 0.2], vec![0, 0]).unwrap();
    let heads = Heads::new(dim, &[], &[4], vec![10], vec![0, 0], 5).unwrap();
    let mut bank = CentroidBank::new(&[10], &[4]);
    for c in 0..10 {
        let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        bank.set_centroid(0, c, &v, CentroidStatus::Labelled).unwrap();
    }
    let item = TupleItem {
        inputs: vec![0, 1],
        concepts: vec![0, 0],
        label: 0,
    };
    let out = nesy_batch_loss(&heads, &bank, &store, &[&item], &knowledge).unwrap();
    let mut expected = 0.0;
    for id in [0, 1] {
        let (z, _) = heads.extractors[0].forward(store.feature(id)).unwrap();
        let y = distance_softmax(&z, &bank, 0).unwrap().0;
        expected -= y[0].ln() + y[1..].iter().map(|v| (1.0 - v).ln()).sum::<f64>();
    }
    assert!((out.loss - expected).abs() < 1e-10);
}

#[test]
fn proto_loss_is_negative_log_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    for _ in 0..100 {
        let classes = rng.gen_range(2..8);
        let dim = rng.gen_range(1..6);
        let mut bank = CentroidBank::new(&[classes], &[dim]);
        for c in 0..classes {
            let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            bank.set_centroid(0, c, &v, CentroidStatus::Labelled).unwrap();
        }
        let z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = rng.gen_range(0..classes);
        let pl = proto_query_loss(&z, &bank, 0, t).unwrap();
        let y = distance_softmax(&z, &bank, 0).unwrap();
        assert!((pl.loss + y.0[t].ln()).abs() < 1e-10);

        // Gradient with respect to the embedding.
        let h = 1e-6;
        for i in 0..dim {
            let mut up = z.clone();
            up[i] += h;
            let mut down = z.clone();
            down[i] -= h;
            let numeric = (proto_query_loss(&up, &bank, 0, t).unwrap().loss
                - proto_query_loss(&down, &bank, 0, t).unwrap().loss)
                / (2.0 * h);
            assert!((numeric - pl.grad_z[i]).abs() < 1e-6 * numeric.abs().max(1.0));
        }
    }
}

fn small_config(seed: u64) -> EpisodeConfig {
    EpisodeConfig {
        episodes_per_epoch: 20,
        epochs: 2,
        hidden: vec![16],
        embedding_dim: 8,
        batch_size: 8,
        seed,
        ..EpisodeConfig::default()
    }
}

struct SyntheticRun {
    store: FeatureStore,
    train: Vec<TupleItem>,
    test: Vec<TupleItem>,
    support: protonesy_core::episodic::SupportIndex,
}

fn synthetic(seed: u64) -> SyntheticRun {
    let spec = SyntheticSpec {
        sizes: SplitSizes {
            train: 300,
            val: 50,
            test: 200,
        },
        seed,
        ..SyntheticSpec::default()
    };
    let task = gen_synthetic(&spec).unwrap();
    let classes: Vec<usize> = (0..10).collect();
    let support = build_support(&task.store, &task.dataset, 10, &classes, 3, seed).unwrap();
    SyntheticRun {
        store: task.store,
        train: task.dataset.train,
        test: task.dataset.test,
        support,
    }
}

#[test]
fn training_is_deterministic() {
    let run = synthetic(1);
    let knowledge = TableKnowledge::digit_sum();
    let data = TrainingSet {
        store: &run.store,
        items: &run.train,
        knowledge: &knowledge,
        group_heads: vec![0, 0],
        supports: vec![run.support.clone()],
    };
    let a = train(&data, &small_config(3)).unwrap();
    let b = train(&data, &small_config(3)).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.log, b.log);
    let c = train(&data, &small_config(4)).unwrap();
    assert_ne!(
        a.model.heads.extractors[0].params,
        c.model.heads.extractors[0].params
    );
}

#[test]
fn zero_epochs_keep_initial_parameters() {
    let run = synthetic(2);
    let knowledge = TableKnowledge::digit_sum();
    let data = TrainingSet {
        store: &run.store,
        items: &run.train,
        knowledge: &knowledge,
        group_heads: vec![0, 0],
        supports: vec![run.support.clone()],
    };
    let cfg = EpisodeConfig {
        epochs: 0,
        ..small_config(7)
    };
    let trained = train(&data, &cfg).unwrap();
    let fresh = Heads::new(
        run.store.dim(),
        &cfg.hidden,
        &[cfg.embedding_dim],
        vec![10],
        vec![0, 0],
        7,
    )
    .unwrap();
    assert_eq!(trained.model.heads.extractors, fresh.extractors);
    assert_eq!(trained.log.episodes, 0);
    assert!(trained.log.epochs.is_empty());
}

#[test]
fn without_semantic_loss_knowledge_is_irrelevant() {
    let run = synthetic(3);
    let sum = TableKnowledge::digit_sum();
    // Same labels, permuted so the formulas differ.
    let scrambled_table: BTreeMap<Vec<usize>, i64> = (0..10)
        .flat_map(|a| (0..10).map(move |b| (vec![a, b], ((a * 7 + b * 3) % 19) as i64)))
        .collect();
    let scrambled = TableKnowledge::new(ConceptSpace::digit_pair(), scrambled_table).unwrap();
    let cfg = EpisodeConfig {
        nesy_weight: 0.0,
        ..small_config(5)
    };
    let relabelled: Vec<TupleItem> = run
        .train
        .iter()
        .map(|t| TupleItem {
            label: scrambled.label_of(&t.concepts).unwrap(),
            ..t.clone()
        })
        .collect();
    let a = train(
        &TrainingSet {
            store: &run.store,
            items: &run.train,
            knowledge: &sum,
            group_heads: vec![0, 0],
            supports: vec![run.support.clone()],
        },
        &cfg,
    )
    .unwrap();
    let b = train(
        &TrainingSet {
            store: &run.store,
            items: &relabelled,
            knowledge: &scrambled,
            group_heads: vec![0, 0],
            supports: vec![run.support.clone()],
        },
        &cfg,
    )
    .unwrap();
    assert_eq!(a.model.heads.extractors, b.model.heads.extractors);
    assert_eq!(a.model.bank, b.model.bank);
}

#[test]
fn invalid_configurations_are_rejected() {
    let run = synthetic(4);
    let knowledge = TableKnowledge::digit_sum();
    let data = TrainingSet {
        store: &run.store,
        items: &run.train,
        knowledge: &knowledge,
        group_heads: vec![0, 0],
        supports: vec![run.support.clone()],
    };
    let bad = EpisodeConfig {
        zero_shot_p: 1.0,
        ..small_config(0)
    };
    assert!(matches!(train(&data, &bad), Err(EpisodeError::Config(_))));
    let one_class = protonesy_core::episodic::SupportIndex::new(vec![run.support.class(0).to_vec()]);
    let thin = TrainingSet {
        supports: vec![one_class],
        ..data
    };
    assert!(matches!(
        train(&thin, &small_config(0)),
        Err(EpisodeError::TooFewLabelled { .. })
    ));
}

#[test]
fn synthetic_pipeline_recovers_concepts() {
    let run = synthetic(5);
    let knowledge = TableKnowledge::digit_sum();
    let data = TrainingSet {
        store: &run.store,
        items: &run.train,
        knowledge: &knowledge,
        group_heads: vec![0, 0],
        supports: vec![run.support.clone()],
    };
    let cfg = EpisodeConfig {
        epochs: 3,
        episodes_per_epoch: 100,
        hidden: vec![32],
        batch_size: 32,
        ..small_config(0)
    };
    let pnet = train(&data, &cfg).unwrap();
    let eval = evaluate_model(&pnet.model, &run.store, &run.test, &knowledge).unwrap();
    assert!(eval.report.f1_c > 0.9, "concept F1 {}", eval.report.f1_c);
    assert!(eval.report.acc_y > 0.8, "label accuracy {}", eval.report.acc_y);
    assert_eq!(eval.report.cls_c, 0.0);
    assert_eq!(pnet.log.epochs.len(), 3);
    assert_eq!(pnet.log.episodes, 300);

    let base = train_baseline(&data, &cfg).unwrap();
    let beval = evaluate_model(&base.model, &run.store, &run.test, &knowledge).unwrap();
    assert!(beval.report.f1_c.is_finite());
    assert!(base.log.epochs.iter().all(|e| e.proto_loss == 0.0));
}
