//! The subcommands as library functions, so tests can drive them directly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use protonesy_core::episodic::{
    derive_seed, evaluate_model, train, train_baseline, ConceptModel, EpisodeError, SupportIndex,
    TableKnowledge, TrainingSet,
};
use protonesy_core::gradcheck::{run_all, Fault, GradcheckReport};
use protonesy_core::knowledge::ConceptSpace;
use protonesy_core::metrics::Evaluation;
use protonesy_core::shortcuts::{count_optima_with_budget, ShortcutError};
use protonesy_core::tasks::{
    build_even_odd, build_support, gen_synthetic, FeatureStore, PairDataset, Split, SplitSizes,
    SyntheticSpec, TaskError, TupleItem, DIGITS,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, Checkpoint, CheckpointError};
use crate::config::{ConfigError, ModelKind, RunConfig, TaskKind};
use crate::idx::{load_mnist_dir, IdxError};
use crate::output::{
    confusion_csv, epochs_csv, metric_value_csv, metrics_csv, read_metrics_csv, summarize, OutputError,
    RunRecord, SeedMetrics, SeedRecord, RUN_RECORD_VERSION,
};
use crate::taskspec::{parse_combinations, SpecError, TaskSpec, EVEN_ODD_COMBINATIONS_FILE};

/// Seed stream for concept-label sampling, disjoint from the trainer's.
const STREAM_SUPPORT: u64 = 16;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("invalid task spec: {0}")]
    Spec(#[from] SpecError),
    #[error("invalid dataset: {0}")]
    Task(#[from] TaskError),
    #[error("{0}")]
    Idx(#[from] IdxError),
    #[error("unreadable output file {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: OutputError,
    },
    #[error("{0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("malformed JSON in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("training failed: {0}")]
    Training(#[from] EpisodeError),
    #[error("search budget of {0} nodes exhausted")]
    Budget(u64),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("check failed: {0}")]
    Acceptance(String),
}

impl CliError {
    /// 1 for invalid input, 2 for runtime failures, 3 for failed checks.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_)
            | CliError::Spec(_)
            | CliError::Task(_)
            | CliError::Output { .. }
            | CliError::Json { .. } => 1,
            CliError::Idx(IdxError::Io { .. }) => 2,
            CliError::Idx(_) => 1,
            CliError::Checkpoint(CheckpointError::Io { .. }) => 2,
            CliError::Checkpoint(_) => 1,
            CliError::Training(_) | CliError::Budget(_) | CliError::Io { .. } => 2,
            CliError::Acceptance(_) => 3,
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn mkdir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn json_pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("records serialize");
    s.push('\n');
    s
}

/// `Y = G_1 + G_2` over two groups of `classes`.
pub fn pair_sum_knowledge(classes: usize) -> TableKnowledge {
    if classes == DIGITS {
        return TableKnowledge::digit_sum();
    }
    let table = (0..classes)
        .flat_map(|a| (0..classes).map(move |b| (vec![a, b], (a + b) as i64)))
        .collect();
    TableKnowledge::new(
        ConceptSpace::new(vec![classes, classes]).expect("two groups"),
        table,
    )
    .expect("sum table is valid")
}

/// The dataset a configuration describes, shared by all its seeds.
pub struct Prepared {
    pub store: FeatureStore,
    pub dataset: PairDataset,
    pub knowledge: TableKnowledge,
    pub classes: usize,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared, CliError> {
    let classes = cfg.classes();
    let (store, dataset) = match cfg.task {
        TaskKind::Synthetic => match &cfg.synth_dir {
            Some(dir) => {
                let (store, dataset, spec) = read_synthetic_dir(dir)?;
                if spec.classes != classes {
                    return Err(ConfigError {
                        key: "synth_classes".into(),
                        line: None,
                        message: format!("{} holds {} classes", dir.display(), spec.classes),
                    }
                    .into());
                }
                (store, dataset)
            }
            None => {
                let t = gen_synthetic(&cfg.synthetic_spec())?;
                (t.store, t.dataset)
            }
        },
        TaskKind::MnistEvenOdd => {
            let dir = cfg.mnist_dir.as_ref().ok_or_else(|| ConfigError {
                key: "mnist_dir".into(),
                line: None,
                message: "required for task mnist_even_odd".into(),
            })?;
            let store = load_mnist_dir(dir, "train")?.features()?;
            let text = match &cfg.combinations {
                Some(p) => read(p)?,
                None => EVEN_ODD_COMBINATIONS_FILE.to_string(),
            };
            let pairs = parse_combinations(&text)?;
            let dataset = build_even_odd(&store, DIGITS, &pairs, cfg.split_sizes(), cfg.data_seed)?;
            if dataset.scaled {
                eprintln!(
                    "warning: {} images cannot fill the requested splits; using {}/{}/{}",
                    store.len(),
                    dataset.sizes.train,
                    dataset.sizes.val,
                    dataset.sizes.test
                );
            }
            (store, dataset)
        }
    };
    Ok(Prepared {
        store,
        dataset,
        knowledge: pair_sum_knowledge(classes),
        classes,
    })
}

pub fn support_for_seed(cfg: &RunConfig, data: &Prepared, seed: u64) -> Result<SupportIndex, CliError> {
    let classes: Vec<usize> = cfg
        .labelled_classes
        .clone()
        .unwrap_or_else(|| (0..data.classes).collect());
    Ok(build_support(
        &data.store,
        &data.dataset,
        data.classes,
        &classes,
        cfg.labels_per_class,
        derive_seed(seed, STREAM_SUPPORT, 0),
    )?)
}

fn group_heads(cfg: &RunConfig) -> Vec<usize> {
    if cfg.shared_head {
        vec![0, 0]
    } else {
        vec![0, 1]
    }
}

/// Trains one seed and returns the model with its log.
pub fn train_seed(cfg: &RunConfig, data: &Prepared, seed: u64) -> Result<(Checkpoint, SeedLog), CliError> {
    let support = support_for_seed(cfg, data, seed)?;
    let heads = group_heads(cfg);
    let n_heads = heads.iter().max().map_or(0, |h| h + 1);
    let set = TrainingSet {
        store: &data.store,
        items: &data.dataset.train,
        knowledge: &data.knowledge,
        group_heads: heads,
        supports: vec![support; n_heads],
    };
    let mut episode = cfg.episode.clone();
    episode.seed = seed;
    Ok(match cfg.model {
        ModelKind::SlPnet => {
            let t = train(&set, &episode)?;
            (
                Checkpoint::SlPnet(t.model),
                SeedLog {
                    epochs: t.log.epochs,
                    query_fallbacks: t.log.query_fallbacks,
                },
            )
        }
        ModelKind::SlBaseline => {
            let t = train_baseline(&set, &episode)?;
            (
                Checkpoint::SlBaseline(t.model),
                SeedLog {
                    epochs: t.log.epochs,
                    query_fallbacks: t.log.query_fallbacks,
                },
            )
        }
    })
}

pub struct SeedLog {
    pub epochs: Vec<protonesy_core::episodic::EpochLog>,
    pub query_fallbacks: usize,
}

fn as_model(ckpt: &Checkpoint) -> Result<&dyn ConceptModel, CliError> {
    match ckpt {
        Checkpoint::SlPnet(m) => Ok(m),
        Checkpoint::SlBaseline(m) => Ok(m),
        _ => Err(CliError::Checkpoint(CheckpointError::Format(
            "checkpoint holds no trained model".into(),
        ))),
    }
}

pub fn evaluate_split(ckpt: &Checkpoint, data: &Prepared, split: Split) -> Result<Evaluation, CliError> {
    let items: &[TupleItem] = data.dataset.split(split);
    Ok(evaluate_model(
        as_model(ckpt)?,
        &data.store,
        items,
        &data.knowledge,
    )?)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

/// Trains every seed and writes:
/// `metrics.csv`, `summary.csv` and `run.json` at the top level, and per
/// seed `metrics.csv` (`metric,value`), `epochs.csv`, `epochs.jsonl`,
/// `confusion.csv`, `label_confusion.csv` and `model.json`.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunRecord, CliError> {
    cfg.validate()?;
    let start = Instant::now();
    let data = prepare_data(cfg)?;
    mkdir(&cfg.out)?;
    let mut seeds: Vec<u64> = cfg.seeds.clone();
    seeds.sort_unstable();
    seeds.dedup();
    let mut records = Vec::with_capacity(seeds.len());
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in &seeds {
        let (ckpt, log) = train_seed(cfg, &data, seed)?;
        let val = evaluate_split(&ckpt, &data, Split::Val)?;
        let test = evaluate_split(&ckpt, &data, Split::Test)?;
        let dir = seed_dir(&cfg.out, seed);
        mkdir(&dir)?;
        write(&dir.join("metrics.csv"), &metric_value_csv(&test.report))?;
        write(&dir.join("epochs.csv"), &epochs_csv(&log.epochs))?;
        let stream: String = log
            .epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("finite losses") + "\n")
            .collect();
        write(&dir.join("epochs.jsonl"), &stream)?;
        write(
            &dir.join("confusion.csv"),
            &confusion_csv(&test.concept_confusion),
        )?;
        write(
            &dir.join("label_confusion.csv"),
            &confusion_csv(&test.label_confusion),
        )?;
        checkpoint::save(&dir.join("model.json"), &ckpt)?;
        rows.push(SeedMetrics::from_report(seed, &test.report));
        records.push(SeedRecord {
            seed,
            epochs: log.epochs,
            query_fallbacks: log.query_fallbacks,
            val: val.report,
            test: test.report,
        });
    }
    let summary = summarize(&rows);
    write(&cfg.out.join("metrics.csv"), &metrics_csv(&rows))?;
    write(&cfg.out.join("summary.csv"), &summary_csv(&summary))?;
    let record = RunRecord {
        version: RUN_RECORD_VERSION,
        config: cfg.clone(),
        seeds: records,
        summary,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    write(&cfg.out.join("run.json"), &json_pretty(&record))?;
    Ok(record)
}

fn summary_csv(summary: &BTreeMap<String, crate::output::MeanStd>) -> String {
    let mut out = String::from("metric,mean,std\n");
    for name in crate::output::METRIC_NAMES {
        let s = summary[name];
        out.push_str(&format!("{name},{},{}\n", s.mean, s.std));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub rows: Vec<SeedMetrics>,
    /// Seeds whose recomputed metrics differ from the stored `metrics.csv`.
    pub mismatched: Vec<u64>,
}

/// Re-reads a training run, re-evaluates each checkpoint on the test split
/// and compares with the stored metrics. Writes `metrics.csv` into `out`.
pub fn cmd_eval(run_dir: &Path, out: &Path, mnist_dir: Option<&Path>) -> Result<EvalOutcome, CliError> {
    let run_json = run_dir.join("run.json");
    let record: RunRecord = serde_json::from_str(&read(&run_json)?).map_err(|source| CliError::Json {
        path: run_json.clone(),
        source,
    })?;
    let mut cfg = record.config;
    if let Some(d) = mnist_dir {
        cfg.mnist_dir = Some(d.to_path_buf());
    }
    let stored_path = run_dir.join("metrics.csv");
    let stored = read_metrics_csv(&read(&stored_path)?).map_err(|source| CliError::Output {
        path: stored_path,
        source,
    })?;
    let data = prepare_data(&cfg)?;
    let mut rows = Vec::with_capacity(stored.len());
    let mut mismatched = Vec::new();
    for s in &stored {
        let ckpt = checkpoint::load(&seed_dir(run_dir, s.seed).join("model.json"))?;
        let eval = evaluate_split(&ckpt, &data, Split::Test)?;
        let row = SeedMetrics::from_report(s.seed, &eval.report);
        if row != *s {
            mismatched.push(s.seed);
        }
        rows.push(row);
    }
    mkdir(out)?;
    write(&out.join("metrics.csv"), &metrics_csv(&rows))?;
    Ok(EvalOutcome { rows, mismatched })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensusOutput {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub optima_count: u64,
    pub shortcut_count: u64,
    pub identity_is_optimum: bool,
    pub nodes_visited: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub catalogue: Option<Vec<protonesy_core::shortcuts::ClassMap>>,
}

/// Counts the deterministic optima of a task spec; writes `census.json`.
pub fn cmd_count_rs(
    spec: &TaskSpec,
    budget: u64,
    with_catalogue: bool,
    out: Option<&Path>,
) -> Result<CensusOutput, CliError> {
    let task = spec.to_task()?;
    let census = count_optima_with_budget(&task, budget).map_err(|e| match e {
        ShortcutError::BudgetExceeded(b) => CliError::Budget(b),
        other => CliError::Spec(other.into()),
    })?;
    let result = CensusOutput {
        name: spec.name.clone(),
        optima_count: census.optima_count,
        shortcut_count: census.shortcut_count,
        identity_is_optimum: census.identity_is_optimum,
        nodes_visited: census.nodes_visited,
        catalogue: if with_catalogue { census.catalogue } else { None },
    };
    if let Some(dir) = out {
        mkdir(dir)?;
        write(&dir.join("census.json"), &json_pretty(&result))?;
    }
    Ok(result)
}

/// Runs every gradient suite; writes `gradcheck.csv` (`suite,trial,error`)
/// and `gradcheck.json`.
pub fn cmd_gradcheck(
    seed: u64,
    trials: usize,
    fault: Option<Fault>,
    out: Option<&Path>,
) -> Result<GradcheckReport, CliError> {
    if trials == 0 {
        return Err(ConfigError {
            key: "trials".into(),
            line: None,
            message: "must be at least 1".into(),
        }
        .into());
    }
    let report = run_all(trials, seed, fault);
    if let Some(dir) = out {
        mkdir(dir)?;
        let mut csv = String::from("suite,trial,error\n");
        for s in &report.suites {
            for (i, e) in s.errors.iter().enumerate() {
                csv.push_str(&format!("{},{i},{e}\n", s.name));
            }
        }
        write(&dir.join("gradcheck.csv"), &csv)?;
        write(&dir.join("gradcheck.json"), &json_pretty(&report))?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub version: u32,
    pub spec: SyntheticSpec,
    pub sizes: SplitSizes,
    pub means: Vec<Vec<f64>>,
    pub rows: usize,
}

/// Writes `manifest.json`, `features.csv` (`id,label,x0,…`) and `pairs.csv`
/// (`split,left,right,g1,g2,label`).
pub fn cmd_gen_synth(spec: &SyntheticSpec, out: &Path) -> Result<SyntheticManifest, CliError> {
    let task = gen_synthetic(spec)?;
    mkdir(out)?;
    let manifest = SyntheticManifest {
        version: 1,
        spec: spec.clone(),
        sizes: task.dataset.sizes,
        means: task.means.clone(),
        rows: task.store.len(),
    };
    write(&out.join("manifest.json"), &json_pretty(&manifest))?;
    let mut features = String::from("id,label");
    for j in 0..task.store.dim() {
        features.push_str(&format!(",x{j}"));
    }
    features.push('\n');
    for id in 0..task.store.len() {
        features.push_str(&format!("{id},{}", task.store.label(id)));
        for v in task.store.feature(id) {
            features.push_str(&format!(",{v}"));
        }
        features.push('\n');
    }
    write(&out.join("features.csv"), &features)?;
    let mut pairs = String::from("split,left,right,g1,g2,label\n");
    for split in Split::ALL {
        for t in task.dataset.split(split) {
            pairs.push_str(&format!(
                "{},{},{},{},{},{}\n",
                split.name(),
                t.inputs[0],
                t.inputs[1],
                t.concepts[0],
                t.concepts[1],
                t.label
            ));
        }
    }
    write(&out.join("pairs.csv"), &pairs)?;
    Ok(manifest)
}

fn bad_file(path: &Path, message: String) -> CliError {
    CliError::Output {
        path: path.to_path_buf(),
        source: OutputError::Row { row: 0, message },
    }
}

/// Reads a directory written by [`cmd_gen_synth`].
pub fn read_synthetic_dir(dir: &Path) -> Result<(FeatureStore, PairDataset, SyntheticSpec), CliError> {
    let mpath = dir.join("manifest.json");
    let manifest: SyntheticManifest =
        serde_json::from_str(&read(&mpath)?).map_err(|source| CliError::Json {
            path: mpath.clone(),
            source,
        })?;
    let fpath = dir.join("features.csv");
    let ftext = read(&fpath)?;
    let mut r = csv::Reader::from_reader(ftext.as_bytes());
    let wrap = |path: &Path, e: csv::Error| CliError::Output {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let dim = r.headers().map_err(|e| wrap(&fpath, e))?.len().saturating_sub(2);
    let mut values = Vec::with_capacity(manifest.rows * dim);
    let mut labels = Vec::with_capacity(manifest.rows);
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| wrap(&fpath, e))?;
        let parse = |k: usize| -> Result<f64, CliError> {
            rec.get(k)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad_file(&fpath, format!("row {}: bad column {k}", i + 1)))
        };
        if rec.get(0) != Some(i.to_string().as_str()) {
            return Err(bad_file(&fpath, format!("row {} is out of order", i + 1)));
        }
        labels.push(parse(1)? as usize);
        for k in 0..dim {
            values.push(parse(k + 2)?);
        }
    }
    let store = FeatureStore::new(dim, values, labels)?;
    if store.len() != manifest.rows {
        return Err(bad_file(
            &fpath,
            format!("{} rows, manifest says {}", store.len(), manifest.rows),
        ));
    }
    let ppath = dir.join("pairs.csv");
    let ptext = read(&ppath)?;
    let mut r = csv::Reader::from_reader(ptext.as_bytes());
    let mut splits: [Vec<TupleItem>; 3] = Default::default();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| wrap(&ppath, e))?;
        let split = Split::ALL
            .iter()
            .position(|s| Some(s.name()) == rec.get(0))
            .ok_or_else(|| bad_file(&ppath, format!("row {}: unknown split", i + 1)))?;
        let n: Vec<usize> = (1..6)
            .map(|k| rec.get(k).and_then(|s| s.parse().ok()))
            .collect::<Option<_>>()
            .ok_or_else(|| bad_file(&ppath, format!("row {}: bad integer", i + 1)))?;
        if n[0] >= store.len() || n[1] >= store.len() {
            return Err(bad_file(
                &ppath,
                format!("row {}: feature id out of range", i + 1),
            ));
        }
        splits[split].push(TupleItem {
            inputs: vec![n[0], n[1]],
            concepts: vec![n[2], n[3]],
            label: n[4] as i64,
        });
    }
    let [train, val, test] = splits;
    let dataset = PairDataset {
        sizes: SplitSizes {
            train: train.len(),
            val: val.len(),
            test: test.len(),
        },
        train,
        val,
        test,
        scaled: false,
    };
    Ok((store, dataset, manifest.spec))
}
