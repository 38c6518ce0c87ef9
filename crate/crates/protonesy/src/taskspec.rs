//! Ground-truth task specifications for the shortcut census, and the
//! digit-combination files that drive pair construction.

use std::collections::BTreeMap;

use protonesy_core::knowledge::{ConceptSpace, KnowledgeError};
use protonesy_core::shortcuts::{GroundTruthTask, LabelFunction, MapMode, ShortcutError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The even/odd pair task with its explicit sum table.
pub const MNIST_EVEN_ODD_SPEC: &str = include_str!("../specs/mnist_even_odd.json");
/// Admissible ordered digit pairs, one `g1 g2` per line.
pub const EVEN_ODD_COMBINATIONS_FILE: &str = include_str!("../specs/even_odd_combinations.txt");

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("malformed task spec: {0}")]
    Json(#[from] serde_json::Error),
    #[error("label table lists {tuple:?} twice")]
    DuplicateTuple { tuple: Vec<usize> },
    #[error(transparent)]
    Space(#[from] KnowledgeError),
    #[error(transparent)]
    Task(#[from] ShortcutError),
    #[error("combinations line {line}: {message}")]
    Combination { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelEntry {
    pub tuple: Vec<usize>,
    pub label: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Classes per concept group.
    pub sizes: Vec<usize>,
    /// Ground-truth concept tuples occurring in the training data.
    pub support: Vec<Vec<usize>>,
    /// The label function as an explicit table.
    pub labels: Vec<LabelEntry>,
    /// Concept-supervised classes per group.
    pub supervised: Vec<Vec<usize>>,
    /// `shared` (one map for all groups) or `per_group`; per-group when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub map_mode: Option<MapMode>,
}

impl TaskSpec {
    pub fn from_json(text: &str) -> Result<Self, SpecError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("specs serialize")
    }

    pub fn bundled_even_odd() -> Self {
        Self::from_json(MNIST_EVEN_ODD_SPEC).expect("bundled spec parses")
    }

    /// Sum labels over two groups of `classes`, with a shared map.
    pub fn pair_sum(classes: usize, pairs: &[(usize, usize)], supervised: Vec<usize>) -> Self {
        let labels = (0..classes)
            .flat_map(|a| {
                (0..classes).map(move |b| LabelEntry {
                    tuple: vec![a, b],
                    label: (a + b) as i64,
                })
            })
            .collect();
        Self {
            name: None,
            sizes: vec![classes, classes],
            support: pairs.iter().map(|&(a, b)| vec![a, b]).collect(),
            labels,
            supervised: vec![supervised.clone(), supervised],
            map_mode: Some(MapMode::Shared),
        }
    }

    pub fn to_task(&self) -> Result<GroundTruthTask, SpecError> {
        let mut table = BTreeMap::new();
        for e in &self.labels {
            if table.insert(e.tuple.clone(), e.label).is_some() {
                return Err(SpecError::DuplicateTuple {
                    tuple: e.tuple.clone(),
                });
            }
        }
        Ok(GroundTruthTask::new(
            ConceptSpace::new(self.sizes.clone())?,
            self.support.clone(),
            LabelFunction::Table(table),
            self.supervised.clone(),
            self.map_mode.unwrap_or(MapMode::PerGroup),
        )?)
    }
}

/// Parses `g1 g2` lines; blank lines and `#` comments are skipped.
pub fn parse_combinations(text: &str) -> Result<Vec<(usize, usize)>, SpecError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| SpecError::Combination { line: i + 1, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(err(format!("expected two digits, found {line:?}")));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| err(format!("{s:?} is not a class index")))
        };
        out.push((parse(fields[0])?, parse(fields[1])?));
    }
    if out.is_empty() {
        return Err(SpecError::Combination {
            line: 0,
            message: "no pairs".into(),
        });
    }
    Ok(out)
}
