//! Counting deterministic optima of a concept predictor.
//!
//! A deterministic predictor is described by a class map `α`. It is an
//! optimum when it fixes every supervised class and preserves the label of
//! every ground-truth tuple in the support: `β(α(g)) = β(g)`. Every optimum
//! other than the identity is a reasoning shortcut.
//!
//! Maps are counted over the classes that occur in the support (at the
//! positions a map governs); classes that never occur do not multiply the
//! count. Maps need not be injective.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::knowledge::ConceptSpace;

pub const DEFAULT_NODE_BUDGET: u64 = 1_000_000_000;
pub const CATALOGUE_LIMIT: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ShortcutError {
    #[error("search exceeded the budget of {0} nodes")]
    BudgetExceeded(u64),
    #[error("support tuple {index} does not fit the concept space")]
    TupleOutOfSpace { index: usize },
    #[error("label function undefined on support tuple {index}")]
    LabelUndefined { index: usize },
    #[error("shared map mode requires equal group sizes")]
    UnequalGroups,
    #[error("supervised sets given for {got} groups, space has {expected}")]
    SupervisionShape { expected: usize, got: usize },
    #[error("class map is undefined on class {class} of map {map}")]
    PartialMap { map: usize, class: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum MapMode {
    /// One map applied to every group (one extractor for all groups).
    Shared,
    /// An independent map per group.
    PerGroup,
}

/// The deterministic label function `β` on concept tuples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelFunction {
    Sum,
    Table(BTreeMap<Vec<usize>, i64>),
}

impl LabelFunction {
    pub fn label(&self, tuple: &[usize]) -> Option<i64> {
        match self {
            LabelFunction::Sum => Some(tuple.iter().map(|&c| c as i64).sum()),
            LabelFunction::Table(t) => t.get(tuple).copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruthTask {
    space: ConceptSpace,
    support: Vec<Vec<usize>>,
    labels: Vec<i64>,
    beta: LabelFunction,
    supervised: Vec<Vec<usize>>,
    map_mode: MapMode,
}

impl GroundTruthTask {
    pub fn new(
        space: ConceptSpace,
        support: Vec<Vec<usize>>,
        beta: LabelFunction,
        supervised: Vec<Vec<usize>>,
        map_mode: MapMode,
    ) -> Result<Self, ShortcutError> {
        if supervised.len() != space.groups() {
            return Err(ShortcutError::SupervisionShape {
                expected: space.groups(),
                got: supervised.len(),
            });
        }
        if map_mode == MapMode::Shared && space.sizes().windows(2).any(|w| w[0] != w[1]) {
            return Err(ShortcutError::UnequalGroups);
        }
        let mut labels = Vec::with_capacity(support.len());
        for (index, g) in support.iter().enumerate() {
            let fits =
                g.len() == space.groups() && g.iter().enumerate().all(|(i, &c)| c < space.group_size(i));
            if !fits {
                return Err(ShortcutError::TupleOutOfSpace { index });
            }
            labels.push(beta.label(g).ok_or(ShortcutError::LabelUndefined { index })?);
        }
        Ok(Self {
            space,
            support,
            labels,
            beta,
            supervised,
            map_mode,
        })
    }

    /// The even/odd digit-pair task: eight admissible digit combinations in
    /// both orders, label = sum, one map shared by both digits.
    pub fn mnist_even_odd(supervised: Vec<usize>) -> Self {
        let support = crate::tasks::EVEN_ODD_COMBINATIONS
            .iter()
            .flat_map(|&(a, b)| [vec![a, b], vec![b, a]])
            .collect();
        Self::new(
            ConceptSpace::digit_pair(),
            support,
            LabelFunction::Sum,
            vec![supervised.clone(), supervised],
            MapMode::Shared,
        )
        .expect("valid task")
    }

    pub fn space(&self) -> &ConceptSpace {
        &self.space
    }

    pub fn support(&self) -> &[Vec<usize>] {
        &self.support
    }

    pub fn map_mode(&self) -> MapMode {
        self.map_mode
    }

    pub fn supervised(&self) -> &[Vec<usize>] {
        &self.supervised
    }

    pub fn beta(&self) -> &LabelFunction {
        &self.beta
    }

    fn map_count(&self) -> usize {
        match self.map_mode {
            MapMode::Shared => 1,
            MapMode::PerGroup => self.space.groups(),
        }
    }

    fn map_of(&self, group: usize) -> usize {
        match self.map_mode {
            MapMode::Shared => 0,
            MapMode::PerGroup => group,
        }
    }

    fn codomain(&self, map: usize) -> usize {
        self.space.group_size(map)
    }

    /// Classes each map must be defined on, in increasing order.
    pub fn domains(&self) -> Vec<Vec<usize>> {
        let mut seen = vec![Vec::<bool>::new(); self.map_count()];
        for (m, s) in seen.iter_mut().enumerate() {
            *s = vec![false; self.codomain(m)];
        }
        for g in &self.support {
            for (i, &c) in g.iter().enumerate() {
                seen[self.map_of(i)][c] = true;
            }
        }
        seen.iter()
            .map(|s| {
                s.iter()
                    .enumerate()
                    .filter(|(_, b)| **b)
                    .map(|(c, _)| c)
                    .collect()
            })
            .collect()
    }

    fn is_pinned(&self, map: usize, class: usize) -> bool {
        match self.map_mode {
            MapMode::Shared => self.supervised.iter().any(|h| h.contains(&class)),
            MapMode::PerGroup => self.supervised[map].contains(&class),
        }
    }
}

/// A class map per governed group (one in shared mode).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassMap {
    pub tables: Vec<Vec<Option<usize>>>,
}

impl ClassMap {
    pub fn identity(task: &GroundTruthTask) -> Self {
        let tables = task
            .domains()
            .iter()
            .enumerate()
            .map(|(m, dom)| {
                let mut t = vec![None; task.codomain(m)];
                for &c in dom {
                    t[c] = Some(c);
                }
                t
            })
            .collect();
        Self { tables }
    }

    pub fn image(&self, task: &GroundTruthTask, g: &[usize]) -> Option<Vec<usize>> {
        g.iter()
            .enumerate()
            .map(|(i, &c)| self.tables.get(task.map_of(i))?.get(c).copied().flatten())
            .collect()
    }

    fn is_identity(&self) -> bool {
        self.tables
            .iter()
            .all(|t| t.iter().enumerate().all(|(c, v)| v.is_none_or(|v| v == c)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ShortcutCensus {
    pub optima_count: u64,
    pub shortcut_count: u64,
    pub identity_is_optimum: bool,
    pub nodes_visited: u64,
    pub catalogue: Option<Vec<ClassMap>>,
}

/// Whether `alpha` satisfies the pinning and label-consistency conditions.
fn is_optimum(alpha: &ClassMap, task: &GroundTruthTask) -> bool {
    let pinned = task.domains().iter().enumerate().all(|(m, dom)| {
        dom.iter()
            .all(|&c| !task.is_pinned(m, c) || alpha.tables[m][c] == Some(c))
    });
    pinned
        && task.support.iter().zip(&task.labels).all(|(g, &y)| {
            alpha
                .image(task, g)
                .and_then(|img| task.beta.label(&img))
                .is_some_and(|l| l == y)
        })
}

/// True iff `alpha` is an optimum and differs from the identity on the
/// classes occurring in the support.
pub fn is_shortcut(alpha: &ClassMap, task: &GroundTruthTask) -> Result<bool, ShortcutError> {
    for (m, dom) in task.domains().iter().enumerate() {
        for &class in dom {
            if alpha
                .tables
                .get(m)
                .and_then(|t| t.get(class))
                .copied()
                .flatten()
                .is_none()
            {
                return Err(ShortcutError::PartialMap { map: m, class });
            }
        }
    }
    Ok(!alpha.is_identity() && is_optimum(alpha, task))
}

struct Search<'a> {
    task: &'a GroundTruthTask,
    vars: Vec<(usize, usize)>,
    domains: Vec<Vec<usize>>,
    // Support tuples whose last variable (in search order) is at this depth.
    completes_at: Vec<Vec<usize>>,
    alpha: ClassMap,
    budget: u64,
    nodes: u64,
    count: u64,
    catalogue: Option<Vec<ClassMap>>,
}

impl Search<'_> {
    fn run(&mut self, depth: usize) -> Result<(), ShortcutError> {
        if depth == self.vars.len() {
            self.count += 1;
            if let Some(cat) = &mut self.catalogue {
                if cat.len() < CATALOGUE_LIMIT {
                    cat.push(self.alpha.clone());
                } else {
                    self.catalogue = None;
                }
            }
            return Ok(());
        }
        let (map, class) = self.vars[depth];
        for vi in 0..self.domains[depth].len() {
            self.nodes += 1;
            if self.nodes > self.budget {
                return Err(ShortcutError::BudgetExceeded(self.budget));
            }
            let value = self.domains[depth][vi];
            self.alpha.tables[map][class] = Some(value);
            let consistent = self.completes_at[depth].iter().all(|&t| {
                let g = &self.task.support[t];
                self.alpha
                    .image(self.task, g)
                    .and_then(|img| self.task.beta.label(&img))
                    .is_some_and(|l| l == self.task.labels[t])
            });
            if consistent {
                self.run(depth + 1)?;
            }
        }
        self.alpha.tables[map][class] = None;
        Ok(())
    }
}

/// Exact number of deterministic optima, by backtracking with pruning on
/// completed support tuples.
pub fn count_optima(task: &GroundTruthTask) -> Result<ShortcutCensus, ShortcutError> {
    count_optima_with_budget(task, DEFAULT_NODE_BUDGET)
}

pub fn count_optima_with_budget(
    task: &GroundTruthTask,
    budget: u64,
) -> Result<ShortcutCensus, ShortcutError> {
    let domains = task.domains();
    let mut remaining: Vec<(usize, usize)> = domains
        .iter()
        .enumerate()
        .flat_map(|(m, dom)| dom.iter().map(move |&c| (m, c)))
        .collect();
    let tuple_vars: Vec<Vec<(usize, usize)>> = task
        .support
        .iter()
        .map(|g| {
            let mut v: Vec<(usize, usize)> =
                g.iter().enumerate().map(|(i, &c)| (task.map_of(i), c)).collect();
            v.sort_unstable();
            v.dedup();
            v
        })
        .collect();

    // Greedy order: next variable closes the most tuples, then touches the
    // most partially assigned tuples; pinned variables first.
    let mut order = Vec::with_capacity(remaining.len());
    while !remaining.is_empty() {
        let score = |var: &(usize, usize)| {
            let pinned = task.is_pinned(var.0, var.1);
            let mut closes = 0usize;
            let mut touches = 0usize;
            for vars in tuple_vars.iter().filter(|vs| vs.contains(var)) {
                let open = vars.iter().filter(|v| *v != var && !order.contains(*v)).count();
                if open == 0 {
                    closes += 1;
                } else if open < vars.len() - 1 {
                    touches += 1;
                }
            }
            (pinned, closes, touches, core::cmp::Reverse(*var))
        };
        let best = (0..remaining.len())
            .max_by_key(|&i| score(&remaining[i]))
            .expect("nonempty");
        order.push(remaining.swap_remove(best));
    }

    let mut completes_at = vec![Vec::new(); order.len()];
    for (t, vars) in tuple_vars.iter().enumerate() {
        if let Some(depth) = vars
            .iter()
            .map(|v| order.iter().position(|o| o == v).expect("ordered"))
            .max()
        {
            completes_at[depth].push(t);
        }
    }
    let var_domains = order
        .iter()
        .map(|&(m, c)| {
            if task.is_pinned(m, c) {
                vec![c]
            } else {
                (0..task.codomain(m)).collect()
            }
        })
        .collect();

    let identity = ClassMap::identity(task);
    let mut search = Search {
        task,
        vars: order,
        domains: var_domains,
        completes_at,
        alpha: ClassMap {
            tables: identity.tables.iter().map(|t| vec![None; t.len()]).collect(),
        },
        budget,
        nodes: 0,
        count: 0,
        catalogue: Some(Vec::new()),
    };
    search.run(0)?;
    let mut catalogue = search.catalogue;
    if let Some(cat) = &mut catalogue {
        cat.sort();
    }
    let identity_is_optimum = is_optimum(&identity, task);
    Ok(ShortcutCensus {
        optima_count: search.count,
        shortcut_count: search.count - u64::from(identity_is_optimum),
        identity_is_optimum,
        nodes_visited: search.nodes,
        catalogue,
    })
}

/// Counts optima by checking every map on the support domains, without
/// pruning. Only suitable for tiny tasks; used as a cross-check.
pub fn count_optima_exhaustive(task: &GroundTruthTask) -> u64 {
    let domains = task.domains();
    let vars: Vec<(usize, usize)> = domains
        .iter()
        .enumerate()
        .flat_map(|(m, dom)| dom.iter().map(move |&c| (m, c)))
        .collect();
    let sizes: Vec<usize> = vars.iter().map(|&(m, _)| task.codomain(m)).collect();
    let mut digits = vec![0usize; vars.len()];
    let mut count = 0;
    loop {
        let mut alpha = ClassMap {
            tables: (0..domains.len()).map(|m| vec![None; task.codomain(m)]).collect(),
        };
        for (&(m, c), &v) in vars.iter().zip(&digits) {
            alpha.tables[m][c] = Some(v);
        }
        if is_optimum(&alpha, task) {
            count += 1;
        }
        // Mixed-radix increment.
        let mut i = 0;
        loop {
            if i == digits.len() {
                return count;
            }
            digits[i] += 1;
            if digits[i] < sizes[i] {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case"))]
pub enum OptimumAgreement {
    /// The predictor realizes the intended concepts.
    Identity,
    /// The predictor realizes a catalogued shortcut.
    Shortcut { index: usize, map: ClassMap },
    /// A deterministic map that is not an optimum of the task.
    NotOptimal { map: ClassMap },
    /// Some class has no dominant prediction.
    Stochastic { min_purity: f64 },
}

/// Reads the class map realized by a trained predictor off its concept
/// confusion matrices (one per map) and locates it in the catalogue.
///
/// A row is deterministic when its argmax column holds at least `purity`
/// of the row's mass.
pub fn empirical_optimum_check(
    confusions: &[crate::metrics::ConfusionMatrix],
    task: &GroundTruthTask,
    catalogue: &[ClassMap],
    purity: f64,
) -> OptimumAgreement {
    let domains = task.domains();
    let mut min_purity = 1.0f64;
    let mut alpha = ClassMap {
        tables: (0..domains.len()).map(|m| vec![None; task.codomain(m)]).collect(),
    };
    for (m, dom) in domains.iter().enumerate() {
        let Some(cm) = confusions.get(m) else {
            return OptimumAgreement::Stochastic { min_purity: 0.0 };
        };
        for &class in dom {
            let total = cm.row_total(class);
            if total == 0 {
                return OptimumAgreement::Stochastic { min_purity: 0.0 };
            }
            let pred = cm.argmax_map()[class].expect("row has mass");
            min_purity = min_purity.min(cm.get(class, pred) as f64 / total as f64);
            alpha.tables[m][class] = Some(pred);
        }
    }
    if min_purity < purity {
        return OptimumAgreement::Stochastic { min_purity };
    }
    if alpha.is_identity() {
        return OptimumAgreement::Identity;
    }
    match catalogue.iter().position(|a| *a == alpha) {
        Some(index) => OptimumAgreement::Shortcut { index, map: alpha },
        None => OptimumAgreement::NotOptimal { map: alpha },
    }
}
