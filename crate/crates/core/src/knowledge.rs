//! Propositional background knowledge over concept atoms.
//!
//! A [`ConceptSpace`] factors the concepts into `k` mutually exclusive groups
//! of sizes `h_1 … h_k`. Atoms are `(group, class)` pairs, written
//! `c[group]=class` in the text syntax. Formulas are evaluated under full
//! boolean [`Assignment`]s and their satisfying assignments can be enumerated
//! either over free Bernoulli atoms or one-hot-per-group.

use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

/// Largest atom count accepted by free-mode enumeration.
pub const MAX_FREE_ATOMS: usize = 24;
/// Largest product of group sizes accepted by one-hot enumeration.
pub const MAX_ONE_HOT_ASSIGNMENTS: u64 = 10_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KnowledgeError {
    #[error("concept space needs at least one group")]
    EmptySpace,
    #[error("group {group} has {size} classes; at least 2 required")]
    GroupTooSmall { group: usize, size: usize },
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown atom name `{name}` at byte {offset}")]
    UnknownAtom { offset: usize, name: String },
    #[error("atom c[{group}]={class} out of range at byte {offset}")]
    AtomOutOfRange {
        offset: usize,
        group: usize,
        class: usize,
    },
    #[error("enumeration over {requested} exceeds the limit of {limit}")]
    SizeLimit { requested: u64, limit: u64 },
    #[error("sum label {0} out of range 0..=18")]
    LabelOutOfRange(i64),
    #[error("sum knowledge requires two groups of ten classes")]
    NotDigitPairSpace,
    #[error("concept tuple has {got} entries, space has {expected} groups")]
    TupleArity { expected: usize, got: usize },
}

/// The factorization `[h_1] × … × [h_k]` of the concept space.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConceptSpace {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl ConceptSpace {
    pub fn new(sizes: Vec<usize>) -> Result<Self, KnowledgeError> {
        if sizes.is_empty() {
            return Err(KnowledgeError::EmptySpace);
        }
        if let Some((group, &size)) = sizes.iter().enumerate().find(|(_, &h)| h < 2) {
            return Err(KnowledgeError::GroupTooSmall { group, size });
        }
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut acc = 0;
        for &h in &sizes {
            offsets.push(acc);
            acc += h;
        }
        Ok(Self { sizes, offsets })
    }

    /// Two groups of ten digit classes.
    pub fn digit_pair() -> Self {
        Self::new(vec![10, 10]).expect("valid space")
    }

    pub fn groups(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn group_size(&self, group: usize) -> usize {
        self.sizes[group]
    }

    pub fn atom_count(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Offset of the first atom of `group` in the flattened atom order.
    pub fn group_offset(&self, group: usize) -> usize {
        self.offsets[group]
    }

    pub fn contains(&self, atom: Atom) -> bool {
        atom.group < self.sizes.len() && atom.class < self.sizes[atom.group]
    }

    /// Flattened index of an atom. Panics when the atom is outside the space.
    pub fn index(&self, atom: Atom) -> usize {
        assert!(self.contains(atom), "atom {atom} outside concept space");
        self.offsets[atom.group] + atom.class
    }

    pub fn atom_at(&self, index: usize) -> Atom {
        let group = match self.offsets.binary_search(&index) {
            Ok(g) => g,
            Err(g) => g - 1,
        };
        Atom::new(group, index - self.offsets[group])
    }

    /// One-hot assignment selecting `classes[i]` in each group `i`.
    pub fn one_hot(&self, classes: &[usize]) -> Assignment {
        assert_eq!(classes.len(), self.groups());
        let mut bits = vec![false; self.atom_count()];
        for (g, &c) in classes.iter().enumerate() {
            bits[self.index(Atom::new(g, c))] = true;
        }
        Assignment(bits)
    }
}

/// A concept atom: class `class` of group `group`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Atom {
    pub group: usize,
    pub class: usize,
}

impl Atom {
    pub const fn new(group: usize, class: usize) -> Self {
        Self { group, class }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c[{}]={}", self.group, self.class)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Formula {
    Atom(Atom),
    True,
    False,
    Not(Box<Formula>),
    And(Vec<Formula>),
    Or(Vec<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    Iff(Box<Formula>, Box<Formula>),
}

impl Formula {
    pub fn atom(group: usize, class: usize) -> Self {
        Formula::Atom(Atom::new(group, class))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(f: Formula) -> Self {
        Formula::Not(Box::new(f))
    }

    pub fn implies(lhs: Formula, rhs: Formula) -> Self {
        Formula::Implies(Box::new(lhs), Box::new(rhs))
    }

    pub fn iff(lhs: Formula, rhs: Formula) -> Self {
        Formula::Iff(Box::new(lhs), Box::new(rhs))
    }

    /// Standard two-valued semantics under a full assignment.
    pub fn evaluate(&self, space: &ConceptSpace, nu: &Assignment) -> bool {
        match self {
            Formula::Atom(a) => nu.0[space.index(*a)],
            Formula::True => true,
            Formula::False => false,
            Formula::Not(f) => !f.evaluate(space, nu),
            Formula::And(fs) => fs.iter().all(|f| f.evaluate(space, nu)),
            Formula::Or(fs) => fs.iter().any(|f| f.evaluate(space, nu)),
            Formula::Implies(a, b) => !a.evaluate(space, nu) || b.evaluate(space, nu),
            Formula::Iff(a, b) => a.evaluate(space, nu) == b.evaluate(space, nu),
        }
    }

    /// Kleene three-valued evaluation; `None` atoms are undecided.
    fn evaluate_partial(&self, space: &ConceptSpace, nu: &[Option<bool>]) -> Option<bool> {
        match self {
            Formula::Atom(a) => nu[space.index(*a)],
            Formula::True => Some(true),
            Formula::False => Some(false),
            Formula::Not(f) => f.evaluate_partial(space, nu).map(|v| !v),
            Formula::And(fs) => {
                let mut unknown = false;
                for f in fs {
                    match f.evaluate_partial(space, nu) {
                        Some(false) => return Some(false),
                        None => unknown = true,
                        Some(true) => {}
                    }
                }
                if unknown {
                    None
                } else {
                    Some(true)
                }
            }
            Formula::Or(fs) => {
                let mut unknown = false;
                for f in fs {
                    match f.evaluate_partial(space, nu) {
                        Some(true) => return Some(true),
                        None => unknown = true,
                        Some(false) => {}
                    }
                }
                if unknown {
                    None
                } else {
                    Some(false)
                }
            }
            Formula::Implies(a, b) => match (a.evaluate_partial(space, nu), b.evaluate_partial(space, nu)) {
                (Some(false), _) | (_, Some(true)) => Some(true),
                (Some(true), Some(false)) => Some(false),
                _ => None,
            },
            Formula::Iff(a, b) => match (a.evaluate_partial(space, nu), b.evaluate_partial(space, nu)) {
                (Some(x), Some(y)) => Some(x == y),
                _ => None,
            },
        }
    }

    /// Checks that every referenced atom lies inside `space`.
    pub fn check_space(&self, space: &ConceptSpace) -> Result<(), KnowledgeError> {
        match self {
            Formula::Atom(a) if !space.contains(*a) => Err(KnowledgeError::AtomOutOfRange {
                offset: 0,
                group: a.group,
                class: a.class,
            }),
            Formula::Atom(_) | Formula::True | Formula::False => Ok(()),
            Formula::Not(f) => f.check_space(space),
            Formula::And(fs) | Formula::Or(fs) => fs.iter().try_for_each(|f| f.check_space(space)),
            Formula::Implies(a, b) | Formula::Iff(a, b) => {
                a.check_space(space)?;
                b.check_space(space)
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Formula::Iff(..) => 1,
            Formula::Implies(..) => 2,
            Formula::Or(_) => 3,
            Formula::And(_) => 4,
            Formula::Not(_) => 5,
            Formula::Atom(_) | Formula::True | Formula::False => 6,
        }
    }

    fn fmt_child(&self, f: &mut fmt::Formatter<'_>, parens: bool) -> fmt::Result {
        if parens {
            write!(f, "({self})")
        } else {
            write!(f, "{self}")
        }
    }
}

/// Prints with minimal parentheses such that [`parse`] rebuilds the same tree.
impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Formula::Atom(a) => write!(f, "{a}"),
            Formula::True => f.write_str("true"),
            Formula::False => f.write_str("false"),
            Formula::Not(inner) => {
                f.write_str("~")?;
                inner.fmt_child(f, inner.precedence() < 5)
            }
            Formula::And(fs) | Formula::Or(fs) => {
                let (op, prec) = if matches!(self, Formula::And(_)) {
                    (" & ", 4)
                } else {
                    (" | ", 3)
                };
                if fs.len() < 2 {
                    // Degenerate arities have no infix form.
                    return match fs.first() {
                        None if prec == 4 => f.write_str("true"),
                        None => f.write_str("false"),
                        Some(only) => only.fmt(f),
                    };
                }
                for (i, child) in fs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(op)?;
                    }
                    child.fmt_child(f, child.precedence() <= prec)?;
                }
                Ok(())
            }
            Formula::Implies(a, b) => {
                a.fmt_child(f, a.precedence() <= 2)?;
                f.write_str(" -> ")?;
                b.fmt_child(f, b.precedence() < 2)
            }
            Formula::Iff(a, b) => {
                a.fmt_child(f, a.precedence() < 1)?;
                f.write_str(" <-> ")?;
                b.fmt_child(f, b.precedence() <= 1)
            }
        }
    }
}

/// A full boolean assignment, one entry per atom in flattened order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Assignment(pub Vec<bool>);

impl Assignment {
    pub fn get(&self, index: usize) -> bool {
        self.0[index]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Whether exactly one atom is true in every group.
    pub fn is_one_hot(&self, space: &ConceptSpace) -> bool {
        (0..space.groups()).all(|g| {
            let start = space.group_offset(g);
            self.0[start..start + space.group_size(g)]
                .iter()
                .filter(|&&b| b)
                .count()
                == 1
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum EnumerationMode {
    /// Every atom is an independent boolean.
    Free,
    /// Exactly one true atom per group.
    OneHot,
}

/// The satisfying assignments of a formula, lexicographically ordered.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub mode: EnumerationMode,
    pub models: Vec<Assignment>,
}

impl ModelSet {
    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn iter(&self) -> core::slice::Iter<'_, Assignment> {
        self.models.iter()
    }

    pub fn atom_count(&self) -> usize {
        self.models.first().map_or(0, Assignment::len)
    }
}

/// Enumerates all assignments satisfying `f` in the given mode.
///
/// Depth-first over atoms (free) or groups (one-hot) with three-valued
/// pruning, so the output is in lexicographic order with `false < true`.
pub fn enumerate_models(
    f: &Formula,
    space: &ConceptSpace,
    mode: EnumerationMode,
) -> Result<ModelSet, KnowledgeError> {
    f.check_space(space)?;
    let n = space.atom_count();
    let mut models = Vec::new();
    match mode {
        EnumerationMode::Free => {
            if n > MAX_FREE_ATOMS {
                return Err(KnowledgeError::SizeLimit {
                    requested: n as u64,
                    limit: MAX_FREE_ATOMS as u64,
                });
            }
            let mut partial = vec![None; n];
            free_dfs(f, space, &mut partial, 0, &mut models);
        }
        EnumerationMode::OneHot => {
            let total = space
                .sizes()
                .iter()
                .try_fold(1u64, |acc, &h| acc.checked_mul(h as u64))
                .unwrap_or(u64::MAX);
            if total > MAX_ONE_HOT_ASSIGNMENTS {
                return Err(KnowledgeError::SizeLimit {
                    requested: total,
                    limit: MAX_ONE_HOT_ASSIGNMENTS,
                });
            }
            let mut partial = vec![None; n];
            one_hot_dfs(f, space, &mut partial, 0, &mut models);
        }
    }
    Ok(ModelSet { mode, models })
}

fn free_dfs(
    f: &Formula,
    space: &ConceptSpace,
    partial: &mut [Option<bool>],
    next: usize,
    out: &mut Vec<Assignment>,
) {
    match f.evaluate_partial(space, partial) {
        Some(false) => return,
        Some(true) => {
            // Every completion satisfies f.
            expand_completions(partial, next, out);
            return;
        }
        None => {}
    }
    if next == partial.len() {
        return;
    }
    for value in [false, true] {
        partial[next] = Some(value);
        free_dfs(f, space, partial, next + 1, out);
    }
    partial[next] = None;
}

fn expand_completions(partial: &mut [Option<bool>], next: usize, out: &mut Vec<Assignment>) {
    if next == partial.len() {
        out.push(Assignment(partial.iter().map(|b| b.unwrap_or(false)).collect()));
        return;
    }
    let saved = partial[next];
    for value in [false, true] {
        partial[next] = Some(value);
        expand_completions(partial, next + 1, out);
    }
    partial[next] = saved;
}

fn one_hot_dfs(
    f: &Formula,
    space: &ConceptSpace,
    partial: &mut [Option<bool>],
    group: usize,
    out: &mut Vec<Assignment>,
) {
    if f.evaluate_partial(space, partial) == Some(false) {
        return;
    }
    if group == space.groups() {
        out.push(Assignment(partial.iter().map(|b| b.unwrap_or(false)).collect()));
        return;
    }
    let start = space.group_offset(group);
    let h = space.group_size(group);
    // Lexicographic order with false < true visits the last class first.
    for chosen in (0..h).rev() {
        for c in 0..h {
            partial[start + c] = Some(c == chosen);
        }
        one_hot_dfs(f, space, partial, group + 1, out);
    }
    for c in 0..h {
        partial[start + c] = None;
    }
}

/// Knowledge `Y = G_1 + G_2` for a fixed label over two digit groups.
///
/// A disjunction over the pairs `(a, b)` with `a + b = y`, each disjunct
/// pinning every atom of both groups.
pub fn sum_knowledge(y: i64, space: &ConceptSpace) -> Result<Formula, KnowledgeError> {
    if space.sizes() != [10, 10] {
        return Err(KnowledgeError::NotDigitPairSpace);
    }
    if !(0..=18).contains(&y) {
        return Err(KnowledgeError::LabelOutOfRange(y));
    }
    let y = y as usize;
    let tuples: Vec<Vec<usize>> = (0..10usize)
        .filter(|&a| y >= a && y - a <= 9)
        .map(|a| vec![a, y - a])
        .collect();
    tuple_knowledge(&tuples, space)
}

/// Disjunction over concept tuples, each disjunct pinning every atom of every
/// group (the chosen class true, all others false).
pub fn tuple_knowledge(tuples: &[Vec<usize>], space: &ConceptSpace) -> Result<Formula, KnowledgeError> {
    let mut disjuncts = Vec::with_capacity(tuples.len());
    for t in tuples {
        if t.len() != space.groups() {
            return Err(KnowledgeError::TupleArity {
                expected: space.groups(),
                got: t.len(),
            });
        }
        let mut lits = Vec::with_capacity(space.atom_count());
        for (g, &chosen) in t.iter().enumerate() {
            if chosen >= space.group_size(g) {
                return Err(KnowledgeError::AtomOutOfRange {
                    offset: 0,
                    group: g,
                    class: chosen,
                });
            }
            for c in 0..space.group_size(g) {
                let atom = Formula::atom(g, c);
                lits.push(if c == chosen { atom } else { Formula::not(atom) });
            }
        }
        disjuncts.push(Formula::And(lits));
    }
    Ok(match disjuncts.len() {
        0 => Formula::False,
        1 => disjuncts.pop().unwrap(),
        _ => Formula::Or(disjuncts),
    })
}

/// Parses the knowledge text syntax.
///
/// ```text
/// iff     := implies ( "<->" implies )*          left-associative
/// implies := or ( "->" implies )?                right-associative
/// or      := and ( "|" and )*
/// and     := unary ( "&" unary )*
/// unary   := "~" unary | "(" iff ")" | "true" | "false" | "c[" N "]=" N
/// ```
///
/// `#` starts a comment running to the end of the line.
pub fn parse(text: &str, space: &ConceptSpace) -> Result<Formula, KnowledgeError> {
    let mut p = Parser {
        src: text.as_bytes(),
        pos: 0,
        space,
    };
    let f = p.iff()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.syntax("unexpected trailing input"));
    }
    Ok(f)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    space: &'a ConceptSpace,
}

impl Parser<'_> {
    fn syntax(&self, message: &str) -> KnowledgeError {
        KnowledgeError::Syntax {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while let Some(&b) = self.src.get(self.pos) {
            if b == b'#' {
                while self.src.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn eat(&mut self, token: &str) -> bool {
        self.skip_ws();
        if self.src[self.pos..].starts_with(token.as_bytes()) {
            self.pos += token.len();
            true
        } else {
            false
        }
    }

    fn peek_is(&mut self, token: &str) -> bool {
        self.skip_ws();
        self.src[self.pos..].starts_with(token.as_bytes())
    }

    fn iff(&mut self) -> Result<Formula, KnowledgeError> {
        let mut lhs = self.implies()?;
        while self.eat("<->") {
            let rhs = self.implies()?;
            lhs = Formula::iff(lhs, rhs);
        }
        Ok(lhs)
    }

    fn implies(&mut self) -> Result<Formula, KnowledgeError> {
        let lhs = self.or()?;
        if self.eat("->") {
            let rhs = self.implies()?;
            return Ok(Formula::implies(lhs, rhs));
        }
        Ok(lhs)
    }

    fn or(&mut self) -> Result<Formula, KnowledgeError> {
        let first = self.and()?;
        let mut items = vec![first];
        while self.eat("|") {
            items.push(self.and()?);
        }
        Ok(if items.len() == 1 {
            items.pop().unwrap()
        } else {
            Formula::Or(items)
        })
    }

    fn and(&mut self) -> Result<Formula, KnowledgeError> {
        let first = self.unary()?;
        let mut items = vec![first];
        while self.eat("&") {
            items.push(self.unary()?);
        }
        Ok(if items.len() == 1 {
            items.pop().unwrap()
        } else {
            Formula::And(items)
        })
    }

    fn unary(&mut self) -> Result<Formula, KnowledgeError> {
        if self.eat("~") {
            return Ok(Formula::not(self.unary()?));
        }
        if self.eat("(") {
            let inner = self.iff()?;
            if !self.eat(")") {
                return Err(self.syntax("expected `)`"));
            }
            return Ok(inner);
        }
        self.skip_ws();
        let start = self.pos;
        let ident_len = self.src[start..]
            .iter()
            .take_while(|b| b.is_ascii_alphanumeric() || **b == b'_')
            .count();
        if ident_len == 0 {
            return Err(self.syntax(if start == self.src.len() {
                "unexpected end of input"
            } else {
                "expected an atom, literal, `~` or `(`"
            }));
        }
        let ident = &self.src[start..start + ident_len];
        match ident {
            b"true" => {
                self.pos += ident_len;
                Ok(Formula::True)
            }
            b"false" => {
                self.pos += ident_len;
                Ok(Formula::False)
            }
            b"c" if self.src.get(start + 1) == Some(&b'[') => {
                self.pos += 2;
                let group = self.number()?;
                if !self.peek_is("]") {
                    return Err(self.syntax("expected `]`"));
                }
                self.pos += 1;
                if !self.peek_is("=") {
                    return Err(self.syntax("expected `=`"));
                }
                self.pos += 1;
                let class = self.number()?;
                let atom = Atom::new(group, class);
                if !self.space.contains(atom) {
                    return Err(KnowledgeError::AtomOutOfRange {
                        offset: start,
                        group,
                        class,
                    });
                }
                Ok(Formula::Atom(atom))
            }
            _ => Err(KnowledgeError::UnknownAtom {
                offset: start,
                name: String::from_utf8_lossy(ident).into_owned(),
            }),
        }
    }

    fn number(&mut self) -> Result<usize, KnowledgeError> {
        self.skip_ws();
        let start = self.pos;
        let digits = self.src[start..]
            .iter()
            .take_while(|b| b.is_ascii_digit())
            .count();
        if digits == 0 {
            return Err(self.syntax("expected a non-negative integer"));
        }
        let text = core::str::from_utf8(&self.src[start..start + digits]).unwrap();
        let value = text.parse().map_err(|_| self.syntax("integer too large"))?;
        self.pos += digits;
        Ok(value)
    }
}
