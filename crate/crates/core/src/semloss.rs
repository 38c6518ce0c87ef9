//! Semantic loss `−ln Σ_{ν ⊨ K} Π_c y_c^{ν(c)} (1 − y_c)^{1 − ν(c)}` and its
//! exact gradient with respect to the output probabilities.
//!
//! The gradient uses the conditional-expectation form
//! `∂L/∂y_c = (y_c − E[Y_c | ν ⊨ K]) / (y_c (1 − y_c))`
//! rather than differentiating the enumeration.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::knowledge::{Assignment, ModelSet};

/// Default clamping applied to probabilities before evaluation.
pub const DEFAULT_CLAMP: f64 = 1e-7;
/// Model sets larger than this are accumulated in log space.
pub const LOG_SPACE_THRESHOLD: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SemLossError {
    #[error("knowledge is unsatisfiable: empty model set")]
    Unsatisfiable,
    #[error("model set covers {models} atoms but {probs} probabilities were given")]
    AtomMismatch { models: usize, probs: usize },
    #[error("atom {atom} outside 0..{atoms}")]
    AtomIndex { atom: usize, atoms: usize },
}

/// Per-atom Bernoulli parameters, clamped into `[ε, 1 − ε]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputProbs {
    values: Vec<f64>,
    eps: f64,
}

impl OutputProbs {
    pub fn new(raw: &[f64]) -> Self {
        Self::with_clamp(raw, DEFAULT_CLAMP)
    }

    pub fn with_clamp(raw: &[f64], eps: f64) -> Self {
        let values = raw.iter().map(|&y| y.clamp(eps, 1.0 - eps)).collect();
        Self { values, eps }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemLossResult {
    pub loss: f64,
    pub wmc: f64,
    pub grad_y: Vec<f64>,
    pub cond_exp: Vec<f64>,
}

fn log_weight(y: &[f64], nu: &Assignment) -> f64 {
    y.iter()
        .zip(&nu.0)
        .map(|(&p, &bit)| if bit { libm::log(p) } else { libm::log1p(-p) })
        .sum()
}

fn weight(y: &[f64], nu: &Assignment) -> f64 {
    y.iter()
        .zip(&nu.0)
        .map(|(&p, &bit)| if bit { p } else { 1.0 - p })
        .product()
}

fn check(y: &OutputProbs, models: &ModelSet) -> Result<(), SemLossError> {
    if models.is_empty() {
        return Err(SemLossError::Unsatisfiable);
    }
    if models.atom_count() != y.len() {
        return Err(SemLossError::AtomMismatch {
            models: models.atom_count(),
            probs: y.len(),
        });
    }
    Ok(())
}

/// Normalized posterior weights `p(ν | y, ν ⊨ K)` and `ln wmc`.
fn posterior(y: &[f64], models: &ModelSet) -> (Vec<f64>, f64) {
    if models.len() > LOG_SPACE_THRESHOLD {
        let logs: Vec<f64> = models.iter().map(|nu| log_weight(y, nu)).collect();
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logs.iter().map(|&l| libm::exp(l - max)).sum();
        let log_wmc = max + libm::log(sum);
        let post = logs.iter().map(|&l| libm::exp(l - log_wmc)).collect();
        (post, log_wmc)
    } else {
        let w: Vec<f64> = models.iter().map(|nu| weight(y, nu)).collect();
        let wmc: f64 = w.iter().sum();
        let post = w.iter().map(|&x| x / wmc).collect();
        (post, libm::log(wmc))
    }
}

/// `E_c = t_c / (t_c + f_c)` from the posterior mass of models with the
/// atom true and false, so constant atoms give exactly 1 or 0.
fn expectations(post: &[f64], models: &ModelSet, atoms: usize) -> Vec<f64> {
    let mut t = vec![0.0; atoms];
    let mut f = vec![0.0; atoms];
    for (p, nu) in post.iter().zip(models.iter()) {
        for ((ti, fi), &bit) in t.iter_mut().zip(f.iter_mut()).zip(&nu.0) {
            if bit {
                *ti += p;
            } else {
                *fi += p;
            }
        }
    }
    t.iter().zip(&f).map(|(&ti, &fi)| ti / (ti + fi)).collect()
}

/// Evaluates the loss, weighted model count, conditional expectations and
/// output gradient in one pass over the model set.
pub fn semantic_loss(y: &OutputProbs, models: &ModelSet) -> Result<SemLossResult, SemLossError> {
    check(y, models)?;
    let (post, log_wmc) = posterior(&y.values, models);
    let cond_exp = expectations(&post, models, y.len());
    let grad_y = y
        .values
        .iter()
        .zip(&cond_exp)
        .map(|(&p, &e)| (p - e) / (p * (1.0 - p)))
        .collect();
    Ok(SemLossResult {
        loss: (-log_wmc).max(0.0),
        wmc: libm::exp(log_wmc),
        grad_y,
        cond_exp,
    })
}

/// `E[Y_atom | y, ν ⊨ K]` for one flattened atom index.
pub fn conditional_expectation(y: &OutputProbs, models: &ModelSet, atom: usize) -> Result<f64, SemLossError> {
    check(y, models)?;
    if atom >= y.len() {
        return Err(SemLossError::AtomIndex { atom, atoms: y.len() });
    }
    let (post, _) = posterior(&y.values, models);
    Ok(expectations(&post, models, y.len())[atom])
}

/// `∂L/∂y_c = (y_c − E[Y_c | ν ⊨ K]) / (y_c (1 − y_c))` for every atom.
pub fn semloss_grad_outputs(y: &OutputProbs, models: &ModelSet) -> Result<Vec<f64>, SemLossError> {
    semantic_loss(y, models).map(|r| r.grad_y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{enumerate_models, ConceptSpace, EnumerationMode, Formula};

    fn xor_models() -> ModelSet {
        let space = ConceptSpace::new(vec![2]).unwrap();
        let xor = Formula::iff(Formula::atom(0, 0), Formula::not(Formula::atom(0, 1)));
        enumerate_models(&xor, &space, EnumerationMode::Free).unwrap()
    }

    fn single_atom_models() -> ModelSet {
        ModelSet {
            mode: EnumerationMode::Free,
            models: vec![Assignment(vec![true])],
        }
    }

    fn tautology_models() -> ModelSet {
        let space = ConceptSpace::new(vec![2]).unwrap();
        enumerate_models(&Formula::True, &space, EnumerationMode::Free).unwrap()
    }

    #[test]
    fn tautology_has_zero_loss_and_gradient() {
        let y = OutputProbs::new(&[0.3, 0.8]);
        let r = semantic_loss(&y, &tautology_models()).unwrap();
        assert!((r.wmc - 1.0).abs() < 1e-15);
        assert!(r.loss.abs() < 1e-15);
        for g in &r.grad_y {
            assert!(g.abs() < 1e-12);
        }
        assert!((r.cond_exp[0] - 0.3).abs() < 1e-15);
        assert!((r.cond_exp[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn single_atom() {
        let y = OutputProbs::new(&[0.5]);
        let r = semantic_loss(&y, &single_atom_models()).unwrap();
        assert!((r.loss - core::f64::consts::LN_2).abs() < 1e-12);
        assert!((r.grad_y[0] + 2.0).abs() < 1e-12);
        assert_eq!(
            conditional_expectation(&y, &single_atom_models(), 0).unwrap(),
            1.0
        );
    }

    #[test]
    fn exclusive_or_values() {
        let y = OutputProbs::new(&[0.6, 0.7]);
        let models = xor_models();
        let r = semantic_loss(&y, &models).unwrap();
        // 0.6·0.3 + 0.4·0.7
        assert!((r.wmc - 0.46).abs() < 1e-12);
        assert!((r.loss - 0.776_528_789_498_996_5).abs() < 1e-12);
        let e = conditional_expectation(&y, &models, 0).unwrap();
        assert!((e - 0.18 / 0.46).abs() < 1e-12);
        assert!((r.grad_y[0] - (0.6 - 0.18 / 0.46) / 0.24).abs() < 1e-12);
        assert!((r.grad_y[0] - 0.869_565_217_391_304_3).abs() < 1e-9);
    }

    #[test]
    fn empty_model_set_is_unsatisfiable() {
        let y = OutputProbs::new(&[0.5]);
        let empty = ModelSet {
            mode: EnumerationMode::Free,
            models: vec![],
        };
        assert_eq!(semantic_loss(&y, &empty), Err(SemLossError::Unsatisfiable));
        assert_eq!(
            conditional_expectation(&y, &empty, 0),
            Err(SemLossError::Unsatisfiable)
        );
    }

    #[test]
    fn clamping_keeps_gradient_finite() {
        let y = OutputProbs::new(&[0.0, 1.0]);
        assert_eq!(y.values(), &[1e-7, 1.0 - 1e-7]);
        let r = semantic_loss(&y, &xor_models()).unwrap();
        assert!(r.grad_y.iter().all(|g| g.is_finite()));
        assert!(r.loss.is_finite());
    }

    #[test]
    fn log_space_path_agrees_with_direct_path() {
        let space = ConceptSpace::new(vec![7]).unwrap();
        let models = enumerate_models(&Formula::atom(0, 2), &space, EnumerationMode::Free).unwrap();
        assert_eq!(models.len(), 64);
        let raw = [0.1, 0.9, 0.35, 0.5, 0.77, 0.2, 0.6];
        let y = OutputProbs::new(&raw);
        let direct = semantic_loss(&y, &models).unwrap();
        // One more atom pushes the set over the threshold; the extra atom is
        // unconstrained and contributes a factor of one.
        let big_space = ConceptSpace::new(vec![8]).unwrap();
        let big = enumerate_models(&Formula::atom(0, 2), &big_space, EnumerationMode::Free).unwrap();
        assert_eq!(big.len(), 128);
        let mut raw8 = raw.to_vec();
        raw8.push(0.42);
        let logged = semantic_loss(&OutputProbs::new(&raw8), &big).unwrap();
        assert!((direct.loss - logged.loss).abs() < 1e-12);
        for i in 0..7 {
            assert!((direct.grad_y[i] - logged.grad_y[i]).abs() < 1e-10);
        }
        assert!(logged.grad_y[7].abs() < 1e-10);
    }
}
