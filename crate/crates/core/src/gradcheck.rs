//! Finite-difference verification of the analytic gradients: the embedding
//! gradient of the distance softmax, its composition with the semantic loss,
//! and the extractor backward pass.
//!
//! Errors are norm-wise: `max_i |a_i − n_i| / max(max_i |a_i|, max_i |n_i|, 1e-8)`.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Mlp, MlpSpec};
use crate::knowledge::{Assignment, EnumerationMode, ModelSet};
use crate::prototypes::{
    distance_softmax, head_backward, semantic_embedding_grad, CentroidBank, CentroidStatus,
};
use crate::semloss::{semantic_loss, OutputProbs};

pub const FD_STEP: f64 = 1e-6;
pub const HEAD_TOLERANCE: f64 = 1e-6;
pub const COMPOSITION_TOLERANCE: f64 = 1e-10;
pub const BACKBONE_TOLERANCE: f64 = 1e-5;

/// Deliberate corruption of the analytic gradient, to confirm the harness
/// can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    SignFlip,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub tolerance: f64,
    pub max_error: f64,
    /// Error of each trial, in trial order.
    pub errors: Vec<f64>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradcheckReport {
    pub suites: Vec<SuiteReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.suites.iter().all(SuiteReport::passed)
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-8, f64::max);
    diff / scale
}

/// Central differences of `f` at `x`.
pub fn central_difference(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

fn apply_fault(grad: &mut [f64], fault: Option<Fault>) {
    if fault == Some(Fault::SignFlip) {
        grad.iter_mut().for_each(|g| *g = -*g);
    }
}

/// A group of `h` centroids of dimension `m` with coordinates in ±0.5.
pub fn random_bank(rng: &mut ChaCha8Rng, sizes: &[usize], m: usize) -> CentroidBank {
    let dims = vec![m; sizes.len()];
    let mut bank = CentroidBank::new(sizes, &dims);
    for (g, &h) in sizes.iter().enumerate() {
        for c in 0..h {
            let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.5..0.5)).collect();
            bank.set_centroid(g, c, &v, CentroidStatus::Labelled)
                .expect("shape");
        }
    }
    bank
}

/// A nonempty random subset of all assignments over `atoms` atoms.
pub fn random_models(rng: &mut ChaCha8Rng, atoms: usize, density: f64) -> ModelSet {
    let mut models: Vec<Assignment> = (0..1usize << atoms)
        .filter(|_| rng.gen_bool(density))
        .map(|bits| Assignment((0..atoms).rev().map(|i| bits >> i & 1 == 1).collect()))
        .collect();
    if models.is_empty() {
        let bits = rng.gen_range(0..1usize << atoms);
        models.push(Assignment((0..atoms).rev().map(|i| bits >> i & 1 == 1).collect()));
    }
    ModelSet {
        mode: EnumerationMode::Free,
        models,
    }
}

fn random_sizes(rng: &mut ChaCha8Rng, max_groups: usize, max_h: usize) -> Vec<usize> {
    let k = rng.gen_range(1..=max_groups);
    (0..k).map(|_| rng.gen_range(2..=max_h)).collect()
}

/// Embedding gradient of a smooth probe `Σ w_c y_c + ½ Σ v_c y_c²` through
/// the distance softmax, per group.
pub fn head_suite(trials: usize, seed: u64, fault: Option<Fault>) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(trials);
    for _ in 0..trials {
        let sizes = random_sizes(&mut rng, 3, 6);
        let m = rng.gen_range(1..=8);
        let bank = random_bank(&mut rng, &sizes, m);
        let mut worst: f64 = 0.0;
        for (group, &h) in sizes.iter().enumerate() {
            let z: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.6..0.6)).collect();
            let w: Vec<f64> = (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let probe = |z: &[f64]| {
                let y = distance_softmax(z, &bank, group).expect("complete");
                y.0.iter()
                    .zip(&w)
                    .zip(&v)
                    .map(|((y, w), v)| w * y + 0.5 * v * y * y)
                    .sum::<f64>()
            };
            let y = distance_softmax(&z, &bank, group).expect("complete");
            let grad_y: Vec<f64> = y.0.iter().zip(&w).zip(&v).map(|((y, w), v)| w + v * y).collect();
            let mut analytic = head_backward(&z, &bank, group, &grad_y).expect("shapes").grad_z;
            apply_fault(&mut analytic, fault);
            let numeric = central_difference(&z, FD_STEP, probe);
            worst = worst.max(relative_error(&analytic, &numeric));
        }
        errors.push(worst);
    }
    report("head", HEAD_TOLERANCE, errors)
}

/// Semantic loss over the concatenated group outputs: the closed form
/// against the chain `semloss → head`, and both against differences.
///
/// Returns the composition suite and the finite-difference suite.
pub fn semloss_suites(trials: usize, seed: u64, fault: Option<Fault>) -> (SuiteReport, SuiteReport) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut closed = Vec::with_capacity(trials);
    let mut numeric_errors = Vec::with_capacity(trials);
    for _ in 0..trials {
        let sizes = loop {
            let s = random_sizes(&mut rng, 3, 6);
            if s.iter().sum::<usize>() <= 12 {
                break s;
            }
        };
        let atoms: usize = sizes.iter().sum();
        let m = rng.gen_range(1..=8);
        let bank = random_bank(&mut rng, &sizes, m);
        let models = random_models(&mut rng, atoms, 0.3);
        let zs: Vec<Vec<f64>> = sizes
            .iter()
            .map(|_| (0..m).map(|_| rng.gen_range(-0.6..0.6)).collect())
            .collect();
        let loss_at = |zs: &[Vec<f64>]| {
            let flat: Vec<f64> = zs
                .iter()
                .enumerate()
                .flat_map(|(g, z)| distance_softmax(z, &bank, g).expect("complete").0)
                .collect();
            semantic_loss(&OutputProbs::new(&flat), &models)
                .expect("satisfiable")
                .loss
        };
        let flat: Vec<f64> = zs
            .iter()
            .enumerate()
            .flat_map(|(g, z)| distance_softmax(z, &bank, g).expect("complete").0)
            .collect();
        let r = semantic_loss(&OutputProbs::new(&flat), &models).expect("satisfiable");
        let (mut worst_closed, mut worst_numeric): (f64, f64) = (0.0, 0.0);
        let mut offset = 0;
        for (group, &h) in sizes.iter().enumerate() {
            let y = distance_softmax(&zs[group], &bank, group).expect("complete");
            let mut chain = head_backward(&zs[group], &bank, group, &r.grad_y[offset..offset + h])
                .expect("shapes")
                .grad_z;
            apply_fault(&mut chain, fault);
            let form =
                semantic_embedding_grad(&bank, group, &y, &r.cond_exp[offset..offset + h]).expect("shapes");
            offset += h;
            let numeric = central_difference(&zs[group], FD_STEP, |z| {
                let mut probe = zs.clone();
                probe[group] = z.to_vec();
                loss_at(&probe)
            });
            worst_closed = worst_closed.max(relative_error(&chain, &form));
            worst_numeric = worst_numeric.max(relative_error(&chain, &numeric));
        }
        closed.push(worst_closed);
        numeric_errors.push(worst_numeric);
    }
    (
        report("semloss-closed-form", COMPOSITION_TOLERANCE, closed),
        report("semloss-finite-difference", HEAD_TOLERANCE, numeric_errors),
    )
}

/// Parameter and input gradients of a random extractor under a linear
/// probe of its output.
pub fn backbone_suite(trials: usize, seed: u64, fault: Option<Fault>) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(trials);
    for _ in 0..trials {
        let input = rng.gen_range(1..=5);
        let depth = rng.gen_range(0..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.gen_range(1..=6)).collect();
        let output = rng.gen_range(1..=4);
        let mut mlp = Mlp::new(MlpSpec::new(input, hidden, output, rng.gen())).expect("widths");
        // Nonzero biases move pre-activations off the rectifier kink.
        for p in mlp.params.iter_mut() {
            if *p == 0.0 {
                *p = rng.gen_range(-0.5..0.5);
            }
        }
        let x: Vec<f64> = (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..output).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probe = |mlp: &Mlp, x: &[f64]| {
            let (z, _) = mlp.forward(x).expect("dims");
            z.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (_, tape) = mlp.forward(&x).expect("dims");
        let (mut grads, mut grad_x) = mlp.backward(&tape, &w).expect("tape");
        apply_fault(&mut grads, fault);
        apply_fault(&mut grad_x, fault);
        let params = mlp.params.clone();
        let numeric_params = central_difference(&params, FD_STEP, |p| {
            let probe_mlp = Mlp::from_params(mlp.spec.clone(), p.to_vec()).expect("count");
            probe(&probe_mlp, &x)
        });
        let numeric_x = central_difference(&x, FD_STEP, |x| probe(&mlp, x));
        errors.push(relative_error(&grads, &numeric_params).max(relative_error(&grad_x, &numeric_x)));
    }
    report("backbone", BACKBONE_TOLERANCE, errors)
}

fn report(name: &str, tolerance: f64, errors: Vec<f64>) -> SuiteReport {
    SuiteReport {
        name: String::from(name),
        trials: errors.len(),
        tolerance,
        max_error: errors.iter().copied().fold(0.0, f64::max),
        errors,
    }
}

/// Every suite with `trials` instances each.
pub fn run_all(trials: usize, seed: u64, fault: Option<Fault>) -> GradcheckReport {
    let head = head_suite(trials, seed, fault);
    let (closed, numeric) = semloss_suites(trials, seed.wrapping_add(1), fault);
    let backbone = backbone_suite(trials, seed.wrapping_add(2), fault);
    GradcheckReport {
        suites: vec![head, closed, numeric, backbone],
    }
}
