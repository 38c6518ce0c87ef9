//! Prototypical classifier head.
//!
//! Each head holds one centroid per class. Class probabilities are a softmax
//! over negative squared Euclidean distances to the centroids, and classes
//! without labelled data receive zero-shot centroids sampled around the mean
//! of the labelled ones.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::stats::{chi2_quantile, StatsError};

/// Default lower-tail probability for zero-shot centroid spread.
pub const DEFAULT_ZERO_SHOT_P: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrototypeError {
    #[error("class {0} has an empty support set")]
    EmptySupport(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("group {group} is missing a centroid for class {class}")]
    MissingCentroid { group: usize, class: usize },
    #[error("group {group} has {labelled} labelled centroids; zero-shot init needs at least 2")]
    TooFewLabelled { group: usize, labelled: usize },
    #[error("group index {0} out of range")]
    NoSuchGroup(usize),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum CentroidStatus {
    Missing,
    Labelled,
    ZeroShot,
}

/// Centroids of one head: `classes × dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroupCentroids {
    pub dim: usize,
    pub values: Vec<f64>,
    pub status: Vec<CentroidStatus>,
}

impl GroupCentroids {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            dim,
            values: vec![0.0; classes * dim],
            status: vec![CentroidStatus::Missing; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.status.len()
    }

    pub fn centroid(&self, class: usize) -> &[f64] {
        &self.values[class * self.dim..(class + 1) * self.dim]
    }

    pub fn labelled(&self) -> impl Iterator<Item = usize> + '_ {
        self.status
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == CentroidStatus::Labelled)
            .map(|(c, _)| c)
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CentroidBank {
    pub groups: Vec<GroupCentroids>,
}

impl CentroidBank {
    /// An empty bank with `sizes[i]` classes of dimension `dims[i]` per group.
    pub fn new(sizes: &[usize], dims: &[usize]) -> Self {
        assert_eq!(sizes.len(), dims.len());
        Self {
            groups: sizes
                .iter()
                .zip(dims)
                .map(|(&h, &m)| GroupCentroids::new(h, m))
                .collect(),
        }
    }

    pub fn group(&self, group: usize) -> Result<&GroupCentroids, PrototypeError> {
        self.groups.get(group).ok_or(PrototypeError::NoSuchGroup(group))
    }

    pub fn set_centroid(
        &mut self,
        group: usize,
        class: usize,
        centroid: &[f64],
        status: CentroidStatus,
    ) -> Result<(), PrototypeError> {
        let g = self
            .groups
            .get_mut(group)
            .ok_or(PrototypeError::NoSuchGroup(group))?;
        if centroid.len() != g.dim {
            return Err(PrototypeError::Dimension {
                expected: g.dim,
                got: centroid.len(),
            });
        }
        let dim = g.dim;
        g.values[class * dim..(class + 1) * dim].copy_from_slice(centroid);
        g.status[class] = status;
        Ok(())
    }

    fn complete_group(&self, group: usize) -> Result<&GroupCentroids, PrototypeError> {
        let g = self.group(group)?;
        if let Some(class) = g.status.iter().position(|s| *s == CentroidStatus::Missing) {
            return Err(PrototypeError::MissingCentroid { group, class });
        }
        Ok(g)
    }
}

/// Class probabilities within one group; positive and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupProbs(pub Vec<f64>);

impl GroupProbs {
    pub fn argmax(&self) -> usize {
        self.0
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &p)| {
                    if p > best.1 {
                        (i, p)
                    } else {
                        best
                    }
                },
            )
            .0
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Arithmetic mean of each class's support embeddings.
pub fn compute_centroids(support: &[Vec<Vec<f64>>]) -> Result<Vec<Vec<f64>>, PrototypeError> {
    let dim = support.iter().find_map(|s| s.first()).map(Vec::len).unwrap_or(0);
    support
        .iter()
        .enumerate()
        .map(|(class, embeddings)| {
            if embeddings.is_empty() {
                return Err(PrototypeError::EmptySupport(class));
            }
            let mut mean = vec![0.0; dim];
            for e in embeddings {
                if e.len() != dim {
                    return Err(PrototypeError::Dimension {
                        expected: dim,
                        got: e.len(),
                    });
                }
                for (m, v) in mean.iter_mut().zip(e) {
                    *m += v;
                }
            }
            let n = embeddings.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            Ok(mean)
        })
        .collect()
}

/// Softmax of negative logits-as-distances with max subtraction.
pub fn softmax_neg(distances: &[f64]) -> Vec<f64> {
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = distances.iter().map(|&d| libm::exp(min - d)).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `y_c = exp(−‖z − c_c‖²) / Σ_{c'} exp(−‖z − c_{c'}‖²)`.
pub fn distance_softmax(z: &[f64], bank: &CentroidBank, group: usize) -> Result<GroupProbs, PrototypeError> {
    let g = bank.complete_group(group)?;
    if z.len() != g.dim {
        return Err(PrototypeError::Dimension {
            expected: g.dim,
            got: z.len(),
        });
    }
    let d: Vec<f64> = (0..g.classes())
        .map(|c| squared_distance(z, g.centroid(c)))
        .collect();
    Ok(GroupProbs(softmax_neg(&d)))
}

/// Probability-weighted average of a group's centroids.
pub fn center_of_belief(
    bank: &CentroidBank,
    group: usize,
    y: &GroupProbs,
) -> Result<Vec<f64>, PrototypeError> {
    let g = bank.group(group)?;
    if y.0.len() != g.classes() {
        return Err(PrototypeError::Dimension {
            expected: g.classes(),
            got: y.0.len(),
        });
    }
    let mut out = vec![0.0; g.dim];
    for (c, &p) in y.0.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(g.centroid(c)) {
            *o += p * v;
        }
    }
    Ok(out)
}

/// Samples zero-shot centroids for every non-labelled class of `group`.
///
/// Each centroid is `μ_H + ε` with `ε ~ N(0, r²/χ²_{m,p} · I)`, where `μ_H`
/// is the mean of the labelled centroids and `r` the largest distance from
/// `μ_H` to a labelled centroid. Existing zero-shot centroids are resampled.
pub fn init_unlabelled_centroids(
    bank: &mut CentroidBank,
    group: usize,
    p: f64,
    seed: u64,
) -> Result<(), PrototypeError> {
    let g = bank.group(group)?;
    let labelled: Vec<usize> = g.labelled().collect();
    if labelled.len() < 2 {
        return Err(PrototypeError::TooFewLabelled {
            group,
            labelled: labelled.len(),
        });
    }
    let dim = g.dim;
    let (mean, std) = zero_shot_distribution(g, &labelled, p)?;
    let targets: Vec<usize> = (0..g.classes())
        .filter(|c| g.status[*c] != CentroidStatus::Labelled)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for class in targets {
        let centroid: Vec<f64> = (0..dim)
            .map(|j| {
                let e: f64 = StandardNormal.sample(&mut rng);
                mean[j] + std * e
            })
            .collect();
        bank.set_centroid(group, class, &centroid, CentroidStatus::ZeroShot)?;
    }
    Ok(())
}

/// Mean of the labelled centroids and the per-coordinate standard deviation
/// of zero-shot noise.
pub fn zero_shot_distribution(
    g: &GroupCentroids,
    labelled: &[usize],
    p: f64,
) -> Result<(Vec<f64>, f64), PrototypeError> {
    let mut mean = vec![0.0; g.dim];
    for &c in labelled {
        for (m, v) in mean.iter_mut().zip(g.centroid(c)) {
            *m += v;
        }
    }
    let n = labelled.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let radius_sq = labelled
        .iter()
        .map(|&c| squared_distance(&mean, g.centroid(c)))
        .fold(0.0, f64::max);
    let q = chi2_quantile(g.dim, p)?;
    Ok((mean, libm::sqrt(radius_sq / q)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradients {
    pub grad_z: Vec<f64>,
    /// One gradient per class centroid, each of the embedding dimension.
    pub grad_centroids: Vec<Vec<f64>>,
}

/// Back-propagates `∂L/∂y` through the distance softmax of one group.
///
/// `grad_z = 2 Σ_c g_c y_c (c_c − Σ_{c'} y_{c'} c_{c'})`, and for each
/// centroid `grad_c_j = 2 y_j (g_j − Σ_c g_c y_c)(z − c_j)`.
pub fn head_backward(
    z: &[f64],
    bank: &CentroidBank,
    group: usize,
    grad_y: &[f64],
) -> Result<HeadGradients, PrototypeError> {
    let y = distance_softmax(z, bank, group)?;
    head_backward_with_probs(z, bank, group, &y, grad_y)
}

/// As [`head_backward`] with the forward probabilities already at hand.
pub fn head_backward_with_probs(
    z: &[f64],
    bank: &CentroidBank,
    group: usize,
    y: &GroupProbs,
    grad_y: &[f64],
) -> Result<HeadGradients, PrototypeError> {
    let g = bank.complete_group(group)?;
    let h = g.classes();
    if grad_y.len() != h || y.0.len() != h {
        return Err(PrototypeError::Dimension {
            expected: h,
            got: grad_y.len(),
        });
    }
    let belief = center_of_belief(bank, group, y)?;
    let mut grad_z = vec![0.0; g.dim];
    for (c, (gy, p)) in grad_y.iter().zip(&y.0).enumerate() {
        let w = 2.0 * gy * p;
        if w == 0.0 {
            continue;
        }
        for ((gz, cc), b) in grad_z.iter_mut().zip(g.centroid(c)).zip(&belief) {
            *gz += w * (cc - b);
        }
    }
    let mean_grad: f64 = grad_y.iter().zip(&y.0).map(|(gy, p)| gy * p).sum();
    let grad_centroids = (0..h)
        .map(|c| {
            let s = 2.0 * y.0[c] * (grad_y[c] - mean_grad);
            z.iter()
                .zip(g.centroid(c))
                .map(|(zi, ci)| s * (zi - ci))
                .collect()
        })
        .collect();
    Ok(HeadGradients {
        grad_z,
        grad_centroids,
    })
}

/// Closed-form embedding gradient of the semantic loss:
/// `2 Σ_c [(y_c − E_c) / (y_c (1 − y_c))] y_c (c_c − Σ_{c'} c_{c'} y_{c'})`,
/// with `E_c = E[Y_c | y, ν ⊨ K]` restricted to this group's atoms.
pub fn semantic_embedding_grad(
    bank: &CentroidBank,
    group: usize,
    y: &GroupProbs,
    cond_exp: &[f64],
) -> Result<Vec<f64>, PrototypeError> {
    let g = bank.complete_group(group)?;
    let belief = center_of_belief(bank, group, y)?;
    let mut out = vec![0.0; g.dim];
    for (c, (&yc, &ec)) in y.0.iter().zip(cond_exp).enumerate() {
        let factor = 2.0 * ((yc - ec) / (yc * (1.0 - yc))) * yc;
        for ((o, cc), b) in out.iter_mut().zip(g.centroid(c)).zip(&belief) {
            *o += factor * (cc - b);
        }
    }
    Ok(out)
}
