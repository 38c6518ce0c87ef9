//! Feed-forward feature extractor with exact reverse-mode gradients and an
//! Adam optimizer with decoupled weight decay.
//!
//! Parameters are stored flat: for each layer, the `outputs × inputs`
//! weight matrix (row-major) followed by the bias vector.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackboneError {
    #[error("expected input of dimension {expected}, got {got}")]
    InputDimension { expected: usize, got: usize },
    #[error("expected output gradient of dimension {expected}, got {got}")]
    OutputDimension { expected: usize, got: usize },
    #[error("tape does not match this network")]
    TapeMismatch,
    #[error("layer widths must be at least 1")]
    ZeroWidth,
    #[error("parameter vector has {got} entries, network needs {expected}")]
    ParamCount { expected: usize, got: usize },
}

/// Architecture: rectifier on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            seed,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.output_dim);
        w
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl LayerShape {
    fn weights(&self) -> core::ops::Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    fn bias(&self) -> core::ops::Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

/// Per-layer inputs and pre-activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

impl Mlp {
    /// He-style uniform fan-in initialization, biases at zero.
    pub fn new(spec: MlpSpec) -> Result<Self, BackboneError> {
        if spec.widths().contains(&0) {
            return Err(BackboneError::ZeroWidth);
        }
        let mut params = vec![0.0; spec.param_count()];
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut mlp = Self {
            spec,
            params: Vec::new(),
        };
        for layer in mlp.layers() {
            let bound = libm::sqrt(6.0 / layer.inputs as f64);
            for w in &mut params[layer.weights()] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        mlp.params = params;
        Ok(mlp)
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self, BackboneError> {
        let expected = spec.param_count();
        if params.len() != expected {
            return Err(BackboneError::ParamCount {
                expected,
                got: params.len(),
            });
        }
        Ok(Self { spec, params })
    }

    fn layers(&self) -> Vec<LayerShape> {
        let mut offset = 0;
        self.spec
            .widths()
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    inputs: w[0],
                    outputs: w[1],
                    offset,
                };
                offset += w[0] * w[1] + w[1];
                shape
            })
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.params.len()]
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Tape), BackboneError> {
        if x.len() != self.spec.input_dim {
            return Err(BackboneError::InputDimension {
                expected: self.spec.input_dim,
                got: x.len(),
            });
        }
        let layers = self.layers();
        let last = layers.len() - 1;
        let mut tape = Tape {
            inputs: Vec::with_capacity(layers.len()),
            pre: Vec::with_capacity(layers.len()),
        };
        let mut current = x.to_vec();
        for (l, layer) in layers.iter().enumerate() {
            let w = &self.params[layer.weights()];
            let b = &self.params[layer.bias()];
            let pre: Vec<f64> = (0..layer.outputs)
                .map(|o| {
                    let row = &w[o * layer.inputs..(o + 1) * layer.inputs];
                    b[o] + row.iter().zip(&current).map(|(a, v)| a * v).sum::<f64>()
                })
                .collect();
            let next = if l == last {
                pre.clone()
            } else {
                pre.iter().map(|&v| v.max(0.0)).collect()
            };
            tape.inputs.push(core::mem::replace(&mut current, next));
            tape.pre.push(pre);
        }
        Ok((current, tape))
    }

    /// Exact gradients for an upstream `grad_z`; the rectifier's subgradient
    /// at zero is zero.
    pub fn backward(&self, tape: &Tape, grad_z: &[f64]) -> Result<(Vec<f64>, Vec<f64>), BackboneError> {
        let mut grads = self.zero_grads();
        let grad_x = self.accumulate_backward(tape, grad_z, &mut grads)?;
        Ok((grads, grad_x))
    }

    /// As [`Mlp::backward`], adding parameter gradients into `grads`.
    pub fn accumulate_backward(
        &self,
        tape: &Tape,
        grad_z: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>, BackboneError> {
        let layers = self.layers();
        if tape.pre.len() != layers.len() || layers.iter().zip(&tape.inputs).any(|(l, x)| x.len() != l.inputs)
        {
            return Err(BackboneError::TapeMismatch);
        }
        if grad_z.len() != self.spec.output_dim {
            return Err(BackboneError::OutputDimension {
                expected: self.spec.output_dim,
                got: grad_z.len(),
            });
        }
        if grads.len() != self.params.len() {
            return Err(BackboneError::ParamCount {
                expected: self.params.len(),
                got: grads.len(),
            });
        }
        let last = layers.len() - 1;
        let mut upstream = grad_z.to_vec();
        for (l, layer) in layers.iter().enumerate().rev() {
            if l != last {
                for (g, &pre) in upstream.iter_mut().zip(&tape.pre[l]) {
                    if pre <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let input = &tape.inputs[l];
            let w = &self.params[layer.weights()];
            let mut downstream = vec![0.0; layer.inputs];
            let (gw, gb) = grads[layer.offset..layer.bias().end].split_at_mut(layer.inputs * layer.outputs);
            for (o, &g) in upstream.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let row = o * layer.inputs..(o + 1) * layer.inputs;
                for ((gw_i, &x_i), (d_i, &w_i)) in gw[row.clone()]
                    .iter_mut()
                    .zip(input)
                    .zip(downstream.iter_mut().zip(&w[row]))
                {
                    *gw_i += g * x_i;
                    *d_i += g * w_i;
                }
            }
            upstream = downstream;
        }
        Ok(upstream)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First/second moment accumulators and step counter.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: usize) -> Self {
        Self {
            first: vec![0.0; params],
            second: vec![0.0; params],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Weight decay scales parameters by
/// `1 − lr·w` before the moment step.
pub fn adam_step(params: &mut [f64], state: &mut AdamState, grads: &[f64], cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.first.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        *p *= decay;
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
    }
}
