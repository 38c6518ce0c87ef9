use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protonesy_core::backbone::{adam_step, AdamConfig, AdamState, Mlp, MlpSpec};

/// Layer-by-layer evaluation with explicit index arithmetic over the
/// documented layout: per layer, an `out × in` row-major weight block and
/// then `out` biases.
fn reference_forward(spec: &MlpSpec, params: &[f64], x: &[f64]) -> Vec<f64> {
    let mut widths = vec![spec.input_dim];
    widths.extend(&spec.hidden);
    widths.push(spec.output_dim);
    let mut a = x.to_vec();
    let mut offset = 0;
    for l in 0..widths.len() - 1 {
        let (n_in, n_out) = (widths[l], widths[l + 1]);
        let mut next = vec![0.0; n_out];
        for (o, slot) in next.iter_mut().enumerate() {
            let mut s = params[offset + n_in * n_out + o];
            for (i, ai) in a.iter().enumerate() {
                s += params[offset + o * n_in + i] * ai;
            }
            *slot = if l + 2 < widths.len() { s.max(0.0) } else { s };
        }
        offset += n_in * n_out + n_out;
        a = next;
    }
    a
}

fn random_mlp(rng: &mut ChaCha8Rng) -> Mlp {
    let input = rng.gen_range(1..=6);
    let hidden: Vec<usize> = (0..rng.gen_range(0..=3)).map(|_| rng.gen_range(1..=7)).collect();
    let output = rng.gen_range(1..=5);
    let mut mlp = Mlp::new(MlpSpec::new(input, hidden, output, rng.gen())).unwrap();
    for p in mlp.params.iter_mut() {
        *p += rng.gen_range(-0.3..0.3);
    }
    mlp
}

#[test]
fn forward_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mlp = Mlp::new(MlpSpec::new(2, vec![4], 3, 9)).unwrap();
    let x = [0.3, -1.2];
    let (z, _) = mlp.forward(&x).unwrap();
    let expected = reference_forward(&mlp.spec, &mlp.params, &x);
    for (a, b) in z.iter().zip(&expected) {
        assert!((a - b).abs() < 1e-14);
    }
    for _ in 0..100 {
        let mlp = random_mlp(&mut rng);
        let x: Vec<f64> = (0..mlp.spec.input_dim)
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect();
        let (z, _) = mlp.forward(&x).unwrap();
        let expected = reference_forward(&mlp.spec, &mlp.params, &x);
        for (a, b) in z.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(mlp.forward(&x).unwrap().0, z);
    }
}

#[test]
fn zero_network_and_identity_layer() {
    let spec = MlpSpec::new(3, vec![5], 2, 0);
    let zero = Mlp::from_params(spec.clone(), vec![0.0; spec.param_count()]).unwrap();
    assert_eq!(zero.forward(&[1.0, 2.0, 3.0]).unwrap().0, vec![0.0, 0.0]);

    let spec = MlpSpec::new(3, vec![], 3, 0);
    let mut params = vec![0.0; spec.param_count()];
    for i in 0..3 {
        params[i * 3 + i] = 1.0;
    }
    let id = Mlp::from_params(spec, params).unwrap();
    assert_eq!(id.forward(&[1.5, -2.0, 0.25]).unwrap().0, vec![1.5, -2.0, 0.25]);
}

#[test]
fn backward_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    for _ in 0..50 {
        let mlp = random_mlp(&mut rng);
        let x: Vec<f64> = (0..mlp.spec.input_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let w: Vec<f64> = (0..mlp.spec.output_dim)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        let probe = |params: &[f64], x: &[f64]| {
            reference_forward(&mlp.spec, params, x)
                .iter()
                .zip(&w)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let (_, tape) = mlp.forward(&x).unwrap();
        let (grads, grad_x) = mlp.backward(&tape, &w).unwrap();
        let mut numeric = Vec::with_capacity(grads.len());
        for i in 0..mlp.params.len() {
            let mut up = mlp.params.clone();
            up[i] += h;
            let mut down = mlp.params.clone();
            down[i] -= h;
            numeric.push((probe(&up, &x) - probe(&down, &x)) / (2.0 * h));
        }
        for i in 0..x.len() {
            let mut up = x.clone();
            up[i] += h;
            let mut down = x.clone();
            down[i] -= h;
            numeric.push((probe(&mlp.params, &up) - probe(&mlp.params, &down)) / (2.0 * h));
        }
        let analytic: Vec<f64> = grads.iter().chain(&grad_x).copied().collect();
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(&numeric)
            .map(|v| v.abs())
            .fold(1e-8, f64::max);
        assert!(diff / scale < 1e-5, "relative error {}", diff / scale);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mlp = random_mlp(&mut rng);
    let x = vec![0.5; mlp.spec.input_dim];
    let (_, tape) = mlp.forward(&x).unwrap();
    let (g, gx) = mlp.backward(&tape, &vec![0.0; mlp.spec.output_dim]).unwrap();
    assert!(g.iter().chain(&gx).all(|&v| v == 0.0));
}

#[test]
fn single_layer_gradient_is_outer_product() {
    let spec = MlpSpec::new(3, vec![], 2, 4);
    let mlp = Mlp::new(spec).unwrap();
    let x = [1.0, -2.0, 0.5];
    let gz = [0.3, -0.7];
    let (_, tape) = mlp.forward(&x).unwrap();
    let (g, _) = mlp.backward(&tape, &gz).unwrap();
    for o in 0..2 {
        for i in 0..3 {
            assert_eq!(g[o * 3 + i], gz[o] * x[i]);
        }
        assert_eq!(g[6 + o], gz[o]);
    }
}

#[test]
fn adam_scalar_trace() {
    // Two steps on one parameter with gradients 0.5 then −0.25, no decay.
    let cfg = AdamConfig {
        lr: 0.1,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut p = [1.0];
    let mut st = AdamState::new(1);
    adam_step(&mut p, &mut st, &[0.5], &cfg);
    // m̂ = 0.5, v̂ = 0.25: step = 0.1 · 0.5 / (0.5 + 1e-8).
    let first = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
    assert!((p[0] - first).abs() < 1e-15);
    adam_step(&mut p, &mut st, &[-0.25], &cfg);
    let m: f64 = 0.9 * 0.05 + 0.1 * -0.25;
    let v: f64 = 0.999 * 0.00025 + 0.001 * 0.0625;
    let m_hat = m / (1.0 - 0.81);
    let v_hat = v / (1.0 - 0.998001);
    assert!((p[0] - (first - 0.1 * m_hat / (v_hat.sqrt() + 1e-8))).abs() < 1e-14);
    assert_eq!(st.step, 2);
}

#[test]
fn decay_only_and_idle_steps() {
    let cfg = AdamConfig {
        weight_decay: 0.5,
        ..AdamConfig::default()
    };
    let mut p = [2.0, -4.0];
    let mut st = AdamState::new(2);
    adam_step(&mut p, &mut st, &[0.0, 0.0], &cfg);
    assert_eq!(p, [2.0 * (1.0 - 1e-3 * 0.5), -4.0 * (1.0 - 1e-3 * 0.5)]);

    let idle = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut q = [1.0, 3.0];
    let mut st = AdamState::new(2);
    adam_step(&mut q, &mut st, &[0.0, 0.0], &idle);
    assert_eq!(q, [1.0, 3.0]);
    assert_eq!(st.step, 1);
}

/// Two Gaussian blobs, logistic loss on the difference of two outputs.
#[test]
fn training_loss_decreases_on_separable_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data: Vec<(Vec<f64>, usize)> = (0..64)
        .map(|i| {
            let c = i % 2;
            let centre = if c == 0 { -2.0 } else { 2.0 };
            ((0..4).map(|_| centre + rng.gen_range(-0.5..0.5)).collect(), c)
        })
        .collect();
    let mut mlp = Mlp::new(MlpSpec::new(4, vec![8], 2, 1)).unwrap();
    let mut st = AdamState::new(mlp.params.len());
    let cfg = AdamConfig::default();
    let loss_and_grad = |mlp: &Mlp| {
        let mut grads = mlp.zero_grads();
        let mut loss = 0.0;
        for (x, c) in &data {
            let (z, tape) = mlp.forward(x).unwrap();
            let m = z[0].max(z[1]);
            let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
            loss += lse - z[*c];
            let p: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
            let gz: Vec<f64> = (0..2)
                .map(|k| (p[k] - if k == *c { 1.0 } else { 0.0 }) / data.len() as f64)
                .collect();
            mlp.accumulate_backward(&tape, &gz, &mut grads).unwrap();
        }
        (loss / data.len() as f64, grads)
    };
    let mut last = f64::INFINITY;
    for _ in 0..10 {
        let (loss, grads) = loss_and_grad(&mlp);
        assert!(loss < last, "{loss} !< {last}");
        last = loss;
        adam_step(&mut mlp.params, &mut st, &grads, &cfg);
    }
}
