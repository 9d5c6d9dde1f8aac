use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use vox3d_core::model::ParamVector;
use vox3d_core::regressor::{
    adam_step, batch_gradient, forward, initial_weights, mean_loss, pairs_from_samples, supervised_loss, train,
    AdamState, DecoderWeights, Pair, TrainConfig,
};
use vox3d_core::synthetic::{gen_dataset, gen_landmark_spec, gen_model, SyntheticConfig};

fn random_weights(rng: &mut ChaCha8Rng, ps: usize, pe: usize, d: usize) -> DecoderWeights {
    let mut w = DecoderWeights::init(ps, pe, d, rng);
    for b in w.shape_b.iter_mut().chain(w.expr_b.iter_mut()) {
        *b = rng.sample(StandardNormal);
    }
    w
}

fn small_dataset(n: usize, seed: u64) -> Vec<Pair> {
    let cfg = SyntheticConfig {
        seed,
        n_vertices: 120,
        shape_dim: 6,
        expr_dim: 3,
        n_identities: n,
        embedding_dim: 8,
        ..SyntheticConfig::default()
    };
    let model = gen_model(&cfg).unwrap();
    let spec = gen_landmark_spec(&model).unwrap();
    pairs_from_samples(&gen_dataset(&model, &spec, &cfg).unwrap())
}

#[test]
fn forward_matches_matvec_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = random_weights(&mut rng, 40, 10, 64);
    let v: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
    let out = forward(&v, &w).unwrap();
    for r in 0..40 {
        let want: f64 = (0..64).map(|c| w.shape_w[(r, c)] * v[c]).sum::<f64>() + w.shape_b[r];
        assert!((out.shape[r] - want).abs() < 1e-12);
    }
    for r in 0..10 {
        let want: f64 = (0..64).map(|c| w.expr_w[(r, c)] * v[c]).sum::<f64>() + w.expr_b[r];
        assert!((out.expr[r] - want).abs() < 1e-12);
    }
}

#[test]
fn supervised_gradient_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gt = ParamVector::new(
        (0..5).map(|_| rng.sample(StandardNormal)).collect(),
        (0..3).map(|_| rng.sample(StandardNormal)).collect(),
        true,
    );
    let pred = ParamVector::new(
        (0..5).map(|_| rng.sample(StandardNormal)).collect(),
        (0..3).map(|_| rng.sample(StandardNormal)).collect(),
        true,
    );
    let (_, g) = supervised_loss(&pred, &gt).unwrap();
    let base = pred.stacked();
    let h = 1e-5;
    for (k, gk) in g.stacked().iter().enumerate() {
        let at = |d: f64| {
            let mut v = base.clone();
            v[k] += d;
            supervised_loss(&ParamVector::from_stacked(&v, 5, true), &gt).unwrap().0
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        assert!((fd - gk).abs() <= 1e-6 * gk.abs().max(1.0), "{k}: {fd} vs {gk}");
    }
}

#[test]
fn weight_gradient_matches_differences() {
    let data = small_dataset(5, 3);
    let batch: Vec<&Pair> = data.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random_weights(&mut rng, 6, 3, 8);
    let (_, g) = batch_gradient(&w, &batch).unwrap();
    let h = 1e-5;
    let loss = |w: &DecoderWeights| batch_gradient(w, &batch).unwrap().0;
    for (r, c) in [(0, 0), (5, 7), (2, 3)] {
        let mut plus = w.clone();
        plus.shape_w[(r, c)] += h;
        let mut minus = w.clone();
        minus.shape_w[(r, c)] -= h;
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        assert!((fd - g.shape_w[(r, c)]).abs() < 1e-6 * fd.abs().max(1.0));
    }
    let mut plus = w.clone();
    plus.expr_b[1] += h;
    let mut minus = w.clone();
    minus.expr_b[1] -= h;
    let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
    assert!((fd - g.expr_b[1]).abs() < 1e-6 * fd.abs().max(1.0));
}

/// Scalar Adam written out by hand, one parameter.
fn scalar_adam(mut w: f64, grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v) = (0.0, 0.0);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
    }
    w
}

#[test]
fn adam_first_step_by_hand() {
    let mut w = DecoderWeights::zeros(1, 0, 0);
    w.shape_b[0] = 0.7;
    let mut g = DecoderWeights::zeros(1, 0, 0);
    g.shape_b[0] = 1.0;
    let state = AdamState::new(&w, 0.1).unwrap();
    let (_, out) = adam_step(&state, &w, &g).unwrap();
    assert!((out.shape_b[0] - (0.7 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
}

#[test]
fn adam_two_steps_match_scalar_trace() {
    let mut w = DecoderWeights::zeros(1, 0, 0);
    w.shape_b[0] = -0.3;
    let state = AdamState::new(&w, 0.05).unwrap();
    let mut g = DecoderWeights::zeros(1, 0, 0);
    g.shape_b[0] = 0.4;
    let (state, w1) = adam_step(&state, &w, &g).unwrap();
    g.shape_b[0] = -1.3;
    let (state, w2) = adam_step(&state, &w1, &g).unwrap();
    assert_eq!(state.step, 2);
    assert!((w2.shape_b[0] - scalar_adam(-0.3, &[0.4, -1.3], 0.05)).abs() < 1e-15);
}

#[test]
fn zero_iterations_return_initialization() {
    let data = small_dataset(10, 4);
    let cfg = TrainConfig {
        iters: 0,
        seed: 9,
        ..TrainConfig::default()
    };
    let out = train(&data, &cfg).unwrap();
    assert_eq!(out.weights, initial_weights(6, 3, 8, 9));
    assert!(out.history.is_empty());
}

#[test]
fn training_is_deterministic_and_decreasing() {
    let data = small_dataset(200, 5);
    let cfg = TrainConfig {
        iters: 300,
        batch_size: 16,
        seed: 2,
        ..TrainConfig::default()
    };
    let a = train(&data, &cfg).unwrap();
    let b = train(&data, &cfg).unwrap();
    assert_eq!(a, b);
    let bits = |h: &[f64]| h.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.history), bits(&b.history));
    let tenth = a.history.len() / 10;
    let head: f64 = a.history[..tenth].iter().sum::<f64>() / tenth as f64;
    let tail: f64 = a.history[a.history.len() - tenth..].iter().sum::<f64>() / tenth as f64;
    assert!(tail < head);
    let other = train(&data, &TrainConfig { seed: 3, ..cfg }).unwrap();
    assert_ne!(other.history, a.history);
}

#[test]
fn mismatched_targets_rejected() {
    let mut data = small_dataset(3, 6);
    data[1].target = ParamVector::zeros(2, 2);
    let cfg = TrainConfig::default();
    assert!(train(&data, &cfg).is_err());
    let mut raw = small_dataset(3, 6);
    raw[0].target.normalized = false;
    assert!(train(&raw, &cfg).is_err());
    assert!(mean_loss(&initial_weights(6, 3, 8, 0), &[]).is_err());
}

proptest! {
    #[test]
    fn forward_is_linear_without_bias(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DecoderWeights::init(4, 2, 6, &mut rng);
        let u: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let v: Vec<f64> = (0..6).map(|_| rng.sample(StandardNormal)).collect();
        let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let lhs = forward(&mix, &w).unwrap().stacked();
        let fu = forward(&u, &w).unwrap().stacked();
        let fv = forward(&v, &w).unwrap().stacked();
        for k in 0..lhs.len() {
            prop_assert!((lhs[k] - (a * fu[k] + b * fv[k])).abs() < 1e-12);
        }
    }
}
