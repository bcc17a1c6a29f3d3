use hdpl::autodiff::Tape;
use hdpl::gradcheck::check_gradients;
use hdpl::hdpl::{
    bounded_kl, count_hdpl_params, init_hdpl, latent_noise, reparameterize, HdplConfig, HdplLayer, KlGranularity,
    LatentMode, KL_CAP,
};
use hdpl::params::ParamStore;
use hdpl::rng::RngState;
use hdpl::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Expands `[K, go, gi]` blocks into the full `[K·go, K·gi]` matrix.
fn expand_blocks(blocks: &Tensor<f64>) -> Tensor<f64> {
    let (k, go, gi) = (blocks.shape()[0], blocks.shape()[1], blocks.shape()[2]);
    let (rows, cols) = (k * go, k * gi);
    let mut dense = vec![0.0; rows * cols];
    for g in 0..k {
        for r in 0..go {
            for c in 0..gi {
                dense[(g * go + r) * cols + g * gi + c] = blocks.data()[(g * go + r) * gi + c];
            }
        }
    }
    Tensor::new(&[rows, cols], dense).unwrap()
}

/// `x·Wᵀ` with plain loops.
fn naive_linear(x: &Tensor<f64>, w: &Tensor<f64>) -> Vec<f64> {
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    let rows = x.numel() / d_in;
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for o in 0..d_out {
            out[r * d_out + o] = (0..d_in).map(|i| x.data()[r * d_in + i] * w.data()[o * d_in + i]).sum();
        }
    }
    out
}

#[test]
fn block_diagonal_path_matches_expanded_dense_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(d_in, d_out, k) in &[(8, 12, 4), (6, 6, 3), (16, 8, 2), (5, 5, 1)] {
        let (store, layer) = init_hdpl::<f64>(HdplConfig::new(d_in, d_out, k, 2, 0.0), 11).unwrap();
        let x = random_tensor(&[2, 3, d_in], &mut rng);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let local = layer.block_diag_forward(&p, &tape.constant(x.clone())).unwrap().value();
        let dense = expand_blocks(store.get(layer.w_blocks));
        let want = naive_linear(&x, &dense);
        for (a, b) in local.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn local_path_keeps_groups_separate() {
    let (d_in, d_out, k) = (12, 8, 4);
    let (store, layer) = init_hdpl::<f64>(HdplConfig::new(d_in, d_out, k, 2, 0.0), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_tensor(&[1, 1, d_in], &mut rng);
    let run = |x: &Tensor<f64>| {
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        layer.block_diag_forward(&p, &tape.constant(x.clone())).unwrap().value().data().to_vec()
    };
    let base = run(&x);
    for g in 0..k {
        let mut x2 = x.clone();
        for i in g * 3..(g + 1) * 3 {
            x2.data_mut()[i] += 1.0;
        }
        let out = run(&x2);
        for o in 0..d_out {
            let changed = out[o] != base[o];
            assert_eq!(changed, o / 2 == g, "group {g}, output {o}");
        }
    }
}

/// HDPL with one block and a zero decoder against a dense layer holding the
/// same weights.
#[test]
fn single_block_zero_decoder_equals_dense() {
    let (d_in, d_out) = (16, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w = random_tensor(&[d_out, d_in], &mut rng);
    let x = random_tensor(&[2, 4, d_in], &mut rng);

    let mut store = ParamStore::<f64>::new();
    let layer = HdplLayer::init(&mut store, "h", HdplConfig::new(d_in, d_out, 1, 4, 0.01), 0, &mut rng).unwrap();
    *store.get_mut(layer.w_blocks) = w.clone().reshaped(&[1, d_out, d_in]).unwrap();
    *store.get_mut(layer.w_dec) = Tensor::zeros(&[d_out, 4]);

    let dense_tape = Tape::new();
    let dx = dense_tape.param(x.clone());
    let dw = dense_tape.param(w.clone());
    let dy = dx.linear(&dw).unwrap();
    let dloss = dy.mul(&dy).unwrap().sum();
    let dg = dense_tape.backward(&dloss).unwrap();

    let tape = Tape::new();
    let hx = tape.param(x.clone());
    let p = store.bind(&tape);
    let hy = layer.forward(&p, &hx, LatentMode::Eval).unwrap().y;
    let hloss = hy.mul(&hy).unwrap().sum();
    let hg = tape.backward(&hloss).unwrap();

    assert_eq!(hy.value().data(), dy.value().data());
    let pairs = [
        (hg.get(&hx).unwrap(), dg.get(&dx).unwrap()),
        (hg.get(&p[layer.w_blocks.0]).unwrap().reshaped(&[d_out, d_in]).unwrap(), dg.get(&dw).unwrap()),
    ];
    for (a, b) in pairs {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-6 * x.abs().max(y.abs()).max(1e-12), "{x} vs {y}");
        }
    }
}

#[test]
fn param_count_matches_constructed_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..50 {
        let k = rng.random_range(1..=8);
        let d_in = k * rng.random_range(1..=12);
        let d_out = k * rng.random_range(1..=12);
        if d_in < 2 {
            continue;
        }
        let r = rng.random_range(1..d_in);
        let (store, _) = init_hdpl::<f32>(HdplConfig::new(d_in, d_out, k, r, 0.1), 0).unwrap();
        let enumerated: usize = store.tensors().iter().map(|t| t.numel()).sum();
        assert_eq!(count_hdpl_params(d_in, d_out, k, r).unwrap(), enumerated);
    }
}

#[test]
fn init_statistics() {
    let (d_in, d_out, r) = (256, 512, 64);
    let (store, layer) = init_hdpl::<f64>(HdplConfig::new(d_in, d_out, 4, r, 0.1), 42).unwrap();
    let stats = |t: &Tensor<f64>| {
        let n = t.numel() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var)
    };
    for (id, want_var) in [
        (layer.w_blocks, 1.0 / d_in as f64),
        (layer.w_mu, 1.0 / d_in as f64),
        (layer.w_logvar, 1.0 / d_in as f64),
        (layer.w_dec, 1.0 / r as f64),
    ] {
        let (mean, var) = stats(store.get(id));
        assert!(mean.abs() < 0.01, "{}: mean {mean}", store.name(id));
        assert!((var / want_var - 1.0).abs() < 0.05, "{}: var {var}", store.name(id));
    }
}

#[test]
fn reparameterization_replays_from_rng_state() {
    let tape = Tape::<f64>::new();
    let mu = tape.constant(Tensor::from_f64(&[1, 2, 3], &[0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap());
    let logvar = tape.constant(Tensor::from_f64(&[1, 2, 3], &[0.0, -1.0, 1.0, 0.5, -0.5, 0.2]).unwrap());
    let rng = RngState::at(42, 17);
    let a = reparameterize(&mu, &logvar, &rng, 7, true).unwrap().value();
    let b = reparameterize(&mu, &logvar, &rng, 7, true).unwrap().value();
    assert_eq!(a.data(), b.data());
    let c = reparameterize(&mu, &logvar, &RngState::at(42, 18), 7, true).unwrap().value();
    assert_ne!(a.data(), c.data());

    let eps = latent_noise::<f64>(&rng, 7, &[1, 2, 3]);
    for i in 0..6 {
        let want = mu.value().data()[i] + (0.5 * logvar.value().data()[i]).exp() * eps.data()[i];
        assert!((a.data()[i] - want).abs() < 1e-15);
    }
    let eval = reparameterize(&mu, &logvar, &rng, 7, false).unwrap();
    assert_eq!(eval.id(), mu.id());
}

fn kl_of(mu: f64, logvar: f64, beta: f64) -> f64 {
    let tape = Tape::<f64>::new();
    let m = tape.constant(Tensor::from_f64(&[1], &[mu]).unwrap());
    let l = tape.constant(Tensor::from_f64(&[1], &[logvar]).unwrap());
    bounded_kl(&m, &l, beta, KlGranularity::Element).unwrap().item()
}

#[test]
fn kl_hand_cases() {
    let beta = 0.001;
    assert!(kl_of(0.0, 0.0, beta).abs() < 1e-9);
    assert!((kl_of(1.0, 0.0, beta) - 0.5 * beta).abs() < 1e-9);
    assert!((kl_of(2.0, 0.0, beta) - beta * KL_CAP).abs() < 1e-9);
}

#[test]
fn kl_matches_closed_form_below_cap() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let mu: f64 = rng.random_range(-0.8..0.8);
        let lv: f64 = rng.random_range(-0.8..0.8);
        let want = (-0.5 * (1.0 + lv - mu * mu - lv.exp())).min(KL_CAP);
        assert!((kl_of(mu, lv, 1.0) - want).abs() < 1e-12);
    }
}

#[test]
fn kl_bounded_over_random_draws() {
    let beta = 0.001;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 10_000;
    let tape = Tape::<f64>::new();
    let mut draw = || Tensor::new(&[n], (0..n).map(|_| rng.random_range(-5.0..=5.0)).collect()).unwrap();
    let mu = draw();
    let lv = draw();
    // each draw checked on its own and all together
    for i in 0..n {
        let v = kl_of(mu.data()[i], lv.data()[i], beta);
        assert!((0.0..=beta * KL_CAP).contains(&v), "{v}");
    }
    let all = bounded_kl(&tape.constant(mu), &tape.constant(lv), beta, KlGranularity::Element).unwrap().item();
    assert!((0.0..=beta * KL_CAP).contains(&all));
}

#[test]
fn layer_gradients_match_finite_differences() {
    for granularity in [KlGranularity::Element, KlGranularity::Token] {
        let mut cfg = HdplConfig::new(6, 4, 2, 3, 0.5);
        cfg.kl_granularity = granularity;
        let (store, layer) = init_hdpl::<f64>(cfg, 13).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&[2, 3, 6], &mut rng);
        let mut names = store.names().to_vec();
        names.push("x".into());
        let mut inputs = store.tensors().to_vec();
        inputs.push(x);
        let state = RngState::at(1, 5);
        let report = check_gradients(&names, &inputs, 1e-6, |_, v| {
            let out = layer.forward(&v[..4], &v[4], LatentMode::Train(state))?;
            out.y.mul(&out.y)?.mean().add(&out.aux_loss)
        })
        .unwrap();
        assert!(report.failures(1e-6).is_empty(), "{report:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn kl_in_bounds(mu in -5.0f64..5.0, lv in -5.0f64..5.0, beta in 0.0f64..1.0) {
        let v = kl_of(mu, lv, beta);
        prop_assert!(v >= 0.0 && v <= beta * KL_CAP + 1e-15);
    }

    #[test]
    fn training_aux_in_bounds(seed in 0u64..1000, scale in 0.1f64..20.0) {
        let (store, layer) = init_hdpl::<f32>(HdplConfig::new(8, 8, 2, 4, 0.001), seed).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let x = tape.constant(Tensor::full(&[1, 2, 8], scale as f32));
        let out = layer.forward(&p, &x, LatentMode::Train(RngState::new(seed))).unwrap();
        let aux = out.aux_loss.item() as f64;
        prop_assert!(aux >= 0.0 && aux <= 0.001 * KL_CAP * (1.0 + 1e-6));
    }
}
