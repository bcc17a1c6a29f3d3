use hdpl::autodiff::{OpKind, Tape};
use hdpl::gradcheck::check_model_gradients;
use hdpl::hdpl::{bounded_kl, KL_CAP};
use hdpl::rng::RngState;
use hdpl::transformer::{
    count_model_params, tap_latents, ForwardOptions, Mode, ModelConfig, Projection, ProjectionLayer, TransformerModel,
};
use hdpl::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(mode: Mode) -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        head_dim: 8,
        d_hidden: 64,
        vocab_size: 50,
        seq_len: 8,
        rank: 8,
        k_groups: 4,
        ..ModelConfig::micro(mode)
    }
}

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..vocab)).collect()
}

fn eval_logits(model: &TransformerModel<f32>, toks: &[usize], batch: usize) -> Vec<f32> {
    let tape = Tape::new();
    let vars = model.params.bind_frozen(&tape);
    let out = model.forward(&vars, toks, batch, None, &ForwardOptions::eval()).unwrap();
    out.logits.value().data().to_vec()
}

#[test]
fn constructed_model_matches_param_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for mode in [Mode::Baseline, Mode::Hybrid] {
        let cfg = small(mode);
        let model = TransformerModel::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(model.num_params(), count_model_params(&cfg));
    }
    for _ in 0..20 {
        let k = [1, 2, 4][rng.random_range(0..3)];
        let heads = rng.random_range(1..=3);
        let head_dim = 2 * k * rng.random_range(1..=2);
        let d_model = heads * head_dim;
        let d_hidden = k * rng.random_range(2..=8);
        let cfg = ModelConfig {
            d_model,
            n_layers: rng.random_range(1..=2),
            n_heads: heads,
            head_dim,
            d_hidden,
            vocab_size: rng.random_range(2..40),
            rank: rng.random_range(1..d_model.min(d_hidden)),
            k_groups: k,
            hybrid_set: Projection::ALL.into_iter().filter(|_| rng.random_bool(0.6)).collect(),
            ..ModelConfig::micro(if rng.random_bool(0.5) { Mode::Hybrid } else { Mode::Baseline })
        };
        let model = TransformerModel::<f32>::new(cfg.clone(), 3).unwrap();
        assert_eq!(model.num_params(), count_model_params(&cfg), "{cfg:?}");
    }
}

#[test]
fn hybrid_projections_follow_the_set() {
    let model = TransformerModel::<f32>::new(small(Mode::Hybrid), 0).unwrap();
    for block in &model.blocks {
        for p in Projection::ALL {
            let hybrid = matches!(block.projection(p), ProjectionLayer::Hybrid(..));
            assert_eq!(hybrid, Projection::SURGICAL.contains(&p), "{p}");
        }
    }
    assert_eq!(model.hybrid_layers().len(), 10);
}

#[test]
fn fresh_model_loss_near_uniform() {
    let cfg = small(Mode::Hybrid);
    let model = TransformerModel::<f32>::new(cfg.clone(), 42).unwrap();
    let toks = tokens(4 * cfg.seq_len, cfg.vocab_size, 1);
    let tgts = tokens(4 * cfg.seq_len, cfg.vocab_size, 2);
    let tape = Tape::new();
    let vars = model.params.bind_frozen(&tape);
    let out = model.forward(&vars, &toks, 4, Some(&tgts), &ForwardOptions::eval()).unwrap();
    let ce = out.ce_loss.unwrap().item() as f64;
    let uniform = (cfg.vocab_size as f64).ln();
    assert!((ce / uniform - 1.0).abs() < 0.1, "{ce} vs {uniform}");
}

#[test]
fn eval_is_deterministic_with_zero_aux() {
    let cfg = small(Mode::Hybrid);
    let model = TransformerModel::<f32>::new(cfg.clone(), 42).unwrap();
    let toks = tokens(2 * cfg.seq_len, cfg.vocab_size, 3);
    let run = || {
        let tape = Tape::new();
        let vars = model.params.bind_frozen(&tape);
        let out = model.forward(&vars, &toks, 2, Some(&toks), &ForwardOptions::eval()).unwrap();
        (out.logits.value().data().to_vec(), out.aux_total.item())
    };
    let (a, aux_a) = run();
    let (b, aux_b) = run();
    assert_eq!(a, b);
    assert_eq!((aux_a, aux_b), (0.0, 0.0));
}

#[test]
fn baseline_training_pass_has_zero_aux() {
    let cfg = small(Mode::Baseline);
    let model = TransformerModel::<f32>::new(cfg.clone(), 42).unwrap();
    let toks = tokens(cfg.seq_len, cfg.vocab_size, 3);
    let tape = Tape::new();
    let vars = model.params.bind(&tape);
    let out = model.forward(&vars, &toks, 1, Some(&toks), &ForwardOptions::train(RngState::new(1))).unwrap();
    assert_eq!(out.aux_total.item(), 0.0);
    assert_eq!(out.total_loss().unwrap().item(), out.ce_loss.unwrap().item());
}

#[test]
fn total_minus_ce_is_recomputed_kl_sum() {
    let cfg = small(Mode::Hybrid);
    let model = TransformerModel::<f64>::new(cfg.clone(), 42).unwrap();
    let toks = tokens(2 * cfg.seq_len, cfg.vocab_size, 4);
    let tape = Tape::new();
    let vars = model.params.bind(&tape);
    let opts = ForwardOptions::train(RngState::at(42, 3)).with_latents();
    let out = model.forward(&vars, &toks, 2, Some(&toks), &opts).unwrap();
    let diff = out.total_loss().unwrap().item() - out.ce_loss.unwrap().item();

    let records = tap_latents(&out).unwrap();
    assert_eq!(records.len(), 10);
    let check = Tape::<f64>::new();
    let mut sum = 0.0;
    for r in records {
        let kl = bounded_kl(&check.constant(r.mu.clone()), &check.constant(r.logvar.clone()), cfg.beta, cfg.kl_granularity)
            .unwrap()
            .item();
        assert!(kl > 0.0 && kl <= cfg.beta * KL_CAP);
        sum += kl;
    }
    assert!((diff - sum).abs() < 1e-6, "{diff} vs {sum}");
    assert!(diff <= records.len() as f64 * cfg.beta * KL_CAP);
}

#[test]
fn beta_zero_makes_total_equal_ce() {
    let cfg = ModelConfig {
        beta: 0.0,
        ..small(Mode::Hybrid)
    };
    let model = TransformerModel::<f32>::new(cfg.clone(), 42).unwrap();
    let toks = tokens(cfg.seq_len, cfg.vocab_size, 5);
    let tape = Tape::new();
    let vars = model.params.bind(&tape);
    let out = model.forward(&vars, &toks, 1, Some(&toks), &ForwardOptions::train(RngState::new(0))).unwrap();
    assert_eq!(out.total_loss().unwrap().item(), out.ce_loss.unwrap().item());
}

#[test]
fn latent_taps() {
    let cfg = small(Mode::Hybrid);
    let model = TransformerModel::<f32>::new(cfg.clone(), 42).unwrap();
    let toks = tokens(3 * cfg.seq_len, cfg.vocab_size, 6);
    let tape = Tape::new();
    let vars = model.params.bind_frozen(&tape);
    let out = model.forward(&vars, &toks, 3, None, &ForwardOptions::eval().with_latents()).unwrap();
    let records = tap_latents(&out).unwrap();
    assert_eq!(records.len(), cfg.n_layers * 5);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r.layer_id, i);
        assert_eq!((r.block, r.projection), model.hybrid_layers()[i]);
        assert_eq!(r.mu.shape(), &[3, cfg.seq_len, cfg.rank]);
        assert_eq!(r.z.data(), r.mu.data());
    }

    let plain = model.forward(&vars, &toks, 3, None, &ForwardOptions::eval()).unwrap();
    assert!(matches!(tap_latents(&plain), Err(Error::LatentsNotRecorded)));
}

#[test]
fn latent_overrides() {
    let cfg = small(Mode::Hybrid);
    let model = TransformerModel::<f32>::new(cfg.clone(), 42).unwrap();
    let toks = tokens(cfg.seq_len, cfg.vocab_size, 7);
    let base = eval_logits(&model, &toks, 1);
    let recorded = {
        let tape = Tape::new();
        let vars = model.params.bind_frozen(&tape);
        let out = model.forward(&vars, &toks, 1, None, &ForwardOptions::eval().with_latents()).unwrap();
        tap_latents(&out).unwrap()[3].z.clone()
    };

    {
        let _guard = model.override_latent(3, recorded.clone()).unwrap();
        assert_eq!(eval_logits(&model, &toks, 1), base);
    }
    let zero = {
        let _guard = model.override_latent(3, Tensor::zeros(recorded.shape())).unwrap();
        eval_logits(&model, &toks, 1)
    };
    let ones = {
        let _guard = model.override_latent(3, Tensor::full(recorded.shape(), 1.0)).unwrap();
        eval_logits(&model, &toks, 1)
    };
    assert_ne!(zero, base);
    assert_ne!(zero, ones);
    // guard dropped: back to normal
    assert_eq!(eval_logits(&model, &toks, 1), base);

    assert!(matches!(model.override_latent(99, recorded.clone()), Err(Error::UnknownLayer(99))));
    assert!(model.override_latent(0, Tensor::zeros(&[1, cfg.seq_len, cfg.rank + 1])).is_err());

    let _guard = model.override_latent(0, recorded).unwrap();
    let tape = Tape::new();
    let vars = model.params.bind(&tape);
    let res = model.forward(&vars, &toks, 1, Some(&toks), &ForwardOptions::train(RngState::new(0)));
    assert!(matches!(res, Err(Error::OverrideInTraining)));
}

#[test]
fn zero_latent_override_silences_global_path() {
    // with the decoder zeroed, overriding z cannot change anything
    let cfg = small(Mode::Hybrid);
    let mut model = TransformerModel::<f32>::new(cfg.clone(), 42).unwrap();
    let ProjectionLayer::Hybrid(layer, id) = model.blocks[0].projection(Projection::Q).clone() else {
        panic!("q is hybrid");
    };
    let toks = tokens(cfg.seq_len, cfg.vocab_size, 8);
    let z0 = Tensor::zeros(&[1, cfg.seq_len, cfg.rank]);
    let a = {
        let _g = model.override_latent(id, z0.clone()).unwrap();
        eval_logits(&model, &toks, 1)
    };
    let dec = model.params.get_mut(layer.w_dec);
    *dec = Tensor::zeros(dec.shape());
    let b = {
        let _g = model.override_latent(id, z0).unwrap();
        eval_logits(&model, &toks, 1)
    };
    assert_eq!(a, b);
}

#[test]
fn out_of_range_token_rejected() {
    let cfg = small(Mode::Hybrid);
    let model = TransformerModel::<f32>::new(cfg.clone(), 42).unwrap();
    let mut toks = tokens(cfg.seq_len, cfg.vocab_size, 9);
    toks[2] = cfg.vocab_size;
    let tape = Tape::new();
    let vars = model.params.bind_frozen(&tape);
    let res = model.forward(&vars, &toks, 1, None, &ForwardOptions::eval());
    assert!(matches!(res, Err(Error::IndexOutOfRange { .. })));
}

#[test]
fn later_tokens_do_not_affect_earlier_logits() {
    let cfg = ModelConfig {
        seq_len: 32,
        ..small(Mode::Hybrid)
    };
    let model = TransformerModel::<f32>::new(cfg.clone(), 42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let toks = tokens(32, cfg.vocab_size, 11);
    let base = eval_logits(&model, &toks, 1);
    let v = cfg.vocab_size;
    for _ in 0..20 {
        let t = rng.random_range(0..31);
        let mut changed = toks.clone();
        changed[t + 1] = (changed[t + 1] + rng.random_range(1..v)) % v;
        let out = eval_logits(&model, &changed, 1);
        assert_eq!(out[..(t + 1) * v], base[..(t + 1) * v]);
        assert_ne!(out[(t + 1) * v..], base[(t + 1) * v..]);
    }
}

#[test]
fn ffn_with_zero_up_weights_is_identity() {
    let cfg = small(Mode::Baseline);
    let mut model = TransformerModel::<f32>::new(cfg.clone(), 42).unwrap();
    let ProjectionLayer::Dense(up) = model.blocks[0].projection(Projection::Up).clone() else {
        panic!("baseline up is dense");
    };
    let w = model.params.get_mut(up);
    *w = Tensor::zeros(w.shape());
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::new(&[1, 4, 32], (0..128).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
    let tape = Tape::new();
    let vars = model.params.bind_frozen(&tape);
    let (y, aux) = model.ffn_block_forward(&vars, 0, &tape.constant(x.clone()), &ForwardOptions::eval()).unwrap();
    assert_eq!(y.value().data(), x.data());
    assert_eq!(aux.item(), 0.0);
}

/// Baseline FFN against a hybrid FFN whose layers have one block, a zero
/// decoder and the baseline weights.
#[test]
fn baseline_ffn_equals_degenerate_hybrid_ffn() {
    let base_cfg = small(Mode::Baseline);
    let hyb_cfg = ModelConfig {
        k_groups: 1,
        ..small(Mode::Hybrid)
    };
    let base = TransformerModel::<f64>::new(base_cfg, 42).unwrap();
    let mut hyb = TransformerModel::<f64>::new(hyb_cfg, 7).unwrap();
    for p in Projection::ALL {
        let ProjectionLayer::Dense(src) = base.blocks[0].projection(p).clone() else { unreachable!() };
        let w = base.params.get(src).clone();
        match hyb.blocks[0].projection(p).clone() {
            ProjectionLayer::Dense(dst) => *hyb.params.get_mut(dst) = w,
            ProjectionLayer::Hybrid(layer, _) => {
                let shape = hyb.params.get(layer.w_blocks).shape().to_vec();
                *hyb.params.get_mut(layer.w_blocks) = w.reshaped(&shape).unwrap();
                let dec = hyb.params.get_mut(layer.w_dec);
                *dec = Tensor::zeros(dec.shape());
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::new(&[2, 3, 32], (0..192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let run = |m: &TransformerModel<f64>| {
        let tape = Tape::new();
        let vars = m.params.bind_frozen(&tape);
        let (y, _) = m.ffn_block_forward(&vars, 0, &tape.constant(x.clone()), &ForwardOptions::eval()).unwrap();
        let (a, _) = m.attention_block_forward(&vars, 0, &y, &ForwardOptions::eval()).unwrap();
        a.value().data().to_vec()
    };
    assert_eq!(run(&base), run(&hyb));
}

#[test]
fn attention_block_aux_is_sum_of_its_layers() {
    let cfg = small(Mode::Hybrid);
    let model = TransformerModel::<f64>::new(cfg.clone(), 42).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::new(&[1, 4, 32], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let tape = Tape::new();
    let vars = model.params.bind(&tape);
    let xv = tape.constant(x);
    let (_, aux) = model.attention_block_forward(&vars, 1, &xv, &ForwardOptions::train(RngState::new(3))).unwrap();
    let h = hdpl::transformer::rmsnorm(&xv, &vars[model.blocks[1].attn_norm.0], cfg.rms_eps).unwrap();
    let mut want = 0.0;
    for p in [Projection::Q, Projection::K, Projection::V] {
        let ProjectionLayer::Hybrid(layer, _) = model.blocks[1].projection(p) else { unreachable!() };
        let (mu, lv) = layer.vae_encode(&vars, &h).unwrap();
        want += bounded_kl(&mu, &lv, cfg.beta, cfg.kl_granularity).unwrap().item();
    }
    assert!((aux.item() - want).abs() < 1e-12);
    let (_, eval_aux) = model.attention_block_forward(&vars, 1, &xv, &ForwardOptions::eval()).unwrap();
    assert_eq!(eval_aux.item(), 0.0);
}

#[test]
fn micro_model_gradients_match_finite_differences() {
    for mode in [Mode::Baseline, Mode::Hybrid] {
        let report = check_model_gradients(&ModelConfig::micro(mode), 42, 2, 1e-5, None).unwrap();
        let names: Vec<_> = report.groups.iter().map(|g| g.name.as_str()).collect();
        if mode == Mode::Hybrid {
            assert!(names.contains(&"blocks.0.q.w_mu") && names.contains(&"blocks.0.up.w_logvar"));
        }
        assert!(report.failures(1e-3).is_empty(), "{mode}: {report:#?}");
    }
}

#[test]
fn corrupted_adjoint_is_caught_by_name() {
    let report = check_model_gradients(&ModelConfig::micro(Mode::Hybrid), 42, 1, 1e-5, Some((OpKind::Expm1, 1.5))).unwrap();
    let failed: Vec<_> = report.failures(1e-3).into_iter().map(|g| g.name.clone()).collect();
    assert!(failed.iter().any(|n| n.ends_with("w_logvar")), "{failed:?}");
}
