use hdpl::data::{synthetic_text, Corpus};
use hdpl::training::checkpoint::{decode, encode};
use hdpl::training::{
    evaluate, load_checkpoint, lr_at, save_checkpoint, train_loop, AdamWConfig, LrSchedule, MetricsRecord,
    OptimizerState, ScheduleConfig, TrainConfig, TrainState, FINAL_CHECKPOINT, METRICS_FILE,
};
use hdpl::transformer::{Mode, ModelConfig};
use hdpl::{Error, Tensor};

fn tiny(mode: Mode) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        head_dim: 8,
        d_hidden: 32,
        vocab_size: 256,
        seq_len: 16,
        rank: 4,
        k_groups: 2,
        ..ModelConfig::micro(mode)
    }
}

fn corpora() -> (Corpus, Corpus) {
    let text = synthetic_text(20_000, 9);
    hdpl::data::split_corpus(&Corpus::from_bytes(&text), 0.1, 16).unwrap()
}

fn schedule() -> LrSchedule {
    LrSchedule::Cosine(ScheduleConfig {
        peak_lr: 3e-3,
        min_lr: 3e-4,
        warmup_steps: 5,
        max_steps: 100,
    })
}

fn run_config(max_steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        max_steps,
        log_interval: 1,
        eval_interval: 5,
        checkpoint_interval: 0,
        eval_batches: Some(4),
        ..TrainConfig::default()
    }
}

/// Loss-carrying fields only; timing fields differ run to run.
fn losses(records: &[MetricsRecord]) -> Vec<(u64, u64, Option<u64>, u64, u64)> {
    records
        .iter()
        .map(|r| (r.step, r.train_loss.to_bits(), r.val_loss.map(f64::to_bits), r.aux_loss.to_bits(), r.lr.to_bits()))
        .collect()
}

#[test]
fn schedule_examples() {
    let s = ScheduleConfig::default();
    assert_eq!(lr_at(&s, 0), 0.0);
    assert!((lr_at(&s, 500) - 4e-4).abs() < 1e-15);
    assert!((lr_at(&s, 1000) - 8e-4).abs() < 1e-15);
    assert!((lr_at(&s, 20_000) - 8e-5).abs() < 1e-15);
    assert!((lr_at(&s, 10_500) - 4.4e-4).abs() < 1e-12);
    assert_eq!(lr_at(&s, 50_000), 8e-5);
    let mut prev = lr_at(&s, 1000);
    for step in (1000..=20_000).step_by(37) {
        let lr = lr_at(&s, step);
        assert!(lr <= prev + 1e-18);
        prev = lr;
    }
    assert!(s.validate().is_ok());
    assert!(ScheduleConfig { min_lr: 0.0, ..s }.validate().is_err());
    assert!(ScheduleConfig { warmup_steps: 20_000, ..s }.validate().is_err());
}

#[test]
fn adamw_examples() {
    let cfg = |wd| AdamWConfig {
        weight_decay: wd,
        ..AdamWConfig::default()
    };
    let one = |x: f32| vec![Tensor::full(&[1], x)];

    let mut p = one(1.0);
    let mut opt = OptimizerState::new(cfg(0.0), &p);
    opt.step(&mut p, &one(0.0), 1e-2).unwrap();
    assert_eq!(p[0].item(), 1.0);

    let mut p = vec![Tensor::full(&[1], 1.0f64)];
    let mut opt = OptimizerState::new(cfg(0.1), &p);
    opt.step(&mut p, &[Tensor::full(&[1], 0.0)], 1e-2).unwrap();
    assert!((p[0].item() - 0.999).abs() < 1e-15);
    for _ in 0..9 {
        opt.step(&mut p, &[Tensor::full(&[1], 0.0)], 1e-2).unwrap();
    }
    assert!((p[0].item() - 0.999f64.powi(10)).abs() < 1e-14);

    let mut p = vec![Tensor::full(&[1], 0.0f64)];
    let mut opt = OptimizerState::new(cfg(0.0), &p);
    opt.step(&mut p, &[Tensor::full(&[1], 1.0)], 1e-3).unwrap();
    assert!((p[0].item() + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    assert!((p[0].item() + 9.99999e-4).abs() < 1e-9);
    assert_eq!(opt.t, 1);

    let mut opt = OptimizerState::new(cfg(0.0), &p);
    assert!(opt.step(&mut p, &[Tensor::full(&[2], 1.0)], 1e-3).is_err());
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (train, val) = corpora();
    let mut state = TrainState::new(tiny(Mode::Hybrid), LrSchedule::Constant { lr: 0.0 }, AdamWConfig::default(), 42).unwrap();
    let before = state.model.params.tensors().to_vec();
    train_loop(&mut state, &run_config(5), &train, &val).unwrap();
    assert_eq!(state.model.params.tensors(), &before[..]);
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let (train, val) = corpora();
    let run = || {
        let mut state = TrainState::new(tiny(Mode::Hybrid), schedule(), AdamWConfig::default(), 42).unwrap();
        losses(&train_loop(&mut state, &run_config(12), &train, &val).unwrap())
    };
    let a = run();
    assert_eq!(a.len(), 12);
    assert_eq!(a, run());
}

#[test]
fn aux_stays_inside_bounds_on_random_data() {
    let (train, val) = corpora();
    let cfg = tiny(Mode::Hybrid);
    let cap = cfg.hybrid_layer_count() as f64 * cfg.beta * std::f64::consts::LN_2;
    let mut state = TrainState::new(cfg, schedule(), AdamWConfig::default(), 7).unwrap();
    for r in train_loop(&mut state, &run_config(20), &train, &val).unwrap() {
        assert!(r.aux_loss > 0.0 && r.aux_loss < cap, "{r:?}");
    }
}

#[test]
fn resume_from_checkpoint_replays_losses() {
    let (train, val) = corpora();
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        output_dir: Some(dir.path().to_path_buf()),
        checkpoint_interval: 10,
        ..run_config(25)
    };
    let mut full = TrainState::new(tiny(Mode::Hybrid), schedule(), AdamWConfig::default(), 42).unwrap();
    let all = train_loop(&mut full, &cfg, &train, &val).unwrap();

    let ckpt = dir.path().join(hdpl::training::step_checkpoint_name(10));
    let mut resumed = load_checkpoint(&ckpt, Some(&tiny(Mode::Hybrid))).unwrap();
    assert_eq!(resumed.step, 10);
    let rest = train_loop(&mut resumed, &run_config(25), &train, &val).unwrap();
    assert_eq!(losses(&rest), losses(&all[10..]));
    assert_eq!(resumed.model.params.tensors(), full.model.params.tensors());

    let lines = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), 25);
    assert!(dir.path().join(FINAL_CHECKPOINT).exists());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (train, val) = corpora();
    let mut state = TrainState::new(tiny(Mode::Hybrid), schedule(), AdamWConfig::default(), 3).unwrap();
    train_loop(&mut state, &run_config(3), &train, &val).unwrap();
    let bytes = encode(&state).unwrap();
    let back = decode(&bytes, None).unwrap();
    assert_eq!(back.model.params.tensors(), state.model.params.tensors());
    assert_eq!(back.model.params.names(), state.model.params.names());
    assert_eq!(back.optimizer, state.optimizer);
    assert_eq!((back.rng, back.step, back.schedule), (state.rng, state.step, state.schedule));
    assert_eq!(back.best_val_loss.map(f64::to_bits), state.best_val_loss.map(f64::to_bits));
    assert_eq!(encode(&back).unwrap(), bytes);
    assert_eq!(&bytes[..4], b"HDPL");
}

#[test]
fn checkpoint_errors() {
    let state = TrainState::new(tiny(Mode::Baseline), schedule(), AdamWConfig::default(), 3).unwrap();
    let bytes = encode(&state).unwrap();
    for cut in [bytes.len() - 1, bytes.len() / 2, 10] {
        assert!(matches!(decode(&bytes[..cut], None), Err(Error::Corrupt(_))));
    }
    let mut flipped = bytes.clone();
    flipped[100] ^= 1;
    assert!(matches!(decode(&flipped, None), Err(Error::Corrupt(_))));
    assert!(matches!(decode(&bytes, Some(&tiny(Mode::Hybrid))), Err(Error::ManifestMismatch(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    save_checkpoint(&state, &path).unwrap();
    assert!(load_checkpoint(&path, Some(&tiny(Mode::Baseline))).is_ok());
    assert!(matches!(load_checkpoint(&dir.path().join("nope"), None), Err(Error::Io { .. })));
}

#[test]
fn evaluation_is_repeatable_and_matches_metrics() {
    let (train, val) = corpora();
    let mut state = TrainState::new(tiny(Mode::Hybrid), schedule(), AdamWConfig::default(), 5).unwrap();
    let records = train_loop(&mut state, &run_config(5), &train, &val).unwrap();
    let a = evaluate(&state.model, &val, 4, Some(4)).unwrap();
    let b = evaluate(&state.model, &val, 4, Some(4)).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(records.last().unwrap().val_loss, Some(a));
}

#[test]
fn non_finite_loss_aborts() {
    let (train, val) = corpora();
    let dir = tempfile::tempdir().unwrap();
    let mut state = TrainState::new(tiny(Mode::Baseline), schedule(), AdamWConfig::default(), 5).unwrap();
    let cfg = TrainConfig {
        output_dir: Some(dir.path().to_path_buf()),
        ..run_config(3)
    };
    state.model.params.tensors_mut()[0].data_mut().iter_mut().for_each(|x| *x = f32::NAN);
    let err = train_loop(&mut state, &cfg, &train, &val).unwrap_err();
    assert!(matches!(err, Error::NonFiniteLoss { step: 1, .. }));
    assert!(dir.path().join("diagnostic.json").exists());
}

#[test]
fn metrics_json_keys() {
    let r = MetricsRecord {
        step: 3,
        train_loss: 1.0,
        val_loss: None,
        aux_loss: 0.001,
        lr: 1e-3,
        tokens_per_sec: 10.0,
        wall_ms: 5.0,
    };
    let v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["aux_loss", "lr", "step", "tokens_per_sec", "train_loss", "wall_ms"]);
    let with_val = serde_json::to_value(MetricsRecord { val_loss: Some(2.0), ..r }).unwrap();
    assert_eq!(with_val["val_loss"], 2.0);
}
