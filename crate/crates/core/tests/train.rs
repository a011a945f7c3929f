use std::time::Duration;

use s4se::autodiff::Tensor;
use s4se::data::{synthetic_corpus, write_manifest, write_synthetic_corpus, Utterance};
use s4se::error::Error;
use s4se::nn::{ModelConfig, Variant};
use s4se::train::bench::{self, BenchMode, CSV_HEADER};
use s4se::train::{
    adam_step, clip_grad_norm, epoch_checkpoint_name, train, train_on, AdamConfig, Checkpoint, OptimizerState, TrainConfig, TrainOptions, LAST_CHECKPOINT, LOG_FILE,
};
use tempfile::tempdir;

const CLIP: usize = 400;

fn tiny_cfg(epochs: usize) -> TrainConfig {
    let mut model = ModelConfig::tiny(Variant::S4ndUnet);
    model.whitening = true;
    model.amplitude_transform = true;
    let mut cfg = TrainConfig::new(model);
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 2;
    cfg.train.segment_len = CLIP;
    cfg.train.seed = 11;
    cfg
}

fn corpus() -> Vec<Utterance> {
    synthetic_corpus(5, CLIP, 0.0, 4).unwrap()
}

#[test]
fn first_adam_step_moves_each_parameter_by_about_lr() {
    let cfg = AdamConfig::default();
    let start = vec![1.0, -2.0, 0.5, 0.0];
    let g = vec![0.3, -4.0, 1e-2, 7.0];
    let mut params = vec![Tensor::new(vec![4], start.clone()).unwrap()];
    let mut state = OptimizerState::new(&params, cfg);
    adam_step(&mut params, &[Some(g.clone())], &mut state).unwrap();
    for i in 0..4 {
        // bias-corrected moments are g and g² after one step
        let want = start[i] - cfg.lr * g[i] / (g[i].abs() + cfg.eps);
        let got = params[0].data()[i];
        assert!((got - want).abs() < 1e-15, "{i}: {got} vs {want}");
        assert!(((start[i] - got).abs() - cfg.lr).abs() < 1e-9);
    }
    assert_eq!(state.step, 1);
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let start = vec![0.25, -1.5];
    let mut params = vec![Tensor::new(vec![2], start.clone()).unwrap(), Tensor::new(vec![1], vec![3.0]).unwrap()];
    let mut state = OptimizerState::new(&params, AdamConfig::default());
    for _ in 0..3 {
        adam_step(&mut params, &[Some(vec![0.0, 0.0]), None], &mut state).unwrap();
    }
    assert_eq!(params[0].data(), &start[..]);
    assert_eq!(params[1].data(), &[3.0]);
    let bad = adam_step(&mut params, &[Some(vec![0.0]), None], &mut state);
    assert!(matches!(bad, Err(Error::ShapeMismatch(_))));
}

#[test]
fn adam_is_deterministic_over_ten_steps() {
    let run = || {
        let mut params = vec![Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap()];
        let mut state = OptimizerState::new(&params, AdamConfig::default());
        for k in 0..10 {
            let g: Vec<f64> = params[0].data().iter().map(|p| 2.0 * p + k as f64 * 0.01).collect();
            adam_step(&mut params, &[Some(g)], &mut state).unwrap();
        }
        params[0].data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn gradient_clipping_rescales_to_the_limit() {
    let mut g = vec![Some(vec![3.0, 0.0]), None, Some(vec![4.0])];
    let pre = clip_grad_norm(&mut g, 1.0);
    assert!((pre - 5.0).abs() < 1e-12);
    let post: f64 = g.iter().flatten().flatten().map(|v| v * v).sum::<f64>().sqrt();
    assert!((post - 1.0).abs() < 1e-12);
    let mut small = vec![Some(vec![0.3, 0.4])];
    assert!((clip_grad_norm(&mut small, 1.0) - 0.5).abs() < 1e-12);
    assert_eq!(small[0].as_deref(), Some(&[0.3, 0.4][..]));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempdir().unwrap();
    let cfg = tiny_cfg(1);
    train_on(&cfg, &corpus(), None, TrainOptions::new(dir.path())).unwrap();
    let bytes = std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap();
    assert_eq!(&bytes[..4], b"S4CK");
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(ck.whitening.is_some());
    assert_eq!(ck.meta.epoch, 1);
    assert_eq!(ck.to_bytes().unwrap(), bytes);

    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&newer), Err(Error::ConfigMismatch(_))));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::CorruptHeader(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::CorruptHeader(_))));
}

#[test]
fn empty_manifest_fails_before_training() {
    let dir = tempdir().unwrap();
    let manifest = dir.path().join("empty.csv");
    write_manifest(&manifest, &[]).unwrap();
    let out = dir.path().join("run");
    let err = train(&tiny_cfg(1), &manifest, TrainOptions::new(&out)).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err:?}");
    assert_eq!(err.exit_code(), 3);
    assert!(!out.join(LAST_CHECKPOINT).exists());
}

#[test]
fn training_from_a_manifest_writes_log_and_checkpoints() {
    let dir = tempdir().unwrap();
    let manifest = write_synthetic_corpus(dir.path().join("corpus"), 4, CLIP, 0.0, 2).unwrap();
    let out = dir.path().join("run");
    let mut cfg = tiny_cfg(2);
    cfg.train.eval_every = 2;
    let mut seen = Vec::new();
    let mut cb = |log: &s4se::train::EpochLog| seen.push(log.epoch);
    let mut opts = TrainOptions::new(&out);
    opts.on_epoch = Some(&mut cb);
    let outcome = train(&cfg, &manifest, opts).unwrap();
    assert_eq!(seen, vec![1, 2]);
    assert_eq!(outcome.history.len(), 2);
    assert!(outcome.history[0].eval_loss.is_none());
    assert!(outcome.history[1].eval_si_sdr_db.is_some());
    let log = std::fs::read_to_string(out.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);
    for e in 1..=2 {
        assert!(out.join(epoch_checkpoint_name(e)).exists());
    }
}

#[test]
fn identical_runs_produce_identical_artifacts() {
    let utts = corpus();
    let run = || {
        let dir = tempdir().unwrap();
        train_on(&tiny_cfg(2), &utts, None, TrainOptions::new(dir.path())).unwrap();
        (std::fs::read(dir.path().join(LAST_CHECKPOINT)).unwrap(), std::fs::read(dir.path().join(LOG_FILE)).unwrap())
    };
    assert!(run() == run());
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let utts = corpus();
    let full_dir = tempdir().unwrap();
    let full = train_on(&tiny_cfg(3), &utts, None, TrainOptions::new(full_dir.path())).unwrap();

    let part_dir = tempdir().unwrap();
    train_on(&tiny_cfg(1), &utts, None, TrainOptions::new(part_dir.path())).unwrap();
    let mut opts = TrainOptions::new(part_dir.path());
    opts.resume = Some(part_dir.path().join(LAST_CHECKPOINT));
    let resumed = train_on(&tiny_cfg(3), &utts, None, opts).unwrap();

    assert_eq!(resumed.history.len(), 3);
    for e in 1..3 {
        assert_eq!(resumed.history[e].train_loss.to_bits(), full.history[e].train_loss.to_bits(), "epoch {}", e + 1);
        assert_eq!(resumed.history[e].grad_norm.to_bits(), full.history[e].grad_norm.to_bits());
    }
    assert_eq!(resumed.pipeline.model.params.values(), full.pipeline.model.params.values());
}

#[test]
fn resume_rejects_a_different_model() {
    let utts = corpus();
    let dir = tempdir().unwrap();
    train_on(&tiny_cfg(1), &utts, None, TrainOptions::new(dir.path())).unwrap();
    let mut other = tiny_cfg(2);
    other.model.base_channels = 8;
    let mut opts = TrainOptions::new(dir.path());
    opts.resume = Some(dir.path().join(LAST_CHECKPOINT));
    assert!(matches!(train_on(&other, &utts, None, opts), Err(Error::ConfigMismatch(_))));
}

#[test]
fn enhance_keeps_length_and_silence() {
    let utts = corpus();
    let dir = tempdir().unwrap();
    let out = train_on(&tiny_cfg(1), &utts, None, TrainOptions::new(dir.path())).unwrap();
    let p = &out.pipeline;
    for len in [CLIP, 517, 20] {
        let noisy: Vec<f64> = (0..len).map(|i| (i as f64 * 0.05).sin() * 0.5).collect();
        let e = p.enhance(&noisy).unwrap();
        assert_eq!(e.samples.len(), len);
        assert!(e.samples.iter().all(|v| v.is_finite() && v.abs() <= 1.0));
    }
    let silent = p.enhance(&vec![0.0; CLIP]).unwrap();
    let peak = silent.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(peak <= 1e-3, "peak {peak}");
    assert_eq!(silent.clipped, 0);

    let loud: Vec<f64> = (0..CLIP).map(|i| if i % 40 < 20 { 1.0 } else { -1.0 }).collect();
    let e = p.enhance(&loud).unwrap();
    assert!(e.clipped <= CLIP);
    assert!(e.samples.iter().all(|v| v.abs() <= 1.0));

    let rec = p.evaluate("u", &utts[0].noisy, &utts[0].clean).unwrap();
    assert!(rec.si_sdr_db.is_some() && rec.noisy_si_sdr_db.is_some() && rec.loss.is_some() && rec.clipped.is_some());
    assert!(rec.lsd_db.unwrap() >= 0.0);
}

#[test]
fn config_file_round_trip_and_guards() {
    let cfg = tiny_cfg(4);
    let back = TrainConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(back.to_toml(), cfg.to_toml());
    let mut bad = cfg.clone();
    bad.train.prng = "pcg64".into();
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut short = cfg.clone();
    short.train.segment_len = 10;
    assert!(matches!(short.validate(), Err(Error::Config(_))));
    let unknown = format!("{}\n[extra]\nx = 1\n", cfg.to_toml());
    assert!(TrainConfig::from_toml(&unknown).is_err());
}

#[test]
fn bench_rows_are_csv() {
    assert_eq!(CSV_HEADER.split(',').count(), 5);
    for mode in [BenchMode::KernelNaive, BenchMode::KernelDplr, BenchMode::ConvDirect, BenchMode::ConvFft] {
        let row = bench::run(mode, 4, 64, Duration::from_millis(1)).unwrap();
        assert!(row.reps >= 1 && row.seconds > 0.0);
        let line = row.csv();
        assert_eq!(line.split(',').count(), 5);
        assert!(line.starts_with(&mode.to_string()));
        assert_eq!(mode.to_string().parse::<BenchMode>().unwrap(), mode);
    }
    assert!("fast".parse::<BenchMode>().is_err());
}
