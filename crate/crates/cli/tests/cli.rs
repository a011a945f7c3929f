use std::path::Path;
use std::process::{Command, Output};

use s4se::data::{write_manifest, write_synthetic_corpus, write_wav};
use s4se::metrics::MetricRecord;
use s4se::nn::{ModelConfig, Variant};
use s4se::ssm_kernel::dump::{read_kernel, read_kernel_2d, KernelDump, KernelSpec};
use s4se::train::{TrainConfig, LAST_CHECKPOINT};
use tempfile::tempdir;

fn s4se(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s4se")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn records(o: &Output) -> Vec<MetricRecord> {
    String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = TrainConfig::new(ModelConfig::tiny(Variant::S4ndUnet));
    cfg.train.epochs = 2;
    cfg.train.batch_size = 2;
    cfg.train.segment_len = 400;
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(code(&s4se(&[])), 2);
    assert_eq!(code(&s4se(&["frobnicate"])), 2);
    assert_eq!(code(&s4se(&["gradcheck", "--variant", "nope"])), 2);
    assert_eq!(code(&s4se(&["bench", "--mode", "fast", "--n", "4", "--len", "8"])), 2);
}

#[test]
fn kernel_dumps_match_the_library() {
    let dir = tempdir().unwrap();
    let one = dir.path().join("one.toml");
    std::fs::write(&one, "state_size = 8\nseed = 5\n").unwrap();
    let out = dir.path().join("k1.bin");
    let o = s4se(&["kernel", "--config", p(&one), "--len", "64", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let got = read_kernel(&mut std::fs::File::open(&out).unwrap()).unwrap();
    let KernelDump::OneD(want) = KernelSpec::from_toml("state_size = 8\nseed = 5\n").unwrap().build(64).unwrap() else { panic!() };
    assert_eq!(got, want);

    let two = dir.path().join("two.toml");
    let text = "dims = 2\nstate_size = 4\nseed = 1\nrank = 3\nlen2 = 12\n";
    std::fs::write(&two, text).unwrap();
    let out2 = dir.path().join("k2.bin");
    assert_eq!(code(&s4se(&["kernel", "--config", p(&two), "--len", "10", "--out", p(&out2)])), 0);
    let (l1, l2, r, taps) = read_kernel_2d(&mut std::fs::File::open(&out2).unwrap()).unwrap();
    assert_eq!((l1, l2, r), (10, 12, 3));
    let KernelDump::TwoD(want) = KernelSpec::from_toml(text).unwrap().build(10).unwrap() else { panic!() };
    assert_eq!(taps, want.taps());

    std::fs::write(&two, "dims = 5\nstate_size = 4\n").unwrap();
    assert_eq!(code(&s4se(&["kernel", "--config", p(&two), "--len", "10", "--out", p(&out2)])), 2);
    let missing = dir.path().join("missing.toml");
    assert_eq!(code(&s4se(&["kernel", "--config", p(&missing), "--len", "10", "--out", p(&out2)])), 2);
}

#[test]
fn gradcheck_reports_json() {
    let o = s4se(&["gradcheck", "--variant", "s4nd_unet", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["max_rel_err"].as_f64().unwrap() <= 1e-3);
}

#[test]
fn bench_prints_csv() {
    let o = s4se(&["bench", "--mode", "conv-fft", "--n", "4", "--len", "128", "--min-time", "0.01"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "mode,n,len,reps,seconds");
    assert!(lines[1].starts_with("conv-fft,4,128,"));
}

#[test]
fn train_enhance_and_eval_end_to_end() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let manifest = write_synthetic_corpus(dir.path().join("corpus"), 3, 400, 0.0, 9).unwrap();
    let run = dir.path().join("run");
    let o = s4se(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&run), "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let logs: Vec<serde_json::Value> = String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(logs.len(), 2);
    let ckpt = run.join(LAST_CHECKPOINT);

    let o = s4se(&["eval", "--ckpt", p(&ckpt), "--manifest", p(&manifest)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let recs = records(&o);
    assert_eq!(recs.len(), 3);
    assert!(recs.iter().all(|r| r.si_sdr_db.is_some() && r.loss.is_some()));

    let corpus = dir.path().join("corpus");
    let noisy_dir = dir.path().join("noisy");
    let clean_dir = dir.path().join("clean");
    std::fs::create_dir_all(&noisy_dir).unwrap();
    std::fs::create_dir_all(&clean_dir).unwrap();
    for i in 0..2 {
        let clean: Vec<f64> = (0..500).map(|t| 0.3 * (t as f64 * 0.07 * (i + 1) as f64).sin()).collect();
        let noisy: Vec<f64> = clean.iter().enumerate().map(|(t, c)| c + 0.05 * ((t * 7919 % 13) as f64 / 13.0 - 0.5)).collect();
        write_wav(noisy_dir.join(format!("u{i}.wav")), &noisy, 16000).unwrap();
        write_wav(clean_dir.join(format!("u{i}.wav")), &clean, 16000).unwrap();
    }
    let out_dir = dir.path().join("enhanced");
    let o = s4se(&["enhance", "--ckpt", p(&ckpt), "--in", p(&noisy_dir), "--out", p(&out_dir), "--ref", p(&clean_dir)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let recs = records(&o);
    assert_eq!(recs.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), ["u0", "u1"]);
    assert!(recs.iter().all(|r| r.si_sdr_db.is_some() && r.clipped.is_some()));
    for i in 0..2 {
        let (y, sr) = s4se::data::read_wav(out_dir.join(format!("u{i}.wav"))).unwrap();
        assert_eq!((y.len(), sr), (500, 16000));
    }

    let single = dir.path().join("one.wav");
    let o = s4se(&["enhance", "--ckpt", p(&ckpt), "--in", p(&noisy_dir.join("u0.wav")), "--out", p(&single)]);
    assert_eq!(code(&o), 0);
    let recs = records(&o);
    assert_eq!(recs.len(), 1);
    assert!(recs[0].si_sdr_db.is_none());
    assert!(single.exists());

    let wrong_rate = dir.path().join("8k.wav");
    write_wav(&wrong_rate, &[0.1; 300], 8000).unwrap();
    assert_eq!(code(&s4se(&["enhance", "--ckpt", p(&ckpt), "--in", p(&wrong_rate), "--out", p(&single)])), 3);
    let missing = corpus.join("nope.s4ck");
    assert_eq!(code(&s4se(&["enhance", "--ckpt", p(&missing), "--in", p(&single), "--out", p(&single)])), 3);
}

#[test]
fn data_and_config_failures_map_to_exit_codes() {
    let dir = tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let empty = dir.path().join("empty.csv");
    write_manifest(&empty, &[]).unwrap();
    let run = dir.path().join("run");
    assert_eq!(code(&s4se(&["train", "--config", p(&cfg), "--manifest", p(&empty), "--out", p(&run)])), 3);
    assert!(!run.join(LAST_CHECKPOINT).exists());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nvariant = \"s4nd_unet\"\n").unwrap();
    assert_eq!(code(&s4se(&["train", "--config", p(&bad), "--manifest", p(&empty), "--out", p(&run)])), 2);
}
