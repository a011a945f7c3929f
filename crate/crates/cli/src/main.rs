use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use s4se::data::{load_manifest, read_wav, write_wav};
use s4se::dsp::{StftConfig, SAMPLE_RATE};
use s4se::error::{Error, Result};
use s4se::metrics::{log_spectral_distance, si_sdr, write_jsonl, MetricRecord};
use s4se::nn::{gradcheck_model, Variant};
use s4se::ssm_kernel::dump::{write_dump, KernelSpec};
use s4se::train::bench::{self, BenchMode, CSV_HEADER};
use s4se::train::{evaluate, train, Checkpoint, EpochLog, Pipeline, TrainConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "s4se", version, about = "State-space speech enhancement toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; epoch logs go to stdout as JSON lines.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance one WAV file or every WAV file in a directory.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Clean reference file or directory with matching file names.
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest; JSON lines to stdout.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Finite-difference check of a tiny model.
    Gradcheck {
        #[arg(long)]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump a kernel described by a TOML spec.
    Kernel {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time one kernel or convolution engine; CSV to stdout.
    Bench {
        #[arg(long)]
        mode: BenchMode,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        len: usize,
        #[arg(long, default_value_t = 0.2)]
        min_time: f64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, manifest, out, seed, resume } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let mut print = |log: &EpochLog| {
                if let Ok(line) = serde_json::to_string(log) {
                    println!("{line}");
                }
            };
            let mut opts = TrainOptions::new(out);
            opts.resume = resume;
            opts.on_epoch = Some(&mut print);
            let outcome = train(&cfg, &manifest, opts)?;
            eprintln!("checkpoint: {}", outcome.last_checkpoint.display());
            Ok(())
        }
        Command::Enhance { ckpt, input, out, reference } => {
            let pipeline = Checkpoint::load(&ckpt)?.pipeline();
            let records = enhance_paths(&pipeline, &input, &out, reference.as_deref())?;
            write_jsonl(io::stdout().lock(), &records)
        }
        Command::Eval { ckpt, manifest } => {
            let pipeline = Checkpoint::load(&ckpt)?.pipeline();
            let utts = load_manifest(&manifest)?;
            write_jsonl(io::stdout().lock(), &evaluate(&pipeline, &utts)?)
        }
        Command::Gradcheck { variant, seed } => {
            let report = gradcheck_model(variant, seed)?;
            println!(
                "{}",
                serde_json::json!({
                    "variant": variant.to_string(),
                    "max_rel_err": report.max_rel_err,
                    "tolerance": report.tolerance,
                    "passed": report.passed,
                    "disconnected": report.disconnected(),
                })
            );
            if report.passed {
                Ok(())
            } else {
                Err(Error::NumericalInstability(format!("gradcheck error {:e} above {:e}", report.max_rel_err, report.tolerance)))
            }
        }
        Command::Kernel { config, len, out } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
            let dump = KernelSpec::from_toml(&text)?.build(len)?;
            let mut buf = Vec::new();
            write_dump(&mut buf, &dump)?;
            fs::write(&out, buf)?;
            Ok(())
        }
        Command::Bench { mode, n, len, min_time } => {
            let row = bench::run(mode, n, len, Duration::from_secs_f64(min_time.max(0.0)))?;
            let mut stdout = io::stdout().lock();
            writeln!(stdout, "{CSV_HEADER}")?;
            writeln!(stdout, "{}", row.csv())?;
            Ok(())
        }
    }
}

fn read_16k(path: &Path) -> Result<Vec<f64>> {
    let (samples, sr) = read_wav(path).map_err(|e| match e {
        Error::Io(io) => Error::Data(format!("{}: {io}", path.display())),
        other => other,
    })?;
    if sr != SAMPLE_RATE {
        return Err(Error::UnsupportedFormat(format!("{}: {sr} Hz, expected {SAMPLE_RATE}", path.display())));
    }
    Ok(samples)
}

fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no .wav files in {}", dir.display())));
    }
    Ok(files)
}

fn enhance_paths(pipeline: &Pipeline, input: &Path, out: &Path, reference: Option<&Path>) -> Result<Vec<MetricRecord>> {
    if !input.is_dir() {
        return Ok(vec![enhance_file(pipeline, input, out, reference)?]);
    }
    fs::create_dir_all(out)?;
    wav_files(input)?
        .iter()
        .map(|f| {
            let name = f.file_name().expect("listed file");
            enhance_file(pipeline, f, &out.join(name), reference.map(|r| r.join(name)).as_deref())
        })
        .collect()
}

fn enhance_file(pipeline: &Pipeline, input: &Path, out: &Path, reference: Option<&Path>) -> Result<MetricRecord> {
    let noisy = read_16k(input)?;
    let enhanced = pipeline.enhance(&noisy)?;
    write_wav(out, &enhanced.samples, SAMPLE_RATE)?;
    let id = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut rec = MetricRecord::new(id);
    rec.clipped = Some(enhanced.clipped);
    if let Some(r) = reference {
        let clean = read_16k(r)?;
        if clean.len() != noisy.len() {
            return Err(Error::Data(format!("{}: reference has {} samples, input {}", r.display(), clean.len(), noisy.len())));
        }
        rec.si_sdr_db = Some(si_sdr(&clean, &enhanced.samples)?);
        rec.noisy_si_sdr_db = Some(si_sdr(&clean, &noisy)?);
        let cfg = pipeline.model.config.stft.clone().unwrap_or_else(StftConfig::fine);
        if clean.len() >= cfg.min_signal_len() {
            rec.lsd_db = Some(log_spectral_distance(&clean, &enhanced.samples, &cfg)?);
        }
        rec.loss = Some(pipeline.loss(&noisy, &clean)?);
    }
    Ok(rec)
}
