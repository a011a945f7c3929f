//! Optimization loop, checkpoints and the enhancement pipeline.

mod adam;
pub mod bench;
mod checkpoint;
mod config;
mod pipeline;

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{bandmask, derive_seed, load_manifest, make_batches, remix, Utterance};
use crate::dsp::{fit_whitening, stft, AmplitudeTransform, WhiteningStats, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::metrics::MetricRecord;
use crate::nn::Model;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, OptimizerState};
pub use checkpoint::{Checkpoint, Meta, RngState, MAGIC, VERSION};
pub use config::{TrainConfig, TrainSettings, PRNG};
pub use pipeline::{Enhanced, Pipeline};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    /// Mean batch loss over the epoch, measured before each update.
    pub train_loss: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
    /// `"val"` or `"train"` when this epoch was evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_set: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_si_sdr_db: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_noisy_si_sdr_db: Option<f64>,
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.s4ck";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}.s4ck")
}

/// Fits whitening statistics on the model-input features of `utts`, or
/// returns `None` when the configuration does not whiten.
pub fn fit_feature_whitening(model: &Model, utts: &[Utterance], eps: f64) -> Result<Option<WhiteningStats>> {
    let cfg = &model.config;
    let Some(stft_cfg) = cfg.stft.as_ref().filter(|_| cfg.whitening && !cfg.variant.is_time_domain()) else {
        return Ok(None);
    };
    let at = AmplitudeTransform::default();
    let specs = utts
        .iter()
        .map(|u| {
            let s = stft(&u.noisy, stft_cfg, SAMPLE_RATE)?;
            Ok(if cfg.amplitude_transform { at.apply(&s, false) } else { s })
        })
        .collect::<Result<Vec<_>>>()?;
    match fit_whitening(&specs, eps) {
        Ok(s) => Ok(Some(s)),
        Err(Error::InsufficientData { frames, bins }) => {
            Err(Error::Data(format!("whitening needs more than {bins} training frames, corpus has {frames}")))
        }
        Err(e) => Err(e),
    }
}

/// Scores every utterance with the pipeline.
pub fn evaluate(pipeline: &Pipeline, utts: &[Utterance]) -> Result<Vec<MetricRecord>> {
    utts.iter().map(|u| pipeline.evaluate(&u.id, &u.noisy, &u.clean)).collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 { f64::NAN } else { s / n as f64 }
}

/// Everything a run needs besides the corpus.
pub struct TrainOptions<'a> {
    pub out_dir: PathBuf,
    pub resume: Option<PathBuf>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochLog)>,
}

impl TrainOptions<'_> {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: out_dir.into(), resume: None, on_epoch: None }
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub pipeline: Pipeline,
    pub history: Vec<EpochLog>,
    pub last_checkpoint: PathBuf,
}

/// Loads the manifests named by the run and trains.
pub fn train(cfg: &TrainConfig, manifest: &Path, opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let utts = load_manifest(manifest)?;
    let val = cfg.train.val_manifest.as_ref().map(load_manifest).transpose()?;
    train_on(cfg, &utts, val.as_deref(), opts)
}

/// Trains on in-memory utterances, writing the log and checkpoints to
/// `opts.out_dir`.
pub fn train_on(cfg: &TrainConfig, utts: &[Utterance], val: Option<&[Utterance]>, mut opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if utts.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let t = &cfg.train;
    std::fs::create_dir_all(&opts.out_dir)?;

    let (mut pipeline, mut opt, mut rng, mut history) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config.model != cfg.model {
                return Err(Error::ConfigMismatch("checkpoint model configuration differs from the run's".into()));
            }
            let pipeline = Pipeline { model: ck.model, whitening: ck.whitening, loss_stft: t.loss_stft.clone() };
            let mut opt = ck.optimizer;
            opt.config = t.adam();
            (pipeline, opt, ck.rng.restore(), ck.meta.history)
        }
        None => {
            let model = Model::new(cfg.model.clone(), t.seed)?;
            let whitening = fit_feature_whitening(&model, utts, t.whitening_eps)?;
            let opt = OptimizerState::new(model.params.values(), t.adam());
            let rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, 3, 0));
            (Pipeline { model, whitening, loss_stft: t.loss_stft.clone() }, opt, rng, Vec::new())
        }
    };
    let (eval_set, eval_name) = match val {
        Some(v) if !v.is_empty() => (v, "val"),
        _ => (utts, "train"),
    };
    let last_path = opts.out_dir.join(LAST_CHECKPOINT);
    let start = history.len() as u64;
    for epoch in start..t.epochs as u64 {
        let epoch_seed: u64 = rng.random();
        let batches = make_batches(utts, t.batch_size, t.segment_len, epoch_seed, 0)?;
        let (mut loss_sum, mut norm_sum) = (0.0, 0.0);
        for batch in &batches {
            let mut brng = batch.rng();
            let mut b = if t.remix { remix(batch, &mut brng) } else { batch.clone() };
            if t.bandmask_prob > 0.0 && brng.random::<f64>() < t.bandmask_prob {
                b = bandmask(&b, &mut brng, t.bandmask_width, SAMPLE_RATE)?;
            }
            let n = b.utterances.len() as f64;
            let mut grads: Vec<Option<Vec<f64>>> = vec![None; pipeline.model.params.len()];
            let mut batch_loss = 0.0;
            for u in &b.utterances {
                let mut tape = Tape::new();
                let p = pipeline.model.bind(&mut tape);
                let l = pipeline.loss_on(&mut tape, &p, &u.noisy, &u.clean)?;
                batch_loss += tape.value(l).item() / n;
                let g = tape.backward(l)?;
                for (acc, gi) in grads.iter_mut().zip(g.params) {
                    let Some(gi) = gi else { continue };
                    match acc {
                        Some(a) => a.iter_mut().zip(&gi).for_each(|(a, v)| *a += v / n),
                        None => *acc = Some(gi.iter().map(|v| v / n).collect()),
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NumericalInstability(format!("non-finite training loss in epoch {}", epoch + 1)));
            }
            norm_sum += clip_grad_norm(&mut grads, t.grad_clip);
            loss_sum += batch_loss;
            adam_step(pipeline.model.params.values_mut(), &grads, &mut opt)?;
            pipeline.model.params.round_to_f32();
            opt.round_to_f32();
        }
        let done = epoch + 1;
        let mut log = EpochLog {
            epoch: done,
            train_loss: loss_sum / batches.len() as f64,
            grad_norm: norm_sum / batches.len() as f64,
            eval_set: None,
            eval_loss: None,
            eval_si_sdr_db: None,
            eval_noisy_si_sdr_db: None,
        };
        if done % t.eval_every as u64 == 0 || done == t.epochs as u64 {
            let recs = evaluate(&pipeline, eval_set)?;
            log.eval_set = Some(eval_name.into());
            log.eval_loss = Some(mean(recs.iter().filter_map(|r| r.loss)));
            log.eval_si_sdr_db = Some(mean(recs.iter().filter_map(|r| r.si_sdr_db)));
            log.eval_noisy_si_sdr_db = Some(mean(recs.iter().filter_map(|r| r.noisy_si_sdr_db)));
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&log);
        }
        history.push(log);

        let ck = Checkpoint {
            config: cfg.clone(),
            model: pipeline.model.clone(),
            optimizer: opt.clone(),
            whitening: pipeline.whitening.clone(),
            rng: RngState::capture(&rng),
            meta: Meta { epoch: done, history: history.clone() },
        };
        ck.save(&last_path)?;
        if done % t.checkpoint_every as u64 == 0 || done == t.epochs as u64 {
            ck.save(opts.out_dir.join(epoch_checkpoint_name(done)))?;
        }
        let mut text = String::new();
        for h in &history {
            text.push_str(&serde_json::to_string(h)?);
            text.push('\n');
        }
        std::fs::write(opts.out_dir.join(LOG_FILE), text)?;
    }
    Ok(TrainOutcome { pipeline, history, last_checkpoint: last_path })
}

impl Checkpoint {
    pub fn pipeline(&self) -> Pipeline {
        Pipeline { model: self.model.clone(), whitening: self.whitening.clone(), loss_stft: self.config.train.loss_stft.clone() }
    }
}
