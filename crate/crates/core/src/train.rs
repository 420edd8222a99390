//! Run configuration and the CTC training loop.
//!
//! A run is fully determined by its [`RunConfig`], the tokenizer and the
//! manifests. Randomness is drawn from ChaCha8 streams keyed by the seed:
//! stream `step` drives SpecAugment and dropout for that step, the batch
//! order of an epoch comes from a separate generator keyed by the epoch, and
//! initialization uses its own stream. Resuming from a checkpoint therefore
//! replays the exact remaining trajectory.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::{ctc_loss, ctc_loss_graph};
use crate::data::ManifestEntry;
use crate::error::{Error, Result};
use crate::eval::{evaluate_features, load_features, Decoder};
use crate::frontend::{spec_augment, FeatureMatrix, SpecAugmentConfig};
use crate::model::{output_frames, Checkpoint, CheckpointMeta, Citrinet, CitrinetConfig, Mode};
use crate::optim::{lr_at, NovoGrad, NovoGradConfig, ScheduleConfig};
use crate::tensor::Graph;
use crate::tokenizer::{ctc_feasible, TokenizerModel};

const INIT_STREAM: u64 = u64::MAX;
const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const METRICS_LOG: &str = "metrics.jsonl";

/// Everything that determines a training run besides the data.
///
/// Text form: one `key = value` per line, `#` starts a comment. Keys are
/// the model keys of [`CitrinetConfig`] plus `freq_masks`, `freq_width`,
/// `time_masks`, `time_width_fraction`, `beta1`, `beta2`, `weight_decay`,
/// `eps`, `peak_lr`, `warmup_steps`, `total_steps`, `batch_size`,
/// `tokenizer`, `seed` and `eval_every`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: CitrinetConfig,
    pub augment: SpecAugmentConfig,
    pub optim: NovoGradConfig,
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub tokenizer: Option<PathBuf>,
    pub seed: u64,
    /// Steps between dev evaluations; the last step is always evaluated.
    pub eval_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: CitrinetConfig::default(),
            augment: SpecAugmentConfig::default(),
            optim: NovoGradConfig::default(),
            schedule: ScheduleConfig::default(),
            batch_size: 32,
            tokenizer: None,
            seed: 0,
            eval_every: 1000,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::format("run config", format!("bad value {value:?} for {key}")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        match key {
            "freq_masks" => self.augment.freq_masks = parse(key, value)?,
            "freq_width" => self.augment.freq_width = parse(key, value)?,
            "time_masks" => self.augment.time_masks = parse(key, value)?,
            "time_width_fraction" => self.augment.time_width_fraction = parse(key, value)?,
            "beta1" => self.optim.beta1 = parse(key, value)?,
            "beta2" => self.optim.beta2 = parse(key, value)?,
            "weight_decay" => self.optim.weight_decay = parse(key, value)?,
            "eps" => self.optim.eps = parse(key, value)?,
            "peak_lr" => self.schedule.peak_lr = parse(key, value)?,
            "warmup_steps" => self.schedule.warmup_steps = parse(key, value)?,
            "total_steps" => self.schedule.total_steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "tokenizer" => {
                self.tokenizer = match value.trim() {
                    "" | "none" => None,
                    v => Some(PathBuf::from(v)),
                }
            }
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            _ => return Err(Error::format("run config", format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Keys owned by the run rather than the model.
    pub fn training_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("freq_masks", self.augment.freq_masks.to_string()),
            ("freq_width", self.augment.freq_width.to_string()),
            ("time_masks", self.augment.time_masks.to_string()),
            ("time_width_fraction", self.augment.time_width_fraction.to_string()),
            ("beta1", self.optim.beta1.to_string()),
            ("beta2", self.optim.beta2.to_string()),
            ("weight_decay", self.optim.weight_decay.to_string()),
            ("eps", self.optim.eps.to_string()),
            ("peak_lr", self.schedule.peak_lr.to_string()),
            ("warmup_steps", self.schedule.warmup_steps.to_string()),
            ("total_steps", self.schedule.total_steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            (
                "tokenizer",
                self.tokenizer.as_ref().map_or("none".into(), |p| p.display().to_string()),
            ),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# model\n");
        for (k, v) in self.model.to_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out.push_str("# training\n");
        for (k, v) in self.training_pairs() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("run config", format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.augment.validate()?;
        self.optim.validate()?;
        self.schedule.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidArgument("eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// A featurized, tokenized utterance.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub features: FeatureMatrix,
    pub target: Vec<u32>,
    pub text: String,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    /// Utterances dropped because the encoder output is too short for CTC.
    pub skipped: usize,
}

impl Dataset {
    /// Tokenizes `(features, text)` pairs, skipping CTC-infeasible ones.
    pub fn from_features(items: Vec<(FeatureMatrix, String)>, tokenizer: &TokenizerModel) -> Self {
        let mut data = Dataset::default();
        for (features, text) in items {
            let target = tokenizer.encode(&text);
            let frames = output_frames(features.frames());
            if target.is_empty() || !ctc_feasible(&target, frames) {
                log::warn!(
                    "skipping {text:?}: {} tokens do not fit {frames} output frames",
                    target.len()
                );
                data.skipped += 1;
                continue;
            }
            data.utterances.push(Utterance { features, target, text });
        }
        data
    }

    /// Loads and featurizes manifest audio in parallel.
    pub fn load(entries: &[ManifestEntry], tokenizer: &TokenizerModel) -> Result<Self> {
        let items = entries
            .par_iter()
            .map(|e| Ok((load_features(e)?, e.text.clone())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_features(items, tokenizer))
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    fn eval_pairs(&self) -> Vec<(FeatureMatrix, String)> {
        self.utterances.iter().map(|u| (u.features.clone(), u.text.clone())).collect()
    }
}

/// Length-sorted buckets of at most `batch_size` utterance indices.
pub fn make_buckets(lengths: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&i| (lengths[i], i));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Bucket index used at 1-based `step`; every epoch visits each bucket once
/// in an order drawn from `(seed, epoch)`.
pub fn bucket_for_step(num_buckets: usize, seed: u64, step: u64) -> usize {
    let n = num_buckets as u64;
    let epoch = (step - 1) / n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_SALT);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..num_buckets).collect();
    order.shuffle(&mut rng);
    order[((step - 1) % n) as usize]
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    /// Greedy dev WER, on evaluation steps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wer: Option<f64>,
}

/// Model, optimizer and progress of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: RunConfig,
    model: Citrinet<f32>,
    optim: NovoGrad<f32>,
    step: u64,
    best_wer: Option<f64>,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(INIT_STREAM);
        let model = Citrinet::build(cfg.model.clone(), &mut rng)?;
        let optim = NovoGrad::new(cfg.optim.clone())?;
        Ok(Self {
            cfg,
            model,
            optim,
            step: 0,
            best_wer: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        cfg.validate()?;
        if ckpt.config != cfg.model {
            return Err(Error::InvalidArgument(
                "checkpoint model configuration differs from the run configuration".into(),
            ));
        }
        let model = ckpt.to_model::<f32>()?;
        let optim = NovoGrad::load_from(cfg.optim.clone(), model.store(), ckpt)?;
        let meta = |k: &str| ckpt.meta.get(k).map(String::as_str);
        let step = meta("step")
            .ok_or_else(|| Error::format("checkpoint", "missing training step"))?
            .parse()
            .map_err(|_| Error::format("checkpoint", "bad training step"))?;
        let best_wer = match meta("best_wer") {
            None | Some("none") => None,
            Some(v) => Some(v.parse().map_err(|_| Error::format("checkpoint", "bad best_wer"))?),
        };
        Ok(Self {
            cfg,
            model,
            optim,
            step,
            best_wer,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Citrinet<f32> {
        &self.model
    }

    pub fn into_model(self) -> Citrinet<f32> {
        self.model
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn best_wer(&self) -> Option<f64> {
        self.best_wer
    }

    /// Runs one optimizer step on the batch scheduled for the next step.
    /// Returns the mean CTC loss of that batch (before the update).
    pub fn train_step(&mut self, data: &Dataset) -> Result<MetricRecord> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let step = self.step + 1;
        let lr = lr_at(&self.cfg.schedule, step)?;
        let lengths: Vec<usize> = data.utterances.iter().map(|u| u.features.frames()).collect();
        let buckets = make_buckets(&lengths, self.cfg.batch_size);
        let batch = &buckets[bucket_for_step(buckets.len(), self.cfg.seed, step)];

        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        let mut g = Graph::new();
        let inputs: Vec<_> = batch
            .iter()
            .map(|&i| g.constant(spec_augment(&data.utterances[i].features, &self.cfg.augment, &mut rng).to_tensor()))
            .collect();
        let outputs = self.model.forward_graph(&mut g, &inputs, Mode::Train, &mut rng)?;
        let mut total = None;
        for (&i, &out) in batch.iter().zip(&outputs) {
            let utt = &data.utterances[i];
            let loss = ctc_loss_graph(&mut g, out, &utt.target).map_err(|e| match e {
                Error::NonFinite(_) => self.diverged(step, lr, &format!("CTC likelihood of {:?}", utt.text)),
                e => e,
            })?;
            total = Some(match total {
                None => loss,
                Some(acc) => g.add(acc, loss)?,
            });
        }
        let total = total.expect("non-empty batch");
        let mean = g.scale(total, 1.0 / batch.len() as f32);
        let loss = g.scalar(mean) as f64;
        if !loss.is_finite() {
            return Err(self.diverged(step, lr, &format!("mean loss {loss}")));
        }
        g.backward(mean, self.model.store_mut())?;
        self.optim
            .step(self.model.store_mut(), lr)
            .map_err(|e| self.diverged(step, lr, &e.to_string()))?;
        self.step = step;
        Ok(MetricRecord {
            step,
            loss,
            lr,
            wer: None,
        })
    }

    fn diverged(&self, step: u64, lr: f64, what: &str) -> Error {
        let worst = self
            .model
            .store()
            .iter()
            .map(|(_, p)| (p.name.as_str(), p.tensor.data().iter().fold(0f32, |m, v| m.max(v.abs()))))
            .max_by(|a, b| a.1.total_cmp(&b.1));
        let msg = format!(
            "training diverged at step {step} (lr {lr:.3e}): {what}; largest weight {:?}",
            worst
        );
        log::error!("{msg}");
        Error::NonFinite(msg)
    }

    /// Mean eval-mode CTC loss over `data`.
    pub fn mean_loss(&self, data: &Dataset) -> Result<f64> {
        mean_ctc_loss(&self.model, data)
    }

    /// Greedy dev WER; records it as the best when it improves.
    pub fn evaluate(&mut self, tokenizer: &TokenizerModel, dev: &Dataset) -> Result<(f64, bool)> {
        let report = evaluate_features(&self.model, tokenizer, &dev.eval_pairs(), &Decoder::Greedy)?;
        let improved = self.best_wer.map_or(true, |b| report.wer < b);
        if improved {
            self.best_wer = Some(report.wer);
        }
        Ok((report.wer, improved))
    }

    /// Model, optimizer state, step and run configuration.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut meta = CheckpointMeta::new();
        meta.insert("step".into(), self.step.to_string());
        meta.insert(
            "best_wer".into(),
            self.best_wer.map_or("none".into(), |w| w.to_string()),
        );
        for (k, v) in self.cfg.training_pairs() {
            meta.insert(format!("run.{k}"), v);
        }
        let mut ckpt = Checkpoint::from_model(&self.model, meta);
        self.optim.save_into(self.model.store(), &mut ckpt);
        ckpt
    }
}

/// Mean eval-mode CTC loss of `model` over `data`.
pub fn mean_ctc_loss(model: &Citrinet<f32>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let losses = data
        .utterances
        .par_iter()
        .map(|u| Ok(ctc_loss(&model.infer(&u.features)?, &u.target)?.0))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Recovers the run configuration stored in a checkpoint.
pub fn run_config_from_checkpoint(ckpt: &Checkpoint) -> Result<RunConfig> {
    let mut cfg = RunConfig {
        model: ckpt.config.clone(),
        ..RunConfig::default()
    };
    for (k, v) in &ckpt.meta {
        if let Some(key) = k.strip_prefix("run.") {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub last_loss: f64,
    pub best_wer: Option<f64>,
    pub skipped_train: usize,
    pub skipped_dev: usize,
}

/// Trains to `cfg.schedule.total_steps`, writing `best.ckpt`, `last.ckpt`
/// and `metrics.jsonl` into `out_dir`.
///
/// With `resume`, training continues from `out_dir/last.ckpt` and the
/// metrics log is cut back to the checkpoint's step first. The model's
/// vocabulary size is taken from the tokenizer.
pub fn train(
    cfg: &RunConfig,
    tokenizer: &TokenizerModel,
    train_set: &Dataset,
    dev_set: &Dataset,
    out_dir: impl AsRef<Path>,
    resume: bool,
) -> Result<TrainSummary> {
    let out_dir = out_dir.as_ref();
    if train_set.is_empty() {
        return Err(Error::Empty("training set has no usable utterances"));
    }
    let mut cfg = cfg.clone();
    if cfg.model.vocab_size != tokenizer.vocab_size() {
        log::info!("vocab_size set to {} from the tokenizer", tokenizer.vocab_size());
        cfg.model.vocab_size = tokenizer.vocab_size();
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_path = out_dir.join(METRICS_LOG);
    let mut trainer = if resume {
        let ckpt = Checkpoint::load(out_dir.join(LAST_CHECKPOINT))?;
        let trainer = Trainer::resume(cfg.clone(), &ckpt)?;
        truncate_metrics(&metrics_path, trainer.step())?;
        log::info!("resuming at step {}", trainer.step());
        trainer
    } else {
        std::fs::write(&metrics_path, "").map_err(|e| Error::io(&metrics_path, e))?;
        Trainer::new(cfg.clone())?
    };
    let mut log_file = std::fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let total = cfg.schedule.total_steps;
    let mut last_loss = f64::NAN;
    while trainer.step() < total {
        let mut record = trainer.train_step(train_set)?;
        last_loss = record.loss;
        let step = record.step;
        if step % cfg.eval_every == 0 || step == total {
            if dev_set.is_empty() {
                trainer.checkpoint().save(out_dir.join(BEST_CHECKPOINT))?;
            } else {
                let (wer, improved) = trainer.evaluate(tokenizer, dev_set)?;
                record.wer = Some(wer);
                log::info!("step {step}: loss {:.4}, lr {:.3e}, dev wer {wer:.2}%", record.loss, record.lr);
                if improved {
                    trainer.checkpoint().save(out_dir.join(BEST_CHECKPOINT))?;
                }
            }
            trainer.checkpoint().save(out_dir.join(LAST_CHECKPOINT))?;
        } else {
            log::debug!("step {step}: loss {:.4}, lr {:.3e}", record.loss, record.lr);
        }
        writeln!(log_file, "{}", serde_json::to_string(&record)?).map_err(|e| Error::io(&metrics_path, e))?;
    }
    Ok(TrainSummary {
        steps: trainer.step(),
        last_loss,
        best_wer: trainer.best_wer(),
        skipped_train: train_set.skipped,
        skipped_dev: dev_set.skipped,
    })
}

/// Drops metrics lines past `step`.
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut kept = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let rec: MetricRecord = serde_json::from_str(line)?;
        if rec.step <= step {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    std::fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Reads a metrics log.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
