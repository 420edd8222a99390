use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand, ValueEnum};

use citrinet::analyze::analyze;
use citrinet::ctc::{train_lm, BeamConfig, FusionMode, NGramLM};
use citrinet::data::{read_manifest, synth_data, ManifestEntry};
use citrinet::eval::{evaluate, transcribe, Decoder};
use citrinet::frontend::{log_mel, read_wav, SAMPLE_RATE};
use citrinet::model::Checkpoint;
use citrinet::tokenizer::{normalize_text, TokenizerKind, TokenizerModel};
use citrinet::train::{run_config_from_checkpoint, train, Dataset, RunConfig, LAST_CHECKPOINT};
use citrinet::{Error, Result};

#[derive(Parser)]
#[command(name = "citrinet", version, about = "Citrinet CTC speech recognition")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic tone-word corpus (WAVs plus manifest.json).
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        num: usize,
        /// How many words of the built-in list to draw from (1-30).
        #[arg(long, default_value_t = 5)]
        words: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a sub-word or character tokenizer on transcripts.
    TrainTokenizer {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long, default_value_t = 256)]
        vocab_size: usize,
        #[arg(long, default_value = "subword")]
        kind: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train an n-gram token LM for beam-search fusion.
    TrainLm {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        tokenizer: PathBuf,
        #[arg(long, default_value_t = 6)]
        order: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; writes best.ckpt, last.ckpt and metrics.jsonl.
    Train {
        /// Run configuration file (`key = value` lines).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        dev_manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `<out>/last.ckpt`.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        run: RunOverrides,
    },
    /// Score a checkpoint on a manifest; prints a JSON report.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Also write per-utterance hypotheses to this JSON file.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Transcribe WAV files.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tokenizer: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
        #[arg(required = true)]
        audio: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Report parameter counts, receptive field and kernel layout.
    Analyze {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        run: RunOverrides,
    },
}

#[derive(Args)]
struct CorpusArgs {
    /// Manifest whose transcripts are used (repeatable).
    #[arg(long)]
    manifest: Vec<PathBuf>,
    /// Plain text file, one sentence per line (repeatable).
    #[arg(long)]
    text: Vec<PathBuf>,
}

impl CorpusArgs {
    fn lines(&self) -> Result<Vec<String>> {
        let mut lines = Vec::new();
        for m in &self.manifest {
            lines.extend(read_manifest(m)?.into_iter().map(|e| e.text));
        }
        for t in &self.text {
            let body = std::fs::read_to_string(t).map_err(|e| Error::Io {
                path: t.clone(),
                source: e,
            })?;
            lines.extend(body.lines().map(normalize_text).filter(|l| !l.is_empty()));
        }
        if lines.is_empty() {
            return Err(Error::Empty("corpus (give --manifest or --text)"));
        }
        Ok(lines)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Fusion {
    Shallow,
    Rescore,
}

#[derive(Args)]
struct DecodeArgs {
    /// Beam width; decoding is greedy unless this or --lm is given.
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    lm: Option<PathBuf>,
    #[arg(long, default_value_t = BeamConfig::default().alpha)]
    alpha: f64,
    #[arg(long, default_value_t = BeamConfig::default().beta)]
    beta: f64,
    #[arg(long, value_enum, default_value = "shallow")]
    fusion: Fusion,
}

impl DecodeArgs {
    fn decoder(&self) -> Result<Decoder> {
        if self.beam_width.is_none() && self.lm.is_none() {
            return Ok(Decoder::Greedy);
        }
        let lm = self.lm.as_ref().map(NGramLM::load).transpose()?;
        let config = BeamConfig {
            width: self.beam_width.unwrap_or(BeamConfig::default().width),
            alpha: self.alpha,
            beta: self.beta,
            mode: match self.fusion {
                Fusion::Shallow => FusionMode::Shallow,
                Fusion::Rescore => FusionMode::Rescore,
            },
        };
        Ok(Decoder::Beam { config, lm })
    }
}

/// One optional `--<key>` flag per [`RunConfig`] key, applied on top of the
/// defaults and any config file.
#[derive(Clone, Debug, Default)]
struct RunOverrides(Vec<(&'static str, String)>);

fn run_keys() -> Vec<&'static str> {
    let cfg = RunConfig::default();
    cfg.model
        .to_pairs()
        .into_iter()
        .chain(cfg.training_pairs())
        .map(|(k, _)| k)
        .collect()
}

impl FromArgMatches for RunOverrides {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        let mut out = Self::default();
        out.update_from_arg_matches(m)?;
        Ok(out)
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        for key in run_keys() {
            if let Some(v) = m.get_one::<String>(key) {
                self.0.push((key, v.clone()));
            }
        }
        Ok(())
    }
}

impl Args for RunOverrides {
    fn augment_args(mut cmd: Command) -> Command {
        let defaults = RunConfig::default();
        for (key, value) in defaults.model.to_pairs().into_iter().chain(defaults.training_pairs()) {
            cmd = cmd.arg(
                Arg::new(key)
                    .long(key.replace('_', "-"))
                    .value_name("VALUE")
                    .help_heading("Run configuration")
                    .help(format!("[default: {value}]")),
            );
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

impl RunOverrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        for (k, v) in &self.0 {
            cfg.set(k, v)?;
        }
        Ok(())
    }
}

fn load_run_config(config: Option<&Path>, base: RunConfig, overrides: &RunOverrides) -> Result<RunConfig> {
    let mut cfg = base;
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.apply_text(&text)?;
    }
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<citrinet::model::Citrinet<f32>> {
    Checkpoint::load(path)?.to_model()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::SynthData { out, num, words, seed } => {
            let entries = synth_data(num, words, &out, seed)?;
            println!("wrote {} utterances to {}", entries.len(), out.join("manifest.json").display());
        }
        Cmd::TrainTokenizer {
            corpus,
            vocab_size,
            kind,
            out,
            seed: _,
        } => {
            let kind: TokenizerKind = kind.parse()?;
            let tok = TokenizerModel::train(&corpus.lines()?, vocab_size, kind)?;
            tok.save(&out)?;
            println!("tokenizer with {} tokens written to {}", tok.vocab_size(), out.display());
        }
        Cmd::TrainLm {
            corpus,
            tokenizer,
            order,
            out,
            seed: _,
        } => {
            let tok = TokenizerModel::load(&tokenizer)?;
            let ids: Vec<Vec<u32>> = corpus.lines()?.iter().map(|l| tok.encode(l)).collect();
            let lm = train_lm(&ids, order, tok.vocab_size())?;
            lm.save(&out)?;
            println!("{order}-gram LM written to {}", out.display());
        }
        Cmd::Train {
            config,
            train_manifest,
            dev_manifest,
            out,
            resume,
            run,
        } => {
            let base = if resume && config.is_none() {
                run_config_from_checkpoint(&Checkpoint::load(out.join(LAST_CHECKPOINT))?)?
            } else {
                RunConfig::default()
            };
            let cfg = load_run_config(config.as_deref(), base, &run)?;
            let tok_path = cfg
                .tokenizer
                .clone()
                .ok_or_else(|| Error::InvalidArgument("training needs --tokenizer".into()))?;
            let tok = TokenizerModel::load(&tok_path)?;
            let train_entries = read_manifest(&train_manifest)?;
            if train_entries.is_empty() {
                return Err(Error::Empty("training manifest"));
            }
            let dev_entries: Vec<ManifestEntry> = match &dev_manifest {
                Some(p) => read_manifest(p)?,
                None => Vec::new(),
            };
            let train_set = Dataset::load(&train_entries, &tok)?;
            let dev_set = Dataset::load(&dev_entries, &tok)?;
            if train_set.skipped > 0 {
                log::warn!("skipped {} infeasible training utterances", train_set.skipped);
            }
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            cfg.save(out.join("run.cfg"))?;
            let summary = train(&cfg, &tok, &train_set, &dev_set, &out, resume)?;
            println!(
                "trained {} steps; last loss {:.4}; best dev WER {}; skipped {} train / {} dev",
                summary.steps,
                summary.last_loss,
                summary.best_wer.map_or("n/a".into(), |w| format!("{w:.2}%")),
                summary.skipped_train,
                summary.skipped_dev
            );
        }
        Cmd::Evaluate {
            checkpoint,
            manifest,
            tokenizer,
            decode,
            dump,
            seed: _,
        } => {
            let model = load_model(&checkpoint)?;
            let tok = TokenizerModel::load(&tokenizer)?;
            let mut report = evaluate(&model, &tok, &read_manifest(&manifest)?, &decode.decoder()?)?;
            if let Some(path) = dump {
                std::fs::write(&path, serde_json::to_string_pretty(&report.hypotheses)?)
                    .map_err(|e| Error::Io { path, source: e })?;
            }
            report.hypotheses.clear();
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Cmd::Decode {
            checkpoint,
            tokenizer,
            decode,
            audio,
            seed: _,
        } => {
            let model = load_model(&checkpoint)?;
            let tok = TokenizerModel::load(&tokenizer)?;
            citrinet::eval::check_vocab(&model, &tok)?;
            let decoder = decode.decoder()?;
            for path in audio {
                let feats = log_mel(&read_wav(&path)?, SAMPLE_RATE)?;
                println!("{}\t{}", path.display(), transcribe(&model, &tok, &feats, &decoder)?);
            }
        }
        Cmd::Analyze { config, run } => {
            let cfg = load_run_config(config.as_deref(), RunConfig::default(), &run)?;
            print!("{}", analyze(&cfg.model)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}
