//! `kws`: batch front end for data generation, training, evaluation and
//! decoding.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use kws_core::corpus::{generate_corpus, Corpus};
use kws_core::decoder::viterbi_stream_with;
use kws_core::dnn::{init_params, load_checkpoint, save_checkpoint, DnnParams};
use kws_core::eval::{evaluate, non_max_suppression};
use kws_core::experiment::ExperimentConfig;
use kws_core::hmm::{estimate_hmm, scaled_loglik, HmmParams};
use kws_core::trainer::{pretrain_ce, train_e2e, write_log_csv};
use kws_core::KwsError;

#[derive(Parser, Debug)]
#[command(name = "kws", version, about = "DNN-HMM keyword spotting pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML or JSON experiment config; defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Corpus and training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Epoch count for the training subcommand being run.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Learning rate for the training subcommand being run.
    #[arg(long, global = true)]
    lr: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labelled corpus.
    GenData {
        /// Number of utterances (defaults to the config's training size).
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, default_value = "utt")]
        prefix: String,
    },
    /// Estimate HMM parameters from a corpus's frame labels.
    EstimateHmm {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Cross-entropy training of the state classifier.
    TrainCe {
        #[arg(long)]
        manifest: PathBuf,
        /// Start from this checkpoint instead of a fresh initialisation.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// End-to-end fine-tuning through the decoder.
    TrainE2e {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        hmm: PathBuf,
        #[arg(long)]
        init: PathBuf,
    },
    /// DET curve, localization and confusion statistics.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        hmm: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Prefix for the report files.
        #[arg(long, default_value = "")]
        prefix: String,
    },
    /// Streaming detections per utterance after non-maximum suppression.
    Decode {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        hmm: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Keep detections scoring at least this much.
        #[arg(long, default_value_t = f64::NEG_INFINITY, allow_negative_numbers = true)]
        threshold: f64,
    },
}

/// A failure tagged with the exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn validation(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<KwsError>() {
            Some(KwsError::Io(_)) | None => 2,
            Some(_) => 1,
        };
        Failure { code, error }
    }
}

impl From<KwsError> for Failure {
    fn from(e: KwsError) -> Self {
        anyhow::Error::from(e).into()
    }
}

fn load_config(global: &Global) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &global.config {
        None => ExperimentConfig::default(),
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
            let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
            if is_json {
                serde_json::from_str(&text).with_context(|| format!("invalid JSON config {}", path.display()))?
            } else {
                toml::from_str(&text).with_context(|| format!("invalid TOML config {}", path.display()))?
            }
        }
    };
    // the emission model's own seed stays fixed so corpora drawn with
    // different seeds share one "language"
    if let Some(seed) = global.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.synth.validate()?;
    cfg.train.validate()?;
    if cfg.eval.delta != cfg.train.delta {
        bail!(
            "eval.delta ({}) must equal train.delta ({}): the network input width depends on it",
            cfg.eval.delta,
            cfg.train.delta
        );
    }
    Ok(cfg)
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(validation(anyhow::anyhow!("{what} {} does not exist", path.display())))
    }
}

fn out_dir(global: &Global) -> Result<PathBuf, Failure> {
    let dir = global
        .out
        .clone()
        .ok_or_else(|| validation(anyhow::anyhow!("--out is required: every run writes to an explicit directory")))?;
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn echo_config(dir: &Path, name: &str, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let path = dir.join(format!("{name}.config.json"));
    fs::write(&path, serde_json::to_string_pretty(cfg)? + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn load_corpus(manifest: &Path) -> Result<Corpus, Failure> {
    require_file(manifest, "manifest")?;
    let corpus = Corpus::load(manifest)?;
    eprintln!("loaded {} utterances ({} frames) from {}", corpus.len(), corpus.total_frames(), manifest.display());
    Ok(corpus)
}

fn load_hmm(path: &Path) -> Result<HmmParams<f64>, Failure> {
    require_file(path, "HMM file")?;
    Ok(HmmParams::load(path)?)
}

fn load_model(path: &Path) -> Result<DnnParams<f64>, Failure> {
    require_file(path, "checkpoint")?;
    Ok(load_checkpoint::<f64>(path)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = load_config(&cli.global).map_err(validation)?;
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(validation(anyhow::anyhow!("--threads must be at least 1")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot configure the worker pool")?;
    }
    let out = out_dir(&cli.global)?;

    match cli.command {
        Command::GenData { count, prefix } => {
            let n = count.unwrap_or(cfg.train_utterances);
            echo_config(&out, "gen-data", &cfg)?;
            eprintln!("generating {n} utterances (seed {})", cfg.seed);
            let manifest = generate_corpus(&cfg.synth, n, cfg.seed, &prefix, &out)?;
            eprintln!("wrote {}", manifest.display());
        }
        Command::EstimateHmm { manifest } => {
            let corpus = load_corpus(&manifest)?;
            echo_config(&out, "estimate-hmm", &cfg)?;
            let hmm = estimate_hmm::<f64, _>(&corpus.label_sequences(), cfg.synth.topology())?;
            let path = out.join("hmm.json");
            hmm.save(&path)?;
            eprintln!("wrote {}", path.display());
        }
        Command::TrainCe { manifest, init } => {
            if let Some(e) = cli.global.epochs {
                cfg.train.ce_epochs = e;
            }
            if let Some(lr) = cli.global.lr {
                cfg.train.ce_learning_rate = lr;
            }
            cfg.train.validate()?;
            let corpus = load_corpus(&manifest)?;
            echo_config(&out, "train-ce", &cfg)?;
            let start = match init {
                Some(p) => load_model(&p)?,
                None => init_params(&cfg.train.layer_sizes, cfg.train.seed)?,
            };
            eprintln!("cross-entropy training: {} epochs", cfg.train.ce_epochs);
            let (params, log) = pretrain_ce(&corpus, start, &cfg.train)?;
            for row in &log {
                eprintln!("  epoch {} loss {:.4}", row.epoch, row.loss);
            }
            save_checkpoint(&params, out.join("ce.kwse"))?;
            write_log_csv(out.join("ce_log.csv"), &log)?;
            eprintln!("wrote {}", out.join("ce.kwse").display());
        }
        Command::TrainE2e { manifest, hmm, init } => {
            if let Some(e) = cli.global.epochs {
                cfg.train.e2e_epochs = e;
            }
            if let Some(lr) = cli.global.lr {
                cfg.train.learning_rate = lr;
            }
            cfg.train.validate()?;
            let corpus = load_corpus(&manifest)?;
            let hmm = load_hmm(&hmm)?;
            let start = load_model(&init)?;
            echo_config(&out, "train-e2e", &cfg)?;
            eprintln!("end-to-end training: {} epochs", cfg.train.e2e_epochs);
            let (params, log) = train_e2e(&corpus, start, &hmm, &cfg.train)?;
            if let Some(last) = log.last() {
                eprintln!("  final batch loss {:.4}", last.loss);
            }
            save_checkpoint(&params, out.join("e2e.kwse"))?;
            write_log_csv(out.join("e2e_log.csv"), &log)?;
            eprintln!("wrote {}", out.join("e2e.kwse").display());
        }
        Command::Eval {
            manifest,
            hmm,
            model,
            prefix,
        } => {
            let corpus = load_corpus(&manifest)?;
            if corpus.keyword_count() == 0 {
                return Err(validation(anyhow::anyhow!("no keyword windows in manifest")));
            }
            let hmm = load_hmm(&hmm)?;
            let params = load_model(&model)?;
            echo_config(&out, &format!("{prefix}eval"), &cfg)?;
            let report = evaluate(&params, &hmm, &corpus, &cfg.eval)?;
            report.write_all(&out, &prefix)?;
            eprintln!(
                "FRR {:.4} at {} FA/hr, state accuracy {:.4}",
                report.frr_at_operating_fa, report.operating_fa_per_hour, report.state_accuracy
            );
        }
        Command::Decode {
            manifest,
            hmm,
            model,
            threshold,
        } => {
            let corpus = load_corpus(&manifest)?;
            let hmm = load_hmm(&hmm)?;
            let params = load_model(&model)?;
            echo_config(&out, "decode", &cfg)?;
            let path = out.join("detections.csv");
            let mut f = fs::File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
            writeln!(f, "id,score,start_frame,end_frame").context("write failed")?;
            let mut total = 0usize;
            for u in &corpus.utterances {
                let feats = u.stacked(cfg.eval.delta)?;
                let scores = scaled_loglik(&params.forward_matrix(&feats.frames)?, &hmm)?;
                let dets = viterbi_stream_with(scores.view(), &hmm, cfg.eval.stream_init)?;
                let mut kept = non_max_suppression(&dets, threshold, cfg.eval.nms_frames());
                kept.sort_by_key(|d| d.end_frame);
                for d in kept {
                    writeln!(f, "{},{},{},{}", u.id, d.score, d.start_frame, d.end_frame).context("write failed")?;
                    total += 1;
                }
            }
            eprintln!("wrote {total} detections to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
