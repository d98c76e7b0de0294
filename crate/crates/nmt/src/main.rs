use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nmt::commands;
use nmt::config::Config;
use nmt::decode::ScoreDirection;
use nmt::error::Error;

/// Neural machine translation from scratch: training, translation, scoring,
/// back-translation, subwords, and reranking.
#[derive(Parser)]
#[command(name = "nmt", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Options shared by every model-facing subcommand. Command-line settings
/// override the config file (later wins).
#[derive(Args, Clone, Default)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Source vocabulary file
    #[arg(long)]
    src_vocab: Option<PathBuf>,
    /// Target vocabulary file
    #[arg(long)]
    tgt_vocab: Option<PathBuf>,
    /// BPE merges applied to source text
    #[arg(long)]
    merges_src: Option<PathBuf>,
    /// BPE merges applied to target text
    #[arg(long)]
    merges_tgt: Option<PathBuf>,
    /// Extra key=value overrides
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn build(&self) -> Result<Config, Error> {
        let mut cfg = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::new(),
        };
        let mut path_key = |key: &str, v: &Option<PathBuf>| -> Result<(), Error> {
            if let Some(p) = v {
                cfg.set(key, &p.to_string_lossy())?;
            }
            Ok(())
        };
        path_key("data.src-vocab", &self.src_vocab)?;
        path_key("data.tgt-vocab", &self.tgt_vocab)?;
        path_key("data.merges-src", &self.merges_src)?;
        path_key("data.merges-tgt", &self.merges_tgt)?;
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set wants KEY=VALUE, got `{kv}`")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Build a vocabulary file from a corpus
    Vocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Total vocabulary size, reserved ids included
        #[arg(long, default_value_t = 20000)]
        limit: usize,
    },
    /// Learn a BPE merge table
    BpeLearn {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 10000)]
        merges: usize,
    },
    /// Segment text with a learned merge table
    BpeApply {
        #[arg(long)]
        merges: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Train a translation model
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint path the final model is written to
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        train_src: Option<PathBuf>,
        #[arg(long)]
        train_tgt: Option<PathBuf>,
        #[arg(long)]
        valid_src: Option<PathBuf>,
        #[arg(long)]
        valid_tgt: Option<PathBuf>,
        /// Continue training from this checkpoint (fine-tuning)
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        /// External word alignments (tgt-src pairs per line)
        #[arg(long)]
        guided_alignment: Option<PathBuf>,
        #[arg(long)]
        align_weight: Option<f32>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        optimizer: Option<String>,
        #[arg(long)]
        lr: Option<f32>,
        #[arg(long)]
        clip: Option<f32>,
        #[arg(long)]
        dropout: Option<f32>,
        #[arg(long)]
        depth_enc: Option<usize>,
        #[arg(long)]
        depth_dec: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Translate input lines with one checkpoint or an ensemble
    Translate {
        #[command(flatten)]
        common: Common,
        /// Model checkpoints; several trigger ensemble decoding
        #[arg(required_unless_present = "last", num_args = 0..)]
        checkpoints: Vec<PathBuf>,
        /// Use the k most recent periodic checkpoints next to the given path
        #[arg(long, value_name = "K")]
        last: Option<usize>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        /// Equivalent to --beam 1
        #[arg(long)]
        greedy: bool,
        /// Emit the top-k candidates in n-best format
        #[arg(long)]
        nbest: Option<usize>,
        /// Divide final scores by output length
        #[arg(long)]
        normalize: bool,
        #[arg(long)]
        max_len_factor: Option<f32>,
    },
    /// Score a parallel file by forced decoding
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        tgt: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Translate monolingual target text with a reverse model into a
    /// synthetic parallel corpus
    Backtranslate {
        #[command(flatten)]
        common: Common,
        /// Reverse-direction model checkpoint
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target-side monolingual text
        #[arg(long)]
        mono: PathBuf,
        #[arg(long)]
        out_src: PathBuf,
        #[arg(long)]
        out_tgt: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Rerank an n-best list with additional scorers
    Rerank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        nbest: PathBuf,
        #[arg(long)]
        source: PathBuf,
        /// Scorers as `checkpoint:l2r` or `checkpoint:r2l`
        #[arg(long = "scorer", required = true)]
        scorers: Vec<String>,
        /// Comma-separated scorer weights (default: equal)
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn open_output(path: &Option<PathBuf>) -> Result<Box<dyn Write>, Error> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Vocab {
            corpus,
            output,
            limit,
        } => commands::cmd_vocab(&corpus, &output, limit),
        Cmd::BpeLearn {
            corpus,
            output,
            merges,
        } => commands::cmd_bpe_learn(&corpus, &output, merges),
        Cmd::BpeApply {
            merges,
            input,
            output,
        } => {
            let mut out = open_output(&output)?;
            commands::cmd_bpe_apply(&merges, &input, &mut out)
        }
        Cmd::Train {
            common,
            output,
            train_src,
            train_tgt,
            valid_src,
            valid_tgt,
            init_checkpoint,
            guided_alignment,
            align_weight,
            checkpoint_every,
            arch,
            optimizer,
            lr,
            clip,
            dropout,
            depth_enc,
            depth_dec,
            seed,
            epochs,
        } => {
            let mut cfg = common.build()?;
            {
                let mut opt_path = |key: &str, v: Option<PathBuf>| -> Result<(), Error> {
                    if let Some(p) = v {
                        cfg.set(key, &p.to_string_lossy())?;
                    }
                    Ok(())
                };
                opt_path("data.train-src", train_src)?;
                opt_path("data.train-tgt", train_tgt)?;
                opt_path("data.valid-src", valid_src)?;
                opt_path("data.valid-tgt", valid_tgt)?;
            }
            if let Some(v) = arch {
                cfg.set("model.arch", &v)?;
            }
            if let Some(v) = optimizer {
                cfg.set("train.optimizer", &v)?;
            }
            if let Some(v) = lr {
                cfg.set("train.lr", &v.to_string())?;
            }
            if let Some(v) = clip {
                cfg.set("train.clip", &v.to_string())?;
            }
            if let Some(v) = dropout {
                cfg.set("model.dropout", &v.to_string())?;
            }
            if let Some(v) = depth_enc {
                cfg.set("model.depth-enc", &v.to_string())?;
            }
            if let Some(v) = depth_dec {
                cfg.set("model.depth-dec", &v.to_string())?;
            }
            if let Some(v) = seed {
                cfg.set("train.seed", &v.to_string())?;
            }
            if let Some(v) = epochs {
                cfg.set("train.epochs", &v.to_string())?;
            }
            if let Some(v) = align_weight {
                cfg.set("train.align-weight", &v.to_string())?;
            }
            if let Some(v) = checkpoint_every {
                cfg.set("train.checkpoint-every", &v.to_string())?;
            }
            let mut log = std::io::stderr().lock();
            commands::cmd_train(
                &cfg,
                &output,
                init_checkpoint.as_deref(),
                guided_alignment.as_deref(),
                &mut log,
            )
        }
        Cmd::Translate {
            common,
            mut checkpoints,
            last,
            input,
            output,
            beam,
            greedy,
            nbest,
            normalize,
            max_len_factor,
        } => {
            let mut cfg = common.build()?;
            if greedy {
                cfg.set("decode.beam", "1")?;
            }
            if let Some(b) = beam {
                cfg.set("decode.beam", &b.to_string())?;
            }
            if normalize {
                cfg.set("decode.normalize", "true")?;
            }
            if let Some(f) = max_len_factor {
                cfg.set("decode.max-len-factor", &f.to_string())?;
            }
            if let Some(k) = last {
                let prefix = checkpoints.pop().ok_or_else(|| {
                    Error::Config("--last needs the checkpoint prefix".into())
                })?;
                checkpoints = commands::last_checkpoints(&prefix, k)?;
            }
            let mut out = open_output(&output)?;
            commands::cmd_translate(&cfg, &checkpoints, &input, &mut out, nbest)
        }
        Cmd::Score {
            common,
            checkpoint,
            src,
            tgt,
            output,
        } => {
            let cfg = common.build()?;
            let mut out = open_output(&output)?;
            commands::cmd_score(&cfg, &checkpoint, &src, &tgt, &mut out)
        }
        Cmd::Backtranslate {
            common,
            checkpoint,
            mono,
            out_src,
            out_tgt,
            beam,
        } => {
            let mut cfg = common.build()?;
            if let Some(b) = beam {
                cfg.set("decode.beam", &b.to_string())?;
            }
            commands::cmd_backtranslate(&cfg, &checkpoint, &mono, &out_src, &out_tgt)
        }
        Cmd::Rerank {
            common,
            nbest,
            source,
            scorers,
            weights,
            output,
        } => {
            let cfg = common.build()?;
            let scorers: Vec<(PathBuf, ScoreDirection)> = scorers
                .iter()
                .map(|s| {
                    let (path, dir) = s.rsplit_once(':').ok_or_else(|| {
                        Error::Config(format!("--scorer wants PATH:l2r or PATH:r2l, got `{s}`"))
                    })?;
                    let dir = match dir {
                        "l2r" => ScoreDirection::LeftToRight,
                        "r2l" => ScoreDirection::RightToLeft,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown scorer direction `{other}`"
                            )))
                        }
                    };
                    Ok((PathBuf::from(path), dir))
                })
                .collect::<Result<_, Error>>()?;
            let weights = weights
                .map(|w| {
                    w.split(',')
                        .map(|x| {
                            x.trim()
                                .parse::<f64>()
                                .map_err(|_| Error::Config(format!("bad weight `{x}`")))
                        })
                        .collect::<Result<Vec<f64>, Error>>()
                })
                .transpose()?;
            let mut out = open_output(&output)?;
            commands::cmd_rerank(&cfg, &nbest, &source, &scorers, weights, &mut out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("usage error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
