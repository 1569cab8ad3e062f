//! `newvision` command line. Results go to stdout as JSON; failures go to
//! stderr as `{"code", "message"}` with exit status 1 (runtime) or 2 (usage).

use std::ffi::OsString;
use std::io::Write;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use newvision_core::device::GridWorld;
use newvision_core::inference::{self, DecodeOptions};
use newvision_core::model::Image;
use newvision_core::scenegen::{build_corpus, read_ppm, Corpus, Split};
use newvision_core::trainer::{self, evaluate_checkpoint, load_checkpoint, Checkpoint, Metric, Stage, TrainConfig};

use crate::api::AppState;
use crate::http;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const PORT_ENV: &str = "NEWVISION_PORT";

#[derive(Debug, Parser)]
#[command(name = "newvision", version, about = "Train and serve the shape-scene vision-language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        eval: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one training stage described by a TOML config.
    Train {
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long, default_value = "data")]
        corpus: PathBuf,
        /// Beam width; greedy decoding when omitted.
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Caption a PPM image.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Answer a question about a PPM image.
    Vqa {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        question: String,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Serve the HTTP API (and optionally the console's static files).
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        /// Grid world JSON; a built-in demo world when omitted.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long, env = PORT_ENV, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        host: IpAddr,
        /// Directory with the built console, served at `/`.
        #[arg(long)]
        console: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct CliError {
    exit: i32,
    code: &'static str,
    message: String,
}

impl CliError {
    fn runtime(code: &'static str, e: impl std::fmt::Display) -> Self {
        Self {
            exit: EXIT_RUNTIME,
            code,
            message: e.to_string(),
        }
    }

    fn usage(message: impl Into<String>) -> Self {
        Self {
            exit: EXIT_USAGE,
            code: "usage",
            message: message.into(),
        }
    }
}

fn decode_options(beam: Option<usize>) -> Result<DecodeOptions, CliError> {
    match beam {
        None => Ok(DecodeOptions::default()),
        Some(0) => Err(CliError::usage("--beam must be at least 1")),
        Some(w) => Ok(DecodeOptions::beam(w)),
    }
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, CliError> {
    load_checkpoint(path).map_err(|e| CliError::runtime("checkpoint", format!("{}: {e}", path.display())))
}

fn load_image(path: &Path) -> Result<Image, CliError> {
    read_ppm(path).map_err(|e| CliError::runtime("image", e))
}

/// Parses `argv` (program name first) and runs the command, writing JSON to
/// `out`/`err`. Returns the process exit status.
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return EXIT_OK;
            }
            let _ = writeln!(err, "{}", json!({ "code": "usage", "message": e.render().to_string() }));
            return EXIT_USAGE;
        }
    };
    match run(cli.command) {
        Ok(v) => {
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&v).expect("json"));
            EXIT_OK
        }
        Err(e) => {
            let _ = writeln!(err, "{}", json!({ "code": e.code, "message": e.message }));
            e.exit
        }
    }
}

fn run(command: Command) -> Result<Value, CliError> {
    match command {
        Command::GenData { out, train, eval, seed } => {
            let summary = build_corpus(&out, train, eval, seed).map_err(|e| CliError::runtime("gen_data", e))?;
            Ok(json!({ "out": out, "summary": summary }))
        }
        Command::Train { stage, config } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| CliError::runtime("config", format!("{}: {e}", config.display())))?;
            let cfg = TrainConfig::from_toml(&text).map_err(|e| CliError::runtime("config", e))?;
            if cfg.stage != stage {
                return Err(CliError::usage(format!(
                    "--stage {stage} does not match stage {} in {}",
                    cfg.stage,
                    config.display()
                )));
            }
            let (ckpt, log) = trainer::train(&cfg).map_err(|e| CliError::runtime("train", e))?;
            Ok(json!({
                "stage": stage,
                "steps": log.len(),
                "checkpoint": cfg.output_checkpoint,
                "checkpoint_step": ckpt.step,
                "final": log.last(),
            }))
        }
        Command::Eval {
            ckpt,
            split,
            corpus,
            beam,
        } => {
            let opts = decode_options(beam)?;
            let ckpt = load_ckpt(&ckpt)?;
            let corpus = Corpus::load(&corpus).map_err(|e| CliError::runtime("corpus", e))?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            let metrics: Vec<Metric> = Metric::ALL
                .into_iter()
                .filter(|&m| m != Metric::NlvrStatementAccuracy || ckpt.statement_head_trained)
                .collect();
            let m = evaluate_checkpoint(&ckpt, corpus.split(split), &metrics, opts)
                .map_err(|e| CliError::runtime("eval", e))?;
            Ok(json!({ "split": split, "checkpoint_step": ckpt.step, "metrics": m }))
        }
        Command::Caption { ckpt, image, beam } => {
            let opts = decode_options(beam)?;
            let ckpt = load_ckpt(&ckpt)?;
            let caption = inference::caption_image(&load_image(&image)?, &ckpt, &opts)
                .map_err(|e| CliError::runtime("inference", e))?;
            Ok(json!({ "caption": caption }))
        }
        Command::Vqa {
            ckpt,
            image,
            question,
            beam,
        } => {
            let opts = decode_options(beam)?;
            let ckpt = load_ckpt(&ckpt)?;
            let answer = inference::answer_question(&load_image(&image)?, &question, &ckpt, &opts)
                .map_err(|e| CliError::runtime("inference", e))?;
            Ok(json!({ "answer": answer }))
        }
        Command::Serve {
            ckpt,
            world,
            port,
            host,
            console,
        } => {
            let ckpt = load_ckpt(&ckpt)?;
            let world = match world {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| CliError::runtime("world", format!("{}: {e}", p.display())))?;
                    GridWorld::from_json(&text).map_err(|e| CliError::runtime("world", e))?
                }
                None => GridWorld::demo(),
            };
            let app = Arc::new(AppState::new(ckpt, world));
            let addr = SocketAddr::new(host, port);
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::runtime("serve", e))?;
            rt.block_on(http::serve(app, addr, console))
                .map_err(|e| CliError::runtime("serve", format!("{addr}: {e}")))?;
            Ok(json!({ "stopped": addr.to_string() }))
        }
    }
}
