use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use facemotion::app::pipeline::{write_json, Pipeline};
use facemotion::app::service;
use facemotion::app::RunConfig;
use facemotion::corpus::{read_frames, write_frames, Split};
use facemotion::motion_lm::{GenerationParams, LmKind, MAX_MOTION_TOKENS};
use facemotion::Error;

#[derive(Parser)]
#[command(name = "facemotion", version, about = "Facial motion tokenizer and text-motion models")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides paths.out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides paths.checkpoints.
    #[arg(long, global = true)]
    checkpoints: Option<PathBuf>,
    /// Overrides paths.corpus.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    CorpusGen {
        #[arg(long)]
        n_clips: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the geometry VQ-VAE and cache clip tokens.
    TrainVqvae {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train Motion2Language.
    TrainM2l {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train Language2Motion.
    TrainL2m {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Tokenize a frame file, or every corpus clip when no input is given.
    Tokenize {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Generate motion for a prompt.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        top_k: usize,
    },
    /// Describe geometry tokens or a frame file.
    Describe {
        /// Comma-separated geometry tokens.
        #[arg(long, conflicts_with = "frames", required_unless_present = "frames")]
        tokens: Option<String>,
        /// Frame file in the corpus binary format.
        #[arg(long)]
        frames: Option<PathBuf>,
        #[arg(long)]
        question: Option<String>,
    },
    /// Evaluate every stage on the test split.
    Eval,
    /// Language2Motion accuracy curves over model widths.
    Sweep,
    /// Write motion embeddings of a split as CSV.
    ExportEmbeddings {
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::CorpusGen { .. } => "corpus-gen",
            Command::TrainVqvae { .. } => "train-vqvae",
            Command::TrainM2l { .. } => "train-m2l",
            Command::TrainL2m { .. } => "train-l2m",
            Command::Tokenize { .. } => "tokenize",
            Command::Generate { .. } => "generate",
            Command::Describe { .. } => "describe",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::ExportEmbeddings { .. } => "export-embeddings",
            Command::Serve { .. } => "serve",
        }
    }
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'a str,
    args: Vec<String>,
    config: &'a RunConfig,
    seeds: BTreeMap<&'static str, u64>,
    elapsed_s: f64,
    result: Value,
}

fn seeds(cfg: &RunConfig) -> BTreeMap<&'static str, u64> {
    BTreeMap::from([
        ("corpus", cfg.corpus.seed),
        ("face_model", cfg.face_model.seed),
        ("vqvae", cfg.vqvae.model.seed),
        ("m2l", cfg.m2l.training.seed),
        ("l2m", cfg.l2m.training.seed),
        ("retrieval", cfg.retrieval.seed),
        ("eval", cfg.eval.seed),
    ])
}

fn load_config(g: &Global, command: &Command) -> anyhow::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(p) = &g.out {
        cfg.paths.out = p.clone();
    }
    if let Some(p) = &g.checkpoints {
        cfg.paths.checkpoints = p.clone();
    }
    if let Some(p) = &g.corpus {
        cfg.paths.corpus = p.clone();
    }
    match *command {
        Command::CorpusGen { n_clips, seed } => {
            cfg.corpus.n_clips = n_clips.unwrap_or(cfg.corpus.n_clips);
            cfg.corpus.seed = seed.unwrap_or(cfg.corpus.seed);
        }
        Command::TrainVqvae { steps: Some(s) } => cfg.vqvae.steps = s,
        Command::TrainM2l { epochs: Some(e) } => cfg.m2l.training.epochs = e,
        Command::TrainL2m { epochs: Some(e) } => cfg.l2m.training.epochs = e,
        _ => {}
    }
    Ok(cfg)
}

fn parse_tokens(s: &str) -> anyhow::Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad token {t:?}")))
        .collect()
}

fn progress(what: &'static str, every: usize) -> impl FnMut(usize, f64) {
    move |step, loss| {
        if step % every == 0 {
            log::info!("{what} step {step}: loss {loss:.5}");
        }
    }
}

fn run(command: &Command, p: &Pipeline, out: &Path) -> anyhow::Result<Value> {
    Ok(match command {
        Command::CorpusGen { .. } => {
            let corpus = p.generate_corpus()?;
            json!({
                "corpus_dir": p.cfg.paths.corpus,
                "clips": corpus.clips.len(),
                "emotion_counts": corpus.manifest.emotion_counts,
                "lexicon_hash": corpus.manifest.lexicon_hash,
            })
        }
        Command::TrainVqvae { .. } => {
            let corpus = p.load_corpus()?;
            let model = p.train_vqvae(&corpus, progress("vqvae", 100))?;
            let quality = p.vq_quality(&model, &corpus)?;
            json!({ "steps": p.cfg.vqvae.steps, "quality": quality })
        }
        Command::TrainM2l { .. } | Command::TrainL2m { .. } => {
            let kind = if matches!(command, Command::TrainM2l { .. }) { LmKind::M2l } else { LmKind::L2m };
            let corpus = p.load_corpus()?;
            let (_, trace) = p.train_lm(kind, &corpus, progress(kind.prefix(), 20))?;
            json!({ "steps": trace.len(), "final_loss": trace.last() })
        }
        Command::Tokenize { input } => {
            let vqvae = p.load_vqvae()?;
            match input {
                Some(path) => {
                    let seq = read_frames(path, &path.display().to_string())?;
                    let tokens = vqvae.tokenize(&seq)?.tokens;
                    write_json(&out.join("tokens.json"), &tokens)?;
                    json!({ "input": path, "frames": seq.len(), "tokens": tokens })
                }
                None => {
                    let corpus = p.load_corpus()?;
                    let seqs: Vec<_> = corpus.clips.iter().map(|c| &c.motion).collect();
                    let tokens: BTreeMap<&str, Vec<usize>> = corpus
                        .clips
                        .iter()
                        .zip(vqvae.tokenize_batch(&seqs)?)
                        .map(|(c, t)| (c.prompt.clip_id.as_str(), t.tokens))
                        .collect();
                    write_json(&out.join("tokens.json"), &tokens)?;
                    json!({ "clips": tokens.len(), "tokens_file": out.join("tokens.json") })
                }
            }
        }
        Command::Generate { prompt, seed, temperature, top_k } => {
            let models = p.load_inference()?;
            let params = GenerationParams { temperature: *temperature, top_k: *top_k, seed: *seed, max_new_tokens: MAX_MOTION_TOKENS };
            let (tokens, motion) = models.generate(prompt, &params)?;
            write_frames(&out.join("frames.bin"), &motion)?;
            json!({
                "prompt": prompt,
                "params": params,
                "tokens": tokens,
                "frames": motion.len(),
                "duration_s": motion.duration_s(),
                "frames_file": out.join("frames.bin"),
            })
        }
        Command::Describe { tokens, frames, question } => {
            let models = p.load_inference()?;
            let params = GenerationParams::greedy();
            let (text, keywords) = match (tokens, frames) {
                (Some(t), _) => models.describe_tokens(&parse_tokens(t)?, question.as_deref(), &params)?,
                (None, Some(path)) => {
                    let seq = read_frames(path, &path.display().to_string())?;
                    models.describe_motion(&seq, question.as_deref(), &params)?
                }
                (None, None) => bail!("describe needs --tokens or --frames"),
            };
            json!({ "text": text, "keywords": keywords })
        }
        Command::Eval => {
            let corpus = p.load_corpus()?;
            let outcome = p.evaluate(&corpus)?;
            write_json(&out.join("report.json"), &outcome.report)?;
            serde_json::to_value(&outcome)?
        }
        Command::Sweep => {
            let corpus = p.load_corpus()?;
            let points = p.sweep(&corpus, out, |pt| log::info!("sweep dim {} step {}: {:.4}", pt.model_dim, pt.step, pt.accuracy))?;
            json!({ "csv": out.join("sweep.csv"), "points": points })
        }
        Command::ExportEmbeddings { split } => {
            let Some(split) = Split::parse(split) else { bail!("unknown split {split:?}; use train, val or test") };
            let corpus = p.load_corpus()?;
            let path = out.join("embeddings.csv");
            let rows = p.export_embeddings(&corpus, split, &path)?;
            json!({ "csv": path, "rows": rows.len() })
        }
        Command::Serve { addr } => {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
            rt.block_on(service::serve(p.clone(), *addr))?;
            json!({ "addr": addr })
        }
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<Error>() {
                Some(Error::Config(errs)) => {
                    eprintln!("error: invalid config ({} problems)", errs.len());
                    for err in errs {
                        eprintln!("  - {err}");
                    }
                }
                _ => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: &Cli) -> anyhow::Result<()> {
    let started = Instant::now();
    let cfg = load_config(&cli.global, &cli.command)?;
    let pipeline = Pipeline::new(cfg)?;
    let name = cli.command.name();
    let out = pipeline.out_dir(name);
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let result = run(&cli.command, &pipeline, &out)?;
    let summary = Summary {
        command: name,
        args: std::env::args().skip(1).collect(),
        config: &pipeline.cfg,
        seeds: seeds(&pipeline.cfg),
        elapsed_s: started.elapsed().as_secs_f64(),
        result,
    };
    let path = out.join("summary.json");
    write_json(&path, &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary.result)?);
    log::info!("{name} finished in {:.1}s; summary at {}", summary.elapsed_s, path.display());
    Ok(())
}
