use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use protoforge::datagen::{generate_dataset, DataConfig};
use protoforge::pipeline::{self, Plan};
use protoforge::protonet::TrainConfig;
use protoforge::store::resolve_model;

#[derive(Parser)]
#[command(name = "protoforge", version, about = "Prototype models for manipulated face sequences")]
struct Cli {
    /// Print results, and errors, as JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct DataDir {
    /// Dataset directory. PROTOFORGE_DATA, when set, takes precedence.
    #[arg(long, default_value = "data")]
    data: PathBuf,
}

impl DataDir {
    fn resolve(&self) -> PathBuf {
        std::env::var_os("PROTOFORGE_DATA").map(PathBuf::from).unwrap_or_else(|| self.data.clone())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        /// Output directory; defaults to the data directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        dir: DataDir,
        #[arg(long, default_value_t = 200)]
        train: usize,
        #[arg(long, default_value_t = 100)]
        test: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        k: u32,
    },
    /// Train a model and create a version store.
    Train {
        #[command(flatten)]
        dir: DataDir,
        #[arg(long)]
        out: PathBuf,
        /// Prototypes per class.
        #[arg(long, default_value_t = 5)]
        protos: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a model on the test split.
    Eval {
        /// Model directory or version store (its head).
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        dir: DataDir,
    },
    /// Apply a plan of refinement operations, logging each dry run before committing it.
    Refine {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// New store to write; without it the store at --model is edited in place.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-window prediction trace of one video.
    Trace {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        video: String,
        #[command(flatten)]
        dir: DataDir,
    },
    /// Write prototype strips, frames and relevance overlays as PNG.
    Render {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        dir: DataDir,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Version store to serve.
        #[arg(long, default_value = "model")]
        store: PathBuf,
        #[command(flatten)]
        dir: DataDir,
        #[arg(long)]
        renders: Option<PathBuf>,
    },
}

fn emit<T: Serialize>(json: bool, value: &T, human: impl FnOnce(&T)) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        human(value);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let json = cli.json;
    match &cli.cmd {
        Command::GenData { out, dir, train, test, seed, k } => {
            let out = out.clone().unwrap_or_else(|| dir.resolve());
            let cfg = DataConfig { train_samples: *train, test_samples: *test, seed: *seed, k: *k, ..DataConfig::default() };
            let m = generate_dataset(&cfg, &out).with_context(|| format!("generating into {}", out.display()))?;
            emit(json, &m, |m| {
                println!(
                    "wrote {} samples to {} (train {}+{}, test {}+{})",
                    m.samples.len(),
                    out.display(),
                    m.train.pristine,
                    m.train.manipulated,
                    m.test.pristine,
                    m.test.manipulated
                )
            })
        }
        Command::Train { dir, out, protos, seed, epochs } => {
            let mut cfg = TrainConfig { protos_per_class: *protos, seed: *seed, ..TrainConfig::default() };
            if let Some(e) = epochs {
                cfg.epochs = *e;
            }
            let r = pipeline::train_model(&dir.resolve(), out, cfg)?;
            emit(json, &r, |r| {
                println!(
                    "trained {} with {} prototypes on {} samples: test accuracy {:.4}, AUC {:.4}; store at {}",
                    r.model_id,
                    r.prototype_count,
                    r.train_samples,
                    r.test.accuracy,
                    r.test.auc,
                    out.display()
                )
            })
        }
        Command::Eval { model, dir } => {
            let r = pipeline::evaluate_model(model, &dir.resolve())?;
            emit(json, &r, |r| {
                let c = &r.confusion;
                println!("model {} on {} samples", r.model_id, r.n_samples);
                println!("accuracy {:.4}  AUC {:.4}  loss {:.6}", r.accuracy, r.auc, r.loss.total);
                println!("tp {}  fp {}  tn {}  fn {}", c.tp, c.fp, c.tn, c.fn_);
            })
        }
        Command::Refine { model, plan, out } => {
            let plan: Plan = pipeline::read_json(plan)?;
            let mut session = pipeline::open_session(model, out.as_deref())?;
            let steps = pipeline::run_plan(&mut session, &plan, |s| {
                eprintln!(
                    "dry run on {}: {} | accuracy {:.4} -> {:.4} (delta {:.4}) | AUC {:.4} -> {:.4} (delta {:.4}) | {:.1} ms",
                    s.base_version,
                    s.op.describe(),
                    s.accuracy_before,
                    s.accuracy_after,
                    s.accuracy_delta,
                    s.auc_before,
                    s.auc_after,
                    s.auc_delta,
                    s.elapsed_ms
                );
                eprintln!("committing {}", s.version);
            })?;
            emit(json, &steps, |_| println!("head is now {}", session.current().id))
        }
        Command::Trace { model, video, dir } => {
            let t = pipeline::trace_video(model, &dir.resolve(), video)?;
            emit(json, &t, |t| {
                println!("video {} under model {}", t.video_id, t.model_version);
                for w in &t.windows {
                    println!(
                        "window {:>2} frames {:>3}-{:<3} p(manipulated) {:.4}",
                        w.t, w.frame_span[0], w.frame_span[1], w.probs[1]
                    );
                }
            })
        }
        Command::Render { model, out, dir } => {
            let (m, _) = resolve_model(model)?;
            let ds = pipeline::load_dataset(&dir.resolve())?;
            let files = pipeline::render_model(&m, &ds.train, out)?;
            emit(json, &files, |f| println!("wrote {} PNG files to {}", f.len(), out.display()))
        }
        Command::Serve { port, host, store, dir, renders } => {
            let cfg = protoforge_server::ServerConfig {
                host: host.clone(),
                port: *port,
                data_dir: dir.resolve(),
                store_dir: store.clone(),
                render_dir: renders.clone(),
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(protoforge_server::serve(cfg)).map_err(|e| anyhow::anyhow!(e))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.json {
                println!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}
