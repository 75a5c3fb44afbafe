use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use clap::{Args, Parser, Subcommand};

use dtc_core::evaluator::{evaluate, EvalOptions};
use dtc_core::model::Model;
use dtc_core::scene::{build_dataset, DatasetManifest, SceneConfig, Split, SplitRatios};
use dtc_core::trainer::{pretrain_damsm, train_gan};
use dtc_core::{Checkpoint, DtcError, TrainConfig};
use dtc_service::{AppState, GenerateRequest};

#[derive(Parser)]
#[command(name = "dtc", version, about = "Dense text-to-image generation from region captions")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; unset keys keep the preset values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base settings: desk, paper or smoke.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic dataset.
    Data {
        #[command(subcommand)]
        cmd: DataCmd,
    },
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// Writes a metrics report for a trained checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Renders one image from a request file (the `/generate` JSON body).
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Serve {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Subcommand)]
enum DataCmd {
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Pretrains the text and region encoders, then fits the attribute oracle.
    Damsm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Adversarial training on top of a pretraining checkpoint.
    Gan {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        damsm: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    Dtc(DtcError),
    Other(String),
}

impl From<DtcError> for CliError {
    fn from(e: DtcError) -> Self {
        CliError::Dtc(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Dtc(e.into())
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Dtc(e) => write!(f, "{e}"),
            CliError::Other(s) => f.write_str(s),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::preset(&c.preset)?,
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d)?;
    }
    let text = serde_json::to_string_pretty(v).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Data { cmd: DataCmd::Gen { out, n } } => {
            let cfg = config(&cli.common)?;
            let scene = SceneConfig {
                height: cfg.resolution,
                width: cfg.resolution,
                ..SceneConfig::default()
            };
            let m = build_dataset(n, &out, cfg.seed, SplitRatios::default(), &scene)?;
            println!("wrote {} images to {}", m.records.len(), out.display());
        }
        Command::Train { cmd: TrainCmd::Damsm { data, out, resume } } => {
            let cfg = config(&cli.common)?;
            let m = DatasetManifest::load(&data)?;
            let resume = resume.map(Checkpoint::load).transpose()?;
            let done = pretrain_damsm::<f32>(&m, &cfg, Some(&out), resume.as_ref())?;
            let path = out.join("damsm.dtck");
            done.checkpoint.save(&path)?;
            write_json(&out.join("damsm_report.json"), &done.report)?;
            println!("{}", serde_json::to_string(&done.report).unwrap_or_default());
            println!("saved {}", path.display());
        }
        Command::Train { cmd: TrainCmd::Gan { data, damsm, out, resume } } => {
            let cfg = config(&cli.common)?;
            let m = DatasetManifest::load(&data)?;
            let pre = Model::<f32>::load(&damsm)?;
            let resume = resume.map(Checkpoint::load).transpose()?;
            let t = train_gan(&m, &cfg, &pre, Some(&out), resume.as_ref())?;
            write_json(&out.join("gan_history.json"), &t.history)?;
            println!("trained {} steps; saved {}", t.step, out.join("gan.dtck").display());
        }
        Command::Eval { ckpt, data, split, out } => {
            let model = Model::<f32>::load(&ckpt)?;
            let seed = cli.common.seed.unwrap_or(model.config.seed);
            let m = DatasetManifest::load(&data)?;
            let report = evaluate(&model, &m, &EvalOptions::from_config(&model.config, split, seed))?;
            write_json(&out, &report)?;
            println!("{}", serde_json::to_string(&report).unwrap_or_default());
        }
        Command::Generate { ckpt, request, out } => {
            let state = AppState::from_checkpoint(&ckpt)?;
            let mut req: GenerateRequest =
                serde_json::from_slice(&fs::read(&request)?).map_err(|e| CliError::Other(e.to_string()))?;
            if req.global_seed.is_none() {
                req.global_seed = cli.common.seed;
            }
            let resp = state
                .generate(&req)
                .map_err(|r| CliError::Other(format!("{}: {}", r.body.error, r.body.detail)))?;
            let png = STANDARD.decode(&resp.image).map_err(|e| CliError::Other(e.to_string()))?;
            fs::write(&out, png)?;
            for w in &resp.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{}",
                serde_json::json!({"global_seed": resp.global_seed, "region_seeds": resp.region_seeds, "model_hash": resp.model_hash})
            );
        }
        Command::Serve { ckpt, addr } => {
            let state = match ckpt {
                Some(p) => AppState::from_checkpoint(p)?,
                None => AppState::unloaded(),
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(dtc_service::serve(addr, Arc::new(state)))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
