use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use e4ssl::pipeline::{self, PipelineConfig, PretextTask, TargetMode, CONFIG_ENV};
use e4ssl::synth::SynthSpec;
use e4ssl::training::ablation::FRACTIONS;
use e4ssl::training::Preset;
use e4ssl::{Error, Result};

#[derive(Parser)]
#[command(name = "e4ssl", version, about = "E4 wearable preprocessing, self-supervised pretraining and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file; command-line flags win over it
    #[arg(long, global = true, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    omega: Option<usize>,
    #[arg(long, global = true)]
    delta: Option<usize>,
    #[arg(long, global = true)]
    mask_ratio: Option<f64>,
    #[arg(long, global = true)]
    mask_mean_len: Option<f64>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// worker threads; 1 gives bit-reproducible runs
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Raw archives to a segment store
    Preprocess {
        manifest: PathBuf,
        #[arg(long)]
        store: PathBuf,
    },
    /// Self-supervised pretraining on the SSL pool
    Pretrain {
        #[arg(long)]
        store: PathBuf,
        /// masked or transform
        #[arg(long, default_value = "masked")]
        task: String,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Target-task training: supervised, readout or finetune
    Train {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value = "supervised")]
        mode: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Test-split metrics of a classifier checkpoint
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Unlabelled-data ablation
    Ablate {
        #[arg(long)]
        store: PathBuf,
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Handcrafted features CSV
    Features {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-segment embeddings TSV
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic raw archives
    Synth {
        /// key=value spec file
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    let mut kv = std::collections::BTreeMap::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            kv.insert(k.to_string(), v);
        }
    };
    put("omega", common.omega.map(|v| v.to_string()));
    put("delta", common.delta.map(|v| v.to_string()));
    put("mask_ratio", common.mask_ratio.map(|v| v.to_string()));
    put("mask_mean_len", common.mask_mean_len.map(|v| v.to_string()));
    put("seed", common.seed.map(|v| v.to_string()));
    cfg.apply(&kv)?;
    Ok(cfg)
}

fn preset(name: &Option<String>) -> Result<Option<Preset>> {
    name.as_deref().map(Preset::parse).transpose()
}

fn read_spec(path: &Path) -> Result<SynthSpec> {
    SynthSpec::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = config(&cli.common)?;
    match cli.command {
        Command::Preprocess { manifest, store } => {
            println!("recording_id\toffbody_h\tsleep_h\twake_h\tsegments");
            for s in pipeline::cmd_preprocess(&manifest, &store, &cfg)? {
                println!(
                    "{}\t{:.3}\t{:.3}\t{:.3}\t{}",
                    s.recording_id, s.hours.offbody_h, s.hours.sleep_h, s.hours.wake_h, s.segments
                );
            }
        }
        Command::Pretrain { store, task, preset: p, out } => {
            let report = pipeline::cmd_pretrain(&store, PretextTask::parse(&task)?, preset(&p)?, &cfg, &out)?;
            print!("{}", report.summary());
        }
        Command::Train { store, mode, checkpoint, preset: p, out } => {
            let mode = TargetMode::parse(&mode)?;
            let (report, metrics) = pipeline::cmd_train(&store, mode, checkpoint.as_deref(), preset(&p)?, &cfg, &out)?;
            print!("{}{}", report.summary(), metrics.to_text());
        }
        Command::Evaluate { checkpoint, store, out } => {
            print!("{}", pipeline::cmd_evaluate(&checkpoint, &store, &out)?.to_text());
        }
        Command::Ablate { store, fractions, preset: p, out } => {
            let fractions = fractions.unwrap_or_else(|| FRACTIONS.to_vec());
            print!("{}", pipeline::cmd_ablate(&store, &fractions, preset(&p)?, &cfg, &out)?.to_text());
        }
        Command::Features { store, out } => {
            println!("{} rows written to {}", pipeline::cmd_features(&store, &out)?, out.display());
        }
        Command::Embed { checkpoint, store, out } => {
            println!("{} embeddings written to {}", pipeline::cmd_embed(&checkpoint, &store, &out)?, out.display());
        }
        Command::Synth { spec, out } => {
            let mut spec = spec.as_deref().map(read_spec).transpose()?.unwrap_or_default();
            if let Some(seed) = cli.common.seed {
                spec.seed = seed;
            }
            println!("{}", pipeline::cmd_synth(&spec, &out)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
