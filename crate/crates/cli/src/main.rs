//! `refseg`: generate a corpus, train both stages, infer, evaluate and
//! run the ablation grid.
//!
//! Settings come from the built-in defaults, then `--config <json>`, then
//! individual flags, each overriding the last.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::error;
use refseg_core::data::Split;
use refseg_core::experiment::{self, ExperimentConfig};
use refseg_core::Error;

#[derive(Parser, Debug)]
#[command(name = "refseg", version, about = "Reference-guided semi-supervised segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// JSON experiment config; missing fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed. `ablate` accepts it more than once.
    #[arg(long)]
    seed: Vec<u64>,
    /// Fraction of training patients that are labeled, in (0, 1].
    #[arg(long)]
    ratio: Option<f64>,
    /// Stage-1 training steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Stage-2 training iterations.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    no_prompt: bool,
    #[arg(long)]
    no_memory: bool,
    #[arg(long)]
    no_feedback: bool,
    #[arg(long)]
    no_assistant: bool,
    /// Output directory, created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset directory holding manifest.json.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    patients: Option<usize>,
    #[arg(long)]
    slices: Option<usize>,
    #[arg(long)]
    classes: Option<u8>,
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Labeled,
    Unlabeled,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Labeled => Split::Labeled,
            SplitArg::Unlabeled => Split::Unlabeled,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    /// Student, teacher or segmenter checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, required_unless_present = "pred_dir")]
    checkpoint: Option<PathBuf>,
    /// Directory of predicted mask PNGs named like the test images.
    #[arg(long)]
    pred_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SslArgs {
    #[command(flatten)]
    common: Common,
    /// Stage-1 checkpoint; defaults to `<out>/segmenter.json`.
    #[arg(long)]
    segmenter: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic corpus and its labeled split.
    Generate(GenerateArgs),
    /// Stage 1: train the reference-guided segmenter.
    Pretrain(Common),
    /// Stage 2: semi-supervised student training.
    SslTrain(SslArgs),
    /// Write predicted label maps for a split.
    Infer(InferArgs),
    /// Score a checkpoint or saved predictions on the test split.
    Eval(EvalArgs),
    /// Run the four-configuration ablation grid.
    Ablate(Common),
}

fn resolve(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::from_json_file(p)?,
        None => ExperimentConfig::default(),
    };
    if !c.seed.is_empty() {
        cfg.seeds = c.seed.clone();
    }
    if let Some(r) = c.ratio {
        cfg.ratio = r;
    }
    if let Some(s) = c.steps {
        cfg.stage1.steps = s;
    }
    if let Some(i) = c.iters {
        cfg.ssl.iterations = i;
    }
    if c.no_prompt {
        cfg.flags.use_prompt = false;
    }
    if c.no_memory {
        cfg.flags.use_memory = false;
    }
    if c.no_feedback {
        cfg.flags.use_feedback = false;
    }
    if c.no_assistant {
        cfg.flags.use_assistant = false;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = &c.data {
        cfg.dataset_root = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate(a) => {
            let mut cfg = resolve(&a.common)?;
            if let Some(n) = a.patients {
                cfg.corpus.patients = n;
            }
            if let Some(n) = a.slices {
                cfg.corpus.slices_per_patient = n;
            }
            if let Some(k) = a.classes {
                cfg.corpus.classes = k;
                cfg.segmenter.num_classes = k;
                cfg.ssl.num_classes = k;
            }
            if let Some(s) = a.size {
                cfg.corpus.size = s;
            }
            // `--out` names the corpus directory unless `--data` is given.
            if a.common.data.is_none() {
                if let Some(o) = &a.common.out {
                    cfg.dataset_root = o.clone();
                }
            }
            let m = experiment::generate(&cfg, cfg.seed())?;
            let path = cfg.dataset_root.join(refseg_core::data::MANIFEST_FILE);
            println!("{} sha256={}", path.display(), experiment::file_hash(&path)?);
            println!("{} slices, {} classes", m.entries.len(), m.num_classes);
        }
        Command::Pretrain(c) => {
            let cfg = resolve(&c)?;
            let out = experiment::pretrain(&cfg, cfg.seed())?;
            println!("{} held-out mean dice {:.4}", out.checkpoint.display(), out.report.mean_dice);
        }
        Command::SslTrain(a) => {
            let cfg = resolve(&a.common)?;
            let r = experiment::ssl_train(&cfg, cfg.seed(), a.segmenter.as_deref())?;
            if let Some(rep) = r.final_report() {
                println!("final test mean dice {:.4}", rep.mean_dice);
            }
        }
        Command::Infer(a) => {
            let cfg = resolve(&a.common)?;
            let dir = experiment::infer_to_dir(&cfg, cfg.seed(), &a.checkpoint, a.split.into())?;
            println!("{}", dir.display());
        }
        Command::Eval(a) => {
            let cfg = resolve(&a.common)?;
            let rep = experiment::eval(&cfg, cfg.seed(), a.checkpoint.as_deref(), a.pred_dir.as_deref())?;
            print!("{}", rep.to_csv_string(Some(&cfg.header(cfg.seed())))?);
        }
        Command::Ablate(c) => {
            let cfg = resolve(&c)?;
            let table = experiment::ablate(&cfg)?;
            print!("{}", table.to_csv_string()?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("REFSEG_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } => ExitCode::from(3),
                Error::InvalidArgument(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
