use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use haicomm::manifest::Split;
use haicomm::pipeline::{Pipeline, RunConfig, StageStatus};
use haicomm::{Error, Result};

/// Multi-modal, multi-rater MRI classification pipeline.
#[derive(Parser, Debug)]
#[command(name = "haicomm", version)]
struct Cli {
    /// Run configuration (JSON). Defaults to the built-in desk config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic cohort and pretraining corpus.
    GenData,
    /// Reorient, resample, equalize and crop every volume.
    Prep {
        /// Dataset manifest to preprocess instead of the generated one.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Masked-autoencoder pretraining of the shared encoder.
    Pretrain {
        /// Preprocessed manifest whose pretrain split is used.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Out-of-fold classifier and consensus pseudo labels.
    Consensus,
    /// Train the fusion model on the pseudo labels.
    Train,
    /// Print positive-class probabilities of the trained model as JSON.
    Predict {
        /// Preprocessed manifest (default: the run's).
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Write to this file instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Test-set metrics, bootstrap deviations and the ROC curve.
    Evaluate,
    /// Train and evaluate the ablation grid.
    Ablate,
    /// All stages in order, then the ablation grid.
    Pipeline {
        /// Stop after evaluate.
        #[arg(long)]
        no_ablate: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Pretrain,
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Pretrain => Split::Pretrain,
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn report(stage: &str, s: StageStatus) {
    let what = match s {
        StageStatus::Ran => "done",
        StageStatus::Skipped => "up to date",
    };
    eprintln!("{stage}: {what}");
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be ≥ 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut p = Pipeline::new(load_config(&cli)?)?;
    match cli.cmd {
        Cmd::GenData => report("gen-data", p.gen_data()?),
        Cmd::Prep { manifest } => report("prep", p.prep_from(manifest.as_deref())?),
        Cmd::Pretrain { manifest } => report("pretrain", p.pretrain_from(manifest.as_deref())?),
        Cmd::Consensus => report("consensus", p.consensus()?),
        Cmd::Train => report("train", p.train()?),
        Cmd::Predict { manifest, split, output } => {
            let preds = p.predict(manifest.as_deref(), split.into())?;
            let json = serde_json::to_string_pretty(&preds).expect("serializable") + "\n";
            match output {
                Some(path) => std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?,
                None => print!("{json}"),
            }
        }
        Cmd::Evaluate => report("evaluate", p.evaluate()?),
        Cmd::Ablate => {
            let table = p.ablate()?;
            eprintln!("ablate: {}", table.display());
        }
        Cmd::Pipeline { no_ablate } => {
            p.run_all()?;
            for o in p.outcomes() {
                report(o.stage, o.status);
            }
            let metrics = p.stage_dir(haicomm::manifest::StageTag::Evaluate).join("metrics.json");
            eprintln!("metrics: {}", metrics.display());
            if !no_ablate {
                let table = p.ablate()?;
                eprintln!("ablation table: {}", table.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                if !msg.contains(&s.to_string()) {
                    msg.push_str(&format!("\n  caused by: {s}"));
                }
                src = s.source();
            }
            eprintln!("{msg}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
