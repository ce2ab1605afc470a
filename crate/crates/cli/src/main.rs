use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fairfader_cli::commands::{self, AeKind, Ctx, SplitName};
use fairfader_cli::{run_experiment, CliError, CliResult, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fairfader", version, about = "Attribute-invariant autoencoders and stratified fairness evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `out`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by the config.
    GenSynth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the encoder/decoder adversarially against the latent discriminator.
    TrainFader {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoints already in the output directory.
        #[arg(long)]
        resume: bool,
        data: PathBuf,
    },
    /// Train a plain autoencoder.
    TrainAe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        resume: bool,
        /// Feed the attribute planes to the decoder, as the fader does.
        #[arg(long)]
        conditioned: bool,
        data: PathBuf,
    },
    /// Train a gender classifier on the latents of a trained encoder.
    TrainClf {
        #[command(flatten)]
        common: Common,
        /// Weight the loss by inverse race frequency.
        #[arg(long)]
        weighted: bool,
        data: PathBuf,
        encoder: PathBuf,
    },
    /// Train a race probe on the latents of a trained encoder.
    Probe {
        #[command(flatten)]
        common: Common,
        data: PathBuf,
        encoder: PathBuf,
    },
    /// Evaluate a classifier per race on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        data: PathBuf,
        model: PathBuf,
        encoder: PathBuf,
    },
    /// Stratified report of a predictions CSV.
    Report {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        races: usize,
        #[arg(long, default_value = "model")]
        model_id: String,
        predictions: PathBuf,
    },
    /// Finite-difference check of every differentiable op.
    GradCheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
    /// Data, fader, autoencoder, probe, classifiers and reports in one go.
    RunExperiment {
        #[command(flatten)]
        common: Common,
        /// Image directory when the config reads real data.
        data: Option<PathBuf>,
    },
}

struct Loaded {
    cfg: ExperimentConfig,
    raw: String,
    out: PathBuf,
}

fn load(common: &Common) -> CliResult<Loaded> {
    let (cfg, raw) = ExperimentConfig::load(&common.config, common.seed)?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out`".into()))?;
    Ok(Loaded { cfg, raw, out })
}

impl Loaded {
    fn ctx(&self) -> Ctx<'_> {
        Ctx {
            cfg: &self.cfg,
            raw: Some(&self.raw),
            out: &self.out,
        }
    }
}

fn train(common: &Common, data: &Path, kind: AeKind, resume: bool) -> CliResult<()> {
    let l = load(common)?;
    let run = commands::train_ae(&l.ctx(), data, kind, resume)?;
    let sel = run.selected_checkpoint();
    println!(
        "selected step {} (val L_ae {:.5}{})",
        sel.step,
        sel.val.l_ae,
        sel.val
            .dis_accuracy
            .map(|a| format!(", discriminator accuracy {a:.1}%"))
            .unwrap_or_default()
    );
    Ok(())
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::GenSynth { common } => {
            let l = load(&common)?;
            let hash = commands::gen_synth(&l.ctx())?;
            println!("{hash}");
        }
        Command::TrainFader { common, resume, data } => train(&common, &data, AeKind::Fader, resume)?,
        Command::TrainAe {
            common,
            resume,
            conditioned,
            data,
        } => {
            let kind = if conditioned { AeKind::Conditioned } else { AeKind::Vanilla };
            train(&common, &data, kind, resume)?
        }
        Command::TrainClf {
            common,
            weighted,
            data,
            encoder,
        } => {
            let l = load(&common)?;
            let done = commands::train_clf(&l.ctx(), &data, &encoder, weighted)?;
            println!("trained {}", done.name);
        }
        Command::Probe { common, data, encoder } => {
            let l = load(&common)?;
            let p = commands::probe(&l.ctx(), &data, &encoder)?;
            println!("race probe accuracy {:.2}% (plain {:.2}%)", p.balanced_accuracy, p.plain_accuracy);
        }
        Command::Eval {
            common,
            split,
            data,
            model,
            encoder,
        } => {
            let l = load(&common)?;
            let r = commands::eval(&l.ctx(), &data, &model, &encoder, split)?;
            println!("{}: overall {:.2}%, variance {:.2}", r.model_id, r.overall_accuracy, r.variance);
        }
        Command::Report {
            out,
            races,
            model_id,
            predictions,
        } => {
            let r = commands::report(&predictions, races, &model_id, &out)?;
            println!("{}: overall {:.2}%, variance {:.2}", r.model_id, r.overall_accuracy, r.variance);
        }
        Command::GradCheck { instances, seed } => {
            commands::grad_check(instances, seed)?;
        }
        Command::RunExperiment { common, data } => {
            let l = load(&common)?;
            run_experiment(&l.cfg, Some(&l.raw), &l.out, data.as_deref())?;
        }
    }
    Ok(())
}

fn threads() -> CliResult<usize> {
    match std::env::var("FAIRFADER_THREADS") {
        Ok(v) => v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Config(format!("FAIRFADER_THREADS={v:?} is not a positive integer"))),
        Err(_) => Ok(1),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = threads().and_then(|n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        dispatch(cli.command)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
