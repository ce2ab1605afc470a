use std::fs;
use std::path::{Path, PathBuf};

use fairfader_core::data::{
    gen_synthetic, load_dataset, make_splits, race_frequencies, read_synthetic, write_synthetic, DatasetSplit,
    ImageSet, SampleRecord,
};
use fairfader_core::fairness::{
    accuracy_percent, balanced_accuracy_percent, emit_report, evaluate, predict_all, read_predictions_csv,
    write_predictions_csv, EvalReport, PredictionRecord,
};
use fairfader_core::gradcheck::{self, OpReport};
use fairfader_core::nets::{load_model, save_model, Classifier, Encoder, Network};
use fairfader_core::training::{
    checkpoint_dir_name, class_weights, encode_set, read_checkpoint, read_loss_csv, train_autoencoder, train_classifier,
    train_fader, train_probe, write_checkpoint, write_loss_csv, AeRun, Checkpoint, Hooks, LossRecord, Resume,
    SelectedMarker,
};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};
use crate::{CliError, CliResult};

pub const LOSS_FILE: &str = "loss.csv";
pub const SELECTED_FILE: &str = "selected.json";
pub const SPLIT_FILE: &str = "split.json";
pub const STAMP_FILE: &str = "stamp.json";
pub const CLASSIFIER_FILE: &str = "classifier.bin";
pub const REPORT_FILE: &str = "report.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";

/// Config and output directory of one command.
pub struct Ctx<'a> {
    pub cfg: &'a ExperimentConfig,
    /// The config file as given, persisted verbatim.
    pub raw: Option<&'a str>,
    pub out: &'a Path,
}

/// Written next to every command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Runtime(format!("{}: {e}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(CliError::runtime)? + "\n";
    fs::write(path, text).map_err(io(path))
}

pub(crate) fn prepare(ctx: &Ctx<'_>, command: &str) -> CliResult<()> {
    fs::create_dir_all(ctx.out).map_err(io(ctx.out))?;
    let verbatim = ctx.out.join("config.json");
    match ctx.raw {
        Some(raw) => fs::write(&verbatim, raw).map_err(io(&verbatim))?,
        None => fs::write(&verbatim, ctx.cfg.to_json() + "\n").map_err(io(&verbatim))?,
    }
    let resolved = ctx.out.join("config.resolved.json");
    fs::write(&resolved, ctx.cfg.to_json() + "\n").map_err(io(&resolved))?;
    write_json(
        &ctx.out.join(STAMP_FILE),
        &Stamp {
            command: command.to_string(),
            config_hash: ctx.cfg.hash(),
            seed: ctx.cfg.seed,
        },
    )
}

/// Writes the synthetic dataset; returns its manifest hash.
pub fn gen_synth(ctx: &Ctx<'_>) -> CliResult<String> {
    let DataSource::Synthetic(synth) = &ctx.cfg.data else {
        return Err(CliError::Config("gen-synth needs a data.synthetic section".into()));
    };
    prepare(ctx, "gen-synth")?;
    let records = gen_synthetic(synth).map_err(CliError::config)?;
    write_synthetic(&records, Some(synth), ctx.out).map_err(CliError::runtime)
}

fn load_records(cfg: &ExperimentConfig, data: &Path) -> CliResult<Vec<SampleRecord>> {
    if !data.is_dir() {
        return Err(CliError::Config(format!("data directory {} does not exist", data.display())));
    }
    let records = match &cfg.data {
        DataSource::Synthetic(_) => read_synthetic(data).map_err(CliError::config)?,
        DataSource::Utk { channels, .. } => {
            let report = load_dataset(data, cfg.arch.input_size, *channels).map_err(CliError::config)?;
            for (file, reason) in &report.errors {
                eprintln!("skipped {file}: {reason}");
            }
            report.records
        }
    };
    let want = [cfg.arch.input_channels, cfg.arch.input_size, cfg.arch.input_size];
    if let Some(r) = records.iter().find(|r| r.image.shape() != want) {
        return Err(CliError::Config(format!(
            "{} is {:?}, the architecture expects {want:?}",
            r.source_id,
            r.image.shape()
        )));
    }
    Ok(records)
}

/// Loads the dataset and draws the configured split.
pub fn load_split(cfg: &ExperimentConfig, data: &Path) -> CliResult<DatasetSplit> {
    let records = load_records(cfg, data)?;
    make_splits(
        records,
        cfg.arch.num_attrs,
        cfg.split.n_test_per_race,
        cfg.split.val_fraction,
        cfg.seed,
    )
    .map_err(CliError::config)
}

fn image_set(records: &[SampleRecord], name: &str) -> CliResult<ImageSet> {
    if records.is_empty() {
        return Err(CliError::Config(format!("the {name} split is empty")));
    }
    ImageSet::from_records(records).map_err(CliError::config)
}

/// Which autoencoder a training command produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AeKind {
    Fader,
    /// Plain autoencoder with an unconditioned decoder.
    Vanilla,
    /// Plain autoencoder whose decoder receives the attribute planes.
    Conditioned,
}

impl AeKind {
    pub fn provenance(self) -> &'static str {
        match self {
            AeKind::Fader => "fader",
            AeKind::Vanilla => "vanilla",
            AeKind::Conditioned => "conditioned",
        }
    }

    fn command(self) -> &'static str {
        match self {
            AeKind::Fader => "train-fader",
            AeKind::Vanilla | AeKind::Conditioned => "train-ae",
        }
    }
}

fn checkpoint_dirs(out: &Path) -> CliResult<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(out)
        .map_err(io(out))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("ckpt_")))
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn load_resume(out: &Path) -> CliResult<Option<Resume>> {
    let dirs = checkpoint_dirs(out)?;
    if dirs.is_empty() {
        return Ok(None);
    }
    let checkpoints = dirs
        .iter()
        .map(|d| read_checkpoint(d).map_err(CliError::config))
        .collect::<CliResult<Vec<Checkpoint>>>()?;
    let series = read_loss_csv(out.join(LOSS_FILE)).map_err(CliError::config)?;
    Ok(Some(Resume { checkpoints, series }))
}

/// Trains an autoencoder, writing every checkpoint and the loss series as it
/// goes so a failed run keeps its partial artifacts. With `resume`, continues
/// from the checkpoints already in the output directory.
pub fn train_ae(ctx: &Ctx<'_>, data: &Path, kind: AeKind, resume: bool) -> CliResult<AeRun> {
    let split = load_split(ctx.cfg, data)?;
    let train = image_set(&split.train, "training")?;
    let val = image_set(&split.validation, "validation")?;
    let resume = if resume && ctx.out.is_dir() { load_resume(ctx.out)? } else { None };
    if resume.is_none() && ctx.out.is_dir() && !checkpoint_dirs(ctx.out)?.is_empty() {
        return Err(CliError::Config(format!(
            "{} already holds checkpoints; pass --resume or choose a fresh --out",
            ctx.out.display()
        )));
    }
    prepare(ctx, kind.command())?;
    write_json(&ctx.out.join(SPLIT_FILE), &split.manifest())?;
    let out = ctx.out;
    let provenance = kind.provenance();
    let mut sink = |ckpt: &Checkpoint, series: &[LossRecord]| {
        write_checkpoint(out, ckpt, provenance)?;
        write_loss_csv(series, out.join(LOSS_FILE))
    };
    let hooks = Hooks {
        resume,
        on_checkpoint: Some(&mut sink),
    };
    let spec = &ctx.cfg.arch;
    let train_cfg = &ctx.cfg.train;
    let run = match kind {
        AeKind::Fader => train_fader(&train, &val, spec, train_cfg, hooks),
        AeKind::Vanilla => train_autoencoder(&train, &val, spec, 0, train_cfg, hooks),
        AeKind::Conditioned => train_autoencoder(&train, &val, spec, spec.num_attrs, train_cfg, hooks),
    }
    .map_err(CliError::runtime)?;
    write_loss_csv(&run.series, out.join(LOSS_FILE)).map_err(CliError::runtime)?;
    write_json(&out.join(SELECTED_FILE), &SelectedMarker::of(run.selected_checkpoint()))?;
    Ok(run)
}

/// Path of the encoder of the checkpoint a training run selected.
pub fn selected_encoder(run_dir: &Path) -> CliResult<PathBuf> {
    let path = run_dir.join(SELECTED_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let marker: SelectedMarker =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(run_dir.join(marker.checkpoint).join("encoder.bin"))
}

fn load_encoder(cfg: &ExperimentConfig, path: &Path) -> CliResult<(Encoder, String)> {
    let (enc, header) = load_model::<Encoder>(path)
        .map_err(|e| CliError::Config(format!("cannot load encoder {}: {e}", path.display())))?;
    if enc.spec() != &cfg.arch {
        return Err(CliError::Config(format!(
            "encoder {} was built for a different architecture:\n{}\nconfig:\n{}",
            path.display(),
            enc.spec().to_text(),
            cfg.arch.to_text()
        )));
    }
    let provenance = header.provenance().unwrap_or("unknown").to_string();
    Ok((enc, provenance))
}

/// Name of the classifier trained on an encoder of the given provenance.
pub fn classifier_name(encoder_provenance: &str, weighted: bool) -> String {
    let base = if encoder_provenance == "fader" { "FaderCNN" } else { "SimpleCNN" };
    if weighted {
        format!("{base}-WL")
    } else {
        base.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaceWeights {
    pub frequencies: Vec<f64>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ClassifierOutcome {
    pub name: String,
    pub weights: Option<RaceWeights>,
}

/// Trains a gender classifier on the frozen latents of the training split.
/// With `weighted`, the loss is weighted by inverse race frequency.
pub fn train_clf(ctx: &Ctx<'_>, data: &Path, encoder: &Path, weighted: bool) -> CliResult<ClassifierOutcome> {
    let (enc, provenance) = load_encoder(ctx.cfg, encoder)?;
    let split = load_split(ctx.cfg, data)?;
    let train = image_set(&split.train, "training")?;
    prepare(ctx, "train-clf")?;
    let name = classifier_name(&provenance, weighted);
    let weights = if weighted {
        let frequencies = race_frequencies(&train.races, ctx.cfg.arch.num_attrs);
        let weights = class_weights(&frequencies).map_err(CliError::config)?;
        println!("{name}: race frequencies {frequencies:?}");
        println!("{name}: race weights {weights:?}");
        let w = RaceWeights { frequencies, weights };
        write_json(&ctx.out.join("weights.json"), &w)?;
        Some(w)
    } else {
        None
    };
    let latents = encode_set(&enc, &train).map_err(CliError::runtime)?;
    let (clf, log) = train_classifier(
        &ctx.cfg.arch,
        &latents,
        &ctx.cfg.classifier,
        weights.as_ref().map(|w| w.weights.as_slice()),
    )
    .map_err(CliError::runtime)?;
    save_model(&clf, ctx.out.join(CLASSIFIER_FILE), Some(&name)).map_err(CliError::runtime)?;
    let fit = ctx.out.join("fit.csv");
    let mut w = csv::Writer::from_path(&fit).map_err(CliError::runtime)?;
    for r in &log {
        w.serialize(r).map_err(CliError::runtime)?;
    }
    w.flush().map_err(io(&fit))?;
    Ok(ClassifierOutcome { name, weights })
}

/// Which split a command reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Validation,
    Test,
}

impl SplitName {
    fn records(self, split: &DatasetSplit) -> &[SampleRecord] {
        match self {
            SplitName::Train => &split.train,
            SplitName::Validation => &split.validation,
            SplitName::Test => &split.test,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SplitName::Train => "training",
            SplitName::Validation => "validation",
            SplitName::Test => "test",
        }
    }
}

/// Runs encoder and classifier over a split and writes the per-sample
/// predictions and the stratified report.
pub fn eval(ctx: &Ctx<'_>, data: &Path, model: &Path, encoder: &Path, which: SplitName) -> CliResult<EvalReport> {
    let (clf, header) = load_model::<Classifier>(model)
        .map_err(|e| CliError::Config(format!("cannot load classifier {}: {e}", model.display())))?;
    let (enc, _) = load_model::<Encoder>(encoder)
        .map_err(|e| CliError::Config(format!("cannot load encoder {}: {e}", encoder.display())))?;
    if clf.spec() != enc.spec() {
        return Err(CliError::Config(format!(
            "classifier and encoder architectures differ\nclassifier:\n{}\nencoder:\n{}",
            clf.spec().to_text(),
            enc.spec().to_text()
        )));
    }
    let model_id = header.provenance().unwrap_or("classifier").to_string();
    let split = load_split(ctx.cfg, data)?;
    let set = image_set(which.records(&split), which.name())?;
    prepare(ctx, "eval")?;
    let latents = encode_set(&enc, &set).map_err(CliError::runtime)?;
    let pred = predict_all(&clf, &latents.latents).map_err(CliError::runtime)?;
    let preds: Vec<PredictionRecord> = pred
        .iter()
        .enumerate()
        .map(|(i, &p)| PredictionRecord {
            source_id: latents.source_ids[i].clone(),
            predicted_gender: p,
            true_gender: latents.genders[i],
            race: latents.races[i],
        })
        .collect();
    write_predictions_csv(&preds, ctx.out.join(PREDICTIONS_FILE)).map_err(CliError::runtime)?;
    let report = evaluate(&preds, ctx.cfg.arch.num_attrs, &model_id).map_err(CliError::runtime)?;
    emit_report(&report, ctx.out.join(REPORT_FILE)).map_err(CliError::runtime)?;
    Ok(report)
}

/// Stratified report of a predictions CSV.
pub fn report(predictions: &Path, num_races: usize, model_id: &str, out: &Path) -> CliResult<EvalReport> {
    let preds = read_predictions_csv(predictions)
        .map_err(|e| CliError::Config(format!("{}: {e}", predictions.display())))?;
    let report = evaluate(&preds, num_races, model_id).map_err(CliError::config)?;
    fs::create_dir_all(out).map_err(io(out))?;
    emit_report(&report, out.join(REPORT_FILE)).map_err(CliError::runtime)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    /// Class-balanced accuracy on the validation split, percent.
    pub balanced_accuracy: f64,
    pub plain_accuracy: f64,
}

/// Trains a fresh race discriminator on frozen training latents and scores it
/// on the validation split.
pub fn probe(ctx: &Ctx<'_>, data: &Path, encoder: &Path) -> CliResult<ProbeOutcome> {
    let (enc, _) = load_encoder(ctx.cfg, encoder)?;
    let split = load_split(ctx.cfg, data)?;
    let train = image_set(&split.train, "training")?;
    let val = image_set(&split.validation, "validation")?;
    prepare(ctx, "probe")?;
    let z_train = encode_set(&enc, &train).map_err(CliError::runtime)?;
    let z_val = encode_set(&enc, &val).map_err(CliError::runtime)?;
    let (dis, _) = train_probe(&ctx.cfg.arch, &z_train, &ctx.cfg.probe).map_err(CliError::runtime)?;
    let pred = predict_all(&dis, &z_val.latents).map_err(CliError::runtime)?;
    let outcome = ProbeOutcome {
        balanced_accuracy: balanced_accuracy_percent(&pred, &z_val.races, ctx.cfg.arch.num_attrs)
            .map_err(CliError::runtime)?,
        plain_accuracy: accuracy_percent(&pred, &z_val.races).map_err(CliError::runtime)?,
    };
    write_json(&ctx.out.join("probe.json"), &outcome)?;
    Ok(outcome)
}

/// Runs the finite-difference suite; fails naming every op out of tolerance.
pub fn grad_check(instances: usize, seed: u64) -> CliResult<Vec<OpReport>> {
    let reports = gradcheck::run(&gradcheck::standard_suite(instances, seed)).map_err(CliError::runtime)?;
    for r in &reports {
        println!(
            "{:<20} {} n={:<3} worst={:.3e} tol={:.0e}",
            r.op,
            if r.passed { "ok  " } else { "FAIL" },
            r.instances,
            r.worst_rel_error,
            r.tolerance
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    if failed.is_empty() {
        Ok(reports)
    } else {
        Err(CliError::Runtime(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn checkpoint_dir(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(checkpoint_dir_name(step))
}
