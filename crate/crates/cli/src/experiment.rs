use std::fs;
use std::path::{Path, PathBuf};

use fairfader_core::training::batches_per_epoch;
use serde::{Deserialize, Serialize};

use crate::commands::{
    eval, gen_synth, prepare, probe, selected_encoder, train_ae, train_clf, AeKind, Ctx, SplitName, CLASSIFIER_FILE,
};
use crate::config::{DataSource, ExperimentConfig};
use crate::{CliError, CliResult};

pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub name: String,
    pub per_class_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
    pub variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub seed: u64,
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub fader_selected_step: usize,
    /// Balanced discriminator accuracy of the selected fader checkpoint.
    pub fader_dis_val_accuracy: f64,
    /// `(step, balanced discriminator accuracy)` at every fader checkpoint.
    pub dis_val_series: Vec<(usize, f64)>,
    /// Balanced accuracy of a race probe on the plain autoencoder's latents.
    pub vanilla_probe_accuracy: f64,
    /// SimpleCNN, SimpleCNN-WL and FaderCNN on the test split.
    pub models: Vec<ModelResult>,
}

impl ExperimentSummary {
    pub fn model(&self, name: &str) -> Option<&ModelResult> {
        self.models.iter().find(|m| m.name == name)
    }
}

fn at<'a>(cfg: &'a ExperimentConfig, raw: Option<&'a str>, out: &'a Path) -> Ctx<'a> {
    Ctx { cfg, raw, out }
}

/// The whole pipeline: data, fader and plain autoencoder, race probe, the
/// three classifiers and their test-split reports. Every stage writes to its
/// own subdirectory of `out`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    raw: Option<&str>,
    out: &Path,
    data: Option<&Path>,
) -> CliResult<ExperimentSummary> {
    let sub = |name: &str| out.join(name);
    prepare(&at(cfg, raw, out), "run-experiment")?;
    let data_dir: PathBuf = match (&cfg.data, data) {
        (DataSource::Synthetic(_), _) => {
            let dir = sub("data");
            let hash = gen_synth(&at(cfg, raw, &dir))?;
            println!("data: synthetic set {hash}");
            dir
        }
        (DataSource::Utk { .. }, Some(d)) => d.to_path_buf(),
        (DataSource::Utk { dir: Some(d), .. }, None) => d.clone(),
        (DataSource::Utk { dir: None, .. }, None) => {
            return Err(CliError::Config("no image directory given for data.utk".into()))
        }
    };

    let fader_dir = sub("fader");
    let fader = train_ae(&at(cfg, raw, &fader_dir), &data_dir, AeKind::Fader, false)?;
    let selected = fader.selected_checkpoint();
    let fader_acc = selected.val.dis_accuracy.expect("fader checkpoints carry discriminator accuracy");
    println!("fader: selected step {} with discriminator accuracy {fader_acc:.1}%", selected.step);

    let ae_dir = sub("ae");
    train_ae(&at(cfg, raw, &ae_dir), &data_dir, AeKind::Vanilla, false)?;
    let fader_enc = selected_encoder(&fader_dir)?;
    let ae_enc = selected_encoder(&ae_dir)?;

    let probed = probe(&at(cfg, raw, &sub("probe")), &data_dir, &ae_enc)?;
    println!("probe: race accuracy on plain latents {:.1}%", probed.balanced_accuracy);

    let mut models = Vec::new();
    for (dir, encoder, weighted) in [
        ("simplecnn", &ae_enc, false),
        ("simplecnn_wl", &ae_enc, true),
        ("fadercnn", &fader_enc, false),
    ] {
        let clf_dir = sub("clf").join(dir);
        let trained = train_clf(&at(cfg, raw, &clf_dir), &data_dir, encoder, weighted)?;
        let eval_dir = sub("eval").join(dir);
        let report = eval(
            &at(cfg, raw, &eval_dir),
            &data_dir,
            &clf_dir.join(CLASSIFIER_FILE),
            encoder,
            SplitName::Test,
        )?;
        println!(
            "{}: overall {:.2}%, variance {:.2}",
            trained.name, report.overall_accuracy, report.variance
        );
        models.push(ModelResult {
            name: trained.name,
            per_class_accuracy: report.per_class_accuracy,
            overall_accuracy: report.overall_accuracy,
            variance: report.variance,
        });
    }

    let n_train = fs::read_to_string(fader_dir.join(crate::commands::SPLIT_FILE))
        .ok()
        .and_then(|t| serde_json::from_str::<fairfader_core::data::SplitManifest>(&t).ok())
        .map(|m| m.train.len())
        .ok_or_else(|| CliError::Runtime("split manifest missing".into()))?;
    let total_steps = cfg.train.epochs * batches_per_epoch(n_train, cfg.train.batch_size);
    let summary = ExperimentSummary {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        total_steps,
        warmup_steps: cfg.train.warmup_steps(total_steps),
        fader_selected_step: selected.step,
        fader_dis_val_accuracy: fader_acc,
        dis_val_series: fader
            .checkpoints
            .iter()
            .map(|c| (c.step, c.val.dis_accuracy.expect("fader checkpoint")))
            .collect(),
        vanilla_probe_accuracy: probed.balanced_accuracy,
        models,
    };
    let text = serde_json::to_string_pretty(&summary).map_err(CliError::runtime)? + "\n";
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(summary)
}
