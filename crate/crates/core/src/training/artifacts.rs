use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::autoencoder::{Checkpoint, ValMetrics};
use super::LossRecord;
use crate::error::{ensure, Result};
use crate::nets::{load_model, save_model, Decoder, Discriminator, Encoder};

const ENCODER_FILE: &str = "encoder.bin";
const DECODER_FILE: &str = "decoder.bin";
const DISCRIMINATOR_FILE: &str = "discriminator.bin";
const MANIFEST_FILE: &str = "manifest.json";

pub fn write_loss_csv(records: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMetrics {
    pub l_ae: f64,
    pub l_dis: Option<f64>,
    pub l_adv: Option<f64>,
    pub l_total: f64,
    pub val_l_ae: f64,
    pub dis_val_accuracy: Option<f64>,
    pub dis_val_plain_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub step: usize,
    pub lambda: f64,
    pub config_hash: String,
    pub metrics: CheckpointMetrics,
}

/// Contents of `selected.json`: which checkpoint a run settled on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectedMarker {
    pub step: usize,
    /// Checkpoint directory name relative to the run directory.
    pub checkpoint: String,
    pub val_l_ae: f64,
    pub dis_val_accuracy: Option<f64>,
    pub config_hash: String,
}

impl SelectedMarker {
    pub fn of(ckpt: &Checkpoint) -> Self {
        Self {
            step: ckpt.step,
            checkpoint: checkpoint_dir_name(ckpt.step),
            val_l_ae: ckpt.val.l_ae,
            dis_val_accuracy: ckpt.val.dis_accuracy,
            config_hash: ckpt.config_hash.clone(),
        }
    }
}

pub fn checkpoint_dir_name(step: usize) -> String {
    format!("ckpt_{step:06}")
}

/// Writes `<root>/ckpt_<step>/` and returns its path. `provenance` is stored
/// in every model header.
pub fn write_checkpoint(root: impl AsRef<Path>, ckpt: &Checkpoint, provenance: &str) -> Result<PathBuf> {
    let dir = root.as_ref().join(checkpoint_dir_name(ckpt.step));
    fs::create_dir_all(&dir)?;
    save_model(&ckpt.encoder, dir.join(ENCODER_FILE), Some(provenance))?;
    save_model(&ckpt.decoder, dir.join(DECODER_FILE), Some(provenance))?;
    if let Some(d) = &ckpt.discriminator {
        save_model(d, dir.join(DISCRIMINATOR_FILE), Some(provenance))?;
    }
    let manifest = CheckpointManifest {
        step: ckpt.step,
        lambda: ckpt.lambda,
        config_hash: ckpt.config_hash.clone(),
        metrics: CheckpointMetrics {
            l_ae: ckpt.record.l_ae,
            l_dis: ckpt.record.l_dis,
            l_adv: ckpt.record.l_adv,
            l_total: ckpt.record.l_total,
            val_l_ae: ckpt.val.l_ae,
            dis_val_accuracy: ckpt.val.dis_accuracy,
            dis_val_plain_accuracy: ckpt.val.dis_plain_accuracy,
        },
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(dir)
}

pub fn read_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let (encoder, _) = load_model::<Encoder>(dir.join(ENCODER_FILE))?;
    let (decoder, _) = load_model::<Decoder>(dir.join(DECODER_FILE))?;
    let dis_path = dir.join(DISCRIMINATOR_FILE);
    let discriminator = if dis_path.exists() {
        Some(load_model::<Discriminator>(dis_path)?.0)
    } else {
        None
    };
    ensure!(
        discriminator.is_some() == manifest.metrics.dis_val_accuracy.is_some(),
        "{}: discriminator file and metrics disagree",
        dir.display()
    );
    let m = manifest.metrics;
    Ok(Checkpoint {
        step: manifest.step,
        encoder,
        decoder,
        discriminator,
        record: LossRecord {
            step: manifest.step,
            l_ae: m.l_ae,
            l_dis: m.l_dis,
            l_adv: m.l_adv,
            l_total: m.l_total,
            dis_val_accuracy: m.dis_val_accuracy,
        },
        val: ValMetrics {
            l_ae: m.val_l_ae,
            dis_accuracy: m.dis_val_accuracy,
            dis_plain_accuracy: m.dis_val_plain_accuracy,
        },
        lambda: manifest.lambda,
        config_hash: manifest.config_hash,
    })
}
