//! Alternating adversarial training of the encoder/decoder against the latent
//! discriminator, plain autoencoder training, and the latent classifiers.

mod artifacts;
mod autoencoder;
mod batching;
mod latent;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Result};

pub use artifacts::{
    checkpoint_dir_name, read_checkpoint, read_loss_csv, write_checkpoint, write_loss_csv, CheckpointManifest, CheckpointMetrics,
    SelectedMarker,
};
pub use autoencoder::{
    dis_step, encdec_step, select_checkpoint, train_autoencoder, train_fader, train_vanilla_ae, validate, AeRun,
    Checkpoint, CheckpointSink, Hooks, Resume, StepLosses, ValMetrics,
};
pub use batching::{batches_per_epoch, epoch_batches, Sampling};
pub use latent::{class_weights, encode_set, sample_weights, train_classifier, train_probe, ClassifierConfig, FitRecord, LatentSet};

/// Optimization settings of the autoencoder trainers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Final weight λ_E of the fooling term.
    pub lambda_e: f64,
    /// Steps over which λ ramps linearly from 0 to `lambda_e`; by default 20%
    /// of all steps.
    #[serde(default)]
    pub lambda_warmup: Option<usize>,
    /// SGD learning rate η.
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Validation and checkpoint interval in steps.
    pub eval_every: usize,
    #[serde(default)]
    pub sampling: Sampling,
    /// Random horizontal flips of training batches.
    #[serde(default)]
    pub hflip: bool,
    /// A checkpoint is eligible for selection when its validation
    /// reconstruction loss is within this relative margin of the best one.
    #[serde(default = "default_gate")]
    pub selection_gate: f64,
}

fn default_gate() -> f64 {
    0.25
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_e: 1e-4,
            lambda_warmup: None,
            eta: 2e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            eval_every: 50,
            sampling: Sampling::Shuffle,
            hflip: false,
            selection_gate: default_gate(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.lambda_e >= 0.0 && self.lambda_e.is_finite(),
            "lambda_e must be finite and nonnegative, got {}",
            self.lambda_e
        );
        ensure!(self.eta >= 0.0 && self.eta.is_finite(), "eta must be finite and nonnegative, got {}", self.eta);
        ensure!(self.batch_size >= 2, "batch_size must be at least 2, got {}", self.batch_size);
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        ensure!(self.eval_every >= 1, "eval_every must be at least 1");
        ensure!(
            self.selection_gate >= 0.0 && self.selection_gate.is_finite(),
            "selection_gate must be finite and nonnegative"
        );
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        self.lambda_warmup.unwrap_or(total_steps / 5)
    }

    /// Effective λ before update `t` (0-based): `lambda_e · min(1, t / warmup)`.
    pub fn lambda_at(&self, t: usize, total_steps: usize) -> f64 {
        let w = self.warmup_steps(total_steps);
        if w == 0 {
            self.lambda_e
        } else {
            self.lambda_e * (t as f64 / w as f64).min(1.0)
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

/// SHA-256 of a value's JSON serialization, hex encoded.
pub fn hash_json<S: Serialize>(value: &S) -> String {
    let json = serde_json::to_vec(value).expect("plain data serializes");
    hex::encode(Sha256::digest(json))
}

/// One row of the loss series. `step` counts completed updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_ae: f64,
    pub l_dis: Option<f64>,
    pub l_adv: Option<f64>,
    pub l_total: f64,
    /// Class-balanced discriminator accuracy on the validation split, in
    /// percent; present on evaluation steps.
    #[serde(rename = "dis_val_acc")]
    pub dis_val_accuracy: Option<f64>,
}
