use serde::{Deserialize, Serialize};

use super::batching::{batches_per_epoch, epoch_batches, Sampling};
use crate::data::ImageSet;
use crate::error::{ensure, invalid, Result};
use crate::fairness::EVAL_CHUNK;
use crate::nets::{ArchSpec, Classifier, Discriminator, Encoder, Network};
use crate::seeding::{stream_rng, Stream};
use crate::tensor::{argmax_rows, Graph, Mode, Tensor};

/// Frozen latents of an image set with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSet {
    /// `[N, C_z, s, s]`
    pub latents: Tensor,
    pub genders: Vec<usize>,
    pub races: Vec<usize>,
    pub source_ids: Vec<String>,
}

impl LatentSet {
    pub fn len(&self) -> usize {
        self.races.len()
    }

    pub fn is_empty(&self) -> bool {
        self.races.is_empty()
    }
}

/// Encodes a set in eval mode.
pub fn encode_set(enc: &Encoder, set: &ImageSet) -> Result<LatentSet> {
    ensure!(!set.is_empty(), "cannot encode an empty set");
    let n = set.len();
    let mut chunks = Vec::new();
    for start in (0..n).step_by(EVAL_CHUNK) {
        chunks.push(enc.encode(&set.images.slice_outer(start, (start + EVAL_CHUNK).min(n))?)?);
    }
    let refs: Vec<&Tensor> = chunks.iter().collect();
    Ok(LatentSet {
        latents: Tensor::concat_outer(&refs)?,
        genders: set.genders.clone(),
        races: set.races.clone(),
        source_ids: set.source_ids.clone(),
    })
}

/// Inverse-frequency race weights normalized to mean 1:
/// `w_k = (1/f_k) / mean_j(1/f_j)`.
pub fn class_weights(freqs: &[f64]) -> Result<Vec<f64>> {
    ensure!(!freqs.is_empty(), "no class frequencies");
    if let Some((k, f)) = freqs.iter().enumerate().find(|(_, f)| !(**f > 0.0 && f.is_finite())) {
        return Err(invalid!("class {k} has frequency {f}; every class needs a positive frequency"));
    }
    let sum: f64 = freqs.iter().sum();
    ensure!((sum - 1.0).abs() <= 1e-6, "class frequencies sum to {sum}, not 1");
    let inv: Vec<f64> = freqs.iter().map(|f| 1.0 / f).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.into_iter().map(|w| w / mean).collect())
}

/// Per-sample loss weights looked up by race.
pub fn sample_weights(races: &[usize], race_weights: &[f64]) -> Result<Vec<f32>> {
    races
        .iter()
        .map(|&r| {
            race_weights
                .get(r)
                .map(|&w| w as f32)
                .ok_or_else(|| invalid!("race {r} has no weight ({} given)", race_weights.len()))
        })
        .collect()
}

/// SGD settings for networks trained on frozen latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub eta: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampling: Sampling,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            eta: 0.01,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            sampling: Sampling::Shuffle,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.eta >= 0.0 && self.eta.is_finite(), "eta must be finite and nonnegative, got {}", self.eta);
        ensure!(self.batch_size >= 2, "batch_size must be at least 2, got {}", self.batch_size);
        ensure!(self.epochs >= 1, "epochs must be at least 1");
        Ok(())
    }
}

/// Loss and accuracy (percent) of one training batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub step: usize,
    pub loss: f64,
    pub batch_accuracy: f64,
}

fn check_latents(spec: &ArchSpec, data: &LatentSet) -> Result<()> {
    spec.validate()?;
    ensure!(data.len() >= 2, "need at least 2 latents to train, got {}", data.len());
    let shape = data.latents.shape();
    ensure!(
        shape[0] == data.len() && shape[1..] == spec.latent_shape(),
        "latents are {shape:?}, expected [{}, {:?}]",
        data.len(),
        spec.latent_shape()
    );
    ensure!(data.genders.len() == data.len(), "gender labels do not match latents");
    if let Some(&r) = data.races.iter().find(|&&r| r >= spec.num_attrs) {
        return Err(invalid!("race {r} outside [0, {})", spec.num_attrs));
    }
    if let Some(&y) = data.genders.iter().find(|&&y| y >= crate::data::GENDERS) {
        return Err(invalid!("gender {y} outside [0, {})", crate::data::GENDERS));
    }
    Ok(())
}

fn batch_accuracy(g: &Graph, logits: crate::tensor::Var, labels: &[usize]) -> f64 {
    let hits = argmax_rows(g.value(logits)).iter().zip(labels).filter(|(p, t)| p == t).count();
    100.0 * hits as f64 / labels.len() as f64
}

/// Trains a gender classifier on frozen latents. With `race_weights` each
/// sample's loss is scaled by the weight of its race.
pub fn train_classifier(
    spec: &ArchSpec,
    data: &LatentSet,
    cfg: &ClassifierConfig,
    race_weights: Option<&[f64]>,
) -> Result<(Classifier, Vec<FitRecord>)> {
    cfg.validate()?;
    check_latents(spec, data)?;
    if let Some(w) = race_weights {
        ensure!(
            w.len() == spec.num_attrs,
            "{} race weights given for {} races",
            w.len(),
            spec.num_attrs
        );
        ensure!(w.iter().all(|v| *v >= 0.0 && v.is_finite()), "race weights must be finite and nonnegative");
    }
    let mut clf = Classifier::build(spec, &mut stream_rng(cfg.seed, Stream::ClassifierInit, 0))?;
    let bpe = batches_per_epoch(data.len(), cfg.batch_size);
    let mut log = Vec::with_capacity(cfg.epochs * bpe);
    for epoch in 0..cfg.epochs {
        for (b, idx) in epoch_batches(&data.races, cfg.batch_size, cfg.sampling, cfg.seed, epoch)
            .iter()
            .enumerate()
        {
            let t = epoch * bpe + b;
            let labels: Vec<usize> = idx.iter().map(|&i| data.genders[i]).collect();
            let races: Vec<usize> = idx.iter().map(|&i| data.races[i]).collect();
            let weights = race_weights.map(|w| sample_weights(&races, w)).transpose()?;
            let mut g = Graph::new();
            let z = g.constant(data.latents.select_outer(idx)?);
            let mut rng = stream_rng(cfg.seed, Stream::Dropout, t as u64);
            let (logits, bound) = clf.forward(&mut g, z, Mode::Train, true, &mut rng)?;
            let loss = g.softmax_nll(logits, &labels, weights.as_deref())?;
            g.backward(loss)?;
            clf.apply_grads(&g, &bound)?;
            clf.sgd_step(cfg.eta)?;
            let value = g.value(loss).data()[0] as f64;
            ensure!(value.is_finite(), "classifier training diverged at step {}", t + 1);
            log.push(FitRecord {
                step: t + 1,
                loss: value,
                batch_accuracy: batch_accuracy(&g, logits, &labels),
            });
        }
    }
    Ok((clf, log))
}

/// Trains a fresh discriminator to predict race from frozen latents, measuring
/// how much attribute information they carry.
pub fn train_probe(spec: &ArchSpec, data: &LatentSet, cfg: &ClassifierConfig) -> Result<(Discriminator, Vec<FitRecord>)> {
    cfg.validate()?;
    check_latents(spec, data)?;
    let mut probe = Discriminator::build(spec, &mut stream_rng(cfg.seed, Stream::ProbeInit, 0))?;
    let bpe = batches_per_epoch(data.len(), cfg.batch_size);
    let mut log = Vec::with_capacity(cfg.epochs * bpe);
    for epoch in 0..cfg.epochs {
        for (b, idx) in epoch_batches(&data.races, cfg.batch_size, cfg.sampling, cfg.seed, epoch)
            .iter()
            .enumerate()
        {
            let t = epoch * bpe + b;
            let labels: Vec<usize> = idx.iter().map(|&i| data.races[i]).collect();
            let mut g = Graph::new();
            let z = g.constant(data.latents.select_outer(idx)?);
            let (logits, bound) = probe.forward(&mut g, z, Mode::Train, true)?;
            let loss = g.softmax_nll(logits, &labels, None)?;
            g.backward(loss)?;
            probe.apply_grads(&g, &bound)?;
            probe.sgd_step(cfg.eta)?;
            let value = g.value(loss).data()[0] as f64;
            ensure!(value.is_finite(), "probe training diverged at step {}", t + 1);
            log.push(FitRecord {
                step: t + 1,
                loss: value,
                batch_accuracy: batch_accuracy(&g, logits, &labels),
            });
        }
    }
    Ok((probe, log))
}
