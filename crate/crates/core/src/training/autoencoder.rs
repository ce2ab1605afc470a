use rand::Rng;

use super::batching::{batches_per_epoch, epoch_batches};
use super::{LossRecord, TrainConfig};
use crate::data::ImageSet;
use crate::error::{ensure, invalid, Result};
use crate::fairness::{accuracy_percent, balanced_accuracy_percent, LatentPredictor, EVAL_CHUNK};
use crate::nets::{ArchSpec, Decoder, Discriminator, Encoder, Network};
use crate::seeding::{stream_rng, Stream};
use crate::tensor::{Graph, Mode, Tensor, Var};

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0] as f64
}

fn check_batch(x: &Tensor, races: &[usize]) -> Result<()> {
    ensure!(!races.is_empty(), "empty batch");
    ensure!(
        x.shape()[0] == races.len(),
        "batch has {} images but {} attribute labels",
        x.shape()[0],
        races.len()
    );
    Ok(())
}

/// One discriminator update on the latents of a batch. The encoder runs with
/// batch statistics and receives no gradient; returns the mean NLL `L_dis`.
pub fn dis_step(enc: &Encoder, dis: &mut Discriminator, x: &Tensor, races: &[usize], eta: f64) -> Result<f64> {
    check_batch(x, races)?;
    let z = {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let z = enc.forward_batch_stats(&mut g, xv)?;
        g.value(z).clone()
    };
    let mut g = Graph::new();
    let zv = g.constant(z);
    let (logits, bound) = dis.forward(&mut g, zv, Mode::Train, true)?;
    let loss = g.softmax_nll(logits, races, None)?;
    g.backward(loss)?;
    dis.apply_grads(&g, &bound)?;
    dis.sgd_step(eta)?;
    Ok(scalar(&g, loss))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_ae: f64,
    /// Fooling term: cross-entropy between the discriminator output and the
    /// uniform distribution over attributes.
    pub l_adv: Option<f64>,
    pub l_total: f64,
}

/// One encoder/decoder update on `L_ae + λ·L_fool`. The discriminator, when
/// given, is evaluated with batch statistics and never modified. With `λ = 0`
/// the fooling term is reported but does not enter the gradient.
pub fn encdec_step(
    enc: &mut Encoder,
    dec: &mut Decoder,
    dis: Option<&Discriminator>,
    x: &Tensor,
    races: &[usize],
    eta: f64,
    lambda: f64,
) -> Result<StepLosses> {
    check_batch(x, races)?;
    ensure!(lambda >= 0.0 && lambda.is_finite(), "lambda must be finite and nonnegative");
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let (z, enc_vars) = enc.forward(&mut g, xv, Mode::Train, true)?;
    let (recon, dec_vars) = dec.forward(&mut g, z, races, Mode::Train, true)?;
    let l_ae = g.mse_loss(recon, xv)?;
    let mut total = l_ae;
    let mut l_adv = None;
    if let Some(dis) = dis {
        let logits = dis.forward_batch_stats(&mut g, z)?;
        let k = g.shape(logits)[1];
        let uniform = Tensor::full(&[races.len(), k], 1.0 / k as f32);
        let fool = g.cross_entropy(logits, &uniform)?;
        l_adv = Some(scalar(&g, fool));
        if lambda > 0.0 {
            let weighted = g.scale(fool, lambda as f32)?;
            total = g.add(l_ae, weighted)?;
        }
    }
    g.backward(total)?;
    enc.apply_grads(&g, &enc_vars)?;
    dec.apply_grads(&g, &dec_vars)?;
    enc.sgd_step(eta)?;
    dec.sgd_step(eta)?;
    Ok(StepLosses {
        l_ae: scalar(&g, l_ae),
        l_adv,
        l_total: scalar(&g, total),
    })
}

/// Eval-mode metrics on a held-out set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValMetrics {
    /// Mean squared reconstruction error.
    pub l_ae: f64,
    /// Class-balanced discriminator accuracy (percent).
    pub dis_accuracy: Option<f64>,
    /// Plain discriminator accuracy (percent).
    pub dis_plain_accuracy: Option<f64>,
}

pub fn validate(enc: &Encoder, dec: &Decoder, dis: Option<&Discriminator>, val: &ImageSet) -> Result<ValMetrics> {
    ensure!(!val.is_empty(), "validation set is empty");
    let n = val.len();
    let mut sse = 0.0f64;
    let mut preds = Vec::with_capacity(n);
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let x = val.images.slice_outer(start, end)?;
        let z = enc.encode(&x)?;
        let recon = dec.decode(&z, &val.races[start..end])?;
        sse += recon
            .data()
            .iter()
            .zip(x.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>();
        if let Some(dis) = dis {
            preds.extend(dis.predict(&z)?);
        }
    }
    let (dis_accuracy, dis_plain_accuracy) = match dis {
        Some(dis) => (
            Some(balanced_accuracy_percent(&preds, &val.races, dis.spec().num_attrs)?),
            Some(accuracy_percent(&preds, &val.races)?),
        ),
        None => (None, None),
    };
    Ok(ValMetrics {
        l_ae: sse / val.images.numel() as f64,
        dis_accuracy,
        dis_plain_accuracy,
    })
}

/// Model state and metrics after `step` updates.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: usize,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discriminator: Option<Discriminator>,
    /// Training losses of the update that produced this state.
    pub record: LossRecord,
    pub val: ValMetrics,
    /// Effective λ of that update.
    pub lambda: f64,
    pub config_hash: String,
}

/// Continue a run from its last checkpoint.
#[derive(Clone, Debug, Default)]
pub struct Resume {
    /// Every checkpoint written so far, in step order.
    pub checkpoints: Vec<Checkpoint>,
    /// Loss series up to at least the last checkpoint.
    pub series: Vec<LossRecord>,
}

pub type CheckpointSink<'a> = dyn FnMut(&Checkpoint, &[LossRecord]) -> Result<()> + 'a;

#[derive(Default)]
pub struct Hooks<'a> {
    pub resume: Option<Resume>,
    /// Called with each new checkpoint and the series so far.
    pub on_checkpoint: Option<&'a mut CheckpointSink<'a>>,
}

#[derive(Clone, Debug)]
pub struct AeRun {
    pub series: Vec<LossRecord>,
    pub checkpoints: Vec<Checkpoint>,
    /// Index of the selected checkpoint.
    pub selected: usize,
    pub config_hash: String,
}

impl AeRun {
    pub fn selected_checkpoint(&self) -> &Checkpoint {
        &self.checkpoints[self.selected]
    }

    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("a finished run has checkpoints")
    }
}

/// Among checkpoints whose validation reconstruction loss is within
/// `(1 + gate)` of the best, picks the lowest discriminator accuracy, or the
/// lowest reconstruction loss when there is no discriminator. Ties go to the
/// later checkpoint.
pub fn select_checkpoint(val: &[ValMetrics], gate: f64) -> Option<usize> {
    let best = val.iter().map(|v| v.l_ae).fold(f64::INFINITY, f64::min);
    let eligible = |v: &ValMetrics| v.l_ae <= best * (1.0 + gate);
    let key = |v: &ValMetrics| v.dis_accuracy.unwrap_or(v.l_ae);
    let mut chosen: Option<usize> = None;
    for (i, v) in val.iter().enumerate() {
        if eligible(v) && chosen.is_none_or(|c| key(v) <= key(&val[c])) {
            chosen = Some(i);
        }
    }
    chosen
}

fn check_data(train: &ImageSet, val: &ImageSet, spec: &ArchSpec) -> Result<()> {
    spec.validate()?;
    let want = [spec.input_channels, spec.input_size, spec.input_size];
    for (name, set) in [("training", train), ("validation", val)] {
        ensure!(!set.is_empty(), "{name} set is empty");
        ensure!(
            set.image_shape() == want,
            "{name} images are {:?}, architecture expects {want:?}",
            set.image_shape()
        );
        if let Some(&r) = set.races.iter().find(|&&r| r >= spec.num_attrs) {
            return Err(invalid!("{name} set has race {r} outside [0, {})", spec.num_attrs));
        }
    }
    ensure!(train.len() >= 2, "training set needs at least 2 images");
    Ok(())
}

fn flip_rows(x: &mut Tensor, seed: u64, step: usize) {
    let mut rng = stream_rng(seed, Stream::Flip, step as u64);
    let shape = x.shape().to_vec();
    let (per, w) = (shape[1..].iter().product::<usize>(), shape[3]);
    for sample in x.data_mut().chunks_mut(per) {
        if rng.random::<bool>() {
            for row in sample.chunks_mut(w) {
                row.reverse();
            }
        }
    }
}

fn run(
    train: &ImageSet,
    val: &ImageSet,
    spec: &ArchSpec,
    cfg: &TrainConfig,
    adversarial: bool,
    attr_planes: usize,
    hooks: Hooks<'_>,
) -> Result<AeRun> {
    cfg.validate()?;
    check_data(train, val, spec)?;
    let config_hash = cfg.hash();
    let bpe = batches_per_epoch(train.len(), cfg.batch_size);
    let total = cfg.epochs * bpe;
    let (mut checkpoints, mut series) = match hooks.resume {
        Some(r) => (r.checkpoints, r.series),
        None => (Vec::new(), Vec::new()),
    };
    let (mut enc, mut dec, mut dis, start) = match checkpoints.last() {
        Some(c) => {
            ensure!(
                c.config_hash == config_hash,
                "checkpoint was trained with config {}, not {config_hash}",
                c.config_hash
            );
            ensure!(c.step <= total, "checkpoint step {} exceeds the {total} planned steps", c.step);
            ensure!(
                c.discriminator.is_some() == adversarial && c.decoder.attr_planes() == attr_planes,
                "checkpoint models do not match this trainer"
            );
            series.retain(|r| r.step <= c.step);
            ensure!(
                series.len() == c.step && series.iter().enumerate().all(|(i, r)| r.step == i + 1),
                "loss series does not cover steps 1..={}",
                c.step
            );
            (c.encoder.clone(), c.decoder.clone(), c.discriminator.clone(), c.step)
        }
        None => (
            Encoder::build(spec, &mut stream_rng(cfg.seed, Stream::EncoderInit, 0))?,
            Decoder::build(spec, attr_planes, &mut stream_rng(cfg.seed, Stream::DecoderInit, 0))?,
            if adversarial {
                Some(Discriminator::build(spec, &mut stream_rng(cfg.seed, Stream::DiscriminatorInit, 0))?)
            } else {
                None
            },
            0,
        ),
    };
    let mut sink = hooks.on_checkpoint;
    for epoch in start / bpe.max(1)..cfg.epochs {
        let plan = epoch_batches(&train.races, cfg.batch_size, cfg.sampling, cfg.seed, epoch);
        for (b, idx) in plan.iter().enumerate() {
            let t = epoch * bpe + b;
            if t < start {
                continue;
            }
            let batch = train.select(idx)?;
            let mut x = batch.images;
            if cfg.hflip {
                flip_rows(&mut x, cfg.seed, t);
            }
            let races = batch.races;
            let l_dis = match dis.as_mut() {
                Some(d) => Some(dis_step(&enc, d, &x, &races, cfg.eta)?),
                None => None,
            };
            let lambda = if adversarial { cfg.lambda_at(t, total) } else { 0.0 };
            let losses = encdec_step(&mut enc, &mut dec, dis.as_ref(), &x, &races, cfg.eta, lambda)?;
            let mut record = LossRecord {
                step: t + 1,
                l_ae: losses.l_ae,
                l_dis,
                l_adv: losses.l_adv,
                l_total: losses.l_total,
                dis_val_accuracy: None,
            };
            ensure!(
                [record.l_ae, record.l_total, l_dis.unwrap_or(0.0)].iter().all(|v| v.is_finite()),
                "training diverged at step {}: non-finite loss",
                t + 1
            );
            if (t + 1).is_multiple_of(cfg.eval_every) || t + 1 == total {
                let metrics = validate(&enc, &dec, dis.as_ref(), val)?;
                record.dis_val_accuracy = metrics.dis_accuracy;
                series.push(record.clone());
                let ckpt = Checkpoint {
                    step: t + 1,
                    encoder: enc.clone(),
                    decoder: dec.clone(),
                    discriminator: dis.clone(),
                    record,
                    val: metrics,
                    lambda,
                    config_hash: config_hash.clone(),
                };
                if let Some(s) = sink.as_mut() {
                    s(&ckpt, &series)?;
                }
                checkpoints.push(ckpt);
            } else {
                series.push(record);
            }
        }
    }
    ensure!(!checkpoints.is_empty(), "training produced no checkpoint");
    let metrics: Vec<ValMetrics> = checkpoints.iter().map(|c| c.val).collect();
    let selected = select_checkpoint(&metrics, cfg.selection_gate).expect("nonempty");
    Ok(AeRun {
        series,
        checkpoints,
        selected,
        config_hash,
    })
}

/// Alternates [`dis_step`] and [`encdec_step`] on every batch, validating and
/// checkpointing every `eval_every` steps and at the end.
pub fn train_fader(train: &ImageSet, val: &ImageSet, spec: &ArchSpec, cfg: &TrainConfig, hooks: Hooks<'_>) -> Result<AeRun> {
    run(train, val, spec, cfg, true, spec.num_attrs, hooks)
}

/// Reconstruction-only training; `attr_planes` is 0 for the vanilla
/// autoencoder or `num_attrs` for an attribute-conditioned decoder.
pub fn train_autoencoder(
    train: &ImageSet,
    val: &ImageSet,
    spec: &ArchSpec,
    attr_planes: usize,
    cfg: &TrainConfig,
    hooks: Hooks<'_>,
) -> Result<AeRun> {
    run(train, val, spec, cfg, false, attr_planes, hooks)
}

pub fn train_vanilla_ae(train: &ImageSet, val: &ImageSet, spec: &ArchSpec, cfg: &TrainConfig, hooks: Hooks<'_>) -> Result<AeRun> {
    train_autoencoder(train, val, spec, 0, cfg, hooks)
}
