//! Deterministic training loop: shuffle, augment, forward, hybrid loss,
//! backward, optimiser step; per-epoch logging and best/last checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode};
use crate::data::batch::{batch_iter, make_batch};
use crate::data::checkpoint::save_checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::labels::LabelMap;
use crate::loss::hybrid_loss_from_logits;
use crate::metrics::dsc;
use crate::network::{Model, RunConfig, TrainConfig};
use crate::optim::{lr_at, Optimizer};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_dsc: f64,
    pub val_dsc: Option<f64>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let mut s =
            format!("epoch={} lr={:.6e} loss={:.6} train_dsc={:.6}", self.epoch, self.lr, self.loss, self.train_dsc);
        if let Some(v) = self.val_dsc {
            s.push_str(&format!(" val_dsc={v:.6}"));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub best_params: ParamStore<f32>,
    pub logs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_score: f64,
}

pub type LogSink<'a> = Box<dyn FnMut(&str) + 'a>;

/// Where and how a run reports.
#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Seed of the shuffle and augmentation streams.
    pub seed: u64,
    /// Scored after every epoch; selects the best checkpoint. Without it the
    /// mean training DSC is used.
    pub validation: Option<&'a Dataset>,
    /// Receives `best.mckp`, `last.mckp`, `config.txt` and `train.log`.
    pub out_dir: Option<PathBuf>,
    /// Config written next to the checkpoints.
    pub run_config: Option<RunConfig>,
    /// Called with each log line.
    pub log: Option<LogSink<'a>>,
}

fn first_non_finite<'a>(items: impl Iterator<Item = (&'a String, &'a Tensor<f32>)>) -> Option<String> {
    items.into_iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n.clone())
}

/// Mean foreground DSC of the argmax of `logits` against `labels`, averaged
/// over images.
pub fn batch_dsc(logits: &Tensor<f32>, labels: &LabelMap, k: usize) -> Result<f64> {
    let pred = LabelMap::argmax(logits)?;
    let mut total = 0.0;
    for i in 0..labels.batch() {
        total += dsc(&pred.item(i), &labels.item(i), k)?.mean;
    }
    Ok(total / labels.batch() as f64)
}

/// One optimisation step on a batch; returns `(loss, logits)`.
pub fn train_step(
    model: &Model,
    params: &mut ParamStore<f32>,
    opt: &mut Optimizer<f32>,
    images: &Tensor<f32>,
    labels: &LabelMap,
    lambda: f64,
) -> Result<(f64, Tensor<f32>)> {
    let mut g = Graph::new(Mode::Train);
    let x = g.constant(images.clone());
    let logits = model.forward(&mut g, params, x)?;
    let loss = hybrid_loss_from_logits(&mut g, logits, labels, lambda)?;
    let lv = g.value(loss).data()[0] as f64;
    if !lv.is_finite() {
        let culprit = first_non_finite(params.trainable()).unwrap_or_else(|| "none (activations overflowed)".into());
        return Err(Error::NonFinite(format!("loss is {lv}; first non-finite parameter: {culprit}")));
    }
    let grads = g.backward(loss)?.named(&g);
    if let Some(name) = first_non_finite(grads.iter().map(|(n, t)| (n, t))) {
        return Err(Error::NonFinite(format!("gradient of {name} is not finite")));
    }
    for (name, t) in g.take_buffer_updates() {
        params.set(&name, t)?;
    }
    opt.step(params, &grads)?;
    if let Some(name) = first_non_finite(params.trainable()) {
        return Err(Error::NonFinite(format!("parameter {name} became non-finite after the update")));
    }
    Ok((lv, g.value(logits).clone()))
}

pub fn train(
    model: &Model,
    mut params: ParamStore<f32>,
    cfg: &TrainConfig,
    data: &Dataset,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let k = model.config.num_classes;
    if data.num_classes != k {
        return Err(Error::Config(format!("dataset has {} classes, model predicts {k}", data.num_classes)));
    }
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir)?;
        if let Some(rc) = &opts.run_config {
            fs::write(dir.join("config.txt"), rc.to_text())?;
        }
    }
    let mut log_text = String::new();
    let mut emit = |line: String, opts: &mut TrainOptions<'_>| {
        if let Some(f) = opts.log.as_mut() {
            f(&line);
        }
        log_text.push_str(&line);
        log_text.push('\n');
    };

    let mut opt = Optimizer::from_config(cfg);
    let steps_per_epoch = data.len().div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let mut aug_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    aug_rng.set_stream(u64::MAX);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;

    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut dsc_sum, mut seen) = (0.0, 0.0, 0usize);
        let mut lr = cfg.lr;
        for batch in batch_iter(data.len(), cfg.batch_size, opts.seed, epoch as u64)? {
            lr = lr_at(cfg.lr, cfg.lr_schedule, opt.steps(), total);
            opt.lr = lr;
            let b = make_batch(data, &batch, cfg.aug_prob, &mut aug_rng)?;
            let (loss, logits) = train_step(model, &mut params, &mut opt, &b.images, &b.labels, cfg.lambda)?;
            let n = batch.len();
            loss_sum += loss * n as f64;
            dsc_sum += batch_dsc(&logits, &b.labels, k)? * n as f64;
            seen += n;
        }
        let val_dsc = match opts.validation {
            Some(v) => Some(evaluate(model, &params, v, 100.0, cfg.batch_size)?.mean_dsc),
            None => None,
        };
        let entry =
            EpochLog { epoch: epoch + 1, lr, loss: loss_sum / seen as f64, train_dsc: dsc_sum / seen as f64, val_dsc };
        emit(entry.line(), &mut opts);
        let score = val_dsc.unwrap_or(entry.train_dsc);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch + 1, params.clone()));
            if let Some(dir) = &opts.out_dir {
                save_checkpoint(dir.join("best.mckp"), &params)?;
            }
        }
        logs.push(entry);
    }

    let (best_score, best_epoch, best_params) = best.expect("at least one epoch");
    emit(format!("best_epoch={best_epoch} best_dsc={best_score:.6}"), &mut opts);
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(dir.join("last.mckp"), &params)?;
        fs::write(dir.join("train.log"), &log_text)?;
    }
    Ok(TrainOutcome { params, best_params, logs, best_epoch, best_score })
}

/// Paths written by [`train`] under `dir`.
pub fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("best.mckp"), dir.join("last.mckp"))
}
