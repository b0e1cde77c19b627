//! SGD training with cosine annealing, augmentation and early stopping on
//! validation balanced accuracy.

mod augment;
pub mod checkpoint;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, hflip, rotate, scale, shift, vflip, AugmentConfig, Dims};
pub use optim::{cosine_lr, Sgd};

use crate::autodiff::{Array, Graph};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{balanced_accuracy, confusion};
use crate::layers::{apply_stat_updates, Mode, BN_MOMENTUM};
use crate::params::{ParamId, ParamStore};
use crate::structures::{argmax, class_weights_from_counts, total_loss, Model, ReportMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub eta_min: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta: f64,
    pub momentum: f64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            lr0: 0.005,
            eta_min: 0.0,
            patience: 30,
            batch_size: 16,
            seed: 0,
            beta: 0.5,
            momentum: 0.0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.eta_min >= 0.0 && self.eta_min <= self.lr0) {
            return bad(format!("eta_min must lie in [0, lr0], got {}", self.eta_min));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_i: Option<f64>,
    pub l_m: Option<f64>,
    pub l_im: Option<f64>,
    pub val_bac: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochBudget,
    Patience,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_bac: f64,
    pub stop: StopReason,
}

impl TrainLog {
    /// CSV with columns `epoch,lr,L_I,L_M,L_IM,val_bac`; absent loss
    /// components are empty fields.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("epoch,lr,L_I,L_M,L_IM,val_bac\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                opt(r.l_i),
                opt(r.l_m),
                opt(r.l_im),
                r.val_bac
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation BAC.
    pub params: ParamStore,
    pub log: TrainLog,
}

/// Splits a shuffled order into batches, folding a trailing singleton into
/// the previous batch (batch norm needs two samples).
pub fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(last);
    }
    out
}

/// Eval-mode scores for the given samples, using the structure's report mode.
pub fn predict_scores(
    model: &Model,
    ps: &ParamStore,
    data: &Dataset,
    indices: &[usize],
    report: ReportMode,
) -> Result<Array> {
    let mut rows = Vec::with_capacity(indices.len() * model.classes());
    for chunk in indices.chunks(64) {
        let triple = model.predict(ps, &data.image_batch(chunk), &data.meta_batch(chunk))?;
        rows.extend_from_slice(triple.scores(model.structure(), report)?.data());
    }
    Array::new(vec![indices.len(), model.classes()], rows)
}

/// Trains `model` starting from `ps`, returning the best-validation
/// parameters and the per-epoch log.
pub fn train(
    model: &Model,
    ps: &ParamStore,
    data: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
    report: ReportMode,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config(format!(
            "empty split: {} training and {} validation samples",
            train_idx.len(),
            val_idx.len()
        )));
    }
    if train_idx.iter().any(|i| val_idx.contains(i)) {
        return Err(Error::Contract("training and validation sets overlap".into()));
    }
    let weights = class_weights_from_counts(&data.class_counts(train_idx))?;
    let val_labels = data.label_batch(val_idx);
    let (c, h, w) = data.image_shape();
    let dims = Dims { c, h, w };
    let trainable: Vec<ParamId> = ps.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(cfg.momentum);
    let mut current = ps.clone();
    let mut best = ps.clone();
    let mut best_epoch = 0;
    let mut best_bac = f64::NEG_INFINITY;
    let mut records = Vec::new();
    let mut stop = StopReason::EpochBudget;
    let mut order = train_idx.to_vec();

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr0, cfg.eta_min)?;
        order.shuffle(&mut rng);
        let mut sums = [0.0; 3];
        let mut seen = [false; 3];
        for batch in batches(&order, cfg.batch_size) {
            let mut images = data.image_batch(&batch);
            if !cfg.augment.is_disabled() {
                let plane = c * h * w;
                for img in images.data_mut().chunks_mut(plane) {
                    let out = augment(img, dims, &cfg.augment, &mut rng);
                    img.copy_from_slice(&out);
                }
            }
            let labels = data.label_batch(&batch);
            let mut g = Graph::new();
            let x = g.constant(images);
            let m = g.constant(data.meta_batch(&batch));
            let logits = model.forward(&mut g, &current, x, m, Mode::Train)?;
            let loss = total_loss(&mut g, model.structure(), &logits, &labels, &weights, cfg.beta)?;
            g.backward(loss.total)?;
            for (k, term) in [loss.l_i, loss.l_m, loss.l_im].into_iter().enumerate() {
                if let Some(v) = term {
                    sums[k] += g.value(v).data()[0] * batch.len() as f64;
                    seen[k] = true;
                }
            }
            let grads: Vec<(ParamId, &[f64])> =
                trainable.iter().filter_map(|&id| g.param_grad(id).map(|gr| (id, gr))).collect();
            sgd.step(&mut current, &grads, lr)?;
            let updates = g.take_stat_updates();
            apply_stat_updates(&mut current, &updates, BN_MOMENTUM);
        }
        let scores = predict_scores(model, &current, data, val_idx, report)?;
        let preds: Vec<usize> = scores.rows().map(argmax).collect();
        let val_bac = balanced_accuracy(&confusion(&val_labels, &preds, model.classes())?)?;
        let mean = |k: usize| seen[k].then(|| sums[k] / order.len() as f64);
        records.push(EpochRecord {
            epoch,
            lr,
            l_i: mean(0),
            l_m: mean(1),
            l_im: mean(2),
            val_bac,
        });
        log::debug!("epoch {epoch}: lr {lr:.6}, val BAC {val_bac:.4}");
        if val_bac > best_bac {
            best_bac = val_bac;
            best_epoch = epoch;
            best = current.clone();
        } else if epoch - best_epoch >= cfg.patience {
            stop = StopReason::Patience;
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        log: TrainLog {
            records,
            best_epoch,
            best_val_bac: best_bac,
            stop,
        },
    })
}
