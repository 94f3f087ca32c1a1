//! AdamW training with gradient accumulation, early stopping on validation
//! macro-F1, and split evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::docfeat::{DatasetSplit, DocFeatureBundle};
use crate::error::{HmtError, Result};
use crate::exec::Exec;
use crate::metrics::{argmax, metrics_from_predictions, MetricsReport};
use crate::model::{loss_and_gradients, model_forward};
use crate::params::{to_f32_grid, Gradients, ModelParams};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// AdamW with decoupled weight decay. Updated parameters are rounded back
/// onto the f32 grid so checkpoints reload bit-exactly.
#[derive(Debug, Clone, Default)]
pub struct AdamW {
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64, weight_decay: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| HmtError::UnknownParam(name.to_string()))?;
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
                *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
                *w = to_f32_grid(*w - lr * (update + weight_decay * *w));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation macro-F1.
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
}

/// Document order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(docs: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..docs).collect();
    order.shuffle(&mut rng);
    order
}

fn check_dims(split: &DatasetSplit, cfg: &TrainConfig) -> Result<()> {
    if let Some(doc) = split.docs.first() {
        if doc.d != cfg.d || doc.r != cfg.r {
            return Err(HmtError::Config(format!(
                "split {:?} has (d, r) = ({}, {}), config has ({}, {})",
                split.tag, doc.d, doc.r, cfg.d, cfg.r
            )));
        }
    }
    Ok(())
}

fn numeric_context(err: HmtError, epoch: usize, doc: &DocFeatureBundle) -> HmtError {
    if err.is_numeric() {
        HmtError::NonFiniteLoss {
            epoch,
            doc_id: doc.doc_id.clone(),
        }
    } else {
        err
    }
}

/// Mean loss over the batch and the batch-averaged gradients. Documents are
/// processed through `exec`; the sum runs in document order.
pub fn batch_gradients(
    docs: &[&DocFeatureBundle],
    params: &ModelParams,
    cfg: &TrainConfig,
    exec: Exec,
    epoch: usize,
) -> Result<(Vec<f64>, Gradients)> {
    let results = exec.map(docs, |doc| loss_and_gradients(doc, params, cfg));
    let mut losses = Vec::with_capacity(docs.len());
    let mut total: Option<Gradients> = None;
    for (res, doc) in results.into_iter().zip(docs) {
        let (loss, grads) = res.map_err(|e| numeric_context(e, epoch, doc))?;
        if !loss.is_finite() {
            return Err(HmtError::NonFiniteLoss {
                epoch,
                doc_id: doc.doc_id.clone(),
            });
        }
        losses.push(loss);
        match &mut total {
            None => total = Some(grads),
            Some(acc) => {
                for (name, g) in grads {
                    let a = acc.get_mut(&name).expect("same parameter set");
                    a.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut total = total.ok_or(HmtError::EmptySplit)?;
    let scale = 1.0 / docs.len() as f64;
    for g in total.values_mut() {
        g.iter_mut().for_each(|x| *x *= scale);
    }
    Ok((losses, total))
}

pub fn predict(split: &DatasetSplit, params: &ModelParams, cfg: &TrainConfig, exec: Exec) -> Result<Vec<usize>> {
    exec.map(&split.docs, |doc| model_forward(doc, params, cfg).map(|o| argmax(o.logits.data())))
        .into_iter()
        .collect()
}

pub fn evaluate(split: &DatasetSplit, params: &ModelParams, cfg: &TrainConfig, exec: Exec) -> Result<MetricsReport> {
    if split.docs.is_empty() {
        return Err(HmtError::EmptySplit);
    }
    check_dims(split, cfg)?;
    let predictions = predict(split, params, cfg, exec)?;
    let labels: Vec<usize> = split.docs.iter().map(|d| d.label as usize).collect();
    metrics_from_predictions(&predictions, &labels, cfg.classes)
}

pub fn train(
    train_split: &DatasetSplit,
    val_split: &DatasetSplit,
    cfg: &TrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_split.docs.is_empty() || val_split.docs.is_empty() {
        return Err(HmtError::EmptySplit);
    }
    check_dims(train_split, cfg)?;
    check_dims(val_split, cfg)?;

    let mut params = ModelParams::init(cfg)?;
    let mut opt = AdamW::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let order = epoch_order(train_split.docs.len(), cfg.seed, epoch);
        let mut doc_losses = vec![0.0; train_split.docs.len()];
        for chunk in order.chunks(cfg.batch) {
            let docs: Vec<&DocFeatureBundle> = chunk.iter().map(|&i| &train_split.docs[i]).collect();
            let (losses, grads) = batch_gradients(&docs, &params, cfg, exec, epoch)?;
            for (&i, loss) in chunk.iter().zip(losses) {
                doc_losses[i] = loss;
            }
            opt.step(&mut params, &grads, cfg.lr, cfg.weight_decay)?;
        }
        if !params.is_finite() {
            return Err(HmtError::NonFiniteLoss {
                epoch,
                doc_id: String::from("<parameters>"),
            });
        }
        let report = evaluate(val_split, &params, cfg, exec)?;
        let record = EpochRecord {
            epoch,
            train_loss: doc_losses.iter().sum::<f64>() / train_split.docs.len() as f64,
            val_accuracy: report.accuracy,
            val_macro_f1: report.macro_f1,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        log.push(record);

        if best.as_ref().is_none_or(|(_, f1, _)| report.macro_f1 > *f1) {
            best = Some((epoch, report.macro_f1, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_macro_f1, best_params) = match best {
        Some(b) => b,
        None => (0, 0.0, params),
    };
    Ok(TrainOutcome {
        params: best_params,
        log,
        best_epoch,
        best_val_macro_f1,
    })
}
