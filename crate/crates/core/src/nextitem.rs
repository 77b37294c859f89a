//! Mean-pooled next-item model with tied item embeddings.
//!
//! A prefix is represented by the mean of its item rows; each catalog item
//! scores `pooled · E_x` and the loss is full-softmax cross-entropy.

use std::io::Write;
use std::rc::Rc;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, AdamConfig, Matrix, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::evalkit::{hit_at, mean, reciprocal_at};
use crate::sessiondata::PrefixSample;

#[derive(Debug, Clone, PartialEq)]
pub enum InitMode<'a> {
    ScaledUniform,
    Pretrained(&'a Matrix),
}

/// `m × d` table: uniform in `±√(6/(m + d))`, or a copy of `source`.
pub fn init_table<R: Rng>(mode: InitMode<'_>, m: usize, d: usize, rng: &mut R) -> Result<Matrix> {
    match mode {
        InitMode::ScaledUniform => {
            let bound = (6.0 / (m + d) as f64).sqrt();
            Ok(Array2::from_shape_fn((m, d), |_| rng.gen_range(-bound..bound)))
        }
        InitMode::Pretrained(src) => {
            if src.dim() != (m, d) {
                let (r, c) = src.dim();
                return Err(Error::shape("init_table", format!("source is {r}x{c}, table is {m}x{d}")));
            }
            Ok(src.clone())
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NextItemModel {
    pub params: ParamStore,
    table: ParamId,
}

impl NextItemModel {
    pub fn new(table: Matrix) -> Self {
        let mut params = ParamStore::new();
        let table = params.add("item_embeddings", table);
        Self { params, table }
    }

    pub fn table(&self) -> &Matrix {
        self.params.value(self.table)
    }

    pub fn item_count(&self) -> usize {
        self.table().nrows()
    }

    fn pooling(&self, prefixes: &[&[usize]]) -> Result<Matrix> {
        let m = self.item_count();
        let mut p = Array2::zeros((prefixes.len(), m));
        for (r, prefix) in prefixes.iter().enumerate() {
            if prefix.is_empty() {
                return Err(Error::Contract("empty prefix".into()));
            }
            let w = 1.0 / prefix.len() as f64;
            for &x in prefix.iter() {
                if x >= m {
                    return Err(Error::shape("next_item", format!("item {x} outside {m} table rows")));
                }
                p[[r, x]] += w;
            }
        }
        Ok(p)
    }

    /// Logits `batch × m` (no gradient).
    pub fn scores(&self, prefixes: &[&[usize]]) -> Result<Matrix> {
        let pooled = self.pooling(prefixes)?.dot(self.table());
        Ok(pooled.dot(&self.table().t()))
    }

    /// Records the mean cross-entropy of a batch on `tape`; returns the loss
    /// and the bound table variable.
    pub fn loss(&self, tape: &mut Tape, batch: &[&PrefixSample]) -> Result<(crate::diffcore::Var, crate::diffcore::Bound)> {
        let bound = self.params.bind(tape);
        let e = bound[self.table];
        let prefixes: Vec<&[usize]> = batch.iter().map(|s| s.prefix.as_slice()).collect();
        let p = tape.constant(self.pooling(&prefixes)?);
        let pooled = tape.matmul(p, e)?;
        let et = tape.transpose(e)?;
        let logits = tape.matmul(pooled, et)?;
        let targets: Rc<[usize]> = batch.iter().map(|s| s.target).collect();
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.item_count()) {
            return Err(Error::shape("next_item", format!("target {bad} outside catalog")));
        }
        let loss = tape.cross_entropy_with_logits(logits, targets)?;
        Ok((loss, bound))
    }
}

/// 1-based rank of `target` under (−score, index) ordering.
pub fn rank_in_scores(scores: ndarray::ArrayView1<'_, f64>, target: usize) -> usize {
    let s = scores[target];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(x, &v)| v > s || (v == s && x < target))
        .count()
}

/// Ranks of every sample's target.
pub fn target_ranks(model: &NextItemModel, samples: &[PrefixSample]) -> Result<Vec<usize>> {
    let mut ranks = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(512) {
        let prefixes: Vec<&[usize]> = chunk.iter().map(|s| s.prefix.as_slice()).collect();
        let scores = model.scores(&prefixes)?;
        for (row, s) in scores.axis_iter(Axis(0)).zip(chunk) {
            ranks.push(rank_in_scores(row, s.target));
        }
    }
    Ok(ranks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NextItemConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for NextItemConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl NextItemConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("nextitem.batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("nextitem.lr = {} must be positive", self.lr));
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_hr10: f64,
    pub val_mrr10: f64,
    pub wall_seconds: f64,
}

/// Minibatch Adam over the training prefixes, evaluating HR@10 and MRR@10
/// on `validation` after every epoch.
pub fn train_next(
    model: &mut NextItemModel,
    train: &[PrefixSample],
    validation: &[PrefixSample],
    config: &NextItemConfig,
) -> Result<Vec<EpochRecord>> {
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut history = Vec::new();
    for epoch in 1..=config.epochs {
        let clock = Instant::now();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for (batch_no, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PrefixSample> = idx.iter().map(|&k| &train[k]).collect();
            let mut tape = Tape::new();
            let step = model.loss(&mut tape, &batch).and_then(|(loss, bound)| {
                tape.backward(loss)?;
                Ok((loss, bound))
            });
            let (loss, bound) = match step {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_no,
                        loss: f64::NAN,
                        history,
                    })
                }
                Err(e) => return Err(e),
            };
            let value = tape.scalar_value(loss);
            history.push(value);
            losses.push(value);
            model.params.pull_grads(&tape, &bound);
            opt.adam_step(&mut [&mut model.params]);
        }
        let ranks = target_ranks(model, validation)?;
        let hr: Vec<f64> = ranks.iter().map(|&r| hit_at(Some(r), 10)).collect();
        let rr: Vec<f64> = ranks.iter().map(|&r| reciprocal_at(Some(r), 10)).collect();
        log.push(EpochRecord {
            epoch,
            train_loss: mean(&losses),
            val_hr10: mean(&hr),
            val_mrr10: mean(&rr),
            wall_seconds: clock.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

/// Tab-separated log, one row per epoch.
pub fn write_log<W: Write>(mut w: W, log: &[EpochRecord]) -> Result<()> {
    writeln!(w, "epoch\ttrain_loss\tval_hr10\tval_mrr10\twall_seconds")?;
    for r in log {
        writeln!(
            w,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            r.epoch, r.train_loss, r.val_hr10, r.val_mrr10, r.wall_seconds
        )?;
    }
    Ok(())
}

/// Softmax of one score row.
pub fn softmax(scores: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
    let max = scores.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = scores.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}
