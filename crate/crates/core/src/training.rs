//! Focal-loss training with Adam and early stopping on validation Dice.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::cache::write_atomic;
use crate::data::{SliceSample, VolumeSlices, NUM_CLASSES};
use crate::error::{Error, IoContext, Result};
use crate::evaluation::DiceRecord;
use crate::grid::Grid3;
use crate::networks::{batch_images, predict_labels, SegmentationModel, INFER_BATCH};
use crate::nn::{Grads, ParamKind, ParamStore};
use crate::seeding;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Monitor {
    /// Validation mean Dice, maximized.
    #[default]
    ValDice,
    /// Validation focal loss, minimized.
    ValLoss,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub focal_gamma: f64,
    pub max_epochs: usize,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub monitor: Monitor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            focal_gamma: 0.5,
            max_epochs: 500,
            patience: 100,
            batch_size: 16,
            seed: 0,
            monitor: Monitor::ValDice,
        }
    }
}

impl TrainConfig {
    /// Defaults for small CPU runs.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 || self.patience == 0 || self.patience > self.max_epochs {
            return bad(format!(
                "need 1 <= patience ({}) <= max_epochs ({})",
                self.patience, self.max_epochs
            ));
        }
        if !(self.focal_gamma >= 0.0) {
            return bad(format!("focal_gamma must be >= 0, got {}", self.focal_gamma));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

fn check_targets<T: Real>(logits: &Tensor<T>, targets: &[u8]) -> Result<()> {
    if logits.c != NUM_CLASSES || targets.len() != logits.n * logits.plane() {
        return Err(Error::Shape(format!(
            "{} targets for logits {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t as usize >= NUM_CLASSES) {
        return Err(Error::Input(format!("target label {t} outside 0..=3")));
    }
    Ok(())
}

/// Mean focal loss `-(1 - p_t)^gamma * log p_t` over all pixels.
/// `targets` holds one label plane per batch item.
pub fn focal_loss<T: Real>(logits: &Tensor<T>, targets: &[u8], gamma: f64) -> Result<f64> {
    focal(logits, targets, gamma, false).map(|(l, _)| l)
}

/// Focal loss and its gradient with respect to the logits.
pub fn focal_loss_with_grad<T: Real>(
    logits: &Tensor<T>,
    targets: &[u8],
    gamma: f64,
) -> Result<(f64, Tensor<T>)> {
    focal(logits, targets, gamma, true).map(|(l, g)| (l, g.expect("gradient requested")))
}

fn focal<T: Real>(
    logits: &Tensor<T>,
    targets: &[u8],
    gamma: f64,
    with_grad: bool,
) -> Result<(f64, Option<Tensor<T>>)> {
    check_targets(logits, targets)?;
    if !(gamma >= 0.0) {
        return Err(Error::Parameter(format!("focal gamma must be >= 0, got {gamma}")));
    }
    let (c, hw) = (logits.c, logits.plane());
    let total = (logits.n * hw) as f64;
    let mut grad = with_grad.then(|| Tensor::zeros(logits.n, c, logits.h, logits.w));
    let mut sum = 0.0;
    let mut z = [0.0f64; NUM_CLASSES];
    for i in 0..logits.n {
        let item = logits.item(i);
        let labels = &targets[i * hw..(i + 1) * hw];
        for p in 0..hw {
            for k in 0..c {
                z[k] = item[k * hw + p].to_f64().unwrap_or(f64::NAN);
            }
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            let t = labels[p] as usize;
            let log_pt = z[t] - lse;
            let one_minus = -log_pt.exp_m1();
            let weight = one_minus.powf(gamma);
            sum -= weight * log_pt;
            if let Some(g) = grad.as_mut() {
                // dL/dz_j = [gamma (1-pt)^(gamma-1) pt log pt - (1-pt)^gamma] (delta_jt - p_j)
                let pt = log_pt.exp();
                let first = if gamma == 0.0 || one_minus <= 0.0 {
                    0.0
                } else {
                    gamma * one_minus.powf(gamma - 1.0) * pt * log_pt
                };
                let coeff = (first - weight) / total;
                let gi = g.item_mut(i);
                for k in 0..c {
                    let pk = (z[k] - lse).exp();
                    let delta = if k == t { 1.0 } else { 0.0 };
                    gi[k * hw + p] = T::from_f64_lossy(coeff * (delta - pk));
                }
            }
        }
    }
    Ok((sum / total, grad))
}

/// Adam with bias-corrected moments over the learnable entries of a store.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(store: &ParamStore<f32>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f32>> = store
            .entries()
            .iter()
            .map(|e| match e.kind {
                ParamKind::Learnable => vec![0.0; e.value.len()],
                ParamKind::Buffer => Vec::new(),
            })
            .collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Grads<f32>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = (self.lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (k, entry) in store.entries_mut().iter_mut().enumerate() {
            if entry.kind != ParamKind::Learnable {
                continue;
            }
            let g = &grads.values[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..entry.value.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                entry.value[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }

    /// One CSV row per epoch plus a `best` flag column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            epoch: usize,
            train_loss: f64,
            val_loss: f64,
            val_dice: f64,
            best: bool,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(Row {
                epoch: r.epoch,
                train_loss: r.train_loss,
                val_loss: r.val_loss,
                val_dice: r.val_dice,
                best: r.epoch == self.best_epoch,
            })?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
        write_atomic(path, &bytes)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            epoch: usize,
            train_loss: f64,
            val_loss: f64,
            val_dice: f64,
            best: bool,
        }
        let bytes = fs::read(path).at(path)?;
        let mut rdr = csv::Reader::from_reader(bytes.as_slice());
        let mut h = TrainHistory::default();
        for row in rdr.deserialize() {
            let r: Row = row?;
            if r.best {
                h.best_epoch = r.epoch;
            }
            h.stopped_epoch = r.epoch;
            h.records.push(EpochRecord {
                epoch: r.epoch,
                train_loss: r.train_loss,
                val_loss: r.val_loss,
                val_dice: r.val_dice,
            });
        }
        Ok(h)
    }
}

fn label_batch(slices: &[&SliceSample]) -> Vec<u8> {
    slices
        .iter()
        .flat_map(|s| s.labels.data.iter().copied())
        .collect()
}

/// Validation focal loss (pixel mean over all slices) and mean Dice over
/// volumes, with running batch-norm statistics.
pub fn validate(
    model: &SegmentationModel<f32>,
    volumes: &[&VolumeSlices],
    gamma: f64,
) -> Result<(f64, f64)> {
    if volumes.is_empty() {
        return Err(Error::Input("empty validation set".into()));
    }
    let mut loss_sum = 0.0;
    let mut pixels = 0usize;
    let mut dice_sum = 0.0;
    for v in volumes {
        let refs: Vec<&SliceSample> = v.slices.iter().collect();
        let mut pred = Vec::new();
        for chunk in refs.chunks(INFER_BATCH) {
            let z: Vec<_> = chunk.iter().map(|s| s.z).collect();
            let logits = model.infer(&batch_images(chunk)?, &z)?;
            let n = logits.n * logits.plane();
            loss_sum += focal_loss(&logits, &label_batch(chunk), gamma)? * n as f64;
            pixels += n;
            pred.extend(predict_labels(&logits).into_iter().flatten());
        }
        let gt = v.labels()?;
        let pred = Grid3::new(gt.depth, gt.height, gt.width, pred)?;
        dice_sum += DiceRecord::from_volumes(0, &v.subject_id, v.phase, &pred, &gt)?.mean_dice;
    }
    Ok((loss_sum / pixels as f64, dice_sum / volumes.len() as f64))
}

fn improved(monitor: Monitor, r: &EpochRecord, best: Option<&EpochRecord>) -> bool {
    match (monitor, best) {
        (_, None) => true,
        (Monitor::ValDice, Some(b)) => r.val_dice > b.val_dice,
        (Monitor::ValLoss, Some(b)) => r.val_loss < b.val_loss,
    }
}

/// Train `model` in place and leave it holding the weights of the best
/// epoch. `on_epoch` sees every epoch record as it is produced.
pub fn train(
    model: &mut SegmentationModel<f32>,
    train_slices: &[&SliceSample],
    val_volumes: &[&VolumeSlices],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_slices.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    if val_volumes.is_empty() {
        return Err(Error::Input("empty validation set".into()));
    }
    let mut adam = Adam::new(model.store(), cfg);
    let mut history = TrainHistory::default();
    let mut best_store = model.store().clone();
    let mut order: Vec<usize> = (0..train_slices.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut seeding::rng(cfg.seed, &["epoch", &epoch.to_string()]));
        let mut loss_sum = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SliceSample> = idx.iter().map(|&i| train_slices[i]).collect();
            let z: Vec<_> = batch.iter().map(|s| s.z).collect();
            let (logits, tape) = model.forward_train(&batch_images(&batch)?, &z)?;
            let (loss, dlogits) =
                focal_loss_with_grad(&logits, &label_batch(&batch), cfg.focal_gamma)?;
            if !loss.is_finite() || !logits.is_finite() {
                let ids: Vec<String> = batch
                    .iter()
                    .map(|s| format!("{}/{}#{}", s.subject_id, s.phase, s.slice_index))
                    .collect();
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    state: format!(
                        "loss={loss} lr={} fusion={:?} batch=[{}] last_val={:?}",
                        cfg.learning_rate,
                        model.fusion(),
                        ids.join(", "),
                        history.records.last()
                    ),
                });
            }
            let grads = model.backward(&tape, &dlogits);
            model.update_running_stats(&tape);
            adam.step(model.store_mut(), &grads);
            loss_sum += loss * batch.len() as f64;
        }
        let (val_loss, val_dice) = validate(model, val_volumes, cfg.focal_gamma)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_slices.len() as f64,
            val_loss,
            val_dice,
        };
        on_epoch(&record);
        if improved(cfg.monitor, &record, history.best()) {
            history.best_epoch = epoch;
            best_store.clone_from(model.store());
        }
        history.records.push(record);
        history.stopped_epoch = epoch;
        if epoch - history.best_epoch >= cfg.patience {
            break;
        }
    }
    model.store_mut().load_from(&best_store)?;
    Ok(history)
}

/// Format one progress line.
pub fn progress_line(prefix: &str, r: &EpochRecord) -> String {
    format!(
        "{prefix}epoch {:>4}  train_loss {:.5}  val_loss {:.5}  val_dice {:.4}",
        r.epoch, r.train_loss, r.val_loss, r.val_dice
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(n: usize, h: usize, w: usize, f: impl Fn(usize) -> f64) -> Tensor<f64> {
        Tensor::from_vec(n, 4, h, w, (0..n * 4 * h * w).map(f).collect()).unwrap()
    }

    #[test]
    fn closed_form_cases() {
        let uniform = logits(1, 1, 1, |_| 0.3);
        let l0 = focal_loss(&uniform, &[2], 0.0).unwrap();
        assert!((l0 - 4f64.ln()).abs() < 1e-12);
        let l5 = focal_loss(&uniform, &[2], 0.5).unwrap();
        assert!((l5 - 0.75f64.sqrt() * 4f64.ln()).abs() < 1e-12);
        // near-certain predictions
        let sure = logits(1, 1, 2, |i| if i / 2 == 1 { 60.0 } else { 0.0 });
        assert!(focal_loss(&sure, &[1, 1], 0.5).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_bad_targets() {
        let l = logits(1, 1, 1, |_| 0.0);
        assert!(matches!(focal_loss(&l, &[4], 0.5), Err(Error::Input(_))));
        assert!(matches!(focal_loss(&l, &[0, 1], 0.5), Err(Error::Shape(_))));
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            patience: 600,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(TrainConfig::desk().batch_size, 8);
    }

    #[test]
    fn history_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let h = TrainHistory {
            records: (1..=3)
                .map(|e| EpochRecord {
                    epoch: e,
                    train_loss: 1.0 / e as f64,
                    val_loss: 0.3,
                    val_dice: [0.5, 0.7, 0.6][e - 1],
                })
                .collect(),
            best_epoch: 2,
            stopped_epoch: 3,
        };
        let p = dir.path().join("history.csv");
        h.write_csv(&p).unwrap();
        assert_eq!(TrainHistory::read_csv(&p).unwrap(), h);
    }
}
