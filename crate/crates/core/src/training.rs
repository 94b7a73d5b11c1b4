//! Three-stage alternating optimisation: joint training with a frozen
//! head, prototype push, and head-only fine-tuning.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use maprotonet_tensor::{AdamW, Array, Graph};
use ndarray::{Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::affine::{AffineRange, AffineSpec};
use crate::data::{augment, labels_of, make_folds, split_fold, stack_images, AugmentConfig, Volume};
use crate::error::{Error, Result};
use crate::losses::{joint_loss, loss_cls, loss_l1, LossValues, LossWeights};
use crate::metrics::{bac, evaluate, predict, EvalConfig, EvalResult};
use crate::network::{MaProtoNet, ModelConfig, HEAD, PROTOTYPES};
use crate::params::{apply_stat_updates, Session, Trainable};
use crate::seed::derive_seed;

/// Stream tags for [`derive_seed`].
const SHUFFLE_JOINT: u64 = 1;
const AUGMENT: u64 = 2;
const MAPPING_AFFINE: u64 = 3;
const SHUFFLE_HEAD: u64 = 4;
const FOLD_MODEL: u64 = 5;

/// Optimiser and schedule settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Joint-training epochs; head epochs come on top.
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub stage_period: usize,
    pub head_epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    /// Apply the augmentation pipeline to joint-training batches.
    pub augment: bool,
    /// Transform range of the mapping-loss affine maps.
    pub mapping_affine: AffineRange,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            base_lr: 1e-3,
            weight_decay: 0.01,
            warmup_epochs: 20,
            stage_period: 10,
            head_epochs: 10,
            seed: 0,
            grad_clip: 0.0,
            augment: true,
            mapping_affine: AffineRange::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 || self.stage_period == 0 || self.batch_size == 0 {
            return bad("epochs, stage_period and batch_size must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !self.epochs.is_multiple_of(self.stage_period) {
            return bad(format!(
                "stage_period {} must divide epochs {}",
                self.stage_period, self.epochs
            ));
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return bad("weight_decay and grad_clip must be non-negative".into());
        }
        Ok(())
    }

    pub fn cycles(&self) -> usize {
        self.epochs / self.stage_period
    }

    /// Per-epoch learning rate: `(e + 1) / W · base` during warm-up, then a
    /// cosine decay from `base` towards 0 over the remaining epochs.
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.epochs {
            return Err(Error::Config(format!("epoch {epoch} outside 0..{}", self.epochs)));
        }
        let w = self.warmup_epochs;
        Ok(if epoch < w {
            self.base_lr * (epoch + 1) as f64 / w as f64
        } else {
            let t = (epoch - w) as f64 / (self.epochs - w) as f64;
            self.base_lr * (1.0 + (PI * t).cos()) / 2.0
        })
    }
}

/// Everything that shapes one training run besides the model itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
}

impl Recipe {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Joint,
    Push,
    Head,
    Done,
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub stage: Stage,
    pub cycle: usize,
    /// Epoch index within its stage kind (joint or head), counted from the start.
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub cls: f64,
    pub clst: Option<f64>,
    pub sep: Option<f64>,
    pub mapping: Option<f64>,
    pub oc: Option<f64>,
    pub l1: Option<f64>,
}

/// Where a pushed prototype came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub prototype: usize,
    pub class: usize,
    pub sample_id: String,
    pub sample_index: usize,
    /// Squared distance between the prototype and its replacement before the push.
    pub distance: f64,
    /// Soft-masked occurrence map of the prototype on its source sample.
    pub map: Array,
}

/// Best held-out balanced accuracy seen at the end of a cycle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestSnapshot {
    pub cycle: usize,
    pub bac: f64,
}

/// Resumable progress of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stage: Stage,
    pub cycle: usize,
    pub joint_epochs_done: usize,
    pub head_epochs_done: usize,
    pub optimizer: AdamW,
    pub provenance: Vec<Provenance>,
    pub history: Vec<HistoryRecord>,
    pub best: Option<BestSnapshot>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            stage: Stage::Joint,
            cycle: 0,
            joint_epochs_done: 0,
            head_epochs_done: 0,
            optimizer: AdamW::new(cfg.weight_decay),
            provenance: Vec::new(),
            history: Vec::new(),
            best: None,
        }
    }

    pub fn is_done(&self) -> bool {
        self.stage == Stage::Done
    }
}

fn check_finite(v: f64, epoch: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, loss: v })
    }
}

fn clip(grads: &mut BTreeMap<String, Array>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().for_each(|g| g.mapv_inplace(|x| x * s));
    }
}

fn shuffled(idx: &[usize], seed: u64) -> Vec<usize> {
    let mut v = idx.to_vec();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

#[derive(Default)]
struct Mean {
    n: usize,
    sum: LossValues,
}

impl Mean {
    fn add(&mut self, v: &LossValues, w: usize) {
        let w64 = w as f64;
        self.n += w;
        self.sum.total += v.total * w64;
        self.sum.cls += v.cls * w64;
        self.sum.clst += v.clst * w64;
        self.sum.sep += v.sep * w64;
        self.sum.mapping += v.mapping * w64;
        self.sum.oc += v.oc * w64;
    }

    fn get(&self) -> LossValues {
        let n = self.n.max(1) as f64;
        LossValues {
            total: self.sum.total / n,
            cls: self.sum.cls / n,
            clst: self.sum.clst / n,
            sep: self.sum.sep / n,
            mapping: self.sum.mapping / n,
            oc: self.sum.oc / n,
        }
    }
}

/// One joint epoch over `train_idx`: every parameter except the head is
/// updated on the joint objective. Returns the sample-weighted mean losses.
pub fn train_joint_epoch(
    model: &mut MaProtoNet,
    opt: &mut AdamW,
    recipe: &Recipe,
    data: &[Volume],
    train_idx: &[usize],
    epoch: usize,
) -> Result<LossValues> {
    let cfg = &recipe.train;
    let lr = cfg.lr_at(epoch)?;
    let use_mmap = model.config.use_multiscale;
    let order = shuffled(train_idx, derive_seed(&[cfg.seed, SHUFFLE_JOINT, epoch as u64]));
    let mut mean = Mean::default();
    for batch in order.chunks(cfg.batch_size) {
        let samples: Vec<Volume> = batch
            .iter()
            .map(|&i| {
                if cfg.augment {
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, AUGMENT, epoch as u64, i as u64]));
                    augment(&data[i], &recipe.augment, &mut rng)
                } else {
                    data[i].clone()
                }
            })
            .collect();
        let local: Vec<usize> = (0..samples.len()).collect();
        let x = stack_images(&samples, &local)?;
        let y = labels_of(&samples, &local);
        let specs: Vec<AffineSpec> = batch
            .iter()
            .map(|&i| {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, MAPPING_AFFINE, epoch as u64, i as u64]));
                AffineSpec::sample(&mut rng, &cfg.mapping_affine)
            })
            .collect();

        let g = Graph::new();
        let sess = Session::new(&g, &model.store, true, Trainable::Except(vec![HEAD.into()]));
        let fv = model.forward_vars(&sess, g.constant(x))?;
        let jl = joint_loss(model, &sess, &fv, &y, &specs, &recipe.loss, use_mmap)?;
        let values = jl.values();
        check_finite(values.total, epoch)?;
        let mut grads = g.backward(jl.total);
        let mut pg = sess.param_grads(&mut grads);
        let stats = sess.take_stat_updates();
        drop(sess);
        clip(&mut pg, cfg.grad_clip);
        for (name, grad) in &pg {
            let p = model.store.get_mut(name).expect("gradient of a stored parameter");
            opt.step(name, p, grad, lr);
        }
        apply_stat_updates(&mut model.store, &stats);
        mean.add(&values, batch.len());
    }
    Ok(mean.get())
}

/// Push candidate: distance, sample index, pooled vector and map.
type Candidate = (f64, usize, Vec<f64>, Array);

/// Replaces every prototype with the closest map-weighted feature vector
/// among clean training samples of its class (evaluation-mode forward).
pub fn push_prototypes(
    model: &mut MaProtoNet,
    data: &[Volume],
    train_idx: &[usize],
    batch_size: usize,
) -> Result<Vec<Provenance>> {
    let bank = model.bank();
    let classes = model.config.num_classes;
    for c in 0..classes {
        if !bank.of_class(c).is_empty() && !train_idx.iter().any(|&i| data[i].label == c) {
            return Err(Error::Data(format!(
                "no training samples of class {c} to push prototypes onto"
            )));
        }
    }
    // best (distance, sample, vector, map) per prototype; ties keep the earliest sample
    let mut best: Vec<Option<Candidate>> = vec![None; bank.len()];
    for chunk in train_idx.chunks(batch_size.max(1)) {
        let x = stack_images(data, chunk)?;
        let out = model.forward(&x)?;
        for (row, &i) in chunk.iter().enumerate() {
            for (p, slot) in best.iter_mut().enumerate() {
                if bank.class_of[p] != data[i].label {
                    continue;
                }
                let u = out.pooled.index_axis(Axis(0), row).index_axis(Axis(0), p).to_owned();
                let v = bank.vectors.row(p);
                let d: f64 = u.iter().zip(v.iter()).map(|(a, b)| (a - b).powi(2)).sum();
                if slot.as_ref().is_none_or(|b| d < b.0) {
                    let map = out.maps.index_axis(Axis(0), row).index_axis(Axis(0), p).to_owned();
                    *slot = Some((d, i, u.iter().copied().collect(), map));
                }
            }
        }
    }
    let mut prov = Vec::with_capacity(bank.len());
    for (p, b) in best.into_iter().enumerate() {
        let (distance, i, vector, map) = b.expect("every class has samples");
        model.set_prototype(p, &vector);
        prov.push(Provenance {
            prototype: p,
            class: bank.class_of[p],
            sample_id: data[i].id.clone(),
            sample_index: i,
            distance,
            map,
        });
    }
    Ok(prov)
}

/// Similarity scores of clean samples under the current (frozen) network.
pub fn cached_scores(model: &MaProtoNet, data: &[Volume], idx: &[usize], batch_size: usize) -> Result<Array> {
    let mut rows = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let out = model.forward(&stack_images(data, chunk)?)?;
        rows.push(out.scores);
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).unwrap())
}

/// Head-only epochs on cached scores: cross-entropy plus `λ_l1` times the
/// off-class L1 norm, constant learning rate `base_lr`.
pub fn finetune_head(
    model: &mut MaProtoNet,
    opt: &mut AdamW,
    recipe: &Recipe,
    scores: &Array,
    labels: &[usize],
    first_epoch: usize,
    epochs: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    let cfg = &recipe.train;
    let lr = cfg.base_lr;
    let all: Vec<usize> = (0..labels.len()).collect();
    let mut out = Vec::with_capacity(epochs);
    for e in first_epoch..first_epoch + epochs {
        let order = shuffled(&all, derive_seed(&[cfg.seed, SHUFFLE_HEAD, e as u64]));
        let (mut n, mut sum_cls, mut sum_l1) = (0usize, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let rows: Vec<_> = batch
                .iter()
                .map(|&i| scores.index_axis(Axis(0), i).insert_axis(Axis(0)))
                .collect();
            let s = ndarray::concatenate(Axis(0), &rows).unwrap();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let g = Graph::new();
            let sess = Session::new(&g, &model.store, false, Trainable::Only(vec![HEAD.into()]));
            let logits = model.classify(&sess, g.constant(s));
            let cls = loss_cls(logits, &y);
            let l1 = loss_l1(model, &sess);
            let total = cls.add(l1.mul_scalar(recipe.loss.l1));
            check_finite(total.item(), e)?;
            let mut grads = g.backward(total);
            let pg = sess.param_grads(&mut grads);
            let (c, l) = (cls.item(), l1.item());
            drop(sess);
            for (name, grad) in &pg {
                opt.step(name, model.store.get_mut(name).expect("head weight"), grad, lr);
            }
            n += batch.len();
            sum_cls += c * batch.len() as f64;
            sum_l1 += l * batch.len() as f64;
        }
        let (cls, l1) = (sum_cls / n as f64, sum_l1 / n as f64);
        out.push((cls + recipe.loss.l1 * l1, cls, l1));
    }
    Ok(out)
}

/// Runs (or resumes) the alternating schedule until `state` is done.
/// `checkpoint` is called after every completed block; a failing callback
/// aborts the run. With `val_idx` the held-out BAC is tracked per cycle.
pub fn run_training(
    model: &mut MaProtoNet,
    state: &mut TrainState,
    recipe: &Recipe,
    data: &[Volume],
    train_idx: &[usize],
    val_idx: Option<&[usize]>,
    checkpoint: &mut dyn FnMut(&MaProtoNet, &TrainState) -> Result<()>,
) -> Result<()> {
    recipe.validate()?;
    let cfg = &recipe.train;
    if train_idx.is_empty() {
        return Err(Error::Data("empty training split".into()));
    }
    while !state.is_done() {
        match state.stage {
            Stage::Joint => {
                let end = (state.cycle + 1) * cfg.stage_period;
                for e in state.joint_epochs_done..end {
                    let v = train_joint_epoch(model, &mut state.optimizer, recipe, data, train_idx, e)?;
                    log::info!(
                        "joint epoch {e}: total {:.4} cls {:.4} clst {:.4} sep {:.4} map {:.4} oc {:.4}",
                        v.total,
                        v.cls,
                        v.clst,
                        v.sep,
                        v.mapping,
                        v.oc
                    );
                    state.history.push(HistoryRecord {
                        stage: Stage::Joint,
                        cycle: state.cycle,
                        epoch: e,
                        lr: cfg.lr_at(e)?,
                        total: v.total,
                        cls: v.cls,
                        clst: Some(v.clst),
                        sep: Some(v.sep),
                        mapping: Some(v.mapping),
                        oc: Some(v.oc),
                        l1: None,
                    });
                    state.joint_epochs_done = e + 1;
                }
                state.stage = Stage::Push;
            }
            Stage::Push => {
                state.provenance = push_prototypes(model, data, train_idx, cfg.batch_size)?;
                log::info!("cycle {}: pushed {} prototypes", state.cycle, state.provenance.len());
                state.stage = Stage::Head;
            }
            Stage::Head => {
                let labels = labels_of(data, train_idx);
                let scores = cached_scores(model, data, train_idx, cfg.batch_size)?;
                let first = state.head_epochs_done;
                let losses = finetune_head(
                    model,
                    &mut state.optimizer,
                    recipe,
                    &scores,
                    &labels,
                    first,
                    cfg.head_epochs,
                )?;
                for (k, (total, cls, l1)) in losses.into_iter().enumerate() {
                    log::info!("head epoch {}: total {total:.4} cls {cls:.4} l1 {l1:.4}", first + k);
                    state.history.push(HistoryRecord {
                        stage: Stage::Head,
                        cycle: state.cycle,
                        epoch: first + k,
                        lr: cfg.base_lr,
                        total,
                        cls,
                        clst: None,
                        sep: None,
                        mapping: None,
                        oc: None,
                        l1: Some(l1),
                    });
                }
                state.head_epochs_done = first + cfg.head_epochs;
                if let Some(val) = val_idx.filter(|v| !v.is_empty()) {
                    let preds = predict(model, &pick(data, val), cfg.batch_size)?;
                    let p: Vec<usize> = preds.iter().map(|p| p.predicted).collect();
                    if let Ok(b) = bac(&p, &labels_of(data, val)) {
                        log::info!("cycle {}: held-out BAC {b:.3}", state.cycle);
                        if state.best.is_none_or(|s| b > s.bac) {
                            state.best = Some(BestSnapshot {
                                cycle: state.cycle,
                                bac: b,
                            });
                        }
                    }
                }
                state.cycle += 1;
                state.stage = if state.cycle == cfg.cycles() {
                    Stage::Done
                } else {
                    Stage::Joint
                };
            }
            Stage::Done => unreachable!(),
        }
        checkpoint(model, state)?;
    }
    Ok(())
}

/// Initialisation seed of the model trained on fold `fold`.
pub fn fold_model_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(&[seed, FOLD_MODEL, fold as u64])
}

/// Copies of `data[idx]`.
pub fn pick(data: &[Volume], idx: &[usize]) -> Vec<Volume> {
    idx.iter().map(|&i| data[i].clone()).collect()
}

/// Trains a fresh model per fold and evaluates it on the held-out part.
pub fn cross_validate(
    model_cfg: &ModelConfig,
    recipe: &Recipe,
    eval_cfg: &EvalConfig,
    data: &[Volume],
    k: usize,
    on_fold: &mut dyn FnMut(usize, &MaProtoNet, &TrainState, &EvalResult) -> Result<()>,
) -> Result<Vec<EvalResult>> {
    let folds = make_folds(
        &labels_of(data, &(0..data.len()).collect::<Vec<_>>()),
        k,
        recipe.train.seed,
    )?;
    let mut results = Vec::with_capacity(k);
    for f in 0..k {
        let (train, val) = split_fold(&folds, f);
        let mut model = MaProtoNet::new(model_cfg.clone(), fold_model_seed(recipe.train.seed, f))?;
        let mut state = TrainState::new(&recipe.train);
        run_training(&mut model, &mut state, recipe, data, &train, Some(&val), &mut |_, _| {
            Ok(())
        })?;
        let mut r = evaluate(&model, &pick(data, &val), eval_cfg)?;
        r.fold = Some(f);
        on_fold(f, &model, &state, &r)?;
        results.push(r);
    }
    Ok(results)
}

/// Prototype matrix as a plain `(P, D)` array.
pub fn prototype_matrix(model: &MaProtoNet) -> Array {
    model
        .store
        .get(PROTOTYPES)
        .cloned()
        .unwrap_or_else(|| Array::zeros(IxDyn(&[0, 0])))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn warmup_then_cosine() {
        let c = default_schedule();
        assert!((c.lr_at(0).unwrap() - 0.001 / 20.0).abs() < 1e-18);
        assert!((c.lr_at(19).unwrap() - 0.001).abs() < 1e-18);
        assert!((c.lr_at(20).unwrap() - 0.001).abs() < 1e-18);
        assert!((c.lr_at(60).unwrap() - 0.0005).abs() < 1e-15);
        assert!(c.lr_at(100).is_err());
        for e in 0..100 {
            let lr = c.lr_at(e).unwrap();
            assert!(lr > 0.0 && lr <= 0.001);
        }
    }

    #[test]
    fn schedule_validation() {
        let ok = TrainConfig {
            epochs: 20,
            warmup_epochs: 2,
            ..TrainConfig::default()
        };
        assert!(ok.validate().is_ok());
        assert_eq!(ok.cycles(), 2);
        assert!(TrainConfig { stage_period: 7, ..ok }.validate().is_err());
        assert!(TrainConfig {
            warmup_epochs: 20,
            ..ok
        }
        .validate()
        .is_err());
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Array::from_elem(IxDyn(&[4]), 3.0));
        g.insert("b".to_string(), Array::from_elem(IxDyn(&[1]), 4.0));
        clip(&mut g, 1.0);
        let n: f64 = g.values().flat_map(|a| a.iter()).map(|x| x * x).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
