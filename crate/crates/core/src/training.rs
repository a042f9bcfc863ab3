//! Epoch-level cross-validation, the give-up/patience callback pair, and the
//! within-subject and transfer-learning drivers.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EpochSet;
use crate::dsp::{extract_windows, ScaleMode, WindowSet};
use crate::error::{Error, Result};
use crate::models::{build_model, ArchitectureKind, InputSignature};
use crate::nnengine::{cross_entropy, AdamConfig, ModelGraph, Tensor};
use crate::stats::Mode;

/// Training and evaluation settings shared by pretraining and fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub give_up: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Set from the experiment seed, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub folds: usize,
    pub validation_fraction: f64,
    pub window_s: f64,
    pub shift_s: f64,
    /// Per-window standard scaling; `None` feeds raw values.
    pub scale: Option<ScaleMode>,
    /// Score test folds by per-epoch majority vote over windows instead of per window.
    pub epoch_vote: bool,
    /// Keep at most this many epochs per class in each fold's training part.
    pub fold_train_cap: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 500,
            give_up: 100,
            patience: 20,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            folds: 5,
            validation_fraction: 0.1,
            window_s: 2.0,
            shift_s: 0.1,
            scale: Some(ScaleMode::PerChannel),
            epoch_vote: false,
            fold_train_cap: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.give_up > self.max_epochs {
            return Err(Error::Config(format!(
                "give_up ({}) exceeds max_epochs ({})",
                self.give_up, self.max_epochs
            )));
        }
        if self.patience == 0 || self.batch_size == 0 || self.folds < 2 {
            return Err(Error::Config("patience and batch_size must be >= 1 and folds >= 2".into()));
        }
        if !(self.lr > 0.0) || !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("lr must be positive and validation_fraction in (0, 1)".into()));
        }
        if !(self.window_s > 0.0 && self.shift_s > 0.0) {
            return Err(Error::Config("window_s and shift_s must be positive".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// SplitMix64 finalizer; derives independent seeds from a base seed and a tag.
pub fn mix_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn name_tag(name: &str) -> u64 {
    // FNV-1a, stable across runs and platforms
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

/// One cross-validation fold as indices into the epoch list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn class_members(labels: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::invalid(format!("label {l} out of range for {n_classes} classes")))?
            .push(i);
    }
    Ok(by_class)
}

/// Label-stratified `k`-fold partition of epochs. Each class is shuffled and dealt
/// round-robin, continuing where the previous class stopped so fold sizes differ by at most one.
pub fn split_folds(labels: &[usize], n_classes: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::invalid("need at least 2 folds"));
    }
    let by_class = class_members(labels, n_classes)?;
    if let Some((c, m)) = by_class.iter().enumerate().find(|(_, m)| m.len() < k) {
        return Err(Error::invalid(format!(
            "class {c} has {} epochs, fewer than the {k} folds",
            m.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tests = vec![Vec::new(); k];
    let mut next = 0;
    for mut members in by_class {
        members.shuffle(&mut rng);
        for i in members {
            tests[next].push(i);
            next = (next + 1) % k;
        }
    }
    Ok(tests
        .into_iter()
        .map(|mut test| {
            test.sort_unstable();
            let held: BTreeSet<usize> = test.iter().copied().collect();
            let train = (0..labels.len()).filter(|i| !held.contains(i)).collect();
            Fold { train, test }
        })
        .collect())
}

/// Stratified hold-out of `round(fraction * n)` epochs (at least one per class) from
/// `indices`. Returns `(train, validation)` as subsets of `indices`.
pub fn split_validation(
    indices: &[usize],
    labels: &[usize],
    n_classes: usize,
    fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if indices.len() < 10 {
        return Err(Error::invalid(format!(
            "validation split needs at least 10 training epochs, got {}",
            indices.len()
        )));
    }
    let sub: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
    let by_class = class_members(&sub, n_classes)?;
    if let Some((c, _)) = by_class.iter().enumerate().find(|(_, m)| m.len() < 2) {
        return Err(Error::invalid(format!(
            "class {c} has fewer than 2 epochs; cannot hold one out for validation"
        )));
    }
    let n = indices.len();
    let target = ((fraction * n as f64).round() as usize).max(n_classes);
    // largest-remainder apportionment with a floor of one per class
    let exact: Vec<f64> = by_class.iter().map(|m| target as f64 * m.len() as f64 / n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| (e.floor() as usize).max(1)).collect();
    let mut order: Vec<usize> = (0..n_classes).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let mut it = order.iter().cycle();
    while quota.iter().sum::<usize>() < target {
        let &c = it.next().expect("cycle");
        if quota[c] + 1 < by_class[c].len() {
            quota[c] += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (mut members, q) in by_class.into_iter().zip(quota) {
        members.shuffle(&mut rng);
        val.extend(members[..q].iter().map(|&j| indices[j]));
        train.extend(members[q..].iter().map(|&j| indices[j]));
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Keeps the first `cap` epochs of every class (in index order).
pub fn cap_per_class(indices: &[usize], labels: &[usize], cap: usize) -> Vec<usize> {
    let mut seen = std::collections::HashMap::new();
    indices
        .iter()
        .copied()
        .filter(|&i| {
            let n = seen.entry(labels[i]).or_insert(0usize);
            *n += 1;
            *n <= cap
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    GiveUp,
    Patience,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::GiveUp => "give_up",
            StopReason::Patience => "patience",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop(StopReason),
}

/// State of the callback pair. Phase A runs until the validation loss first returns to
/// the initial (epoch-0) loss; phase B applies patience.
#[derive(Clone, Debug)]
pub struct CallbackState<W> {
    pub initial_loss: Option<f64>,
    pub reached_initial: bool,
    pub since_improvement: usize,
    pub best_loss: f64,
    pub best_acc: f64,
    pub snapshot: Option<W>,
    pub snapshot_epoch: Option<usize>,
}

impl<W> Default for CallbackState<W> {
    fn default() -> Self {
        CallbackState {
            initial_loss: None,
            reached_initial: false,
            since_improvement: 0,
            best_loss: f64::INFINITY,
            best_acc: f64::NEG_INFINITY,
            snapshot: None,
            snapshot_epoch: None,
        }
    }
}

impl<W> CallbackState<W> {
    fn save(&mut self, epoch: usize, weights: impl FnOnce() -> W) {
        self.snapshot = Some(weights());
        self.snapshot_epoch = Some(epoch);
    }
}

/// Feeds one epoch's validation metrics to the callbacks. `weights` is only called when a
/// snapshot is taken. Epoch 0 is the measurement before any update.
pub fn callback_step<W>(
    state: &mut CallbackState<W>,
    config: &TrainConfig,
    epoch: usize,
    val_loss: f64,
    val_acc: f64,
    weights: impl FnOnce() -> W,
) -> Decision {
    let finite = val_loss.is_finite();
    if !finite {
        log::warn!("epoch {epoch}: non-finite validation loss {val_loss}; counted as no improvement");
    }
    match state.initial_loss {
        None => {
            state.initial_loss = Some(val_loss);
            state.best_acc = val_acc;
            state.save(epoch, weights);
        }
        Some(initial) if !state.reached_initial => {
            if finite && val_loss <= initial {
                state.reached_initial = true;
                state.best_loss = val_loss;
                state.best_acc = val_acc;
                state.since_improvement = 0;
                state.save(epoch, weights);
            } else if val_acc > state.best_acc {
                state.best_acc = val_acc;
                state.save(epoch, weights);
            }
        }
        Some(_) => {
            let better_loss = finite && val_loss < state.best_loss;
            if better_loss && val_acc > state.best_acc {
                state.best_acc = val_acc;
                state.save(epoch, weights);
            }
            if better_loss {
                state.best_loss = val_loss;
                state.since_improvement = 0;
            } else {
                state.since_improvement += 1;
            }
        }
    }
    if !state.reached_initial && epoch >= config.give_up {
        Decision::Stop(StopReason::GiveUp)
    } else if state.reached_initial && state.since_improvement >= config.patience {
        Decision::Stop(StopReason::Patience)
    } else if epoch >= config.max_epochs {
        Decision::Stop(StopReason::MaxEpochs)
    } else {
        Decision::Continue
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

fn batch_tensor(ws: &WindowSet, idx: &[usize]) -> Tensor<f32> {
    let per = ws.channels * ws.samples;
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&ws.windows[i].data);
    }
    Tensor::from_vec(&[idx.len(), 1, ws.channels, ws.samples], data).expect("window extents")
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Inference-mode loss, window predictions and class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<usize>,
    pub probabilities: Vec<Vec<f32>>,
}

impl Evaluation {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

const EVAL_BATCH: usize = 128;

pub fn evaluate(graph: &mut ModelGraph<f32>, ws: &WindowSet) -> Result<Evaluation> {
    if ws.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty window set"));
    }
    let mut out = Evaluation {
        loss: 0.0,
        correct: 0,
        total: ws.len(),
        predictions: Vec::with_capacity(ws.len()),
        probabilities: Vec::with_capacity(ws.len()),
    };
    let all: Vec<usize> = (0..ws.len()).collect();
    for chunk in all.chunks(EVAL_BATCH) {
        let probs = graph.forward(&batch_tensor(ws, chunk), false)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| ws.windows[i].label).collect();
        let (loss, _) = cross_entropy(&probs, &labels)?;
        out.loss += loss * chunk.len() as f64;
        let k = graph.n_classes;
        for (row, &label) in probs.data().chunks(k).zip(&labels) {
            let p = argmax(row);
            out.correct += usize::from(p == label);
            out.predictions.push(p);
            out.probabilities.push(row.to_vec());
        }
    }
    out.loss /= ws.len() as f64;
    Ok(out)
}

/// Epoch-level majority vote over window predictions; ties go to the larger summed probability.
/// Returns `(correct epochs, epochs)`.
pub fn epoch_vote(ws: &WindowSet, eval: &Evaluation) -> (usize, usize) {
    let mut groups: std::collections::BTreeMap<usize, (usize, Vec<usize>, Vec<f64>)> = Default::default();
    for (i, w) in ws.windows.iter().enumerate() {
        let k = eval.probabilities[i].len();
        let e = groups.entry(w.epoch).or_insert_with(|| (w.label, vec![0; k], vec![0.0; k]));
        e.1[eval.predictions[i]] += 1;
        for (acc, p) in e.2.iter_mut().zip(&eval.probabilities[i]) {
            *acc += *p as f64;
        }
    }
    let correct = groups
        .values()
        .filter(|(label, votes, mass)| {
            let winner = (0..votes.len())
                .max_by(|&a, &b| votes[a].cmp(&votes[b]).then(mass[a].total_cmp(&mass[b])).then(b.cmp(&a)))
                .expect("classes");
            winner == *label
        })
        .count();
    (correct, groups.len())
}

/// Mini-batch Adam over shuffled windows with the callbacks after every epoch; the
/// snapshot weights are restored before returning.
pub fn train(graph: &mut ModelGraph<f32>, train: &WindowSet, val: &WindowSet, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training and validation windows must be non-empty"));
    }
    let adam = config.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 0x7a11));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut state = CallbackState::default();
    let mut history = Vec::new();

    let first = evaluate(graph, val)?;
    history.push(EpochRecord {
        epoch: 0,
        train_loss: f64::NAN,
        train_acc: f64::NAN,
        val_loss: first.loss,
        val_acc: first.accuracy(),
    });
    let mut decision = callback_step(&mut state, config, 0, first.loss, first.accuracy(), || graph.state());
    let mut epoch = 0;
    while decision == Decision::Continue {
        epoch += 1;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let x = batch_tensor(train, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.windows[i].label).collect();
            let probs = graph.forward(&x, true)?;
            let (loss, grad) = cross_entropy(&probs, &labels)?;
            loss_sum += loss * chunk.len() as f64;
            correct += probs
                .data()
                .chunks(graph.n_classes)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
            graph.backward(&grad)?;
            graph.adam_step(&adam)?;
        }
        let v = evaluate(graph, val)?;
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_loss: v.loss,
            val_acc: v.accuracy(),
        });
        decision = callback_step(&mut state, config, epoch, v.loss, v.accuracy(), || graph.state());
    }
    let Decision::Stop(reason) = decision else { unreachable!() };
    if let Some(best) = &state.snapshot {
        graph.load_state(best)?;
    }
    Ok(TrainOutcome {
        history,
        stop_reason: reason,
        best_epoch: state.snapshot_epoch.unwrap_or(0),
        epochs_run: epoch,
    })
}

/// Windows of the listed epochs; each window keeps its epoch's index in `set`.
pub fn windows_of(set: &EpochSet, indices: &[usize], config: &TrainConfig) -> Result<WindowSet> {
    let mut ws = WindowSet::default();
    for &i in indices {
        let e = &set.epochs[i];
        ws.extend(extract_windows(&e.data, set.fs, config.window_s, config.shift_s, i, e.label, config.scale)?)?;
    }
    Ok(ws)
}

fn epoch_ids(ws: &WindowSet) -> BTreeSet<usize> {
    ws.windows.iter().map(|w| w.epoch).collect()
}

/// Fails if any epoch contributes windows to more than one of the sets.
pub fn check_no_leakage(train: &WindowSet, val: &WindowSet, test: &WindowSet) -> Result<()> {
    let (a, b, c) = (epoch_ids(train), epoch_ids(val), epoch_ids(test));
    let shared: Vec<usize> = a.intersection(&c).chain(b.intersection(&c)).chain(a.intersection(&b)).copied().collect();
    if shared.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidState(format!("epochs {shared:?} feed more than one of train/validation/test")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    /// Window-level accuracy, or epoch-level when `epoch_vote` is set.
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub history: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

/// One subject's (or virtual subject's) epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub name: String,
    pub epochs: EpochSet,
}

pub fn signature(set: &EpochSet, config: &TrainConfig) -> InputSignature {
    InputSignature {
        channels: set.channels(),
        samples: (config.window_s * set.fs).round() as usize,
        fs: set.fs,
        n_classes: set.classes.len(),
    }
}

fn score(graph: &mut ModelGraph<f32>, test: &WindowSet, config: &TrainConfig) -> Result<(usize, usize)> {
    let eval = evaluate(graph, test)?;
    Ok(if config.epoch_vote {
        epoch_vote(test, &eval)
    } else {
        (eval.correct, eval.total)
    })
}

/// Trains `graph` on one fold of `subject` and scores the fold's test epochs.
fn run_fold(
    graph: &mut ModelGraph<f32>,
    subject: &Subject,
    fold_index: usize,
    fold: &Fold,
    config: &TrainConfig,
    mut log: impl FnMut(&[usize], &[usize]),
) -> Result<FoldResult> {
    let set = &subject.epochs;
    let labels = set.labels();
    let base = mix_seed(config.seed, name_tag(&subject.name) ^ fold_index as u64);
    let pool = match config.fold_train_cap {
        Some(cap) => cap_per_class(&fold.train, &labels, cap),
        None => fold.train.clone(),
    };
    let (tr, va) = split_validation(&pool, &labels, set.classes.len(), config.validation_fraction, mix_seed(base, 1))?;
    log(&tr, &va);
    let train_ws = windows_of(set, &tr, config)?;
    let val_ws = windows_of(set, &va, config)?;
    let test_ws = windows_of(set, &fold.test, config)?;
    check_no_leakage(&train_ws, &val_ws, &test_ws)?;
    let fold_config = TrainConfig {
        seed: mix_seed(base, 2),
        ..config.clone()
    };
    let outcome = train(graph, &train_ws, &val_ws, &fold_config)?;
    let (correct, total) = score(graph, &test_ws, config)?;
    Ok(FoldResult {
        fold: fold_index,
        accuracy: correct as f64 / total as f64,
        correct,
        total,
        history: outcome.history,
        stop_reason: outcome.stop_reason,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.epochs_run,
    })
}

fn subject_folds(subject: &Subject, config: &TrainConfig) -> Result<Vec<Fold>> {
    split_folds(
        &subject.epochs.labels(),
        subject.epochs.classes.len(),
        config.folds,
        mix_seed(config.seed, name_tag(&subject.name)),
    )
}

/// k-fold cross-validation on one subject with a freshly initialized network per fold.
pub fn within_subject_experiment(subject: &Subject, kind: ArchitectureKind, config: &TrainConfig) -> Result<Vec<FoldResult>> {
    config.validate()?;
    let folds = subject_folds(subject, config)?;
    let sig = signature(&subject.epochs, config);
    folds
        .iter()
        .enumerate()
        .map(|(i, fold)| {
            let seed = mix_seed(config.seed, name_tag(&subject.name) ^ (0x100 + i as u64));
            let mut graph = build_model::<f32>(kind, &sig, seed)?;
            run_fold(&mut graph, subject, i, fold, config, |_, _| {})
        })
        .collect()
}

/// Who read which epochs, during which stage of a transfer experiment.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AccessStage {
    Pretrain { group: usize },
    FineTune { subject: String, fold: usize },
    Evaluate { subject: String, fold: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataAccess {
    pub stage: AccessStage,
    pub subject: String,
    pub epochs: Vec<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessLog {
    pub reads: Vec<DataAccess>,
    /// `(subject, fold)` for every load of the stored pretraining weights.
    pub weight_loads: Vec<(String, usize)>,
}

impl AccessLog {
    /// Pretraining of a group never touches its own subjects; fine-tuning reads only the
    /// fold's subject and never its test epochs; every fold starts from loaded weights.
    pub fn verify(&self, groups: &[Vec<String>]) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidState(m));
        for r in &self.reads {
            match &r.stage {
                AccessStage::Pretrain { group } => {
                    if groups[*group].contains(&r.subject) {
                        return fail(format!("pretraining for group {group} read test subject {}", r.subject));
                    }
                }
                AccessStage::FineTune { subject, fold } => {
                    if *subject != r.subject {
                        return fail(format!("fine-tuning {subject} fold {fold} read subject {}", r.subject));
                    }
                    let tested = self.reads.iter().filter(|o| {
                        o.stage
                            == AccessStage::Evaluate {
                                subject: subject.clone(),
                                fold: *fold,
                            }
                    });
                    for t in tested {
                        if t.epochs.iter().any(|e| r.epochs.contains(e)) {
                            return fail(format!("fine-tuning {subject} fold {fold} read its test epochs"));
                        }
                    }
                    if !self.weight_loads.contains(&(subject.clone(), *fold)) {
                        return fail(format!("{subject} fold {fold} did not start from the stored weights"));
                    }
                }
                AccessStage::Evaluate { .. } => {}
            }
        }
        Ok(())
    }
}

pub const TRANSFER_GROUP: usize = 10;

/// Consecutive groups of ten subjects (the last may be smaller).
pub fn transfer_groups(n_subjects: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if n_subjects <= TRANSFER_GROUP {
        return Err(Error::invalid(format!(
            "transfer learning needs at least {} subjects, got {n_subjects}",
            TRANSFER_GROUP + 1
        )));
    }
    Ok((0..n_subjects)
        .step_by(TRANSFER_GROUP)
        .map(|s| s..(s + TRANSFER_GROUP).min(n_subjects))
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferOutcome {
    /// Fine-tuned fold results in subject order.
    pub results: Vec<(String, Vec<FoldResult>)>,
    pub groups: Vec<Vec<String>>,
    pub pretraining: Vec<TrainOutcome>,
    pub log: AccessLog,
}

/// Pretrains one network per subject group on everyone else, then runs k-fold
/// fine-tuning for each group member starting every fold from the stored weights.
pub fn transfer_experiment(subjects: &[Subject], kind: ArchitectureKind, config: &TrainConfig) -> Result<TransferOutcome> {
    config.validate()?;
    let ranges = transfer_groups(subjects.len())?;
    let first = &subjects[0].epochs;
    if subjects.iter().any(|s| {
        s.epochs.classes != first.classes || s.epochs.channel_names != first.channel_names || s.epochs.fs != first.fs
    }) {
        return Err(Error::invalid("transfer subjects must share classes, channels and sampling rate"));
    }
    let sig = signature(first, config);
    let mut log = AccessLog::default();
    let mut results = Vec::new();
    let mut pretraining = Vec::new();
    let groups: Vec<Vec<String>> = ranges
        .iter()
        .map(|r| subjects[r.clone()].iter().map(|s| s.name.clone()).collect())
        .collect();

    for (g, range) in ranges.iter().enumerate() {
        // pool every non-group subject's epochs
        let mut pool = EpochSet::empty(first.fs, first.classes.clone(), first.channel_names.clone(), first.coordinates.clone());
        for (i, s) in subjects.iter().enumerate() {
            if range.contains(&i) {
                continue;
            }
            log.reads.push(DataAccess {
                stage: AccessStage::Pretrain { group: g },
                subject: s.name.clone(),
                epochs: (0..s.epochs.len()).collect(),
            });
            pool.append(s.epochs.clone())?;
        }
        let seed = mix_seed(config.seed, 0xfeed ^ g as u64);
        let all: Vec<usize> = (0..pool.len()).collect();
        let (tr, va) = split_validation(&all, &pool.labels(), pool.classes.len(), config.validation_fraction, seed)?;
        let train_ws = windows_of(&pool, &tr, config)?;
        let val_ws = windows_of(&pool, &va, config)?;
        let mut graph = build_model::<f32>(kind, &sig, seed)?;
        let outcome = train(&mut graph, &train_ws, &val_ws, &TrainConfig { seed, ..config.clone() })?;
        log::info!(
            "{kind} group {g}: pretrained on {} subjects, stop {} at epoch {}",
            subjects.len() - range.len(),
            outcome.stop_reason,
            outcome.epochs_run
        );
        pretraining.push(outcome);
        let stored = graph.weights_to_bytes();

        for subject in &subjects[range.clone()] {
            let folds = subject_folds(subject, config)?;
            let mut fold_results = Vec::new();
            for (i, fold) in folds.iter().enumerate() {
                let mut model = build_model::<f32>(kind, &sig, seed)?;
                model.load_weights_from_bytes(&stored)?;
                log.weight_loads.push((subject.name.clone(), i));
                log.reads.push(DataAccess {
                    stage: AccessStage::Evaluate {
                        subject: subject.name.clone(),
                        fold: i,
                    },
                    subject: subject.name.clone(),
                    epochs: fold.test.clone(),
                });
                let reads = &mut log.reads;
                let result = run_fold(&mut model, subject, i, fold, config, |tr, va| {
                    reads.push(DataAccess {
                        stage: AccessStage::FineTune {
                            subject: subject.name.clone(),
                            fold: i,
                        },
                        subject: subject.name.clone(),
                        epochs: tr.iter().chain(va).copied().collect(),
                    });
                })?;
                fold_results.push(result);
            }
            results.push((subject.name.clone(), fold_results));
        }
    }
    log.verify(&groups)?;
    Ok(TransferOutcome {
        results,
        groups,
        pretraining,
        log,
    })
}

/// Randomly permutes epoch labels (class counts unchanged), for chance-level controls.
pub fn permute_labels(set: &EpochSet, seed: u64) -> EpochSet {
    let mut labels = set.labels();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = set.clone();
    for (e, l) in out.epochs.iter_mut().zip(labels) {
        e.label = l;
    }
    out
}

/// One line of the fold-results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldRow {
    pub database: String,
    pub subject: String,
    pub network: String,
    pub mode: Mode,
    pub fold: usize,
    pub accuracy: f64,
    pub stop_reason: StopReason,
    pub epochs_run: usize,
}

impl FoldRow {
    pub fn from_results(database: &str, subject: &str, network: ArchitectureKind, mode: Mode, results: &[FoldResult]) -> Vec<FoldRow> {
        results
            .iter()
            .map(|r| FoldRow {
                database: database.to_string(),
                subject: subject.to_string(),
                network: network.id().to_string(),
                mode,
                fold: r.fold,
                accuracy: r.accuracy,
                stop_reason: r.stop_reason,
                epochs_run: r.epochs_run,
            })
            .collect()
    }
}

/// Writes rows as CSV with a header line.
pub fn write_fold_rows<W: Write>(w: W, rows: &[FoldRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_fold_rows<R: std::io::Read>(r: R) -> Result<Vec<FoldRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Epoch;
    use proptest::prelude::*;
    use rand::Rng;

    fn labels(per_class: &[usize]) -> Vec<usize> {
        per_class.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat(c).take(n)).collect()
    }

    #[test]
    fn folds_of_forty_epochs_four_classes() {
        let y = labels(&[10, 10, 10, 10]);
        let folds = split_folds(&y, 4, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut seen = BTreeSet::new();
        for f in &folds {
            assert_eq!(f.test.len(), 8);
            for c in 0..4 {
                assert_eq!(f.test.iter().filter(|&&i| y[i] == c).count(), 2);
            }
            assert_eq!(f.train.len() + f.test.len(), 40);
            assert!(f.test.iter().all(|i| !f.train.contains(i)));
            assert!(f.test.iter().all(|&i| seen.insert(i)));
        }
        assert_eq!(seen.len(), 40);
        assert_eq!(folds, split_folds(&y, 4, 5, 3).unwrap());
        assert_ne!(folds, split_folds(&y, 4, 5, 4).unwrap());
    }

    #[test]
    fn folds_reject_small_classes() {
        assert!(split_folds(&labels(&[10, 4]), 2, 5, 0).is_err());
        assert!(split_folds(&[0, 3], 2, 2, 0).is_err());
    }

    proptest! {
        #[test]
        fn folds_partition_and_balance(counts in proptest::collection::vec(5usize..20, 2..5), k in 2usize..6, seed: u64) {
            let y = labels(&counts);
            let folds = split_folds(&y, counts.len(), k, seed).unwrap();
            let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..y.len()).collect::<Vec<_>>());
            let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for c in 0..counts.len() {
                let per: Vec<usize> = folds.iter().map(|f| f.test.iter().filter(|&&i| y[i] == c).count()).collect();
                prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            }
        }
    }

    #[test]
    fn validation_split_examples() {
        let y = labels(&[50, 50]);
        let idx: Vec<usize> = (0..100).collect();
        let (tr, va) = split_validation(&idx, &y, 2, 0.1, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (90, 10));
        assert_eq!(va.iter().filter(|&&i| y[i] == 0).count(), 5);

        let y = labels(&[10, 10, 10, 10]);
        let idx: Vec<usize> = (0..40).collect();
        let (_, va) = split_validation(&idx, &y, 4, 0.1, 1).unwrap();
        assert_eq!(va.len(), 4);
        for c in 0..4 {
            assert_eq!(va.iter().filter(|&&i| y[i] == c).count(), 1);
        }
        // subsets keep the caller's indices
        let sub: Vec<usize> = (0..40).step_by(2).collect();
        let (tr, va) = split_validation(&sub, &y, 4, 0.1, 1).unwrap();
        assert!(tr.iter().chain(&va).all(|i| i % 2 == 0));
        assert_eq!(tr.len() + va.len(), 20);
    }

    #[test]
    fn validation_split_rejects_impossible_stratification() {
        let y = labels(&[11, 1]);
        assert!(split_validation(&(0..12).collect::<Vec<_>>(), &y, 2, 0.1, 0).is_err());
        let y = labels(&[5, 4]);
        assert!(split_validation(&(0..9).collect::<Vec<_>>(), &y, 2, 0.1, 0).is_err());
    }

    fn script(config: &TrainConfig, losses: impl Fn(usize) -> f64, accs: impl Fn(usize) -> f64) -> (usize, StopReason, usize) {
        let mut state = CallbackState::default();
        for epoch in 0.. {
            if let Decision::Stop(r) = callback_step(&mut state, config, epoch, losses(epoch), accs(epoch), || epoch) {
                return (epoch, r, state.snapshot.unwrap());
            }
        }
        unreachable!()
    }

    #[test]
    fn callback_gives_up_at_one_hundred() {
        let c = TrainConfig::default();
        let (stop, reason, snap) = script(&c, |e| if e == 0 { 1.0 } else { 1.1 }, |e| if e == 40 { 0.7 } else { 0.5 });
        assert_eq!((stop, reason), (100, StopReason::GiveUp));
        assert_eq!(snap, 40);
    }

    #[test]
    fn callback_patience_after_reaching_initial_loss() {
        let c = TrainConfig::default();
        let loss = |e: usize| if e < 5 { 1.0 + 0.01 * e as f64 } else if e == 5 { 0.9 } else { 0.95 };
        let (stop, reason, snap) = script(&c, loss, |_| 0.5);
        assert_eq!((stop, reason, snap), (25, StopReason::Patience, 5));
        // an improving loss resets the counter even without an accuracy gain
        let loss = |e: usize| match e {
            0 => 1.0,
            1..=10 => 1.0 - 0.01 * e as f64,
            _ => 0.95,
        };
        let (stop, reason, _) = script(&c, loss, |_| 0.5);
        assert_eq!((stop, reason), (30, StopReason::Patience));
    }

    #[test]
    fn callback_runs_to_max_epochs_on_monotone_improvement() {
        let c = TrainConfig {
            max_epochs: 150,
            ..TrainConfig::default()
        };
        let (stop, reason, snap) = script(&c, |e| 1.0 / (1.0 + e as f64), |e| e as f64 / 200.0);
        assert_eq!((stop, reason, snap), (150, StopReason::MaxEpochs, 150));
    }

    #[test]
    fn non_finite_loss_is_no_improvement() {
        let c = TrainConfig::default();
        let loss = |e: usize| if e == 0 { 1.0 } else if e == 1 { 0.5 } else { f64::NAN };
        assert_eq!(script(&c, loss, |_| 0.9), (21, StopReason::Patience, 1));
        assert_eq!(script(&c, |e| if e == 0 { 1.0 } else { f64::INFINITY }, |_| 0.5).1, StopReason::GiveUp);
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            give_up: 600,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { patience: 0, ..TrainConfig::default() }.validate().is_err());
    }

    /// Two channels at 32 Hz; class c carries a 4 Hz sine on channel c.
    fn toy_subject(name: &str, per_class: usize, seed: u64, flip: bool) -> Subject {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fs = 32.0;
        let mut set = EpochSet::empty(fs, vec!["a".into(), "b".into()], vec!["c0".into(), "c1".into()], None);
        for i in 0..2 * per_class {
            let label = i % 2;
            let phase = rng.gen_range(0.0..6.28);
            let data = (0..2)
                .map(|ch| {
                    (0..64)
                        .map(|t| {
                            let s = if ch == label { (6.283 * 4.0 * t as f64 / fs + phase).sin() } else { 0.0 };
                            s + 0.3 * rng.gen_range(-1.0..1.0)
                        })
                        .collect()
                })
                .collect();
            set.epochs.push(Epoch {
                data,
                label: if flip { 1 - label } else { label },
                subject: name.into(),
            });
        }
        Subject {
            name: name.into(),
            epochs: set,
        }
    }

    fn toy_config() -> TrainConfig {
        TrainConfig {
            max_epochs: 15,
            give_up: 8,
            patience: 5,
            batch_size: 16,
            lr: 1e-2,
            seed: 7,
            window_s: 1.0,
            shift_s: 0.5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_data_is_learned_and_reruns_match() {
        let s = toy_subject("s", 30, 1, false);
        let config = toy_config();
        let all: Vec<usize> = (0..s.epochs.len()).collect();
        let (tr, va) = split_validation(&all, &s.epochs.labels(), 2, 0.1, 0).unwrap();
        let train_ws = windows_of(&s.epochs, &tr, &config).unwrap();
        let val_ws = windows_of(&s.epochs, &va, &config).unwrap();
        let sig = signature(&s.epochs, &config);
        let run = || {
            let mut g = build_model::<f32>(ArchitectureKind::EegNet, &sig, 3).unwrap();
            let out = train(&mut g, &train_ws, &val_ws, &config).unwrap();
            (out, evaluate(&mut g, &train_ws).unwrap().accuracy())
        };
        let (a, acc) = run();
        assert!(acc >= 0.95, "train accuracy {acc}");
        assert!(a.best_epoch <= a.epochs_run);
        assert_eq!(a.history.len(), a.epochs_run + 1);
        let (b, _) = run();
        assert_eq!(format!("{:?}", a.history), format!("{:?}", b.history));
    }

    #[test]
    fn mismatched_validation_gives_up() {
        let s = toy_subject("s", 30, 2, false);
        let v = toy_subject("v", 10, 3, true);
        let config = toy_config();
        let train_ws = windows_of(&s.epochs, &(0..60).collect::<Vec<_>>(), &config).unwrap();
        let val_ws = windows_of(&v.epochs, &(0..20).collect::<Vec<_>>(), &config).unwrap();
        let mut g = build_model::<f32>(ArchitectureKind::EegNet, &signature(&s.epochs, &config), 1).unwrap();
        let out = train(&mut g, &train_ws, &val_ws, &config).unwrap();
        assert_eq!((out.stop_reason, out.epochs_run), (StopReason::GiveUp, 8));
    }

    #[test]
    fn leakage_and_vote_checks() {
        let s = toy_subject("s", 5, 0, false);
        let c = toy_config();
        let a = windows_of(&s.epochs, &[0, 1, 2], &c).unwrap();
        let b = windows_of(&s.epochs, &[3], &c).unwrap();
        let t = windows_of(&s.epochs, &[4, 2], &c).unwrap();
        assert!(check_no_leakage(&a, &b, &windows_of(&s.epochs, &[4], &c).unwrap()).is_ok());
        assert!(check_no_leakage(&a, &b, &t).is_err());

        // three windows per epoch; epoch 4 (label 0) wins 2:1, epoch 2 (label 0) loses 1:2
        let eval = Evaluation {
            loss: 0.0,
            correct: 0,
            total: 6,
            predictions: vec![0, 1, 0, 1, 1, 0],
            probabilities: vec![vec![0.6, 0.4]; 6],
        };
        assert_eq!(t.len(), 6);
        assert_eq!(epoch_vote(&t, &eval), (1, 2));
    }

    #[test]
    fn transfer_groups_of_ten() {
        let g = transfer_groups(25).unwrap();
        assert_eq!(g, vec![0..10, 10..20, 20..25]);
        assert!(transfer_groups(10).is_err());
    }

    #[test]
    fn transfer_reads_no_test_subject_data() {
        let subjects: Vec<Subject> = (0..11).map(|i| toy_subject(&format!("s{i:02}"), 8, i, false)).collect();
        let config = TrainConfig {
            max_epochs: 2,
            give_up: 2,
            patience: 1,
            ..toy_config()
        };
        let out = transfer_experiment(&subjects, ArchitectureKind::EegNet, &config).unwrap();
        assert_eq!(out.groups.len(), 2);
        assert_eq!(out.results.len(), 11);
        assert_eq!(out.log.weight_loads.len(), 55);
        out.log.verify(&out.groups).unwrap();
        for r in &out.log.reads {
            if let AccessStage::Pretrain { group: 1 } = r.stage {
                assert_ne!(r.subject, "s10");
            }
        }
        let mut tampered = out.log.clone();
        tampered.reads.push(DataAccess {
            stage: AccessStage::Pretrain { group: 0 },
            subject: "s03".into(),
            epochs: vec![0],
        });
        assert!(tampered.verify(&out.groups).is_err());
    }

    #[test]
    fn fold_rows_round_trip() {
        let rows = vec![FoldRow {
            database: "synthetic".into(),
            subject: "s01".into(),
            network: "eegnet".into(),
            mode: Mode::Transfer,
            fold: 2,
            accuracy: 0.8125,
            stop_reason: StopReason::GiveUp,
            epochs_run: 100,
        }];
        let mut buf = Vec::new();
        write_fold_rows(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("database,subject,network,mode,fold,accuracy,stop_reason,epochs_run\n"));
        assert!(text.contains("transfer,2,0.8125,give_up,100"));
        assert_eq!(read_fold_rows(buf.as_slice()).unwrap(), rows);
    }
}
