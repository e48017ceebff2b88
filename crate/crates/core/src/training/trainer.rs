//! Epoch loop with a plateau schedule, plus readout, fine-tuning and export.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::config::{Regularization, TrainConfig, TrainMode};
use super::optim::AdamW;
use super::{id_hash, stream_rng, Example};
use crate::e4mer::{E4mer, HeadKind, Mode, ParamGroup, Target};
use crate::error::{Error, Result};
use crate::pretext::{sample_masked, sample_transform, MaskSpec, PretextSample, TransformParams};

/// Epoch tag of the fixed pretext samples used for validation.
const VAL_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretextOptions {
    pub mask: MaskSpec,
    pub transforms: TransformParams,
    /// Reuse one mask per segment for every epoch instead of redrawing.
    pub freeze_masks: bool,
}

impl Default for PretextOptions {
    fn default() -> Self {
        PretextOptions { mask: MaskSpec::default(), transforms: TransformParams::default(), freeze_masks: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleDecision {
    Improved,
    Wait,
    Reduce,
    Stop,
}

/// Tracks a lower-is-better validation criterion.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    patience: usize,
    max_reductions: usize,
    min_delta: f64,
    best: f64,
    since_best: usize,
    reductions: usize,
}

impl PlateauSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        PlateauSchedule {
            patience: cfg.patience_epochs,
            max_reductions: cfg.max_reductions,
            min_delta: cfg.min_delta,
            best: f64::INFINITY,
            since_best: 0,
            reductions: 0,
        }
    }

    pub fn reductions(&self) -> usize {
        self.reductions
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, value: f64) -> ScheduleDecision {
        if value < self.best - self.min_delta || (self.best.is_infinite() && value.is_finite()) {
            self.best = value;
            self.since_best = 0;
            return ScheduleDecision::Improved;
        }
        self.since_best += 1;
        if self.since_best < self.patience {
            return ScheduleDecision::Wait;
        }
        self.since_best = 0;
        if self.reductions >= self.max_reductions {
            return ScheduleDecision::Stop;
        }
        self.reductions += 1;
        ScheduleDecision::Reduce
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Plateau,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::Plateau => "plateau",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: Option<f64>,
    pub decision: ScheduleDecision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Lower is better: the pretext loss, or minus the segment accuracy.
    pub best_criterion: f64,
    pub reductions: usize,
    pub stop_reason: StopReason,
    pub wall_time_s: f64,
    /// Extra named results appended by callers, e.g. a test-set loss.
    pub extra: Vec<(String, f64)>,
}

impl TrainReport {
    /// One tab-separated line per epoch.
    pub fn to_log(&self) -> String {
        let mut s = String::from("epoch\tlr\ttrain_loss\tval_loss\tval_accuracy\tdecision\n");
        for e in &self.epochs {
            let acc = e.val_accuracy.map_or(String::from("-"), |a| a.to_string());
            let d = match e.decision {
                ScheduleDecision::Improved => "improved",
                ScheduleDecision::Wait => "wait",
                ScheduleDecision::Reduce => "reduce_lr",
                ScheduleDecision::Stop => "stop",
            };
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", e.epoch, e.lr, e.train_loss, e.val_loss, acc, d);
        }
        s
    }

    /// `key=value` summary. Wall time is left out so that reruns compare equal.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mode={}", self.mode.as_str());
        let _ = writeln!(s, "epochs_run={}", self.epochs.len());
        let _ = writeln!(s, "best_epoch={}", self.best_epoch);
        let _ = writeln!(s, "best_val_criterion={}", self.best_criterion);
        let _ = writeln!(s, "reductions={}", self.reductions);
        let _ = writeln!(s, "stop_reason={}", self.stop_reason.as_str());
        if let Some(last) = self.epochs.last() {
            let _ = writeln!(s, "final_lr={}", last.lr);
        }
        for (k, v) in &self.extra {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

fn expected_head(mode: TrainMode) -> HeadKind {
    match mode {
        TrainMode::PretrainMasked => HeadKind::Reconstruction,
        TrainMode::PretrainTransform => HeadKind::Transform,
        _ => HeadKind::Classifier,
    }
}

fn pretext_samples(
    model: &E4mer,
    examples: &[&Example],
    mode: TrainMode,
    opts: &PretextOptions,
    seed: u64,
    epoch: u64,
) -> Result<Vec<PretextSample>> {
    let rates: Vec<usize> = model.config().rates.to_vec();
    examples
        .par_iter()
        .map(|ex| {
            let tag = if opts.freeze_masks && mode == TrainMode::PretrainMasked { 0 } else { epoch };
            let mut rng = stream_rng(seed, "pretext", &[id_hash(&ex.id), tag]);
            match mode {
                TrainMode::PretrainMasked => Ok(sample_masked(&ex.channels, &rates, &opts.mask, &mut rng)),
                _ => sample_transform(&ex.channels, &opts.transforms, &mut rng),
            }
        })
        .collect()
}

fn labels_of(examples: &[&Example]) -> Result<Vec<usize>> {
    examples
        .iter()
        .map(|e| e.label.ok_or_else(|| Error::Config(format!("segment {} has no label", e.id))))
        .collect()
}

/// Loss and gradients of one batch.
fn batch_step(
    model: &E4mer,
    batch: &[&Example],
    cfg: &TrainConfig,
    opts: &PretextOptions,
    epoch: u64,
    step: u64,
) -> Result<crate::e4mer::StepResult> {
    let freeze = cfg.mode == TrainMode::LinearReadout;
    let mut rng = stream_rng(cfg.seed, "dropout", &[epoch, step]);
    if cfg.mode.is_pretraining() {
        let samples = pretext_samples(model, batch, cfg.mode, opts, cfg.seed, epoch)?;
        match cfg.mode {
            TrainMode::PretrainMasked => {
                let mut inputs = Vec::with_capacity(samples.len());
                let mut masks = Vec::with_capacity(samples.len());
                let mut targets = Vec::with_capacity(samples.len());
                for s in samples {
                    if let PretextSample::Masked { input, masks: m, target } = s {
                        inputs.push(input);
                        masks.push(m);
                        targets.push(target);
                    }
                }
                let t = Target::Masked { targets: &targets, masks: &masks };
                model.loss_and_grads(&inputs, &t, Mode::Train, freeze, Some(&mut rng))
            }
            _ => {
                let mut inputs = Vec::with_capacity(samples.len());
                let mut labels = Vec::with_capacity(samples.len());
                for s in samples {
                    if let PretextSample::Transformed { input, labels: l } = s {
                        inputs.push(input);
                        labels.push(l);
                    }
                }
                model.loss_and_grads(&inputs, &Target::Transforms(&labels), Mode::Train, freeze, Some(&mut rng))
            }
        }
    } else {
        let y = labels_of(batch)?;
        let inputs: Vec<&[Vec<f64>]> = batch.iter().map(|e| e.channels.as_slice()).collect();
        model.loss_and_grads(&inputs, &Target::Classes(&y), Mode::Train, freeze, Some(&mut rng))
    }
}

/// Eval-mode pretext loss over `examples`: global RMSE over all masked cells
/// for masking, mean multitask cross-entropy for transforms. Samples are
/// drawn from fixed per-segment streams so repeated calls agree.
pub fn pretext_loss(
    model: &E4mer,
    examples: &[Example],
    mode: TrainMode,
    opts: &PretextOptions,
    seed: u64,
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyPool);
    }
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut cce = 0.0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let samples = pretext_samples(model, &refs, mode, opts, seed, VAL_EPOCH)?;
        let inputs: Vec<&[Vec<f64>]> = samples.iter().map(|s| s.input()).collect();
        match mode {
            TrainMode::PretrainMasked => {
                let out = model.reconstruct(&inputs)?;
                for (s, pred) in samples.iter().zip(&out) {
                    let PretextSample::Masked { masks, target, .. } = s else { unreachable!() };
                    for c in 0..6 {
                        for i in 0..pred[c].len() {
                            if masks[c][i] {
                                sq += (pred[c][i] - target[c][i]).powi(2);
                                count += 1;
                            }
                        }
                    }
                }
            }
            TrainMode::PretrainTransform => {
                let logits = model.transform_logits(&inputs)?;
                for (s, l) in samples.iter().zip(&logits) {
                    let PretextSample::Transformed { labels, .. } = s else { unreachable!() };
                    cce += crate::pretext::multitask_cce(l, labels);
                }
            }
            other => return Err(Error::Config(format!("{} is not a pretext mode", other.as_str()))),
        }
    }
    Ok(match mode {
        TrainMode::PretrainMasked => {
            if count == 0 {
                return Err(Error::EmptyMask);
            }
            (sq / count as f64).sqrt()
        }
        _ => cce / examples.len() as f64,
    })
}

/// `[p(euthymia), p(acute)]` per example, in eval mode.
pub fn predict(model: &E4mer, examples: &[Example], batch_size: usize) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let inputs: Vec<&[Vec<f64>]> = chunk.iter().map(|e| e.channels.as_slice()).collect();
        out.extend(model.predict_proba(&inputs)?);
    }
    Ok(out)
}

/// Mean binary cross-entropy and accuracy at threshold 0.5.
fn classification_scores(model: &E4mer, examples: &[Example], batch_size: usize) -> Result<(f64, f64)> {
    let probs = predict(model, examples, batch_size)?;
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (p, e) in probs.iter().zip(examples) {
        let y = e.label.ok_or_else(|| Error::Config(format!("segment {} has no label", e.id)))?;
        loss -= p[y].max(1e-300).ln();
        correct += usize::from(usize::from(p[1] > 0.5) == y);
    }
    let n = examples.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Trains `model` in place and leaves it at the best validation epoch.
pub fn train(
    model: &mut E4mer,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    opts: &PretextOptions,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyPool);
    }
    if val_set.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    if model.head() != expected_head(cfg.mode) {
        return Err(Error::ConfigMismatch(format!(
            "{} needs a {} head, model has {}",
            cfg.mode.as_str(),
            expected_head(cfg.mode).as_str(),
            model.head().as_str()
        )));
    }
    let started = Instant::now();
    let freeze = cfg.mode == TrainMode::LinearReadout;
    let trainable = move |p: &crate::e4mer::Param| match p.group {
        ParamGroup::Head => true,
        ParamGroup::Encoder => !freeze,
        ParamGroup::Buffer => false,
    };
    let mut opt = AdamW::new(model.params());
    let mut sched = PlateauSchedule::new(cfg);
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut lr = cfg.lr;
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(cfg.seed, "shuffle", &[epoch as u64]));
        let mut loss_sum = 0.0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_set[i]).collect();
            let r = batch_step(model, &batch, cfg, opts, epoch as u64, step as u64)?;
            if !r.loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step });
            }
            loss_sum += r.loss * batch.len() as f64;
            opt.step(model.params_mut(), &r.grads, lr, cfg.weight_decay, trainable);
            model.apply_bn_updates(&r.bn_updates);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (val_loss, val_accuracy, criterion) = if cfg.mode.is_pretraining() {
            let l = pretext_loss(model, val_set, cfg.mode, opts, cfg.seed, cfg.batch_size)?;
            (l, None, l)
        } else {
            let (l, acc) = classification_scores(model, val_set, cfg.batch_size)?;
            (l, Some(acc), -acc)
        };
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: usize::MAX });
        }
        let decision = sched.observe(criterion);
        log::info!(
            "{} epoch {epoch}: lr {lr:.3e} train {train_loss:.5} val {val_loss:.5}{}",
            cfg.mode.as_str(),
            val_accuracy.map_or(String::new(), |a| format!(" acc {a:.4}"))
        );
        epochs.push(EpochRecord { epoch, lr, train_loss, val_loss, val_accuracy, decision });
        match decision {
            ScheduleDecision::Improved => {
                best = model.clone();
                best_epoch = epoch;
            }
            ScheduleDecision::Wait => {}
            ScheduleDecision::Reduce => {
                *model = best.clone();
                lr = cfg.lr_after(sched.reductions());
                opt = AdamW::new(model.params());
            }
            ScheduleDecision::Stop => {
                stop_reason = StopReason::Plateau;
                break;
            }
        }
    }
    *model = best;
    Ok(TrainReport {
        mode: cfg.mode,
        epochs,
        best_epoch,
        best_criterion: sched.best(),
        reductions: sched.reductions(),
        stop_reason,
        wall_time_s: started.elapsed().as_secs_f64(),
        extra: Vec::new(),
    })
}

fn check_geometry(model: &E4mer, sets: &[&[Example]]) -> Result<()> {
    for ex in sets.iter().flat_map(|s| s.iter()) {
        let ok = ex.channels.len() == 6 && (0..6).all(|c| ex.channels[c].len() == model.config().channel_len(c));
        if !ok {
            return Err(Error::CheckpointConfigMismatch(format!(
                "segment {} does not match the checkpoint's omega/rates",
                ex.id
            )));
        }
    }
    Ok(())
}

/// Trains a fresh classifier head on a frozen copy of `pretrained`'s encoder.
pub fn linear_readout(
    pretrained: &E4mer,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
) -> Result<(E4mer, TrainReport)> {
    check_geometry(pretrained, &[train_set, val_set])?;
    let cfg = TrainConfig { mode: TrainMode::LinearReadout, ..cfg.clone() };
    let mut model = pretrained.clone();
    model.replace_head(HeadKind::Classifier, &mut stream_rng(cfg.seed, "head", &[]));
    let report = train(&mut model, train_set, val_set, &cfg, &PretextOptions::default())?;
    Ok((model, report))
}

/// Retrains everything from `pretrained`'s encoder with a fresh classifier.
pub fn fine_tune(
    pretrained: &E4mer,
    train_set: &[Example],
    val_set: &[Example],
    cfg: &TrainConfig,
    regularization: Option<Regularization>,
) -> Result<(E4mer, TrainReport)> {
    check_geometry(pretrained, &[train_set, val_set])?;
    let cfg = TrainConfig { mode: TrainMode::FineTune, ..cfg.clone() };
    let mut model = pretrained.clone();
    model.replace_head(HeadKind::Classifier, &mut stream_rng(cfg.seed, "head", &[]));
    if let Some(r) = regularization {
        model.set_regularization(r.attention_dropout, r.drop_path, r.mlp_dropout)?;
    }
    let report = train(&mut model, train_set, val_set, &cfg, &PretextOptions::default())?;
    Ok((model, report))
}

/// Encoder output averaged over the D axis: N values per example.
pub fn embed(model: &E4mer, examples: &[Example], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let n = model.config().omega_s;
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let inputs: Vec<&[Vec<f64>]> = chunk.iter().map(|e| e.channels.as_slice()).collect();
        let repr = model.forward_encoder(&inputs, Mode::Eval, None)?;
        for s in 0..chunk.len() {
            out.push(
                (0..n)
                    .map(|t| {
                        let row = repr.row(s * n + t);
                        row.iter().sum::<f64>() / row.len() as f64
                    })
                    .collect(),
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::e4mer::E4merConfig;
    use rand::Rng;

    fn sched_cfg() -> TrainConfig {
        TrainConfig::new(TrainMode::Supervised, 0.009, 0.0)
    }

    #[test]
    fn always_improving_never_reduces() {
        let mut s = PlateauSchedule::new(&sched_cfg());
        for i in 0..300 {
            assert_eq!(s.observe(-(i as f64)), ScheduleDecision::Improved);
        }
        assert_eq!(s.reductions(), 0);
    }

    #[test]
    fn plateau_reduces_twice_then_stops() {
        let mut s = PlateauSchedule::new(&sched_cfg());
        assert_eq!(s.observe(1.0), ScheduleDecision::Improved);
        let mut seen = Vec::new();
        for _ in 0..40 {
            let d = s.observe(1.0 - 1e-7);
            if d != ScheduleDecision::Wait {
                seen.push(d);
            }
            if d == ScheduleDecision::Stop {
                break;
            }
        }
        assert_eq!(seen, vec![ScheduleDecision::Reduce, ScheduleDecision::Reduce, ScheduleDecision::Stop]);
        assert_eq!(s.reductions(), 2);
    }

    fn toy(n: usize, cfg: &E4merConfig, seed: u64) -> Vec<Example> {
        let mut rng = stream_rng(seed, "toy", &[]);
        (0..n)
            .map(|i| {
                let y = i % 2;
                let shift = if y == 1 { 1.0 } else { -1.0 };
                Example {
                    id: format!("s{i}"),
                    subject_id: format!("p{}", i % 4),
                    channels: (0..6)
                        .map(|c| (0..cfg.channel_len(c)).map(|_| shift + rng.random_range(-0.5..0.5)).collect())
                        .collect(),
                    label: Some(y),
                }
            })
            .collect()
    }

    fn tiny() -> E4merConfig {
        E4merConfig {
            attention_dropout: 0.0,
            drop_path: 0.0,
            mlp_dropout: 0.0,
            num_blocks: 1,
            d_model: 8,
            mlp_dim: 8,
            num_filters: 2,
            ..E4merConfig::supervised()
        }
        .with_input(4, [2, 2, 2, 4, 2, 1])
    }

    #[test]
    fn separable_toy_loss_decreases() {
        let cfg = tiny();
        let data = toy(32, &cfg, 1);
        let mut m = E4mer::new(cfg, HeadKind::Classifier, &mut stream_rng(0, "init", &[])).unwrap();
        let mut tc = TrainConfig::new(TrainMode::Supervised, 0.01, 0.0);
        tc.max_epochs = 5;
        tc.batch_size = 8;
        let r = train(&mut m, &data, &data, &tc, &PretextOptions::default()).unwrap();
        let losses: Vec<f64> = r.epochs.iter().map(|e| e.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn readout_leaves_encoder_bit_identical() {
        let cfg = tiny();
        let data = toy(16, &cfg, 2);
        let pre = E4mer::new(cfg, HeadKind::Reconstruction, &mut stream_rng(0, "init", &[])).unwrap();
        let mut tc = TrainConfig::new(TrainMode::LinearReadout, 0.01, 0.8);
        tc.max_epochs = 3;
        tc.batch_size = 8;
        let (m, r) = linear_readout(&pre, &data, &data, &tc).unwrap();
        assert_eq!(r.mode, TrainMode::LinearReadout);
        for p in m.params().iter().filter(|p| p.group != ParamGroup::Head) {
            assert_eq!(&p.value, pre.param(&p.name).unwrap(), "{}", p.name);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny();
        let data = toy(16, &cfg, 3);
        let run = || {
            let mut m = E4mer::new(cfg.clone(), HeadKind::Reconstruction, &mut stream_rng(0, "init", &[])).unwrap();
            let mut tc = TrainConfig::new(TrainMode::PretrainMasked, 0.01, 0.05);
            tc.max_epochs = 2;
            tc.batch_size = 8;
            let r = train(&mut m, &data, &data, &tc, &PretextOptions::default()).unwrap();
            (r.to_log(), r.summary())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn embeddings_have_n_values() {
        let cfg = tiny();
        let data = toy(3, &cfg, 4);
        let m = E4mer::new(cfg, HeadKind::Classifier, &mut stream_rng(0, "init", &[])).unwrap();
        let e = embed(&m, &data, 2).unwrap();
        assert_eq!(e.len(), 3);
        assert!(e.iter().all(|v| v.len() == 4));
        assert_eq!(e, embed(&m, &data, 3).unwrap());
    }
}
