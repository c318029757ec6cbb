//! Task training loops, stratified cross-validation orchestration, and metric
//! computation.

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::model::{FaultXformer, Mode, ModelConfig, Task};
use crate::numerics::{Adam, AdamConfig, Tape, Tensor};
use crate::pipeline::{stratified_folds, Sample};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub task: Task,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    pub dropout_p: f64,
}

impl TrainConfig {
    /// Published defaults: lr 0.001, batch 32, 200 epochs for the type task
    /// and 250 for location.
    pub fn for_task(task: Task) -> TrainConfig {
        TrainConfig {
            task,
            lr: 1e-3,
            batch_size: 32,
            epochs: match task {
                Task::FaultType => 200,
                Task::FaultLocation => 250,
            },
            seed: 0,
            patience: None,
            dropout_p: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("non-positive training hyperparameter".into()));
        }
        Ok(())
    }
}

/// A flat matrix of fixed-length sequences plus labels; the common carrier
/// for both raw 2-channel inputs and frozen stage-1 encodings.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub seq_len: usize,
    pub width: usize,
    /// `n * seq_len * width`, row-major per sample.
    pub data: Vec<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Assemble the task view of a sample list. The location task is defined
    /// over faulted, location-labelled samples only.
    pub fn from_samples(samples: &[Sample], task: Task) -> Result<FeatureSet> {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut seq_len = 0;
        for s in samples {
            let label = match task {
                Task::FaultType => Some(s.type_label),
                Task::FaultLocation => {
                    if s.scenario.fault_type.is_fault() {
                        s.loc_label
                    } else {
                        None
                    }
                }
            };
            if let Some(label) = label {
                seq_len = s.features.len() / 2;
                data.extend_from_slice(&s.features);
                labels.push(label);
            }
        }
        if labels.is_empty() {
            return Err(Error::EmptySplit("feature set"));
        }
        let n_classes = match task {
            Task::FaultType => crate::model::TYPE_CLASSES,
            Task::FaultLocation => crate::model::LOCATION_CLASSES,
        };
        Ok(FeatureSet { seq_len, width: 2, data, labels, n_classes })
    }

    fn sample_stride(&self) -> usize {
        self.seq_len * self.width
    }

    /// Copy the rows at `idx` into one contiguous batch, with labels.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let stride = self.sample_stride();
        let mut out = Vec::with_capacity(idx.len() * stride);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            out.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        (out, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Fraction of this class's true samples classified correctly.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
}

/// Metrics from label/prediction pairs. Macro averages are unweighted class
/// means; 0/0 ratios are defined as 0.
pub fn metrics_from_predictions(truth: &[usize], preds: &[usize], n_classes: usize) -> Metrics {
    assert_eq!(truth.len(), preds.len());
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(preds.iter()) {
        confusion[t][p] += 1;
    }
    let total: usize = truth.len();
    let correct: usize = (0..n_classes).map(|c| confusion[c][c]).sum();
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        let tp = confusion[c][c];
        let row: usize = confusion[c].iter().sum();
        let col: usize = (0..n_classes).map(|r| confusion[r][c]).sum();
        let precision = ratio(tp, col);
        let recall = ratio(tp, row);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push(ClassMetrics { precision, recall, f1, accuracy: recall });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / n_classes as f64;
    Metrics {
        accuracy: ratio(correct, total),
        macro_precision: mean(|m| m.precision),
        macro_recall: mean(|m| m.recall),
        macro_f1: mean(|m| m.f1),
        confusion,
        per_class,
    }
}

/// Argmax predictions for the rows at `idx`.
pub fn predict(model: &FaultXformer, data: &FeatureSet, idx: &[usize]) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(64) {
        let (bx, _) = data.gather(chunk);
        let x = Tensor::new(vec![chunk.len(), data.seq_len, data.width], bx)?;
        let logits = model.logits(&x)?;
        let c = logits.len() / chunk.len();
        for row in logits.chunks_exact(c) {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            preds.push(best);
        }
    }
    Ok(preds)
}

pub fn evaluate(model: &FaultXformer, data: &FeatureSet, idx: &[usize]) -> Result<Metrics> {
    let preds = predict(model, data, idx)?;
    let truth: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    Ok(metrics_from_predictions(&truth, &preds, data.n_classes))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean training loss per completed epoch.
    pub loss_curve: Vec<f64>,
    /// Validation macro-F1 per completed epoch.
    pub val_f1_curve: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_f1: f64,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn snapshot(model: &FaultXformer) -> Vec<Vec<f64>> {
    model.param_tensors().iter().map(|t| t.data.clone()).collect()
}

fn restore(model: &mut FaultXformer, snap: &[Vec<f64>]) {
    for (t, s) in model.param_tensors_mut().iter_mut().zip(snap.iter()) {
        t.data.copy_from_slice(s);
    }
}

/// Shuffled mini-batch Adam on cross-entropy. Keeps the parameter snapshot
/// with the best validation macro-F1 and restores it on return. Deterministic
/// per (config, seed, data).
pub fn train(
    model: &mut FaultXformer,
    data: &FeatureSet,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::EmptySplit("train"));
    }
    if val_idx.is_empty() {
        return Err(Error::EmptySplit("validation"));
    }
    let sizes: Vec<usize> = model.param_tensors().iter().map(|t| t.numel()).collect();
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &sizes);
    let mut best_snapshot = snapshot(model);
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0usize;
    let mut loss_curve = Vec::new();
    let mut val_f1_curve = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.to_vec();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xEC00 + epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 0xD000 + epoch as u64));

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (bx, by) = data.gather(chunk);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let x = tape.constant(Tensor::new(vec![chunk.len(), data.seq_len, data.width], bx)?);
            let mut mode = Mode::Train { rng: &mut dropout_rng, dropout_p: cfg.dropout_p };
            let out = model.forward(&mut tape, &bound, x, &mut mode)?;
            let logits = out.logits.ok_or_else(|| {
                Error::InvalidArgument("training requires a model with a classification head".into())
            })?;
            let loss = tape.cross_entropy(logits, &by)?;
            let loss_val = tape.value(loss).data[0];
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: bi, loss: loss_val });
            }
            epoch_loss += loss_val;
            batches += 1;
            tape.backward(loss)?;
            let grads = model.collect_grads(&tape, &bound);
            opt.step(model.param_tensors_mut(), &grads);
        }
        loss_curve.push(epoch_loss / batches as f64);

        let val = evaluate(model, data, val_idx)?;
        val_f1_curve.push(val.macro_f1);
        if val.macro_f1 > best_f1 {
            best_f1 = val.macro_f1;
            best_epoch = epoch;
            best_snapshot = snapshot(model);
            stale = 0;
        } else {
            stale += 1;
            if let Some(patience) = cfg.patience {
                if stale > patience {
                    break;
                }
            }
        }
    }
    restore(model, &best_snapshot);
    Ok(TrainReport { loss_curve, val_f1_curve, best_epoch, best_val_f1: best_f1 })
}

/// Train the stage-1 extractor end to end with its temporary head on the
/// full dataset, then strip the head. A stratified tenth of the data serves
/// as the validation split for best-epoch selection.
pub fn train_extractor(
    raw: &FeatureSet,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(FaultXformer, TrainReport)> {
    let plan = stratified_folds(&raw.labels, 10, cfg.seed)?;
    let val_idx = plan.test[0].clone();
    let train_idx: Vec<usize> = (0..raw.len()).filter(|i| !val_idx.contains(i)).collect();
    let mut model = FaultXformer::init(model_cfg, mix(cfg.seed, 0x57A6E1))?;
    let report = train(&mut model, raw, &train_idx, &val_idx, cfg)?;
    model.strip_head();
    Ok((model, report))
}

/// Run the frozen extractor over a dataset, producing the stage-2 feature set.
pub fn encode_dataset(extractor: &FaultXformer, raw: &FeatureSet, mode: ExecMode) -> Result<FeatureSet> {
    let d = extractor.cfg.encoder.d_model;
    let batch = 64;
    let n_batches = raw.len().div_ceil(batch);
    let idx: Vec<usize> = (0..raw.len()).collect();
    let encoded: Vec<Result<Vec<f64>>> = exec::map_range(mode, n_batches, |bi| {
        let chunk = &idx[bi * batch..((bi + 1) * batch).min(raw.len())];
        let (bx, _) = raw.gather(chunk);
        let x = Tensor::new(vec![chunk.len(), raw.seq_len, raw.width], bx)?;
        extractor.encode(&x)
    });
    let mut data = Vec::with_capacity(raw.len() * raw.seq_len * d);
    for part in encoded {
        data.extend(part?);
    }
    Ok(FeatureSet {
        seq_len: raw.seq_len,
        width: d,
        data,
        labels: raw.labels.clone(),
        n_classes: raw.n_classes,
    })
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub per_fold: Vec<Metrics>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Coefficient of variation of fold accuracy.
    pub cov_accuracy: f64,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
}

impl CvReport {
    fn from_folds(per_fold: Vec<Metrics>) -> CvReport {
        let k = per_fold.len() as f64;
        let mean = |f: fn(&Metrics) -> f64, folds: &[Metrics]| folds.iter().map(f).sum::<f64>() / k;
        let mean_accuracy = mean(|m| m.accuracy, &per_fold);
        let var = per_fold.iter().map(|m| (m.accuracy - mean_accuracy).powi(2)).sum::<f64>() / k;
        let std_accuracy = var.sqrt();
        CvReport {
            mean_precision: mean(|m| m.macro_precision, &per_fold),
            mean_recall: mean(|m| m.macro_recall, &per_fold),
            mean_f1: mean(|m| m.macro_f1, &per_fold),
            cov_accuracy: if mean_accuracy > 0.0 { std_accuracy / mean_accuracy } else { 0.0 },
            mean_accuracy,
            std_accuracy,
            per_fold,
        }
    }
}

/// Stratified k-fold cross-validation: per fold, train on the train split,
/// select on validation, report on the held-out test fold. Folds run
/// independently (optionally in parallel) and merge in fold order.
pub fn cross_validate(
    data: &FeatureSet,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    k: usize,
    mode: ExecMode,
) -> Result<CvReport> {
    let plan = stratified_folds(&data.labels, k, cfg.seed)?;
    for i in 0..k {
        // the split audit: model selection must never see the test fold
        let test: std::collections::HashSet<_> = plan.test[i].iter().collect();
        if plan.train[i].iter().chain(plan.val[i].iter()).any(|ix| test.contains(ix)) {
            return Err(Error::InvalidArgument(format!("fold {i} leaks test indices")));
        }
    }
    let results: Vec<Result<Metrics>> = exec::map_range(mode, k, |i| {
        let mut fold_cfg = *cfg;
        fold_cfg.seed = mix(cfg.seed, 0xF01D + i as u64);
        let mut model = FaultXformer::init(model_cfg, mix(fold_cfg.seed, 0x1417))?;
        train(&mut model, data, &plan.train[i], &plan.val[i], &fold_cfg)?;
        evaluate(&model, data, &plan.test[i])
    });
    let per_fold = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(CvReport::from_folds(per_fold))
}

/// Fold table in the published layout: Fold, Accuracy, Precision, Recall, F1,
/// plus an average row and the accuracy coefficient of variation.
pub fn cv_table_csv(report: &CvReport) -> String {
    let mut s = String::from("fold,accuracy,precision,recall,f1\n");
    for (i, m) in report.per_fold.iter().enumerate() {
        writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{:.4}",
            i + 1,
            m.accuracy,
            m.macro_precision,
            m.macro_recall,
            m.macro_f1
        )
        .unwrap();
    }
    writeln!(
        s,
        "average,{:.4},{:.4},{:.4},{:.4}",
        report.mean_accuracy, report.mean_precision, report.mean_recall, report.mean_f1
    )
    .unwrap();
    writeln!(s, "accuracy_cov,{:.6},,,", report.cov_accuracy).unwrap();
    s
}

/// Confusion matrix as a CSV grid, rows = true class.
pub fn confusion_csv(metrics: &Metrics) -> String {
    let mut s = String::new();
    for row in &metrics.confusion {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(s, "{}", cells.join(",")).unwrap();
    }
    s
}

/// Class-wise metric table: class, accuracy, precision, recall, f1.
pub fn class_table_csv(metrics: &Metrics, class_names: &[String]) -> String {
    let mut s = String::from("class,accuracy,precision,recall,f1\n");
    for (name, m) in class_names.iter().zip(metrics.per_class.iter()) {
        writeln!(s, "{},{:.4},{:.4},{:.4},{:.4}", name, m.accuracy, m.precision, m.recall, m.f1).unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, Stage};

    fn toy_model_cfg(classes: usize) -> ModelConfig {
        ModelConfig {
            task: Task::FaultType,
            stage: Stage::FeatureExtractor,
            encoder: EncoderConfig { d_model: 8, n_heads: 2, d_ff: 4, n_layers: 1, max_len: 8 },
            in_features: 2,
            n_classes: classes,
            use_positional_encoding: true,
        }
    }

    /// Two linearly separable classes: channel 0 carries +-1 patterns.
    fn toy_features(n_per_class: usize) -> FeatureSet {
        let seq = 8;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut s = 11u64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for c in 0..2usize {
            for _ in 0..n_per_class {
                for t in 0..seq {
                    let sign = if c == 0 { 1.0 } else { -1.0 };
                    data.push(sign * (1.0 + 0.1 * next()) * ((t as f64 * 0.7).sin() + 1.5));
                    data.push(0.1 * next());
                }
                labels.push(c);
            }
        }
        FeatureSet { seq_len: seq, width: 2, data, labels, n_classes: 2 }
    }

    #[test]
    fn metrics_all_correct_is_diagonal() {
        let truth = vec![0, 1, 2, 1, 0];
        let m = metrics_from_predictions(&truth, &truth, 3);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
        for (i, row) in m.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v > 0, i == j && truth.contains(&i));
            }
        }
    }

    #[test]
    fn metrics_degenerate_predictor_hand_case() {
        // C=2, predict all class 0, truth half/half
        let truth: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let preds = vec![0usize; 10];
        let m = metrics_from_predictions(&truth, &preds, 2);
        assert!((m.accuracy - 0.5).abs() < 1e-12);
        assert!((m.macro_recall - 0.5).abs() < 1e-12);
        assert!((m.macro_precision - 0.25).abs() < 1e-12, "0/0 precision defined as 0");
    }

    #[test]
    fn confusion_row_sums_match_true_counts() {
        let truth = vec![0, 0, 1, 2, 2, 2];
        let preds = vec![0, 1, 1, 0, 2, 2];
        let m = metrics_from_predictions(&truth, &preds, 3);
        let total: usize = m.confusion.iter().flatten().sum();
        assert_eq!(total, truth.len());
        for c in 0..3 {
            let row: usize = m.confusion[c].iter().sum();
            assert_eq!(row, truth.iter().filter(|&&t| t == c).count());
            assert!((m.per_class[c].recall
                - if row == 0 { 0.0 } else { m.confusion[c][c] as f64 / row as f64 })
            .abs()
                < 1e-12);
        }
    }

    #[test]
    fn random_model_sits_at_chance_level() {
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut s = 5u64;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let (n, seq) = (800, 8);
        for i in 0..n {
            labels.push(i % 8);
            for _ in 0..seq * 2 {
                data.push(next());
            }
        }
        let fs = FeatureSet { seq_len: seq, width: 2, data, labels, n_classes: 8 };
        let model = FaultXformer::init(toy_model_cfg(8), 77).unwrap();
        let idx: Vec<usize> = (0..n).collect();
        let m = evaluate(&model, &fs, &idx).unwrap();
        assert!(
            (m.accuracy - 0.125).abs() < 0.05,
            "random-weight accuracy {} should be near chance",
            m.accuracy
        );
    }

    #[test]
    fn toy_task_reaches_full_validation_accuracy() {
        let fs = toy_features(24);
        let n = fs.len();
        let train_idx: Vec<usize> = (0..n).filter(|i| i % 4 != 0).collect();
        let val_idx: Vec<usize> = (0..n).step_by(4).collect();
        let mut model = FaultXformer::init(toy_model_cfg(2), 3).unwrap();
        let cfg = TrainConfig {
            task: Task::FaultType,
            lr: 1e-3,
            batch_size: 8,
            epochs: 20,
            seed: 42,
            patience: None,
            dropout_p: 0.0,
        };
        let report = train(&mut model, &fs, &train_idx, &val_idx, &cfg).unwrap();
        assert!(
            report.best_val_f1 > 0.999,
            "separable toy task should be solved, got F1 {}",
            report.best_val_f1
        );
        let m = evaluate(&model, &fs, &val_idx).unwrap();
        assert_eq!(m.accuracy, 1.0);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let fs = toy_features(12);
        let mut model = FaultXformer::init(toy_model_cfg(2), 4).unwrap();
        let before = snapshot(&model);
        let cfg = TrainConfig {
            task: Task::FaultType,
            lr: 0.0,
            batch_size: 8,
            epochs: 3,
            seed: 1,
            patience: None,
            dropout_p: 0.0,
        };
        let idx: Vec<usize> = (0..fs.len()).collect();
        train(&mut model, &fs, &idx, &idx, &cfg).unwrap();
        for (t, b) in model.param_tensors().iter().zip(before.iter()) {
            assert_eq!(&t.data, b);
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let fs = toy_features(12);
        let run = || {
            let mut model = FaultXformer::init(toy_model_cfg(2), 4).unwrap();
            let cfg = TrainConfig {
                task: Task::FaultType,
                lr: 1e-3,
                batch_size: 8,
                epochs: 5,
                seed: 9,
                patience: None,
                dropout_p: 0.1,
            };
            let idx: Vec<usize> = (0..fs.len()).collect();
            let report = train(&mut model, &fs, &idx, &idx, &cfg).unwrap();
            (report.loss_curve, snapshot(&model))
        };
        let (l1, p1) = run();
        let (l2, p2) = run();
        assert_eq!(l1, l2, "identical seeds must give identical loss curves");
        assert_eq!(p1, p2);
    }

    #[test]
    fn empty_splits_are_rejected() {
        let fs = toy_features(12);
        let mut model = FaultXformer::init(toy_model_cfg(2), 4).unwrap();
        let cfg = TrainConfig {
            task: Task::FaultType,
            lr: 1e-3,
            batch_size: 8,
            epochs: 1,
            seed: 1,
            patience: None,
            dropout_p: 0.0,
        };
        let idx: Vec<usize> = (0..fs.len()).collect();
        assert!(train(&mut model, &fs, &[], &idx, &cfg).is_err());
        assert!(train(&mut model, &fs, &idx, &[], &cfg).is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let mut fs = toy_features(12);
        fs.data[3] = f64::NAN;
        let mut model = FaultXformer::init(toy_model_cfg(2), 4).unwrap();
        let cfg = TrainConfig {
            task: Task::FaultType,
            lr: 1e-3,
            batch_size: 24,
            epochs: 1,
            seed: 1,
            patience: None,
            dropout_p: 0.0,
        };
        let idx: Vec<usize> = (0..fs.len()).collect();
        let err = train(&mut model, &fs, &idx, &idx, &cfg).unwrap_err().to_string();
        assert!(err.contains("epoch 0"), "{err}");
    }

    #[test]
    fn cross_validation_partitions_and_averages() {
        let fs = toy_features(30); // 60 samples, 2 classes
        let cfg = TrainConfig {
            task: Task::FaultType,
            lr: 1e-3,
            batch_size: 16,
            epochs: 2,
            seed: 6,
            patience: None,
            dropout_p: 0.0,
        };
        let report = cross_validate(&fs, toy_model_cfg(2), &cfg, 10, ExecMode::Sequential).unwrap();
        assert_eq!(report.per_fold.len(), 10);
        let mean: f64 = report.per_fold.iter().map(|m| m.accuracy).sum::<f64>() / 10.0;
        assert!((mean - report.mean_accuracy).abs() < 1e-12);
        let table = cv_table_csv(&report);
        assert_eq!(table.lines().count(), 1 + 10 + 2);
        assert!(table.starts_with("fold,accuracy"));
    }

    #[test]
    fn cross_validation_parallel_matches_sequential() {
        let fs = toy_features(30);
        let cfg = TrainConfig {
            task: Task::FaultType,
            lr: 1e-3,
            batch_size: 16,
            epochs: 2,
            seed: 6,
            patience: None,
            dropout_p: 0.1,
        };
        let seq = cross_validate(&fs, toy_model_cfg(2), &cfg, 5, ExecMode::Sequential).unwrap();
        let par = cross_validate(&fs, toy_model_cfg(2), &cfg, 5, ExecMode::Parallel).unwrap();
        assert_eq!(cv_table_csv(&seq), cv_table_csv(&par));
    }

    #[test]
    fn extractor_training_strips_the_head() {
        let fs = toy_features(30);
        let cfg = TrainConfig {
            task: Task::FaultType,
            lr: 1e-3,
            batch_size: 16,
            epochs: 2,
            seed: 2,
            patience: None,
            dropout_p: 0.0,
        };
        let (extractor, _) = train_extractor(&fs, toy_model_cfg(2), &cfg).unwrap();
        assert_eq!(extractor.cfg.n_classes, 0);
        let encoded = encode_dataset(&extractor, &fs, ExecMode::Sequential).unwrap();
        assert_eq!(encoded.width, 8);
        assert_eq!(encoded.len(), fs.len());
        // encoding is schedule-independent
        let par = encode_dataset(&extractor, &fs, ExecMode::Parallel).unwrap();
        assert_eq!(encoded.data, par.data);
    }
}
