//! Scripted reproductions of the evaluation studies: noise sensitivity, DER
//! sweep, hyperparameter ablation, attention-heatmap export, and the
//! inference-latency benchmark.

use crate::dataset::GeneratorConfig;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::model::{
    EncoderConfig, FaultXformer, Mode, Model32, ModelConfig, Stage, Task, SEQ_LEN,
};
use crate::numerics::{Tape, Tensor};
use crate::phasor::{self, FAULT_START_S, RAW_LEN};
use crate::pipeline::{resample_index, stratified_folds, RawRecord, Sample};
use crate::training::{
    encode_dataset, evaluate, train, train_extractor, FeatureSet, Metrics, TrainConfig,
};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

/// Training protocol for one dual-stage run: the extractor pass and the task
/// pass share a seed but may use different epoch budgets.
#[derive(Debug, Clone, Copy)]
pub struct Protocol {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

impl Protocol {
    /// Published epoch budgets (200/250), full dropout.
    pub fn paper(task: Task, seed: u64) -> Protocol {
        let mut stage1 = TrainConfig::for_task(task);
        stage1.seed = seed;
        stage1.epochs = 20;
        let mut stage2 = TrainConfig::for_task(task);
        stage2.seed = seed;
        Protocol { stage1, stage2 }
    }

    /// Reduced budget for desk-scale runs: few epochs, early stopping, no
    /// dropout so runs are deterministic.
    pub fn desk(task: Task, seed: u64) -> Protocol {
        let mut p = Protocol::paper(task, seed);
        p.stage1.epochs = 3;
        p.stage1.dropout_p = 0.0;
        p.stage2.epochs = 6;
        p.stage2.patience = Some(1);
        p.stage2.dropout_p = 0.0;
        Protocol { stage1: p.stage1, stage2: p.stage2 }
    }
}

/// Artifacts of a fixed-split dual-stage run.
pub struct SplitRun {
    pub metrics: Metrics,
    pub model: FaultXformer,
    pub encoded: FeatureSet,
    pub test_idx: Vec<usize>,
}

/// Train stage 1 on the full task view, freeze, train stage 2 on a stratified
/// 70/20/10 split, and evaluate on the held-out tenth.
pub fn single_split_run(
    samples: &[Sample],
    task: Task,
    protocol: &Protocol,
    mode: ExecMode,
) -> Result<SplitRun> {
    let raw = FeatureSet::from_samples(samples, task)?;
    let (extractor, _) = train_extractor(&raw, ModelConfig::stage1(task, raw.n_classes), &protocol.stage1)?;
    let encoded = encode_dataset(&extractor, &raw, mode)?;
    let plan = stratified_folds(&encoded.labels, 10, protocol.stage2.seed)?;
    let mut model = FaultXformer::init(ModelConfig::stage2(task), protocol.stage2.seed ^ 0x51A6)?;
    train(&mut model, &encoded, &plan.train[0], &plan.val[0], &protocol.stage2)?;
    let metrics = evaluate(&model, &encoded, &plan.test[0])?;
    Ok(SplitRun { metrics, model, encoded, test_idx: plan.test[0].clone() })
}

// ── Noise sensitivity ───────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// Regenerate the dataset with noise baked in and retrain per level.
    RetrainPerLevel,
    /// Train once on clean data, evaluate on noisy copies.
    EvaluateOnly,
}

/// Accuracy table under increasing Gaussian noise levels (percent).
pub fn noise_sweep(
    base: &GeneratorConfig,
    task: Task,
    levels: &[f64],
    protocol: &Protocol,
    noise_mode: NoiseMode,
    mode: ExecMode,
) -> Result<Vec<(f64, Metrics)>> {
    match noise_mode {
        NoiseMode::RetrainPerLevel => levels
            .iter()
            .map(|&level| {
                let mut cfg = base.clone();
                cfg.noise_pct = level;
                let records = crate::dataset::enumerate_records(&cfg, mode)?;
                let samples = crate::pipeline::to_samples(&records)?;
                let run = single_split_run(&samples, task, protocol, mode)?;
                Ok((level, run.metrics))
            })
            .collect(),
        NoiseMode::EvaluateOnly => {
            let mut clean_cfg = base.clone();
            clean_cfg.noise_pct = 0.0;
            let records = crate::dataset::enumerate_records(&clean_cfg, mode)?;
            let samples = crate::pipeline::to_samples(&records)?;
            let clean_run = single_split_run(&samples, task, protocol, mode)?;
            // the stage-2 model consumes stage-1 encodings, so noisy rows must
            // pass through the same frozen extractor; rebuild per level
            let raw = FeatureSet::from_samples(&samples, task)?;
            let (extractor, _) =
                train_extractor(&raw, ModelConfig::stage1(task, raw.n_classes), &protocol.stage1)?;
            levels
                .iter()
                .map(|&level| {
                    if level == 0.0 {
                        return Ok((level, clean_run.metrics.clone()));
                    }
                    let noisy: Vec<RawRecord> = records
                        .iter()
                        .map(|r| {
                            let seq =
                                phasor::add_noise(&r.sequence, level, r.sequence.scenario.seed ^ 0x401)?;
                            Ok(RawRecord { sequence: seq, ..r.clone() })
                        })
                        .collect::<Result<_>>()?;
                    let noisy_samples = crate::pipeline::to_samples(&noisy)?;
                    let noisy_raw = FeatureSet::from_samples(&noisy_samples, task)?;
                    let noisy_encoded = encode_dataset(&extractor, &noisy_raw, mode)?;
                    let metrics = evaluate(&clean_run.model, &noisy_encoded, &clean_run.test_idx)?;
                    Ok((level, metrics))
                })
                .collect()
        }
    }
}

pub fn noise_table_csv(rows: &[(f64, Metrics)]) -> String {
    let mut s = String::from("noise_pct,accuracy,precision,recall,f1\n");
    for (level, m) in rows {
        writeln!(
            s,
            "{},{:.4},{:.4},{:.4},{:.4}",
            level, m.accuracy, m.macro_precision, m.macro_recall, m.macro_f1
        )
        .unwrap();
    }
    s
}

// ── DER penetration sweep ───────────────────────────────────────────────

/// Regenerate the dataset at each DER penetration level and report both task
/// accuracies from a fixed-seed split.
pub fn der_sweep(
    base: &GeneratorConfig,
    levels: &[f64],
    type_protocol: &Protocol,
    loc_protocol: &Protocol,
    mode: ExecMode,
) -> Result<Vec<(f64, f64, f64)>> {
    levels
        .iter()
        .map(|&level| {
            let mut cfg = base.clone();
            cfg.der_levels_pct = vec![level];
            let records = crate::dataset::enumerate_records(&cfg, mode)?;
            let samples = crate::pipeline::to_samples(&records)?;
            let type_acc = single_split_run(&samples, Task::FaultType, type_protocol, mode)?
                .metrics
                .accuracy;
            let loc_acc = single_split_run(&samples, Task::FaultLocation, loc_protocol, mode)?
                .metrics
                .accuracy;
            Ok((level, type_acc, loc_acc))
        })
        .collect()
}

pub fn der_table_csv(rows: &[(f64, f64, f64)]) -> String {
    let mut s = String::from("der_pct,type_accuracy,location_accuracy\n");
    for (level, t, l) in rows {
        writeln!(s, "{},{:.4},{:.4}", level, t, l).unwrap();
    }
    s
}

// ── Ablation grid ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    BatchSize,
    LatentDim,
    Layers,
    Heads,
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::BatchSize => "batch_size",
            AblationAxis::LatentDim => "latent_dim",
            AblationAxis::Layers => "layers",
            AblationAxis::Heads => "heads",
        }
    }
}

/// The one-factor-at-a-time baseline: batch 32, latent 32, one encoder
/// layer, two heads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AblationBase {
    pub batch_size: usize,
    pub latent_dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for AblationBase {
    fn default() -> Self {
        AblationBase { batch_size: 32, latent_dim: 32, layers: 1, heads: 2 }
    }
}

/// Published grid: 3 batch sizes + 4 latent dims + 3 layer counts + 3 head
/// counts = 13 rows per task.
pub fn default_ablation_grid() -> Vec<(AblationAxis, usize)> {
    let mut rows = Vec::new();
    for b in [16, 32, 64] {
        rows.push((AblationAxis::BatchSize, b));
    }
    for d in [32, 68, 90, 100] {
        rows.push((AblationAxis::LatentDim, d));
    }
    for l in [1, 2, 3] {
        rows.push((AblationAxis::Layers, l));
    }
    for h in [2, 4, 5] {
        rows.push((AblationAxis::Heads, h));
    }
    rows
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub value: usize,
    /// Set when the combination is invalid (latent not divisible by heads).
    pub skipped: Option<String>,
    pub type_accuracy: Option<f64>,
    pub location_accuracy: Option<f64>,
    pub best_type: bool,
    pub best_location: bool,
}

fn ablation_model_cfgs(
    task: Task,
    base: &AblationBase,
    axis: AblationAxis,
    value: usize,
) -> Result<(ModelConfig, ModelConfig, usize)> {
    let mut b = *base;
    match axis {
        AblationAxis::BatchSize => b.batch_size = value,
        AblationAxis::LatentDim => b.latent_dim = value,
        AblationAxis::Layers => b.layers = value,
        AblationAxis::Heads => b.heads = value,
    }
    if b.latent_dim % b.heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "latent dim {} not divisible by {} heads",
            b.latent_dim, b.heads
        )));
    }
    let stage1 = ModelConfig {
        task,
        stage: Stage::FeatureExtractor,
        encoder: EncoderConfig {
            d_model: b.latent_dim,
            n_heads: b.heads,
            d_ff: 16,
            n_layers: 2,
            max_len: SEQ_LEN,
        },
        in_features: 2,
        n_classes: 0, // filled by the caller from the task view
        use_positional_encoding: true,
    };
    let stage2 = ModelConfig {
        task,
        stage: Stage::TaskHead,
        encoder: EncoderConfig {
            d_model: b.latent_dim,
            n_heads: b.heads,
            d_ff: match task {
                Task::FaultType => 64,
                Task::FaultLocation => 128,
            },
            n_layers: b.layers,
            max_len: SEQ_LEN,
        },
        in_features: 0,
        n_classes: 0,
        use_positional_encoding: true,
    };
    Ok((stage1, stage2, b.batch_size))
}

fn ablation_accuracy(
    samples: &[Sample],
    task: Task,
    base: &AblationBase,
    axis: AblationAxis,
    value: usize,
    protocol: &Protocol,
    mode: ExecMode,
) -> Result<f64> {
    let (mut s1_cfg, mut s2_cfg, batch) = ablation_model_cfgs(task, base, axis, value)?;
    let raw = FeatureSet::from_samples(samples, task)?;
    s1_cfg.n_classes = raw.n_classes;
    s2_cfg.n_classes = raw.n_classes;
    let mut p1 = protocol.stage1;
    p1.batch_size = batch;
    let mut p2 = protocol.stage2;
    p2.batch_size = batch;
    let (extractor, _) = train_extractor(&raw, s1_cfg, &p1)?;
    let encoded = encode_dataset(&extractor, &raw, mode)?;
    let plan = stratified_folds(&encoded.labels, 10, p2.seed)?;
    let mut model = FaultXformer::init(s2_cfg, p2.seed ^ 0x51A6)?;
    train(&mut model, &encoded, &plan.train[0], &plan.val[0], &p2)?;
    Ok(evaluate(&model, &encoded, &plan.test[0])?.accuracy)
}

/// One row per grid value, both tasks, one factor changed at a time. Invalid
/// combinations are kept as skipped rows with the reason recorded. The best
/// row per axis and task is flagged (ties break to the first occurrence).
pub fn ablation(
    samples: &[Sample],
    base: &AblationBase,
    grid: &[(AblationAxis, usize)],
    type_protocol: &Protocol,
    loc_protocol: &Protocol,
    mode: ExecMode,
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty ablation grid".into()));
    }
    let mut rows: Vec<AblationRow> = Vec::with_capacity(grid.len());
    for &(axis, value) in grid {
        match ablation_model_cfgs(Task::FaultType, base, axis, value) {
            Err(e) => rows.push(AblationRow {
                axis,
                value,
                skipped: Some(e.to_string()),
                type_accuracy: None,
                location_accuracy: None,
                best_type: false,
                best_location: false,
            }),
            Ok(_) => {
                let t = ablation_accuracy(samples, Task::FaultType, base, axis, value, type_protocol, mode)?;
                let l = ablation_accuracy(
                    samples,
                    Task::FaultLocation,
                    base,
                    axis,
                    value,
                    loc_protocol,
                    mode,
                )?;
                rows.push(AblationRow {
                    axis,
                    value,
                    skipped: None,
                    type_accuracy: Some(t),
                    location_accuracy: Some(l),
                    best_type: false,
                    best_location: false,
                });
            }
        }
    }
    if rows.iter().all(|r| r.skipped.is_some()) {
        return Err(Error::InvalidArgument("every ablation row was invalid".into()));
    }
    // per-axis argmax flags
    for axis in [AblationAxis::BatchSize, AblationAxis::LatentDim, AblationAxis::Layers, AblationAxis::Heads] {
        for (flag, acc) in [(0usize, 0usize), (1, 1)] {
            let best = rows
                .iter()
                .enumerate()
                .filter(|(_, r)| r.axis == axis)
                .filter_map(|(i, r)| {
                    let v = if acc == 0 { r.type_accuracy } else { r.location_accuracy };
                    v.map(|v| (i, v))
                })
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)));
            if let Some((i, _)) = best {
                if flag == 0 {
                    rows[i].best_type = true;
                } else {
                    rows[i].best_location = true;
                }
            }
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("axis,value,type_accuracy,location_accuracy,best_type,best_location,skipped\n");
    for r in rows {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.4}")).unwrap_or_default();
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.axis.name(),
            r.value,
            fmt(r.type_accuracy),
            fmt(r.location_accuracy),
            r.best_type,
            r.best_location,
            r.skipped.clone().unwrap_or_default()
        )
        .unwrap();
    }
    s
}

// ── Attention heatmap ───────────────────────────────────────────────────

/// Final-layer attention averaged over heads and samples; rows sum to one.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub seq_len: usize,
    /// `[L, L]` row-major.
    pub weights: Vec<f64>,
}

impl AttentionMap {
    /// Mean attention mass per key column.
    pub fn column_means(&self) -> Vec<f64> {
        let l = self.seq_len;
        let mut cols = vec![0.0; l];
        for row in self.weights.chunks_exact(l) {
            for (c, &v) in cols.iter_mut().zip(row.iter()) {
                *c += v;
            }
        }
        cols.iter_mut().for_each(|c| *c /= l as f64);
        cols
    }
}

/// Capture and average the final encoder layer's attention over all heads and
/// the given samples.
pub fn attention_export(model: &FaultXformer, data: &FeatureSet, idx: &[usize]) -> Result<AttentionMap> {
    let l = model.cfg.encoder.max_len;
    let mut acc = vec![0.0f64; l * l];
    let mut count = 0usize;
    for chunk in idx.chunks(32) {
        let (bx, _) = data.gather(chunk);
        let x = Tensor::new(vec![chunk.len(), data.seq_len, data.width], bx)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = model.forward(&mut tape, &bound, xv, &mut Mode::Eval)?;
        let last = *out
            .attention
            .last()
            .ok_or_else(|| Error::InvalidArgument("model has no encoder layers".into()))?;
        let w = tape.value(last); // [B, h, L, L]
        let heads = model.cfg.encoder.n_heads;
        for map in w.data.chunks_exact(l * l) {
            for (a, &v) in acc.iter_mut().zip(map.iter()) {
                *a += v;
            }
        }
        count += chunk.len() * heads;
    }
    if count == 0 {
        return Err(Error::EmptySplit("attention export"));
    }
    acc.iter_mut().for_each(|v| *v /= count as f64);
    Ok(AttentionMap { seq_len: l, weights: acc })
}

pub fn attention_csv(map: &AttentionMap) -> String {
    let mut s = String::new();
    for row in map.weights.chunks_exact(map.seq_len) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
        writeln!(s, "{}", cells.join(",")).unwrap();
    }
    s
}

/// 8-bit PGM with linear min-max scaling.
pub fn write_pgm(path: &Path, map: &AttentionMap) -> Result<()> {
    let l = map.seq_len;
    let lo = map.weights.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{l} {l}\n255\n").into_bytes();
    out.extend(map.weights.iter().map(|&v| (255.0 * (v - lo) / span).round() as u8));
    std::fs::write(path, out)?;
    Ok(())
}

/// Model columns covering the fault window.
pub fn fault_window_columns() -> Vec<usize> {
    (0..SEQ_LEN)
        .filter(|&i| {
            let t = phasor::sample_time_s(resample_index(RAW_LEN, SEQ_LEN, i));
            (FAULT_START_S..=phasor::FAULT_END_S).contains(&t)
        })
        .collect()
}

/// Model columns covering the fault onset and its transient, derived from
/// the generator timing (onset at 0.16 s, decay constants up to ~0.08 s).
pub fn fault_onset_columns() -> Vec<usize> {
    (0..SEQ_LEN)
        .filter(|&i| {
            let t = phasor::sample_time_s(resample_index(RAW_LEN, SEQ_LEN, i));
            (FAULT_START_S..=FAULT_START_S + 0.05).contains(&t)
        })
        .collect()
}

/// Ratio of mean column attention inside `columns` to the mean outside.
pub fn onset_attention_ratio(map: &AttentionMap, columns: &[usize]) -> f64 {
    let cols = map.column_means();
    let inside: Vec<f64> = columns.iter().map(|&c| cols[c]).collect();
    let outside: Vec<f64> = (0..cols.len()).filter(|c| !columns.contains(c)).map(|c| cols[c]).collect();
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    mean(&inside) / mean(&outside)
}

// ── Latency ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LatencyReport {
    pub batch_size: usize,
    pub trials: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
    pub per_sample_mean_ms: f64,
    pub per_sample_median_ms: f64,
    pub per_sample_p99_ms: f64,
    /// Synchrophasor application budget (ms) the per-sample latency is
    /// compared against.
    pub budget_ms: f64,
}

impl LatencyReport {
    pub fn within_budget(&self) -> bool {
        self.per_sample_mean_ms < self.budget_ms
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,per_batch_ms,per_sample_ms\n");
        writeln!(s, "mean,{:.4},{:.4}", self.mean_ms, self.per_sample_mean_ms).unwrap();
        writeln!(s, "median,{:.4},{:.4}", self.median_ms, self.per_sample_median_ms).unwrap();
        writeln!(s, "p99,{:.4},{:.4}", self.p99_ms, self.per_sample_p99_ms).unwrap();
        writeln!(s, "budget,,{}", self.budget_ms).unwrap();
        s
    }
}

/// Wall-clock the 32-bit single-threaded forward pass of both stages chained.
/// Warmup trials are excluded.
pub fn latency_bench(
    stage1: &FaultXformer,
    stage2: &FaultXformer,
    batch_size: usize,
    trials: usize,
    warmup: usize,
) -> LatencyReport {
    let m1 = Model32::compile(stage1);
    let m2 = Model32::compile(stage2);
    let in_features = stage1.cfg.in_features.max(1);
    let x: Vec<f32> =
        (0..batch_size * SEQ_LEN * in_features).map(|i| ((i % 97) as f32 / 48.5) - 1.0).collect();
    let mut samples_ms = Vec::with_capacity(trials);
    for trial in 0..warmup + trials {
        let start = Instant::now();
        let encoded = m2_input(&m1, &x, batch_size);
        let logits = m2.forward_logits(&encoded, batch_size);
        std::hint::black_box(&logits);
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        if trial >= warmup {
            samples_ms.push(elapsed);
        }
    }
    samples_ms.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean = samples_ms.iter().sum::<f64>() / samples_ms.len() as f64;
    let median = samples_ms[samples_ms.len() / 2];
    let p99 = samples_ms[((samples_ms.len() as f64 * 0.99) as usize).min(samples_ms.len() - 1)];
    let b = batch_size as f64;
    LatencyReport {
        batch_size,
        trials,
        mean_ms: mean,
        median_ms: median,
        p99_ms: p99,
        per_sample_mean_ms: mean / b,
        per_sample_median_ms: median / b,
        per_sample_p99_ms: p99 / b,
        budget_ms: 100.0,
    }
}

fn m2_input(m1: &Model32, x: &[f32], batch: usize) -> Vec<f32> {
    m1.forward_encoded(x, batch)
}
