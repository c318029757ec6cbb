//! Dataset persistence, per-channel normalization, length adaptation, and
//! stratified fold planning.

use crate::error::{Error, Result};
use crate::model::SEQ_LEN;
use crate::phasor::{FaultScenario, FaultType, Location, PhasorSequence, RAW_LEN};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const ZSCORE_EPS: f64 = 1e-8;

/// Z-score with an epsilon-stabilized denominator: `(x - mean) / (std + eps)`.
/// Constant channels map to all-zeros.
pub fn zscore(channel: &[f64]) -> Vec<f64> {
    let n = channel.len() as f64;
    let mean = channel.iter().sum::<f64>() / n;
    let var = channel.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + ZSCORE_EPS;
    channel.iter().map(|&x| (x - mean) / denom).collect()
}

/// Uniform-index downsampling: keeps `raw[round(i * (T-1) / (L-1))]` for
/// `i in 0..L`. Monotone in time, endpoints always retained. Truncation would
/// discard the fault window entirely, so the whole span is resampled instead.
pub fn resample_to_length(raw: &[f64], l: usize) -> Result<Vec<f64>> {
    if raw.len() < 2 || l < 2 {
        return Err(Error::InvalidArgument(format!(
            "resample needs at least 2 samples (got {} -> {})",
            raw.len(),
            l
        )));
    }
    let t = raw.len();
    Ok((0..l)
        .map(|i| {
            let idx = (i as f64 * (t - 1) as f64 / (l - 1) as f64).round() as usize;
            raw[idx]
        })
        .collect())
}

/// Raw index selected for model position `i`.
pub fn resample_index(t: usize, l: usize, i: usize) -> usize {
    (i as f64 * (t - 1) as f64 / (l - 1) as f64).round() as usize
}

/// One model-ready sample: z-scored magnitude/phase channels at model length.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[L, 2]` row-major; channel 0 magnitude, channel 1 phase.
    pub features: Vec<f64>,
    pub type_label: usize,
    pub loc_label: Option<usize>,
    pub pmu_id: u8,
    pub event_id: u64,
    pub scenario: FaultScenario,
}

/// One dataset row: the raw sequence as generated, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub event_id: u64,
    pub sequence: PhasorSequence,
    /// False when the CSV location column was `NONE`.
    pub location_labelled: bool,
}

impl RawRecord {
    pub fn new(event_id: u64, sequence: PhasorSequence) -> RawRecord {
        RawRecord { event_id, sequence, location_labelled: true }
    }

    pub fn to_sample(&self) -> Result<Sample> {
        let mag = zscore(&resample_to_length(&self.sequence.magnitude, SEQ_LEN)?);
        let ph = zscore(&resample_to_length(&self.sequence.phase_deg, SEQ_LEN)?);
        let mut features = vec![0.0; SEQ_LEN * 2];
        for t in 0..SEQ_LEN {
            features[t * 2] = mag[t];
            features[t * 2 + 1] = ph[t];
        }
        let scenario = self.sequence.scenario;
        Ok(Sample {
            features,
            type_label: scenario.fault_type.class_index(),
            loc_label: self.location_labelled.then(|| scenario.location.class_index()),
            pmu_id: self.sequence.pmu_id,
            event_id: self.event_id,
            scenario,
        })
    }
}

/// Stratified partition into k test folds with a per-iteration 70/20 split of
/// the remaining pool.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    pub k: usize,
    pub test: Vec<Vec<usize>>,
    pub train: Vec<Vec<usize>>,
    pub val: Vec<Vec<usize>>,
}

/// Stratified k-fold plan. Every fold's per-class test count stays within one
/// of exact proportionality; within each iteration the non-test pool splits
/// 7/9 train, 2/9 validation (70/20 of the whole), stratified by the same
/// labels. Deterministic per seed.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k={k} folds, need at least 2")));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        by_class[c].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::Stratification { class: c, count: members.len(), k });
        }
    }

    let mut test: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (c, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let mut order = members.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (c as u64).wrapping_mul(0x9e3779b97f4a7c15));
        order.shuffle(&mut rng);
        // distribute the remainder over a shuffled fold order so no fold is
        // systematically larger
        let base = order.len() / k;
        let rem = order.len() % k;
        let mut fold_order: Vec<usize> = (0..k).collect();
        fold_order.shuffle(&mut rng);
        let mut cursor = 0;
        for (pos, &fold) in fold_order.iter().enumerate() {
            let take = base + usize::from(pos < rem);
            test[fold].extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
    }
    for fold in &mut test {
        fold.sort_unstable();
    }

    let mut train: Vec<Vec<usize>> = Vec::with_capacity(k);
    let mut val: Vec<Vec<usize>> = Vec::with_capacity(k);
    for i in 0..k {
        let in_test: std::collections::HashSet<usize> = test[i].iter().copied().collect();
        let mut tr = Vec::new();
        let mut va = Vec::new();
        for (c, members) in by_class.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let mut pool: Vec<usize> = members.iter().copied().filter(|ix| !in_test.contains(ix)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ 0x5151_0000 ^ ((c as u64) << 8) ^ i as u64,
            );
            pool.shuffle(&mut rng);
            let n_val = ((2.0 * pool.len() as f64) / 9.0).round() as usize;
            va.extend_from_slice(&pool[..n_val]);
            tr.extend_from_slice(&pool[n_val..]);
        }
        tr.sort_unstable();
        va.sort_unstable();
        train.push(tr);
        val.push(va);
    }
    Ok(FoldPlan { k, test, train, val })
}

// ── Dataset CSV ─────────────────────────────────────────────────────────

const META_COLUMNS: [&str; 9] = [
    "event_id",
    "pmu_id",
    "fault_type",
    "location",
    "der_pct",
    "resistance_ohm",
    "inception_deg",
    "noise_pct",
    "seed",
];

fn header_line() -> String {
    let mut h = META_COLUMNS.join(",");
    for i in 0..RAW_LEN {
        write!(h, ",mag_{i}").unwrap();
    }
    for i in 0..RAW_LEN {
        write!(h, ",ph_{i}").unwrap();
    }
    h
}

/// Write records as UTF-8 CSV. Waveform values are serialized with 17
/// significant digits, which round-trips every f64 exactly.
pub fn write_dataset(path: &Path, records: &[RawRecord]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", header_line())?;
    let mut line = String::with_capacity(RAW_LEN * 2 * 26 + 128);
    for rec in records {
        line.clear();
        let s = &rec.sequence.scenario;
        let loc = if rec.location_labelled { s.location.label() } else { "NONE".to_string() };
        write!(
            line,
            "{},{},{},{},{},{},{},{},{}",
            rec.event_id,
            rec.sequence.pmu_id,
            s.fault_type.name(),
            loc,
            s.der_level_pct,
            s.resistance_ohm,
            s.inception_deg,
            s.noise_pct,
            s.seed
        )
        .unwrap();
        for &v in &rec.sequence.magnitude {
            write!(line, ",{v:.16e}").unwrap();
        }
        for &v in &rec.sequence.phase_deg {
            write!(line, ",{v:.16e}").unwrap();
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(field: &str, name: &str, line: usize) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse column `{name}` from `{field}`"),
    })
}

/// Read a dataset CSV, validating the header and per-row arity.
pub fn read_dataset(path: &Path) -> Result<Vec<RawRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or(Error::Parse { line: 1, msg: "empty file, expected header".into() })??;
    let expected = header_line();
    if header != expected {
        // identify the first missing or unexpected column for the message
        let got: Vec<&str> = header.split(',').collect();
        let want: Vec<&str> = expected.split(',').collect();
        let detail = want
            .iter()
            .zip(got.iter().chain(std::iter::repeat(&"<missing>")))
            .find(|(w, g)| w != g)
            .map(|(w, g)| format!("expected column `{w}`, found `{g}`"))
            .unwrap_or_else(|| "trailing columns".into());
        return Err(Error::Parse { line: 1, msg: format!("bad header: {detail}") });
    }

    let n_cols = META_COLUMNS.len() + 2 * RAW_LEN;
    let mut records = Vec::new();
    for (li, line) in lines.enumerate() {
        let line_no = li + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_cols {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("row has {} fields, expected {n_cols}", fields.len()),
            });
        }
        let event_id: u64 = parse_field(fields[0], "event_id", line_no)?;
        let pmu_id: u8 = parse_field(fields[1], "pmu_id", line_no)?;
        if !(1..=4).contains(&pmu_id) {
            return Err(Error::Parse { line: line_no, msg: format!("pmu_id {pmu_id} outside 1..4") });
        }
        let fault_type: FaultType = parse_field(fields[2], "fault_type", line_no)?;
        let location = if fields[3] == "NONE" {
            None
        } else {
            Some(parse_field::<Location>(fields[3], "location", line_no)?)
        };
        let der_level_pct: f64 = parse_field(fields[4], "der_pct", line_no)?;
        let resistance_ohm: f64 = parse_field(fields[5], "resistance_ohm", line_no)?;
        let inception_deg: f64 = parse_field(fields[6], "inception_deg", line_no)?;
        let noise_pct: f64 = parse_field(fields[7], "noise_pct", line_no)?;
        let seed: u64 = parse_field(fields[8], "seed", line_no)?;
        let mut magnitude = Vec::with_capacity(RAW_LEN);
        for (ci, f) in fields[9..9 + RAW_LEN].iter().enumerate() {
            magnitude.push(parse_field(f, &format!("mag_{ci}"), line_no)?);
        }
        let mut phase_deg = Vec::with_capacity(RAW_LEN);
        for (ci, f) in fields[9 + RAW_LEN..].iter().enumerate() {
            phase_deg.push(parse_field(f, &format!("ph_{ci}"), line_no)?);
        }
        let scenario = FaultScenario {
            fault_type,
            // NONE rows keep a placeholder bus in the scenario struct; the
            // flag below clears their location label
            location: location.unwrap_or(Location::new(1).unwrap()),
            resistance_ohm,
            inception_deg,
            der_level_pct,
            noise_pct,
            seed,
        };
        records.push(RawRecord {
            event_id,
            sequence: PhasorSequence { pmu_id, magnitude, phase_deg, scenario },
            location_labelled: location.is_some(),
        });
    }
    Ok(records)
}

/// Convert raw records to model-ready samples.
pub fn to_samples(records: &[RawRecord]) -> Result<Vec<Sample>> {
    records.iter().map(RawRecord::to_sample).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phasor::{generate, FaultScenario, FaultType, Location};
    use tempfile::tempdir;

    fn tiny_records(n_types: usize) -> Vec<RawRecord> {
        let mut out = Vec::new();
        let mut event = 0u64;
        for (ti, &ft) in FaultType::ALL.iter().take(n_types).enumerate() {
            for pmu in 1..=2u8 {
                let scenario = FaultScenario {
                    fault_type: ft,
                    location: Location::new(ti + 1).unwrap(),
                    resistance_ohm: 1.0,
                    inception_deg: 30.0,
                    der_level_pct: 20.0,
                    noise_pct: 0.0,
                    seed: 17 + ti as u64,
                };
                out.push(RawRecord::new(event, generate(&scenario, pmu).unwrap()));
            }
            event += 1;
        }
        out
    }

    #[test]
    fn zscore_examples() {
        assert_eq!(zscore(&[5.0, 5.0, 5.0, 5.0]), vec![0.0; 4]);
        let z = zscore(&[-1.0, 1.0]);
        assert!((z[0] + 1.0).abs() < 1e-7 && (z[1] - 1.0).abs() < 1e-7);
        let data: Vec<f64> = (0..100).map(|i| (i as f64 * 0.71).sin() * 3.0 + 2.0).collect();
        let z = zscore(&data);
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 1e-12);
    }

    #[test]
    fn zscore_is_idempotent() {
        let data: Vec<f64> = (0..64).map(|i| (i as f64).cos() * 7.0 - 3.0).collect();
        let once = zscore(&data);
        let twice = zscore(&once);
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn resample_is_identity_at_matching_length() {
        let raw: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert_eq!(resample_to_length(&raw, 100).unwrap(), raw);
    }

    #[test]
    fn resample_keeps_endpoints_and_order() {
        let raw: Vec<f64> = (0..RAW_LEN).map(|i| i as f64).collect();
        let out = resample_to_length(&raw, 100).unwrap();
        assert_eq!(out[0], 0.0);
        assert_eq!(out[99], 771.0);
        assert!(out.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn resample_impulse_survives_only_on_selected_indices() {
        // model position 50 maps to raw index round(50*771/99) = 389, not 386
        assert_eq!(resample_index(RAW_LEN, 100, 50), 389);
        let mut raw = vec![0.0; RAW_LEN];
        raw[389] = 1.0;
        let out = resample_to_length(&raw, 100).unwrap();
        assert_eq!(out[50], 1.0);
        assert_eq!(out.iter().filter(|&&v| v != 0.0).count(), 1);

        let mut raw = vec![0.0; RAW_LEN];
        raw[386] = 1.0; // between selected indices 382 and 389
        let out = resample_to_length(&raw, 100).unwrap();
        assert!(out.iter().all(|&v| v == 0.0), "unselected impulse must vanish");
    }

    #[test]
    fn resample_rejects_too_short() {
        assert!(resample_to_length(&[1.0], 100).is_err());
    }

    #[test]
    fn folds_exact_divisibility() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        let plan = stratified_folds(&labels, 10, 3).unwrap();
        for fold in &plan.test {
            assert_eq!(fold.len(), 10);
            for c in 0..10 {
                assert_eq!(fold.iter().filter(|&&i| labels[i] == c).count(), 1);
            }
        }
    }

    #[test]
    fn folds_proportional_counts() {
        let mut labels = vec![0usize; 30];
        labels.extend(vec![1usize; 70]);
        let plan = stratified_folds(&labels, 10, 1).unwrap();
        for fold in &plan.test {
            assert_eq!(fold.iter().filter(|&&i| labels[i] == 0).count(), 3);
            assert_eq!(fold.iter().filter(|&&i| labels[i] == 1).count(), 7);
        }
    }

    #[test]
    fn folds_rejects_small_class() {
        let mut labels = vec![0usize; 40];
        labels.extend(vec![1usize; 5]);
        let err = stratified_folds(&labels, 10, 0).unwrap_err().to_string();
        assert!(err.contains("class 1"), "{err}");
    }

    #[test]
    fn fold_plan_partitions_and_is_disjoint() {
        // property scan over random imbalanced label vectors
        let mut state = 99u64;
        let mut next = move |m: u64| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) % m
        };
        for round in 0..100 {
            let n_classes = 2 + next(19) as usize;
            let n = (n_classes * 10) + next(1900) as usize;
            let labels: Vec<usize> = (0..n).map(|_| next(n_classes as u64) as usize).collect();
            // ensure every class has at least k members
            let mut labels = labels;
            for c in 0..n_classes {
                let have = labels.iter().filter(|&&l| l == c).count();
                for slot in 0..10usize.saturating_sub(have) {
                    let pos = (next(n as u64) as usize + slot) % n;
                    labels[pos] = c;
                }
            }
            let k = 10;
            let plan = match stratified_folds(&labels, k, round) {
                Ok(p) => p,
                Err(_) => continue, // adjustment may have starved another class
            };
            let mut seen = vec![false; labels.len()];
            for fold in &plan.test {
                for &i in fold {
                    assert!(!seen[i], "index {i} in two test folds");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "test folds must partition the indices");
            for c in 0..n_classes {
                let total = labels.iter().filter(|&&l| l == c).count() as f64;
                for fold in &plan.test {
                    let got = fold.iter().filter(|&&i| labels[i] == c).count() as f64;
                    assert!((got - total / k as f64).abs() <= 1.0, "class {c} off proportional");
                }
            }
            for i in 0..k {
                let test: std::collections::HashSet<_> = plan.test[i].iter().collect();
                let val: std::collections::HashSet<_> = plan.val[i].iter().collect();
                for ix in &plan.train[i] {
                    assert!(!test.contains(ix) && !val.contains(ix));
                }
                for ix in &plan.val[i] {
                    assert!(!test.contains(ix));
                }
                assert_eq!(
                    plan.train[i].len() + plan.val[i].len() + plan.test[i].len(),
                    labels.len()
                );
            }
        }
    }

    #[test]
    fn folds_are_deterministic() {
        let labels: Vec<usize> = (0..200).map(|i| i % 5).collect();
        let a = stratified_folds(&labels, 10, 7).unwrap();
        let b = stratified_folds(&labels, 10, 7).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
    }

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let records = tiny_records(4);
        write_dataset(&path, &records).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(records.len(), back.len());
        for (a, b) in records.iter().zip(back.iter()) {
            assert_eq!(a, b, "round trip must be exact");
        }
        // a second write is byte-identical
        let path2 = dir.path().join("data2.csv");
        write_dataset(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn header_errors_cite_the_column() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let mut header = header_line();
        header = header.replace("resistance_ohm,", "");
        std::fs::write(&path, format!("{header}\n")).unwrap();
        let err = read_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("resistance_ohm"), "{err}");
    }

    #[test]
    fn row_arity_errors_carry_line_numbers() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, format!("{}\n1,2,AG,F1,0,1\n", header_line())).unwrap();
        let err = read_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn bad_labels_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let records = tiny_records(1);
        write_dataset(&path, &records).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace(",NoFault,", ",F99,");
        std::fs::write(&path, text).unwrap();
        let err = read_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("fault_type"), "{err}");
    }

    #[test]
    fn samples_carry_normalized_channels() {
        let records = tiny_records(3);
        let sample = records[2].to_sample().unwrap();
        assert_eq!(sample.features.len(), SEQ_LEN * 2);
        let mag_mean: f64 = (0..SEQ_LEN).map(|t| sample.features[t * 2]).sum::<f64>() / SEQ_LEN as f64;
        assert!(mag_mean.abs() < 1e-10, "magnitude channel must be centered");
        assert_eq!(sample.type_label, records[2].sequence.scenario.fault_type.class_index());
        assert_eq!(sample.loc_label, Some(records[2].sequence.scenario.location.class_index()));
    }
}
