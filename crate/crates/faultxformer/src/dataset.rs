//! Scenario-grid enumeration into datasets.
//!
//! Every (fault_type, location, resistance, inception angle, DER level)
//! cell is generated for each PMU and replicate. Healthy rows enumerate the
//! same grid so the class counts stay balanced; their resistance and angle
//! are carried as metadata without shaping the signal. Generation is
//! data-parallel over rows; per-row RNG streams derive from the scenario
//! coordinates, so the schedule does not affect the output.

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::phasor::{self, FaultScenario, FaultType, Location};
use crate::pipeline::{self, RawRecord};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub fault_types: Vec<FaultType>,
    pub locations: Vec<Location>,
    pub resistances_ohm: Vec<f64>,
    pub inception_angles_deg: Vec<f64>,
    pub der_levels_pct: Vec<f64>,
    pub noise_pct: f64,
    pub pmu_count: u8,
    pub per_cell: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    /// The full published grid: 7 resistances and 7 inception angles.
    pub fn full_grid(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            fault_types: FaultType::ALL.to_vec(),
            locations: Location::all().collect(),
            resistances_ohm: vec![0.01, 0.10, 1.0, 5.0, 10.0, 20.0, 40.0],
            inception_angles_deg: vec![0.0, 30.0, 60.0, 90.0, 120.0, 150.0, 180.0],
            der_levels_pct: vec![0.0],
            noise_pct: 0.0,
            pmu_count: 4,
            per_cell: 1,
            seed,
        }
    }

    /// Desk-scale grid: two resistances and two inception angles.
    pub fn desk_grid(seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            resistances_ohm: vec![0.01, 10.0],
            inception_angles_deg: vec![0.0, 90.0],
            ..Self::full_grid(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fault_types.is_empty() {
            return Err(Error::InvalidArgument("empty fault-type set".into()));
        }
        if self.locations.is_empty()
            || self.resistances_ohm.is_empty()
            || self.inception_angles_deg.is_empty()
            || self.der_levels_pct.is_empty()
        {
            return Err(Error::InvalidArgument("empty grid axis".into()));
        }
        if self.per_cell == 0 {
            return Err(Error::InvalidArgument("per_cell must be positive".into()));
        }
        if !(1..=4).contains(&self.pmu_count) {
            return Err(Error::InvalidArgument(format!("pmu_count {} outside 1..4", self.pmu_count)));
        }
        Ok(())
    }

    /// Number of events (scenario instances); each yields `pmu_count` rows.
    pub fn event_count(&self) -> usize {
        self.fault_types.len()
            * self.locations.len()
            * self.resistances_ohm.len()
            * self.inception_angles_deg.len()
            * self.der_levels_pct.len()
            * self.per_cell
    }

    pub fn row_count(&self) -> usize {
        self.event_count() * self.pmu_count as usize
    }
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Enumerate the grid into raw records, in deterministic event order.
pub fn enumerate_records(cfg: &GeneratorConfig, mode: ExecMode) -> Result<Vec<RawRecord>> {
    cfg.validate()?;
    let mut scenarios: Vec<FaultScenario> = Vec::with_capacity(cfg.event_count());
    for &fault_type in &cfg.fault_types {
        for &location in &cfg.locations {
            for &resistance_ohm in &cfg.resistances_ohm {
                for &inception_deg in &cfg.inception_angles_deg {
                    for &der_level_pct in &cfg.der_levels_pct {
                        for rep in 0..cfg.per_cell {
                            scenarios.push(FaultScenario {
                                fault_type,
                                location,
                                resistance_ohm,
                                inception_deg,
                                der_level_pct,
                                noise_pct: cfg.noise_pct,
                                seed: mix(cfg.seed, rep as u64),
                            });
                        }
                    }
                }
            }
        }
    }
    let pmu_count = cfg.pmu_count;
    let rows: Vec<Result<Vec<RawRecord>>> = exec::map_range(mode, scenarios.len(), |ei| {
        let scenario = &scenarios[ei];
        (1..=pmu_count)
            .map(|pmu| Ok(RawRecord::new(ei as u64, phasor::generate(scenario, pmu)?)))
            .collect()
    });
    let mut out = Vec::with_capacity(cfg.row_count());
    for group in rows {
        out.extend(group?);
    }
    Ok(out)
}

/// Per-class counts plus a config echo; the sidecar to a dataset CSV.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub total_rows: usize,
    pub per_type: Vec<(String, usize)>,
    pub per_location: Vec<(String, usize)>,
    pub config: GeneratorConfig,
}

pub fn build_manifest(cfg: &GeneratorConfig, records: &[RawRecord]) -> DatasetManifest {
    let count_types = |name: &str| {
        records.iter().filter(|r| r.sequence.scenario.fault_type.name() == name).count()
    };
    let per_type: Vec<(String, usize)> = FaultType::ALL
        .iter()
        .filter(|t| cfg.fault_types.contains(t))
        .map(|t| (t.name().to_string(), count_types(t.name())))
        .collect();
    let per_location: Vec<(String, usize)> = Location::all()
        .filter(|l| cfg.locations.contains(l))
        .map(|l| {
            let n = records
                .iter()
                .filter(|r| r.location_labelled && r.sequence.scenario.location == l)
                .count();
            (l.label(), n)
        })
        .collect();
    DatasetManifest { total_rows: records.len(), per_type, per_location, config: cfg.clone() }
}

fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

impl DatasetManifest {
    /// Flat key=value text with `#` comments.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# dataset manifest\n");
        let cfg = &self.config;
        writeln!(s, "total_rows={}", self.total_rows).unwrap();
        writeln!(s, "events={}", cfg.event_count()).unwrap();
        writeln!(s, "seed={}", cfg.seed).unwrap();
        writeln!(s, "per_cell={}", cfg.per_cell).unwrap();
        writeln!(s, "pmu_count={}", cfg.pmu_count).unwrap();
        writeln!(s, "noise_pct={}", cfg.noise_pct).unwrap();
        writeln!(
            s,
            "fault_types={}",
            cfg.fault_types.iter().map(|t| t.name()).collect::<Vec<_>>().join(",")
        )
        .unwrap();
        writeln!(
            s,
            "locations={}",
            cfg.locations.iter().map(|l| l.label()).collect::<Vec<_>>().join(",")
        )
        .unwrap();
        writeln!(s, "resistances_ohm={}", join_floats(&cfg.resistances_ohm)).unwrap();
        writeln!(s, "inception_angles_deg={}", join_floats(&cfg.inception_angles_deg)).unwrap();
        writeln!(s, "der_levels_pct={}", join_floats(&cfg.der_levels_pct)).unwrap();
        for (name, n) in &self.per_type {
            writeln!(s, "count.type.{name}={n}").unwrap();
        }
        for (name, n) in &self.per_location {
            writeln!(s, "count.location.{name}={n}").unwrap();
        }
        s
    }
}

/// Generate the configured grid, write the CSV and its manifest sidecar.
pub fn build_dataset(
    cfg: &GeneratorConfig,
    csv_path: &Path,
    manifest_path: &Path,
    mode: ExecMode,
) -> Result<DatasetManifest> {
    let records = enumerate_records(cfg, mode)?;
    pipeline::write_dataset(csv_path, &records)?;
    let manifest = build_manifest(cfg, &records);
    std::fs::write(manifest_path, manifest.to_text())?;
    Ok(manifest)
}
