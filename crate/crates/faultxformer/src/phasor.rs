//! Parametric generator of synthetic positive-sequence PMU current sequences
//! for the IEEE 13-node feeder fault catalog.
//!
//! Each scenario produces a 0.2 s window (772 samples at 3860 Hz, covering
//! t = 0.1..0.3 s of the event) of per-unit current magnitude and phase angle.
//! A fault, when present, is confined to t in [0.16, 0.26] s and is shaped by
//! a type gain, a location attenuation, a resistance attenuation, and a gated
//! transient. The phase channel is the angle of the pre-fault phasor plus the
//! superimposed fault phasor, so the fault level bends the phase waveform
//! nonlinearly; that keeps scenarios distinguishable after per-sequence
//! normalization discards absolute scale.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const SAMPLE_RATE_HZ: f64 = 3860.0;
pub const RAW_LEN: usize = 772;
pub const T_START_S: f64 = 0.1;
pub const T_END_S: f64 = 0.3;
pub const FAULT_START_S: f64 = 0.16;
pub const FAULT_END_S: f64 = 0.26;
/// Raised-cosine gate edge length.
const EDGE_S: f64 = 0.002;
/// Relative amplitude of the decaying 60 Hz transient inside the gate.
const TRANSIENT_AMPL: f64 = 0.35;
/// Uniform load-ripple amplitude on the magnitude channel.
const RIPPLE: f64 = 0.003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FaultType {
    NoFault,
    Ag,
    Bg,
    Cg,
    Abg,
    Bcg,
    Acg,
    Abcg,
}

/// Grouping by the number of faulted phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultGroup {
    None,
    LineToGround,
    DoubleLineToGround,
    ThreePhase,
}

impl FaultType {
    pub const ALL: [FaultType; 8] = [
        FaultType::NoFault,
        FaultType::Ag,
        FaultType::Bg,
        FaultType::Cg,
        FaultType::Abg,
        FaultType::Bcg,
        FaultType::Acg,
        FaultType::Abcg,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FaultType::NoFault => "NoFault",
            FaultType::Ag => "AG",
            FaultType::Bg => "BG",
            FaultType::Cg => "CG",
            FaultType::Abg => "ABG",
            FaultType::Bcg => "BCG",
            FaultType::Acg => "ACG",
            FaultType::Abcg => "ABCG",
        }
    }

    pub fn class_index(&self) -> usize {
        FaultType::ALL.iter().position(|t| t == self).unwrap()
    }

    pub fn is_fault(&self) -> bool {
        *self != FaultType::NoFault
    }

    pub fn group(&self) -> FaultGroup {
        match self {
            FaultType::NoFault => FaultGroup::None,
            FaultType::Ag | FaultType::Bg | FaultType::Cg => FaultGroup::LineToGround,
            FaultType::Abg | FaultType::Bcg | FaultType::Acg => FaultGroup::DoubleLineToGround,
            FaultType::Abcg => FaultGroup::ThreePhase,
        }
    }
}

impl std::str::FromStr for FaultType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        FaultType::ALL
            .iter()
            .find(|t| t.name() == s)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown fault type `{s}`")))
    }
}

impl std::fmt::Display for FaultType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Fault locations F1..F20 with bus names and feeder distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Location(u8);

/// (bus, distance from substation in feet), indexed by label number - 1.
const LOCATION_TABLE: [(&str, f64); 20] = [
    ("646", 2800.0),
    ("645", 2500.0),
    ("632", 2000.0),
    ("633", 2500.0),
    ("634", 2500.0),
    ("611", 4600.0),
    ("684", 4300.0),
    ("671", 4000.0),
    ("692", 4000.0),
    ("675", 4500.0),
    ("652", 5100.0),
    ("680", 5000.0),
    ("650", 0.0),
    ("650a", 500.0),
    ("650b", 1000.0),
    ("632a", 2500.0),
    ("632b", 3000.0),
    ("632c", 3500.0),
    ("684a", 4500.0),
    ("671a", 4800.0),
];

impl Location {
    pub const COUNT: usize = 20;

    pub fn new(label_number: usize) -> Result<Location> {
        if (1..=Self::COUNT).contains(&label_number) {
            Ok(Location(label_number as u8))
        } else {
            Err(Error::InvalidArgument(format!("location F{label_number} outside F1..F20")))
        }
    }

    pub fn all() -> impl Iterator<Item = Location> {
        (1..=Self::COUNT).map(|i| Location(i as u8))
    }

    /// 1-based label number (F7 -> 7).
    pub fn number(&self) -> usize {
        self.0 as usize
    }

    /// 0-based class index for the location task.
    pub fn class_index(&self) -> usize {
        self.0 as usize - 1
    }

    pub fn bus(&self) -> &'static str {
        LOCATION_TABLE[self.class_index()].0
    }

    pub fn distance_ft(&self) -> f64 {
        LOCATION_TABLE[self.class_index()].1
    }

    pub fn label(&self) -> String {
        format!("F{}", self.0)
    }

    /// Position of this location when all 20 are ordered by (distance,
    /// label number); used to spread the transient decay constants.
    fn distance_rank(&self) -> usize {
        let me = (self.distance_ft(), self.number());
        Location::all()
            .filter(|l| (l.distance_ft(), l.number()) < me)
            .count()
    }
}

impl std::str::FromStr for Location {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let digits = s
            .strip_prefix('F')
            .ok_or_else(|| Error::InvalidArgument(format!("bad location label `{s}`")))?;
        let n: usize = digits
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad location label `{s}`")))?;
        Location::new(n)
    }
}

impl std::fmt::Display for Location {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "F{}", self.0)
    }
}

/// Complex current phasor in per-unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexPhasor {
    pub re: f64,
    pub im: f64,
}

impl ComplexPhasor {
    pub fn from_polar(magnitude: f64, angle_deg: f64) -> ComplexPhasor {
        let rad = angle_deg.to_radians();
        ComplexPhasor { re: magnitude * rad.cos(), im: magnitude * rad.sin() }
    }

    pub fn magnitude(&self) -> f64 {
        (self.re * self.re + self.im * self.im).sqrt()
    }

    pub fn angle_deg(&self) -> f64 {
        self.im.atan2(self.re).to_degrees()
    }

    pub fn add(self, other: ComplexPhasor) -> ComplexPhasor {
        ComplexPhasor { re: self.re + other.re, im: self.im + other.im }
    }

    pub fn mul(self, other: ComplexPhasor) -> ComplexPhasor {
        ComplexPhasor {
            re: self.re * other.re - self.im * other.im,
            im: self.re * other.im + self.im * other.re,
        }
    }

    pub fn scale(self, s: f64) -> ComplexPhasor {
        ComplexPhasor { re: self.re * s, im: self.im * s }
    }
}

/// Positive-sequence component of three phase currents:
/// `(1/3) (Ia + a Ib + a^2 Ic)` with `a = e^{j120 deg}`.
pub fn positive_sequence(ia: ComplexPhasor, ib: ComplexPhasor, ic: ComplexPhasor) -> ComplexPhasor {
    let a = ComplexPhasor::from_polar(1.0, 120.0);
    let a2 = a.mul(a);
    ia.add(a.mul(ib)).add(a2.mul(ic)).scale(1.0 / 3.0)
}

/// One simulated event cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaultScenario {
    pub fault_type: FaultType,
    pub location: Location,
    pub resistance_ohm: f64,
    pub inception_deg: f64,
    pub der_level_pct: f64,
    pub noise_pct: f64,
    pub seed: u64,
}

impl FaultScenario {
    pub fn validate(&self) -> Result<()> {
        if self.resistance_ohm <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "fault resistance {} must be positive",
                self.resistance_ohm
            )));
        }
        if !(0.0..=180.0).contains(&self.inception_deg) {
            return Err(Error::InvalidArgument(format!(
                "inception angle {} outside [0, 180]",
                self.inception_deg
            )));
        }
        if !(0.0..=80.0).contains(&self.der_level_pct) {
            return Err(Error::InvalidArgument(format!(
                "DER level {} outside [0, 80]",
                self.der_level_pct
            )));
        }
        if !(0.0..=3.0).contains(&self.noise_pct) {
            return Err(Error::InvalidArgument(format!("noise {} outside [0, 3]", self.noise_pct)));
        }
        Ok(())
    }
}

/// One PMU's time series for one scenario.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasorSequence {
    pub pmu_id: u8,
    /// Per-unit positive-sequence current magnitude, 772 samples.
    pub magnitude: Vec<f64>,
    /// Positive-sequence current phase angle in degrees.
    pub phase_deg: Vec<f64>,
    pub scenario: FaultScenario,
}

impl PhasorSequence {
    pub fn t_start_s(&self) -> f64 {
        T_START_S
    }

    pub fn t_end_s(&self) -> f64 {
        T_END_S
    }

    pub fn sample_rate_hz(&self) -> f64 {
        SAMPLE_RATE_HZ
    }
}

/// Sample time of raw index `i`.
pub fn sample_time_s(i: usize) -> f64 {
    T_START_S + i as f64 / SAMPLE_RATE_HZ
}

/// Base magnitude gain per fault type. Single-phase faults are jittered by
/// +0.0/+0.1/+0.2 across AG/BG/CG (likewise the double-phase set) so every
/// type has a distinct envelope at equal location and resistance.
fn type_gain(ft: FaultType) -> f64 {
    match ft {
        FaultType::NoFault => 0.0,
        FaultType::Ag => 2.0,
        FaultType::Bg => 2.1,
        FaultType::Cg => 2.2,
        FaultType::Abg => 3.2,
        FaultType::Bcg => 3.3,
        FaultType::Acg => 3.4,
        FaultType::Abcg => 4.5,
    }
}

/// Angle of the superimposed fault phasor relative to the load current.
/// Ground faults pull the positive-sequence current strongly lagging;
/// a bolted three-phase fault is nearly in phase with the load, producing
/// the small angular change expected of symmetric faults.
fn superposition_angle_deg(ft: FaultType) -> f64 {
    match ft {
        FaultType::NoFault => 0.0,
        FaultType::Ag | FaultType::Abg => -50.0,
        FaultType::Bg | FaultType::Bcg => -65.0,
        FaultType::Cg | FaultType::Acg => -80.0,
        FaultType::Abcg => -6.0,
    }
}

/// Distance attenuation with a per-label offset; the offset separates buses
/// that share a feeder distance (645/633/634/632a all sit at 2500 ft).
pub fn location_attenuation(loc: Location) -> f64 {
    1.0 / (1.0 + loc.distance_ft() / 2500.0) + 0.015 * loc.number() as f64
}

/// Transient decay constant, spread over distance rank so every location has
/// a distinct in-fault decay shape (ties in feeder distance break by label).
pub fn transient_tau_s(loc: Location) -> f64 {
    0.02 * (1.0 + 0.15 * loc.distance_rank() as f64)
}

/// Fault-path resistance attenuation.
pub fn resistance_attenuation(r_ohm: f64) -> f64 {
    1.0 / (1.0 + r_ohm / 10.0)
}

/// Electrical-distance scaling of the observed fault gain per PMU.
pub fn pmu_gain(pmu_id: u8) -> f64 {
    [1.0, 0.8, 0.6, 0.5][(pmu_id - 1) as usize]
}

/// Raised-cosine gate confined to the fault window, with 2 ms edges inside it.
fn gate(t: f64) -> f64 {
    if t <= FAULT_START_S || t >= FAULT_END_S {
        0.0
    } else if t < FAULT_START_S + EDGE_S {
        0.5 * (1.0 - (std::f64::consts::PI * (t - FAULT_START_S) / EDGE_S).cos())
    } else if t > FAULT_END_S - EDGE_S {
        0.5 * (1.0 + (std::f64::consts::PI * (t - (FAULT_END_S - EDGE_S)) / EDGE_S).cos())
    } else {
        1.0
    }
}

/// Closed-form deterministic signature of a scenario as seen by one PMU.
#[derive(Debug, Clone, Copy)]
pub struct Signature {
    /// Effective fault level `A(type) * D(loc) * R(r)` including DER infeed
    /// and PMU attenuation; 0 for healthy operation.
    pub fault_level: f64,
    /// Pre-fault current level in per-unit.
    pub prefault_level: f64,
    /// Peak of the in-fault magnitude multiplier `1 + fault_level * w(t)`.
    pub peak_multiplier: f64,
    /// Phase angle at the gate plateau (degrees), from the phasor sum.
    pub plateau_phase_deg: f64,
    /// Transient decay constant.
    pub tau_s: f64,
}

/// Inception instant: the fault begins at the configured point on the 60 Hz
/// wave after the window opens.
fn inception_time_s(inception_deg: f64) -> f64 {
    FAULT_START_S + (inception_deg / 360.0) / 60.0
}

fn fault_level(scenario: &FaultScenario, pmu_id: u8) -> f64 {
    if !scenario.fault_type.is_fault() {
        return 0.0;
    }
    let a = type_gain(scenario.fault_type) + 0.002 * scenario.der_level_pct;
    a * pmu_gain(pmu_id)
        * location_attenuation(scenario.location)
        * resistance_attenuation(scenario.resistance_ohm)
}

fn prefault_level(scenario: &FaultScenario) -> f64 {
    let der_scale = 1.0 + 0.004 * scenario.der_level_pct;
    if scenario.fault_type.is_fault() {
        der_scale
    } else {
        // healthy rows sample the steady-state load at the labelled bus
        der_scale * (0.5 + 0.5 * location_attenuation(scenario.location))
    }
}

/// In-fault multiplier shape: gate modulated by a decaying 60 Hz transient
/// anchored at the inception instant.
fn shape_w(t: f64, tau: f64, t_inc: f64) -> f64 {
    let g = gate(t);
    if g == 0.0 {
        return 0.0;
    }
    let transient = TRANSIENT_AMPL
        * (-(t - FAULT_START_S) / tau).exp()
        * (2.0 * std::f64::consts::PI * 60.0 * (t - t_inc)).cos();
    g * (1.0 + transient)
}

/// Deterministic signature components (no ripple, no noise).
pub fn signature(scenario: &FaultScenario, pmu_id: u8) -> Signature {
    let level = fault_level(scenario, pmu_id);
    let tau = transient_tau_s(scenario.location);
    let t_inc = inception_time_s(scenario.inception_deg);
    let mut peak_w = 0.0f64;
    for i in 0..RAW_LEN {
        peak_w = peak_w.max(shape_w(sample_time_s(i), tau, t_inc));
    }
    let phi = superposition_angle_deg(scenario.fault_type).to_radians();
    let plateau = level; // w == 1 on the plateau between transient zero crossings
    let plateau_phase =
        (plateau * phi.sin()).atan2(1.0 + plateau * phi.cos()).to_degrees();
    Signature {
        fault_level: level,
        prefault_level: prefault_level(scenario),
        peak_multiplier: 1.0 + level * peak_w,
        plateau_phase_deg: plateau_phase,
        tau_s: tau,
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// RNG stream derived from (seed, scenario, pmu), so parallel and serial
/// dataset generation produce identical samples.
fn stream_seed(scenario: &FaultScenario, pmu_id: u8, salt: u64) -> u64 {
    let mut h = splitmix(scenario.seed ^ salt);
    h = splitmix(h ^ scenario.fault_type.class_index() as u64);
    h = splitmix(h ^ scenario.location.number() as u64);
    h = splitmix(h ^ scenario.resistance_ohm.to_bits());
    h = splitmix(h ^ scenario.inception_deg.to_bits());
    h = splitmix(h ^ scenario.der_level_pct.to_bits());
    h = splitmix(h ^ pmu_id as u64);
    h
}

/// Generate one PMU's clean sequence for a scenario, then apply the
/// scenario's own Gaussian noise level. Pure function of (scenario, pmu_id).
pub fn generate(scenario: &FaultScenario, pmu_id: u8) -> Result<PhasorSequence> {
    scenario.validate()?;
    if !(1..=4).contains(&pmu_id) {
        return Err(Error::InvalidArgument(format!("pmu_id {pmu_id} outside 1..4")));
    }
    let level = fault_level(scenario, pmu_id);
    let pre = prefault_level(scenario);
    let tau = transient_tau_s(scenario.location);
    let t_inc = inception_time_s(scenario.inception_deg);
    let phi = superposition_angle_deg(scenario.fault_type).to_radians();
    let d = location_attenuation(scenario.location);
    let oscillatory = scenario.fault_type.group() == FaultGroup::DoubleLineToGround;

    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(scenario, pmu_id, 0));
    let mut magnitude = Vec::with_capacity(RAW_LEN);
    let mut phase_deg = Vec::with_capacity(RAW_LEN);
    for i in 0..RAW_LEN {
        let t = sample_time_s(i);
        let w = shape_w(t, tau, t_inc);
        let u = level * w;
        let ripple = 1.0 + rng.gen_range(-RIPPLE..=RIPPLE);
        magnitude.push(pre * (1.0 + u) * ripple);
        // angle of (1 + u e^{j phi}): the load phasor plus the fault phasor
        let mut ph = (u * phi.sin()).atan2(1.0 + u * phi.cos()).to_degrees();
        if oscillatory {
            // double line-to-ground faults carry a 120 Hz oscillatory
            // phase component scaled by the location attenuation
            ph += 8.0 * d * gate(t) * (2.0 * std::f64::consts::PI * 120.0 * (t - t_inc)).sin();
        }
        phase_deg.push(ph);
    }
    let seq = PhasorSequence { pmu_id, magnitude, phase_deg, scenario: *scenario };
    if scenario.noise_pct > 0.0 {
        add_noise(&seq, scenario.noise_pct, stream_seed(scenario, pmu_id, 0xA0A0))
    } else {
        Ok(seq)
    }
}

fn channel_std(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Add zero-mean Gaussian noise with std `noise_pct/100 * std(channel)`,
/// independently per channel and per sample.
pub fn add_noise(seq: &PhasorSequence, noise_pct: f64, seed: u64) -> Result<PhasorSequence> {
    if !(0.0..=3.0).contains(&noise_pct) {
        return Err(Error::InvalidArgument(format!("noise_pct {noise_pct} outside [0, 3]")));
    }
    if noise_pct == 0.0 {
        return Ok(seq.clone());
    }
    let mut out = seq.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ 0x6e01_5e5e));
    for channel in [&mut out.magnitude, &mut out.phase_deg] {
        let sigma = noise_pct / 100.0 * channel_std(channel);
        if sigma > 0.0 {
            let dist = Normal::new(0.0, sigma).expect("valid sigma");
            for v in channel.iter_mut() {
                *v += dist.sample(&mut rng);
            }
        }
    }
    Ok(out)
}

/// Ratio of the in-fault magnitude peak to the pre-fault median; the
/// empirical counterpart of [`Signature::peak_multiplier`].
pub fn in_fault_peak_ratio(seq: &PhasorSequence) -> f64 {
    let mut pre: Vec<f64> = (0..RAW_LEN)
        .filter(|&i| sample_time_s(i) < FAULT_START_S)
        .map(|i| seq.magnitude[i])
        .collect();
    pre.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let base = pre[pre.len() / 2];
    let peak = (0..RAW_LEN)
        .filter(|&i| {
            let t = sample_time_s(i);
            (FAULT_START_S..=FAULT_END_S).contains(&t)
        })
        .map(|i| seq.magnitude[i])
        .fold(f64::NEG_INFINITY, f64::max);
    peak / base
}
