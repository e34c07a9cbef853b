//! Dynamical-decoupling pulse sequences and their filter functions.
//!
//! A sequence is a list of ideal, instantaneous pi-pulse instants inside one
//! cycle. The toggling-frame modulation `f(t)` starts at `+1` and flips sign
//! at every pulse. A cycle with an odd pulse count ends on `-1`, so the
//! repeated sequence has a modulation period of two cycles; this is what makes
//! UDD-1 coincide with CPMG.
//!
//! Filter functions use the non-unitary transform
//! `F(omega, t) = integral_0^t f(u) exp(i omega u) du`, and the harmonic
//! weights are the squared complex Fourier coefficients of one modulation
//! period, `A_k^2 = |(1/P) integral_0^P f(u) exp(i omega_k u) du|^2`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Default harmonic cutoff for CPMG-style sums.
pub const DEFAULT_K_MAX: usize = 10_001;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SequenceKind {
    /// Uniform pulses at `tau` and `3 tau` in a `4 tau` cycle.
    Cpmg {
        tau: f64,
    },
    Udd {
        order: usize,
    },
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PulseSequence {
    pulse_times: Vec<f64>,
    cycle: f64,
    kind: SequenceKind,
}

impl PulseSequence {
    /// Custom sequence. Pulse instants must be strictly increasing inside
    /// `(0, cycle)`; an empty list is free evolution.
    pub fn custom(pulse_times: Vec<f64>, cycle: f64) -> Result<Self> {
        Self::validated(pulse_times, cycle, SequenceKind::Custom)
    }

    fn validated(pulse_times: Vec<f64>, cycle: f64, kind: SequenceKind) -> Result<Self> {
        if !(cycle > 0.0 && cycle.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "cycle duration must be positive, got {cycle}"
            )));
        }
        let mut prev = 0.0;
        for &t in &pulse_times {
            if !(t > prev && t < cycle) {
                return Err(Error::InvalidParameter(format!(
                    "pulse instants must be strictly increasing inside (0, {cycle}); offending value {t}"
                )));
            }
            prev = t;
        }
        Ok(Self {
            pulse_times,
            cycle,
            kind,
        })
    }

    pub fn pulse_times(&self) -> &[f64] {
        &self.pulse_times
    }

    pub fn cycle(&self) -> f64 {
        self.cycle
    }

    pub fn kind(&self) -> SequenceKind {
        self.kind
    }

    pub fn n_pulses(&self) -> usize {
        self.pulse_times.len()
    }

    /// Sign of `f` at the end of one cycle.
    pub fn end_sign(&self) -> f64 {
        if self.pulse_times.len().is_multiple_of(2) {
            1.0
        } else {
            -1.0
        }
    }

    /// Constant-sign pieces of `f` over a single cycle, starting at `+1`.
    pub fn cycle_segments(&self) -> Vec<Segment> {
        segments_from_switches(&self.pulse_times, self.cycle, 1.0)
    }
}

/// CPMG with inter-pulse spacing `2 tau`.
pub fn make_cpmg(tau: f64) -> Result<PulseSequence> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!("CPMG tau must be positive, got {tau}")));
    }
    PulseSequence::validated(vec![tau, 3.0 * tau], 4.0 * tau, SequenceKind::Cpmg { tau })
}

/// Uhrig sequence of the given order: `t_j = cycle * sin^2(pi j / (2 order + 2))`.
///
/// Orders 1 and 2 are built from the CPMG geometry they coincide with
/// (pulses at `cycle/2`, resp. `cycle/4` and `3 cycle/4`), so the two
/// constructions give bit-identical modulation profiles.
pub fn make_udd(order: usize, cycle: f64) -> Result<PulseSequence> {
    if order == 0 {
        return Err(Error::InvalidParameter("UDD order must be at least 1".into()));
    }
    if !(cycle > 0.0 && cycle.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "UDD cycle must be positive, got {cycle}"
        )));
    }
    let kind = SequenceKind::Udd { order };
    let times = match order {
        1 => vec![0.5 * cycle],
        2 => {
            let tau = 0.25 * cycle;
            vec![tau, 3.0 * tau]
        }
        _ => (1..=order)
            .map(|j| {
                let s = (PI * j as f64 / (2.0 * order as f64 + 2.0)).sin();
                cycle * s * s
            })
            .collect(),
    };
    PulseSequence::validated(times, cycle, kind)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub sign: f64,
}

fn segments_from_switches(switches: &[f64], end: f64, first_sign: f64) -> Vec<Segment> {
    let mut out = Vec::with_capacity(switches.len() + 1);
    let mut start = 0.0;
    let mut sign = first_sign;
    for &t in switches {
        out.push(Segment { start, end: t, sign });
        start = t;
        sign = -sign;
    }
    out.push(Segment { start, end, sign });
    out
}

/// The periodic `+-1` modulation function induced by a pulse sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationProfile {
    switch_times: Vec<f64>,
    period: f64,
}

impl ModulationProfile {
    pub fn switch_times(&self) -> &[f64] {
        &self.switch_times
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn initial_sign(&self) -> f64 {
        1.0
    }

    /// `f(t)` for any `t >= 0`; right-continuous at the switches.
    pub fn sign_at(&self, t: f64) -> f64 {
        let local = t.rem_euclid(self.period);
        let flips = self.switch_times.partition_point(|&s| s <= local);
        if flips % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    pub fn segments(&self) -> Vec<Segment> {
        segments_from_switches(&self.switch_times, self.period, 1.0)
    }

    /// Time average of `f` over one period.
    pub fn mean(&self) -> f64 {
        self.segments().iter().map(|s| s.sign * (s.end - s.start)).sum::<f64>() / self.period
    }

    /// `1/P integral_0^P f(u) exp(i omega u) du`.
    pub fn fourier_coefficient(&self, omega: f64) -> Complex64 {
        segment_transform(&self.segments(), omega) / self.period
    }
}

pub fn modulation_profile(seq: &PulseSequence) -> ModulationProfile {
    if seq.n_pulses().is_multiple_of(2) {
        ModulationProfile {
            switch_times: seq.pulse_times.clone(),
            period: seq.cycle,
        }
    } else {
        let mut switch_times = seq.pulse_times.clone();
        switch_times.extend(seq.pulse_times.iter().map(|&t| t + seq.cycle));
        ModulationProfile {
            switch_times,
            period: 2.0 * seq.cycle,
        }
    }
}

#[inline]
pub(crate) fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

/// `sum_seg sign * integral_start^end exp(i omega u) du`, written with the
/// midpoint/sinc form so it stays accurate as `omega -> 0`.
pub fn segment_transform(segments: &[Segment], omega: f64) -> Complex64 {
    segments
        .iter()
        .map(|s| {
            let len = s.end - s.start;
            let mid = 0.5 * (s.start + s.end);
            Complex64::from_polar(s.sign * len * sinc(0.5 * omega * len), omega * mid)
        })
        .sum()
}

/// `|sum_{m=0}^{n-1} exp(i m x)|^2 = sin^2(n x / 2) / sin^2(x / 2)`.
pub fn comb_factor(x: f64, n: usize) -> f64 {
    let nf = n as f64;
    let r = x - 2.0 * PI * (x / (2.0 * PI)).round();
    if r.abs() < 1e-5 {
        return nf * nf * (1.0 - (nf * nf - 1.0) * r * r / 12.0);
    }
    let num = (0.5 * nf * r).sin();
    let den = (0.5 * r).sin();
    (num * num) / (den * den)
}

/// `|F(omega, n * cycle)|^2` for `n` repetitions of the sequence.
pub fn filter_function_sq(seq: &PulseSequence, omega: f64, n_cycles: usize) -> f64 {
    let single = segment_transform(&seq.cycle_segments(), omega).norm_sqr();
    let shift = if seq.end_sign() < 0.0 { PI } else { 0.0 };
    single * comb_factor(omega * seq.cycle + shift, n_cycles.max(1))
}

/// Squared Fourier coefficients `A_k^2` of the modulation, `k = 0..=k_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicWeights {
    coefficients: Vec<f64>,
    fundamental: f64,
}

impl HarmonicWeights {
    /// `A_k^2`; zero beyond the computed range.
    pub fn get(&self, k: usize) -> f64 {
        self.coefficients.get(k).copied().unwrap_or(0.0)
    }

    pub fn k_max(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// `omega_1 = 2 pi / P` for modulation period `P`.
    pub fn fundamental(&self) -> f64 {
        self.fundamental
    }

    pub fn omega(&self, k: usize) -> f64 {
        k as f64 * self.fundamental
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// `sum_{k=1}^{k_max} A_k^2`.
    pub fn ac_power(&self) -> f64 {
        self.coefficients[1..].iter().sum()
    }
}

/// Exact segment-wise Fourier coefficients of the modulation profile.
pub fn harmonic_weights(seq: &PulseSequence, k_max: usize) -> Result<HarmonicWeights> {
    if k_max < 1 {
        return Err(Error::InvalidParameter("k_max must be at least 1".into()));
    }
    let profile = modulation_profile(seq);
    let fundamental = 2.0 * PI / profile.period;
    let segments = profile.segments();
    let coefficients = (0..=k_max)
        .map(|k| (segment_transform(&segments, k as f64 * fundamental) / profile.period).norm_sqr())
        .collect();
    Ok(HarmonicWeights {
        coefficients,
        fundamental,
    })
}

/// Parses a duration such as `2ms`, `0.5s`, `100us` or a bare number of seconds.
pub fn parse_duration(text: &str) -> Result<f64> {
    let t = text.trim();
    let (num, per_second) = if let Some(v) = t.strip_suffix("ms") {
        (v, 1e3)
    } else if let Some(v) = t.strip_suffix("us") {
        (v, 1e6)
    } else if let Some(v) = t.strip_suffix("ns") {
        (v, 1e9)
    } else if let Some(v) = t.strip_suffix('s') {
        (v, 1.0)
    } else {
        (t, 1.0)
    };
    let v: f64 = num
        .trim()
        .parse()
        .map_err(|_| Error::Parse(format!("invalid duration '{text}'")))?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("invalid duration '{text}'")));
    }
    Ok(v / per_second)
}

pub const SEQUENCE_GRAMMAR: &str =
    "cpmg:tau=<dur> | udd:n=<order>,cycle=<dur> | custom:[<dur>,<dur>,...]@<dur>  (dur like 2ms, 0.5s, 100us)";

fn key_values(body: &str) -> Result<Vec<(&str, &str)>> {
    body.split(',')
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Parse(format!("expected key=value, got '{kv}'")))
        })
        .collect()
}

impl FromStr for PulseSequence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("unrecognised sequence '{s}'; expected {SEQUENCE_GRAMMAR}"));
        let (head, body) = s.trim().split_once(':').ok_or_else(bad)?;
        match head.trim().to_ascii_lowercase().as_str() {
            "cpmg" => {
                let kv = key_values(body)?;
                match kv.as_slice() {
                    [("tau", v)] => make_cpmg(parse_duration(v)?),
                    _ => Err(bad()),
                }
            }
            "udd" => {
                let kv = key_values(body)?;
                let mut order = None;
                let mut cycle = None;
                for (k, v) in kv {
                    match k {
                        "n" => {
                            order = Some(
                                v.parse::<usize>()
                                    .map_err(|_| Error::Parse(format!("invalid UDD order '{v}'")))?,
                            )
                        }
                        "cycle" => cycle = Some(parse_duration(v)?),
                        _ => return Err(bad()),
                    }
                }
                match (order, cycle) {
                    (Some(n), Some(c)) => make_udd(n, c),
                    _ => Err(bad()),
                }
            }
            "custom" => {
                let (list, cycle) = body.rsplit_once('@').ok_or_else(bad)?;
                let list = list
                    .trim()
                    .strip_prefix('[')
                    .and_then(|l| l.strip_suffix(']'))
                    .ok_or_else(bad)?;
                let times = list
                    .split(',')
                    .map(str::trim)
                    .filter(|x| !x.is_empty())
                    .map(parse_duration)
                    .collect::<Result<Vec<_>>>()?;
                PulseSequence::custom(times, parse_duration(cycle)?)
            }
            _ => Err(bad()),
        }
    }
}

/// A family of sequences parameterised by one duration: `tau` for CPMG,
/// the cycle for UDD and custom fractional layouts.
#[derive(Debug, Clone, PartialEq)]
pub enum SequenceFamily {
    Cpmg,
    Udd(usize),
    /// Pulse instants as fractions of the cycle.
    Custom(Vec<f64>),
}

pub const FAMILY_GRAMMAR: &str = "cpmg | udd:n=<order> | custom:[<fraction>,...]  (fractions of the cycle in (0,1))";

impl SequenceFamily {
    pub fn instantiate(&self, duration: f64) -> Result<PulseSequence> {
        match self {
            SequenceFamily::Cpmg => make_cpmg(duration),
            SequenceFamily::Udd(n) => make_udd(*n, duration),
            SequenceFamily::Custom(fr) => PulseSequence::custom(fr.iter().map(|f| f * duration).collect(), duration),
        }
    }
}

impl FromStr for SequenceFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Parse(format!(
                "unknown sequence family '{s}'; accepted grammar: {FAMILY_GRAMMAR}"
            ))
        };
        let t = s.trim().to_ascii_lowercase();
        if t == "cpmg" {
            return Ok(SequenceFamily::Cpmg);
        }
        if let Some(body) = t.strip_prefix("udd:") {
            let kv = key_values(body).map_err(|_| bad())?;
            return match kv.as_slice() {
                [("n", v)] => match v.parse::<usize>() {
                    Ok(n) if n >= 1 => Ok(SequenceFamily::Udd(n)),
                    _ => Err(bad()),
                },
                _ => Err(bad()),
            };
        }
        if let Some(body) = t.strip_prefix("custom:") {
            let list = body
                .trim()
                .strip_prefix('[')
                .and_then(|l| l.strip_suffix(']'))
                .ok_or_else(bad)?;
            let fr = list
                .split(',')
                .map(str::trim)
                .filter(|x| !x.is_empty())
                .map(|x| x.parse::<f64>().map_err(|_| bad()))
                .collect::<Result<Vec<_>>>()?;
            // validate the layout once against a unit cycle
            PulseSequence::custom(fr.clone(), 1.0)?;
            return Ok(SequenceFamily::Custom(fr));
        }
        Err(bad())
    }
}

impl fmt::Display for SequenceFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SequenceFamily::Cpmg => write!(f, "cpmg"),
            SequenceFamily::Udd(n) => write!(f, "udd:n={n}"),
            SequenceFamily::Custom(fr) => {
                let parts: Vec<String> = fr.iter().map(|x| format!("{x}")).collect();
                write!(f, "custom:[{}]", parts.join(","))
            }
        }
    }
}
