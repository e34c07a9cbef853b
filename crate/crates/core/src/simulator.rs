//! Monte-Carlo dephasing simulator.
//!
//! Classical Gaussian noise is synthesized as a harmonic superposition
//! `b(t) = sum_m sigma_m (X_m cos(omega_m t) + Y_m sin(omega_m t))` with
//! `X_m, Y_m ~ N(0, 1)` and `sigma_m^2 = 2 S(omega_m) d_omega`, so that
//! `<b(t) b(t + s)> = sum_m sigma_m^2 cos(omega_m s)`, a midpoint-rule version
//! of the autocorrelation. A trajectory is fully described by its `2M`
//! standard normals, which are regenerated on demand from the master seed.

use std::f64::consts::PI;

use log::warn;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::PHASE_COUPLING_SQ;
use crate::rng::substream;
use crate::sequence::{modulation_profile, sinc, ModulationProfile, PulseSequence};
use crate::spectral::SpectralDensity;

/// Trajectories per work unit. Fixed so that reductions do not depend on the
/// thread count.
const BATCH: usize = 128;
const MAX_MODES: usize = 4_000_000;
const MAX_CHECKPOINTS: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSynthesisSpec {
    pub spectrum: SpectralDensity,
    /// Extra factor on the noise power; `0` gives noiseless trajectories.
    pub power_scale: f64,
    pub duration: f64,
    pub dt: f64,
    pub n_trajectories: usize,
    pub master_seed: u64,
    /// Highest synthesized frequency; defaults to the spectrum's support.
    pub max_omega: Option<f64>,
}

impl NoiseSynthesisSpec {
    /// Spec with a time step fine enough for the default mode band.
    pub fn new(spectrum: SpectralDensity, duration: f64, n_trajectories: usize, master_seed: u64) -> Self {
        let mut s = Self {
            spectrum,
            power_scale: 1.0,
            duration,
            dt: 0.0,
            n_trajectories,
            master_seed,
            max_omega: None,
        };
        s.dt = 0.05 / s.mode_extent();
        s
    }

    /// Sets the synthesized band and rescales `dt` to match.
    pub fn with_max_omega(mut self, omega: f64) -> Self {
        self.max_omega = Some(omega);
        self.dt = 0.05 / self.mode_extent();
        self
    }

    pub fn with_dt(mut self, dt: f64) -> Self {
        self.dt = dt;
        self
    }

    pub fn with_power_scale(mut self, scale: f64) -> Self {
        self.power_scale = scale;
        self
    }

    pub fn mode_extent(&self) -> f64 {
        self.max_omega.unwrap_or_else(|| self.spectrum.support_extent())
    }

    /// Frequency spacing: fine enough to resolve the narrowest line and to
    /// keep the superposition from repeating within the record.
    pub fn mode_spacing(&self) -> f64 {
        (self.spectrum.min_width() / 10.0).min(PI / (1.2 * self.duration))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.spectrum.is_symmetrized() {
            return Err(Error::Convention("noise synthesis needs a symmetrized spectrum".into()));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if !(self.power_scale >= 0.0 && self.power_scale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "power scale must be >= 0, got {}",
                self.power_scale
            )));
        }
        if self.n_trajectories == 0 {
            return Err(Error::InvalidParameter("n_trajectories must be positive".into()));
        }
        let extent = self.mode_extent();
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "mode band must be positive, got {extent}"
            )));
        }
        if !(self.dt > 0.0) || self.dt * extent >= 0.1 {
            return Err(Error::TimeStepTooCoarse {
                dt: self.dt,
                omega_max: extent,
                required: 0.1 / extent,
            });
        }
        let modes = (extent / self.mode_spacing()).ceil();
        if modes > MAX_MODES as f64 {
            return Err(Error::InvalidParameter(format!(
                "{modes:.0} noise modes needed; shorten the record or narrow the band"
            )));
        }
        if self.n_trajectories < 100 {
            warn!(
                "{} trajectories is too few for statistical comparisons",
                self.n_trajectories
            );
        }
        Ok(())
    }
}

/// An immutable, lazily materialized noise ensemble.
#[derive(Debug, Clone)]
pub struct Ensemble {
    spec: NoiseSynthesisSpec,
    omegas: Vec<f64>,
    sigmas: Vec<f64>,
}

pub fn synthesize_trajectories(spec: NoiseSynthesisSpec) -> Result<Ensemble> {
    spec.validate()?;
    let d = spec.mode_spacing();
    let m = (spec.mode_extent() / d).ceil() as usize;
    let omegas: Vec<f64> = (0..m).map(|i| (i as f64 + 0.5) * d).collect();
    let sigmas = omegas
        .iter()
        .map(|&w| (2.0 * spec.power_scale * crate::spectral::eval_spectrum(&spec.spectrum, w) * d).sqrt())
        .collect();
    Ok(Ensemble { spec, omegas, sigmas })
}

impl Ensemble {
    pub fn spec(&self) -> &NoiseSynthesisSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.spec.n_trajectories
    }

    pub fn is_empty(&self) -> bool {
        self.spec.n_trajectories == 0
    }

    pub fn duration(&self) -> f64 {
        self.spec.duration
    }

    pub fn n_modes(&self) -> usize {
        self.omegas.len()
    }

    pub fn mode_frequencies(&self) -> &[f64] {
        &self.omegas
    }

    /// Variance carried by the synthesized modes, `sum sigma_m^2`.
    pub fn synthesized_variance(&self) -> f64 {
        self.sigmas.iter().map(|s| s * s).sum()
    }

    fn fill_normals(&self, index: usize, out: &mut [f64]) {
        let mut rng = substream(self.spec.master_seed, index as u64);
        for x in out.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
    }

    pub fn trajectory(&self, index: usize) -> Trajectory<'_> {
        let m = self.omegas.len();
        let mut z = vec![0.0; 2 * m];
        self.fill_normals(index, &mut z);
        let (x, y) = z.split_at(m);
        Trajectory {
            omegas: &self.omegas,
            cos_amp: x.iter().zip(&self.sigmas).map(|(a, s)| a * s).collect(),
            sin_amp: y.iter().zip(&self.sigmas).map(|(a, s)| a * s).collect(),
        }
    }
}

/// One noise realization.
#[derive(Debug, Clone)]
pub struct Trajectory<'a> {
    omegas: &'a [f64],
    cos_amp: Vec<f64>,
    sin_amp: Vec<f64>,
}

impl Trajectory<'_> {
    pub fn value_at(&self, t: f64) -> f64 {
        self.omegas
            .iter()
            .zip(self.cos_amp.iter().zip(&self.sin_amp))
            .map(|(&w, (a, b))| {
                let (s, c) = (w * t).sin_cos();
                a * c + b * s
            })
            .sum()
    }

    pub fn sample(&self, times: &[f64]) -> Vec<f64> {
        times.iter().map(|&t| self.value_at(t)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseMethod {
    /// Closed-form integral of every mode over every constant-sign piece.
    Exact,
    /// Trapezoidal accumulation of `f b` on the `dt` grid.
    Trapezoid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceTrace {
    pub times: Vec<f64>,
    /// `<cos phi>`.
    pub coherence: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `<sin phi>`; should vanish within statistical error.
    pub imaginary: Vec<f64>,
    /// Sample variance of `phi`.
    pub phase_variance: Vec<f64>,
    pub n_trajectories: usize,
}

impl CoherenceTrace {
    /// `exp(-var(phi)/2)`, the Gaussian-statistics prediction of the coherence.
    pub fn gaussian_coherence(&self) -> Vec<f64> {
        self.phase_variance.iter().map(|v| (-0.5 * v).exp()).collect()
    }

    /// Largest `|<sin phi>|` in units of its standard error.
    pub fn max_imaginary_z(&self) -> f64 {
        self.imaginary
            .iter()
            .zip(&self.stderr)
            .filter(|(_, &se)| se > 0.0)
            .map(|(&im, &se)| im.abs() / se)
            .fold(0.0, f64::max)
    }
}

/// Constant-sign pieces of `f` over `[0, times.last()]`, split at every
/// requested time. Each item is `(start, end, sign, checkpoints closed)`.
fn pieces(profile: &ModulationProfile, times: &[f64]) -> Vec<(f64, f64, f64, usize)> {
    let t_end = *times.last().unwrap_or(&0.0);
    let mut events: Vec<f64> = times.to_vec();
    let p = profile.period();
    let mut k = 0usize;
    while (k as f64) * p < t_end {
        for &s in profile.switch_times() {
            let t = k as f64 * p + s;
            if t < t_end {
                events.push(t);
            }
        }
        k += 1;
    }
    events.push(0.0);
    events.sort_by(f64::total_cmp);
    events.dedup();

    let mut out = Vec::with_capacity(events.len());
    let mut next = times.partition_point(|&t| t <= 0.0);
    for w in events.windows(2) {
        let (a, b) = (w[0], w[1]);
        let closed = times[next..].partition_point(|&t| t <= b);
        next += closed;
        out.push((a, b, profile.sign_at(0.5 * (a + b)), closed));
    }
    out
}

fn check_times(ens: &Ensemble, times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::InvalidParameter("no observation times".into()));
    }
    if times[0] < 0.0 || times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidParameter(
            "observation times must be non-negative and sorted".into(),
        ));
    }
    let need = *times.last().unwrap();
    if need > ens.duration() * (1.0 + 1e-12) {
        return Err(Error::DurationShortfall {
            available: ens.duration(),
            required: need,
        });
    }
    Ok(())
}

/// Matrix mapping a trajectory's standard normals to its phase at each time,
/// row-major `[times x 2M]`.
fn phase_matrix(ens: &Ensemble, profile: &ModulationProfile, times: &[f64]) -> Vec<f64> {
    let m = ens.n_modes();
    let j = PHASE_COUPLING_SQ.sqrt();
    let mut acc_c = vec![0.0; m];
    let mut acc_s = vec![0.0; m];
    let mut mat = vec![0.0; times.len() * 2 * m];
    let mut row = times.partition_point(|&t| t <= 0.0);
    for (a, b, sign, closed) in pieces(profile, times) {
        let len = b - a;
        let mid = 0.5 * (a + b);
        for (i, &w) in ens.omegas.iter().enumerate() {
            let amp = sign * len * sinc(0.5 * w * len);
            let (s, c) = (w * mid).sin_cos();
            acc_c[i] += amp * c;
            acc_s[i] += amp * s;
        }
        for _ in 0..closed {
            let r = &mut mat[row * 2 * m..(row + 1) * 2 * m];
            for i in 0..m {
                let g = j * ens.sigmas[i];
                r[i] = g * acc_c[i];
                r[m + i] = g * acc_s[i];
            }
            row += 1;
        }
    }
    mat
}

#[derive(Clone)]
struct Moments {
    cos: Vec<f64>,
    cos2: Vec<f64>,
    sin: Vec<f64>,
    phi: Vec<f64>,
    phi2: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            cos: vec![0.0; n],
            cos2: vec![0.0; n],
            sin: vec![0.0; n],
            phi: vec![0.0; n],
            phi2: vec![0.0; n],
        }
    }

    fn add(&mut self, t: usize, phi: f64) {
        let (s, c) = phi.sin_cos();
        self.cos[t] += c;
        self.cos2[t] += c * c;
        self.sin[t] += s;
        self.phi[t] += phi;
        self.phi2[t] += phi * phi;
    }

    fn merge(&mut self, o: &Moments) {
        for t in 0..self.cos.len() {
            self.cos[t] += o.cos[t];
            self.cos2[t] += o.cos2[t];
            self.sin[t] += o.sin[t];
            self.phi[t] += o.phi[t];
            self.phi2[t] += o.phi2[t];
        }
    }
}

fn exact_batch(ens: &Ensemble, mat: &[f64], n_t: usize, lo: usize, hi: usize) -> Moments {
    let k = 2 * ens.n_modes();
    let nb = hi - lo;
    let mut z = vec![0.0; nb * k];
    for (b, chunk) in z.chunks_mut(k.max(1)).enumerate().take(nb) {
        ens.fill_normals(lo + b, chunk);
    }
    let mut phases = vec![0.0; n_t * nb];
    if k > 0 {
        // phases[t, b] = sum_r mat[t, r] z[b, r]
        unsafe {
            matrixmultiply::dgemm(
                n_t,
                k,
                nb,
                1.0,
                mat.as_ptr(),
                k as isize,
                1,
                z.as_ptr(),
                1,
                k as isize,
                0.0,
                phases.as_mut_ptr(),
                nb as isize,
                1,
            );
        }
    }
    let mut mom = Moments::new(n_t);
    for t in 0..n_t {
        for b in 0..nb {
            mom.add(t, phases[t * nb + b]);
        }
    }
    mom
}

fn trapezoid_batch(ens: &Ensemble, profile: &ModulationProfile, times: &[f64], lo: usize, hi: usize) -> Moments {
    let n_t = times.len();
    let j = PHASE_COUPLING_SQ.sqrt();
    let plan = pieces(profile, times);
    let dt = ens.spec.dt;
    let mut mom = Moments::new(n_t);
    for idx in lo..hi {
        let traj = ens.trajectory(idx);
        let mut phi = 0.0;
        let mut t = times.partition_point(|&x| x <= 0.0);
        for i in 0..t {
            mom.add(i, 0.0);
        }
        for &(a, b, sign, closed) in &plan {
            let steps = ((b - a) / dt).ceil().max(1.0) as usize;
            let h = (b - a) / steps as f64;
            let mut sum = 0.5 * (traj.value_at(a) + traj.value_at(b));
            for s in 1..steps {
                sum += traj.value_at(a + s as f64 * h);
            }
            phi += j * sign * h * sum;
            for _ in 0..closed {
                mom.add(t, phi);
                t += 1;
            }
        }
    }
    mom
}

/// Coherence at arbitrary sorted times using the given phase integrator.
pub fn measure_coherence_at(
    ens: &Ensemble,
    profile: &ModulationProfile,
    times: &[f64],
    method: PhaseMethod,
) -> Result<CoherenceTrace> {
    check_times(ens, times)?;
    let n = ens.len();
    let n_t = times.len();
    let batches: Vec<(usize, usize)> = (0..n).step_by(BATCH).map(|lo| (lo, (lo + BATCH).min(n))).collect();
    let partial: Vec<Moments> = match method {
        PhaseMethod::Exact => {
            let mat = phase_matrix(ens, profile, times);
            batches
                .par_iter()
                .map(|&(lo, hi)| exact_batch(ens, &mat, n_t, lo, hi))
                .collect()
        }
        PhaseMethod::Trapezoid => batches
            .par_iter()
            .map(|&(lo, hi)| trapezoid_batch(ens, profile, times, lo, hi))
            .collect(),
    };
    let mut total = Moments::new(n_t);
    for p in &partial {
        total.merge(p);
    }

    let nf = n as f64;
    let mut coherence = Vec::with_capacity(n_t);
    let mut stderr = Vec::with_capacity(n_t);
    let mut imaginary = Vec::with_capacity(n_t);
    let mut phase_variance = Vec::with_capacity(n_t);
    for t in 0..n_t {
        let mean = total.cos[t] / nf;
        let sd = if n > 1 {
            ((total.cos2[t] - nf * mean * mean) / (nf - 1.0)).max(0.0).sqrt()
        } else {
            0.0
        };
        coherence.push(mean);
        stderr.push(sd / nf.sqrt());
        imaginary.push(total.sin[t] / nf);
        let pm = total.phi[t] / nf;
        phase_variance.push(if n > 1 {
            ((total.phi2[t] - nf * pm * pm) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        });
    }
    Ok(CoherenceTrace {
        times: times.to_vec(),
        coherence,
        stderr,
        imaginary,
        phase_variance,
        n_trajectories: n,
    })
}

/// Coherence at `t = 0, P, 2P, ..., n_cycles P` for the profile period `P`.
pub fn measure_coherence(ens: &Ensemble, profile: &ModulationProfile, n_cycles: usize) -> Result<CoherenceTrace> {
    let times: Vec<f64> = (0..=n_cycles).map(|k| k as f64 * profile.period()).collect();
    measure_coherence_at(ens, profile, &times, PhaseMethod::Exact)
}

/// Weighted log-linear fit of the trace over points with coherence in
/// `[0.1, 0.95]`. Returns `(t2, stderr)`.
pub fn extract_t2(trace: &CoherenceTrace) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64, f64)> = trace
        .times
        .iter()
        .zip(trace.coherence.iter().zip(&trace.stderr))
        .filter(|(&t, (&c, _))| t > 0.0 && (0.1..=0.95).contains(&c))
        .map(|(&t, (&c, &se))| (t, c, se))
        .collect();
    if pts.len() < 3 {
        return Err(Error::DecayFit(format!(
            "{} points with coherence in [0.1, 0.95]; need at least 3",
            pts.len()
        )));
    }
    let have_errors = pts.iter().all(|p| p.2 > 0.0);
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(t, c, se) in &pts {
        let w = if have_errors { (c / se).powi(2) } else { 1.0 };
        let y = c.ln();
        sw += w;
        sx += w * t;
        sy += w * y;
        sxx += w * t * t;
        sxy += w * t * y;
    }
    let det = sw * sxx - sx * sx;
    if !(det > 0.0) {
        return Err(Error::DecayFit("degenerate time points".into()));
    }
    let slope = (sw * sxy - sx * sy) / det;
    let intercept = (sy - slope * sx) / sw;
    if !(slope < 0.0) {
        return Err(Error::DecayFit(format!("coherence does not decay (slope {slope:.3e})")));
    }
    let mut var_slope = sw / det;
    if !have_errors {
        let rss: f64 = pts
            .iter()
            .map(|&(t, c, _)| (c.ln() - intercept - slope * t).powi(2))
            .sum();
        var_slope *= rss / (pts.len() - 2).max(1) as f64;
    }
    Ok((-1.0 / slope, var_slope.sqrt() / (slope * slope)))
}

/// Settings for simulating a pulse sequence end to end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimulationOptions {
    pub n_trajectories: usize,
    pub master_seed: u64,
    /// Synthesized band in units of the modulation fundamental.
    pub band_harmonics: f64,
    pub method: PhaseMethod,
    /// Factor on the noise power; `0` simulates the noiseless case.
    pub power_scale: f64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        Self {
            n_trajectories: 10_000,
            master_seed: 0x5EED_0001,
            band_harmonics: 20.0,
            method: PhaseMethod::Exact,
            power_scale: 1.0,
        }
    }
}

/// Synthesizes noise for `n_cycles` repetitions of `seq` and records the
/// coherence at the end of every cycle.
pub fn simulate_sequence(
    spectrum: &SpectralDensity,
    seq: &PulseSequence,
    n_cycles: usize,
    opts: &SimulationOptions,
) -> Result<CoherenceTrace> {
    if n_cycles == 0 {
        return Err(Error::InvalidParameter("n_cycles must be positive".into()));
    }
    let profile = modulation_profile(seq);
    let fundamental = 2.0 * PI / profile.period();
    let duration = n_cycles as f64 * seq.cycle();
    let band = spectrum.support_extent().max(opts.band_harmonics * fundamental);
    let spec = NoiseSynthesisSpec::new(spectrum.clone(), duration, opts.n_trajectories, opts.master_seed)
        .with_max_omega(band)
        .with_power_scale(opts.power_scale);
    let ens = synthesize_trajectories(spec)?;
    // at most a few hundred observation points keep the phase matrix small
    let stride = n_cycles.div_ceil(MAX_CHECKPOINTS);
    let mut times: Vec<f64> = (0..=n_cycles).step_by(stride).map(|k| k as f64 * seq.cycle()).collect();
    if !n_cycles.is_multiple_of(stride) {
        times.push(duration);
    }
    measure_coherence_at(&ens, &profile, &times, opts.method)
}
