//! Decay rates predicted from a noise spectrum and a pulse sequence.
//!
//! Conventions: the spectrum pairs with the noise autocorrelation through
//! `g(t) = integral S(omega) cos(omega t) d omega`, and the qubit picks up the
//! phase `phi(t) = j * integral_0^t f(u) b(u) du` with the squared coupling
//! `j^2 = PHASE_COUPLING_SQ`. For Gaussian noise the coherence is
//! `exp(-chi(t))` with
//!
//! ```text
//! chi(t) = (j^2 / 2) * integral_{-inf}^{inf} S(omega) |F(omega, t)|^2 d omega
//! ```
//!
//! and for many cycles `chi(t) / t` tends to
//! `sum_{k>=1} S(omega_k) A_k^2 + S(0) A_0^2 / 2`.

use std::f64::consts::PI;

use log::warn;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quadrature::{integrate, integrate_panels};
use crate::sequence::{
    filter_function_sq, harmonic_weights, make_cpmg, modulation_profile, PulseSequence, SequenceFamily,
};
use crate::spectral::{SpectralDensity, Spectrum};

/// Squared system-bath coupling that turns the spectrum convention above into
/// accumulated phase. With this value the asymptotic rate is exactly the
/// harmonic sum `sum_k S(omega_k) A_k^2`, and white noise of level `S0`
/// decays at `S0 / 2` under any sequence. Checked against the Monte-Carlo
/// simulator in the test suite.
pub const PHASE_COUPLING_SQ: f64 = 1.0 / (2.0 * PI);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regime {
    Asymptotic,
    FiniteTime { n_cycles: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayPrediction {
    /// `1/T2` in s^-1.
    pub rate: f64,
    /// `T2` in s; infinite when the rate is zero.
    pub t2: f64,
    pub regime: Regime,
    /// Highest harmonic index included; `usize::MAX` for closed forms.
    pub truncation_k: usize,
    /// Set when spectral features sit beyond the harmonic cutoff.
    pub truncation_warning: bool,
}

impl DecayPrediction {
    fn asymptotic(rate: f64, truncation_k: usize, truncation_warning: bool) -> Self {
        let rate = rate.max(0.0);
        Self {
            rate,
            t2: if rate > 0.0 { 1.0 / rate } else { f64::INFINITY },
            regime: Regime::Asymptotic,
            truncation_k,
            truncation_warning,
        }
    }
}

fn check_truncation<S: Spectrum + ?Sized>(s: &S, cutoff: f64) -> bool {
    match s.feature_frequency() {
        Some(f) if f > cutoff => {
            warn!(
                "spectral feature at {f:.4e} rad/s lies beyond the harmonic cutoff {cutoff:.4e} rad/s; \
                 the truncated sum misses spectral weight"
            );
            true
        }
        _ => false,
    }
}

/// Harmonic-sum decay rate `sum_{k=1}^{k_max} S(omega_k) A_k^2`, plus the
/// `S(0) A_0^2 / 2` term for sequences whose modulation has a nonzero mean.
pub fn decay_rate_asymptotic<S: Spectrum + ?Sized>(
    s: &S,
    seq: &PulseSequence,
    k_max: usize,
) -> Result<DecayPrediction> {
    let h = harmonic_weights(seq, k_max)?;
    let mut rate = 0.5 * s.eval(0.0) * h.get(0);
    for k in 1..=k_max {
        let a2 = h.get(k);
        if a2 > 0.0 {
            rate += s.eval(h.omega(k)) * a2;
        }
    }
    let warned = check_truncation(s, k_max as f64 * h.fundamental());
    Ok(DecayPrediction::asymptotic(rate, k_max, warned))
}

/// CPMG rate `(4/pi^2) sum_{l=0}^{l_max} S(omega_{2l+1}) / (2l+1)^2`,
/// `omega_{2l+1} = pi (2l+1) / (2 tau)`.
pub fn decay_rate_cpmg_series<S: Spectrum + ?Sized>(s: &S, tau: f64, l_max: usize) -> Result<DecayPrediction> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    let w1 = PI / (2.0 * tau);
    let mut sum = 0.0;
    for l in 0..=l_max {
        let k = (2 * l + 1) as f64;
        sum += s.eval(k * w1) / (k * k);
    }
    let k_max = 2 * l_max + 1;
    let warned = check_truncation(s, k_max as f64 * w1);
    Ok(DecayPrediction::asymptotic(4.0 / (PI * PI) * sum, k_max, warned))
}

/// `tan` that stays finite for large imaginary parts.
fn tan_stable(w: Complex64) -> Complex64 {
    let (x, y) = (w.re, w.im);
    let e = (-2.0 * y.abs()).exp();
    let c2 = (2.0 * x).cos();
    let den = 1.0 + 2.0 * e * c2 + e * e;
    Complex64::new(2.0 * e * (2.0 * x).sin() / den, y.signum() * (1.0 - e * e) / den)
}

/// `tan(w)/w - 1`, with a series near the origin.
fn tan_ratio_minus_one(w: Complex64) -> Complex64 {
    if w.norm() < 0.05 {
        let w2 = w * w;
        w2 * (1.0 / 3.0 + w2 * (2.0 / 15.0 + w2 * (17.0 / 315.0 + w2 * (62.0 / 2835.0))))
    } else {
        tan_stable(w) / w - 1.0
    }
}

/// Untruncated CPMG rate of each symmetrized Lorentzian term at unit weight.
///
/// Summing the odd harmonics in closed form gives, per term with
/// `z = center + i width`,
/// `rate = Im[(tan(z tau) / (z tau) - 1) / (2 z)]`.
pub fn cpmg_unit_term_rates(s: &SpectralDensity, tau: f64) -> Result<Vec<f64>> {
    if !s.is_symmetrized() {
        return Err(Error::Convention(
            "closed-form CPMG rates need a symmetrized spectrum".into(),
        ));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    Ok(s.terms()
        .iter()
        .map(|t| cpmg_unit_rate(t.center, t.width, tau))
        .collect())
}

/// Untruncated CPMG rate of one symmetrized unit-weight Lorentzian.
#[inline]
pub fn cpmg_unit_rate(center: f64, width: f64, tau: f64) -> f64 {
    let z = Complex64::new(center, width);
    (tan_ratio_minus_one(z * tau) / (2.0 * z)).im
}

/// The `l_max -> infinity` limit of [`decay_rate_cpmg_series`] for a
/// symmetrized Lorentzian spectrum.
pub fn decay_rate_cpmg_exact(s: &SpectralDensity, tau: f64) -> Result<DecayPrediction> {
    let unit = cpmg_unit_term_rates(s, tau)?;
    let rate = unit.iter().zip(s.terms()).map(|(r, t)| r * t.weight).sum();
    Ok(DecayPrediction::asymptotic(rate, usize::MAX, false))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteOptions {
    /// Harmonics of the modulation covered by explicit panels; the remainder
    /// uses the oscillation-averaged filter function.
    pub harmonics: usize,
    pub rel_tol: f64,
    pub max_bisections: usize,
}

impl Default for FiniteOptions {
    fn default() -> Self {
        Self {
            harmonics: 200,
            rel_tol: 1e-6,
            max_bisections: 500_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiniteExponent {
    /// `chi = t R(t)`.
    pub exponent: f64,
    pub abs_error: f64,
    pub n_cycles: usize,
    pub duration: f64,
}

impl FiniteExponent {
    pub fn rate(&self) -> f64 {
        self.exponent / self.duration
    }

    pub fn prediction(&self) -> DecayPrediction {
        let rate = self.rate().max(0.0);
        DecayPrediction {
            rate,
            t2: if rate > 0.0 { 1.0 / rate } else { f64::INFINITY },
            regime: Regime::FiniteTime {
                n_cycles: self.n_cycles,
            },
            truncation_k: usize::MAX,
            truncation_warning: false,
        }
    }
}

/// Decay exponent after `n_cycles` repetitions, by quadrature of
/// `S |F|^2` with panel boundaries at every comb lobe.
pub fn decay_exponent_finite<S: Spectrum + ?Sized>(
    s: &S,
    seq: &PulseSequence,
    n_cycles: usize,
    opts: &FiniteOptions,
) -> Result<FiniteExponent> {
    if n_cycles < 1 {
        return Err(Error::InvalidParameter("n_cycles must be at least 1".into()));
    }
    let period = modulation_profile(seq).period();
    let w1 = 2.0 * PI / period;
    let lobe = 2.0 * PI / (n_cycles as f64 * seq.cycle());
    let mut cutoff = opts.harmonics as f64 * w1;
    if let Some(f) = s.feature_frequency() {
        cutoff = cutoff.max(4.0 * f);
    }
    let n_panels = (cutoff / lobe).ceil() as usize;
    if n_panels > 20_000_000 {
        return Err(Error::InvalidParameter(format!(
            "{n_panels} quadrature panels requested; reduce harmonics or cycles"
        )));
    }
    let breaks: Vec<f64> = (0..=n_panels).map(|i| i as f64 * lobe).collect();
    let cutoff = breaks[n_panels];
    let integrand = |w: f64| s.eval(w) * filter_function_sq(seq, w, n_cycles);
    let body = integrate_panels(&integrand, &breaks, opts.rel_tol * 0.5, 0.0, opts.max_bisections);

    // beyond the cutoff |F|^2 averages to D / omega^2, D the summed squared
    // jumps of f over the whole record
    let jumps = 2.0 + 4.0 * (n_cycles * seq.n_pulses()) as f64;
    let tail = integrate(
        &|u: f64| if u > 0.0 { s.eval(1.0 / u) } else { 0.0 },
        0.0,
        1.0 / cutoff,
        1e-10,
        0.0,
    );

    let value = body.value + jumps * tail.value;
    let error = body.error + jumps * tail.error;
    let exponent = PHASE_COUPLING_SQ * value;
    let abs_error = PHASE_COUPLING_SQ * error;
    if !body.converged || error > opts.rel_tol * value.abs() {
        return Err(Error::QuadratureNotConverged {
            achieved: if value != 0.0 { error / value.abs() } else { error },
            requested: opts.rel_tol,
        });
    }
    Ok(FiniteExponent {
        exponent,
        abs_error,
        n_cycles,
        duration: n_cycles as f64 * seq.cycle(),
    })
}

/// Asymptotic rates over a grid of family parameters (`tau` for CPMG, the
/// cycle for UDD and custom layouts). Output order follows the grid.
pub fn predict_dd_performance<S: Spectrum + ?Sized>(
    s: &S,
    family: &SequenceFamily,
    grid: &[f64],
    k_max: usize,
) -> Result<Vec<(f64, DecayPrediction)>> {
    if grid.is_empty() {
        return Err(Error::InvalidParameter("prediction grid is empty".into()));
    }
    grid.par_iter()
        .map(|&d| {
            let seq = family.instantiate(d)?;
            Ok((d, decay_rate_asymptotic(s, &seq, k_max)?))
        })
        .collect()
}

/// CPMG rate for a given `tau` using the closed form when possible.
pub fn cpmg_rate(s: &SpectralDensity, tau: f64) -> Result<f64> {
    if s.is_symmetrized() {
        Ok(decay_rate_cpmg_exact(s, tau)?.rate)
    } else {
        let seq = make_cpmg(tau)?;
        Ok(decay_rate_asymptotic(s, &seq, crate::sequence::DEFAULT_K_MAX)?.rate)
    }
}
