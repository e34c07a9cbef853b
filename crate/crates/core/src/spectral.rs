//! Noise spectral densities and their autocorrelation counterparts.
//!
//! The working model is a weighted sum of Lorentzians,
//!
//! ```text
//! S(omega) = sum_j weight_j * width_j / ((omega - center_j)^2 + width_j^2)
//! ```
//!
//! optionally evaluated as the even extension `(S(omega) + S(-omega)) / 2`.
//! All frequencies are angular (rad/s). The autocorrelation paired with a
//! spectrum is `g(t) = integral S(omega) cos(omega t) d omega` over the real
//! line, so a single centred term of weight `1/pi` pairs with `exp(-width |t|)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything that can be evaluated as a noise power spectrum.
///
/// Implementations must be nonnegative. The forward model only evaluates
/// at `omega >= 0`.
pub trait Spectrum: Sync {
    fn eval(&self, omega: f64) -> f64;

    /// Largest frequency at which the spectrum carries a feature (a line
    /// center), when known.
    fn feature_frequency(&self) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LorentzianTerm {
    pub center: f64,
    pub width: f64,
    pub weight: f64,
}

impl LorentzianTerm {
    pub fn new(center: f64, width: f64, weight: f64) -> Result<Self> {
        if !(width > 0.0 && width.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Lorentzian width must be positive and finite, got {width}"
            )));
        }
        if !(weight > 0.0 && weight.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "Lorentzian weight must be positive and finite, got {weight}"
            )));
        }
        if !center.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "Lorentzian center must be finite, got {center}"
            )));
        }
        Ok(Self { center, width, weight })
    }

    /// Builds a term from frequencies given in Hz.
    pub fn from_hz(center_hz: f64, width_hz: f64, weight: f64) -> Result<Self> {
        Self::new(2.0 * PI * center_hz, 2.0 * PI * width_hz, weight)
    }

    pub fn center_hz(&self) -> f64 {
        self.center / (2.0 * PI)
    }

    pub fn width_hz(&self) -> f64 {
        self.width / (2.0 * PI)
    }

    #[inline]
    pub fn eval(&self, omega: f64) -> f64 {
        let d = omega - self.center;
        self.weight * self.width / (d * d + self.width * self.width)
    }

    #[inline]
    fn eval_unit(&self, omega: f64) -> f64 {
        let d = omega - self.center;
        self.width / (d * d + self.width * self.width)
    }
}

/// A sum of Lorentzian terms, possibly even-symmetrized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralDensity {
    terms: Vec<LorentzianTerm>,
    symmetrized: bool,
}

impl SpectralDensity {
    pub fn new(terms: Vec<LorentzianTerm>, symmetrized: bool) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidParameter(
                "a spectral density needs at least one Lorentzian term".into(),
            ));
        }
        for t in &terms {
            LorentzianTerm::new(t.center, t.width, t.weight)?;
        }
        Ok(Self { terms, symmetrized })
    }

    pub fn symmetric(terms: Vec<LorentzianTerm>) -> Result<Self> {
        Self::new(terms, true)
    }

    pub fn terms(&self) -> &[LorentzianTerm] {
        &self.terms
    }

    pub fn is_symmetrized(&self) -> bool {
        self.symmetrized
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Returns a copy with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        let terms = self
            .terms
            .iter()
            .map(|t| LorentzianTerm::new(t.center, t.width, t.weight * factor))
            .collect::<Result<Vec<_>>>()?;
        Self::new(terms, self.symmetrized)
    }

    /// Concatenates the terms of two spectra with the same symmetrization.
    pub fn sum(&self, other: &SpectralDensity) -> Result<Self> {
        if self.symmetrized != other.symmetrized {
            return Err(Error::Convention(
                "cannot add spectra with different symmetrization".into(),
            ));
        }
        let mut terms = self.terms.clone();
        terms.extend_from_slice(&other.terms);
        Self::new(terms, self.symmetrized)
    }

    fn one_sided(&self, omega: f64) -> f64 {
        self.terms.iter().map(|t| t.eval(omega)).sum()
    }

    /// Value of a single term with unit weight, honouring symmetrization.
    pub fn eval_term_unit(&self, index: usize, omega: f64) -> f64 {
        let t = &self.terms[index];
        if self.symmetrized {
            0.5 * (t.eval_unit(omega) + t.eval_unit(-omega))
        } else {
            t.eval_unit(omega)
        }
    }

    pub fn max_center(&self) -> f64 {
        self.terms.iter().map(|t| t.center.abs()).fold(0.0, f64::max)
    }

    pub fn max_width(&self) -> f64 {
        self.terms.iter().map(|t| t.width).fold(0.0, f64::max)
    }

    pub fn min_width(&self) -> f64 {
        self.terms.iter().map(|t| t.width).fold(f64::INFINITY, f64::min)
    }

    /// Frequency beyond which the spectrum is treated as negligible:
    /// largest center plus ten of the largest widths.
    pub fn support_extent(&self) -> f64 {
        self.max_center() + 10.0 * self.max_width()
    }
}

/// Evaluates `s` at `omega` (rad/s).
pub fn eval_spectrum(s: &SpectralDensity, omega: f64) -> f64 {
    if s.symmetrized {
        0.5 * (s.one_sided(omega) + s.one_sided(-omega))
    } else {
        s.one_sided(omega)
    }
}

impl Spectrum for SpectralDensity {
    fn eval(&self, omega: f64) -> f64 {
        eval_spectrum(self, omega)
    }

    fn feature_frequency(&self) -> Option<f64> {
        Some(self.max_center())
    }
}

/// White noise, `S(omega) = level` everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlatSpectrum {
    pub level: f64,
}

impl Spectrum for FlatSpectrum {
    fn eval(&self, _omega: f64) -> f64 {
        self.level
    }
}

/// Adapter for closures, mostly used for ad hoc test spectra.
pub struct FnSpectrum<F>(pub F);

impl<F: Fn(f64) -> f64 + Sync> Spectrum for FnSpectrum<F> {
    fn eval(&self, omega: f64) -> f64 {
        (self.0)(omega).max(0.0)
    }
}

/// Piecewise-linear interpolation of tabulated `(omega, value)` points in
/// `ln(omega)`, held constant outside the tabulated range.
#[derive(Debug, Clone, PartialEq)]
pub struct TabulatedSpectrum {
    omega: Vec<f64>,
    value: Vec<f64>,
}

impl TabulatedSpectrum {
    pub fn new(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidParameter("empty spectrum table".into()));
        }
        if points.iter().any(|&(w, v)| !(w > 0.0) || !(v >= 0.0)) {
            return Err(Error::InvalidParameter(
                "tabulated spectrum needs omega > 0 and nonnegative values".into(),
            ));
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        points.dedup_by(|a, b| a.0 == b.0);
        let (omega, value) = points.into_iter().unzip();
        Ok(Self { omega, value })
    }
}

impl Spectrum for TabulatedSpectrum {
    fn eval(&self, omega: f64) -> f64 {
        let w = omega.abs();
        let n = self.omega.len();
        if w <= self.omega[0] {
            return self.value[0];
        }
        if w >= self.omega[n - 1] {
            return self.value[n - 1];
        }
        let i = self.omega.partition_point(|&x| x <= w);
        let (x0, x1) = (self.omega[i - 1].ln(), self.omega[i].ln());
        let t = (w.ln() - x0) / (x1 - x0);
        self.value[i - 1] + t * (self.value[i] - self.value[i - 1])
    }
}

/// Autocorrelation `g(t)` of a symmetrized Lorentzian spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct AutocorrelationFn {
    terms: Vec<LorentzianTerm>,
}

impl AutocorrelationFn {
    /// `g(0)`.
    pub fn variance(&self) -> f64 {
        self.terms.iter().map(|t| t.weight * PI).sum()
    }

    pub fn eval(&self, lag: f64) -> f64 {
        let a = lag.abs();
        self.terms
            .iter()
            .map(|t| t.weight * PI * (-t.width * a).exp() * (t.center * a).cos())
            .sum()
    }
}

/// Closed-form autocorrelation of a symmetrized spectrum:
/// `g(t) = sum_j pi * weight_j * exp(-width_j |t|) * cos(center_j t)`.
pub fn autocorrelation_of(s: &SpectralDensity) -> Result<AutocorrelationFn> {
    if !s.symmetrized {
        return Err(Error::Convention(
            "a real stationary process needs an even (symmetrized) spectrum".into(),
        ));
    }
    Ok(AutocorrelationFn { terms: s.terms.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn term(c: f64, w: f64, a: f64) -> LorentzianTerm {
        LorentzianTerm::new(c, w, a).unwrap()
    }

    #[test]
    fn single_term_peak_and_half_maximum() {
        let lam = 37.0;
        let s = SpectralDensity::new(vec![term(0.0, lam, 1.0)], false).unwrap();
        assert!((eval_spectrum(&s, 0.0) - 1.0 / lam).abs() < 1e-15);
        assert!((eval_spectrum(&s, lam) - 0.5 / lam).abs() < 1e-15);
    }

    #[test]
    fn two_terms_add_linearly() {
        let lam = 5.0;
        let s = SpectralDensity::new(vec![term(0.0, lam, 1.0), term(0.0, lam, 1.0)], false).unwrap();
        assert!((eval_spectrum(&s, 0.0) - 2.0 / lam).abs() < 1e-15);
    }

    #[test]
    fn term_maximum_at_center() {
        let t = term(120.0, 4.0, 3.0);
        assert_eq!(t.eval(120.0), 3.0 / 4.0);
        assert!(t.eval(119.0) < t.eval(120.0));
    }

    #[test]
    fn rejects_bad_terms() {
        assert!(LorentzianTerm::new(0.0, 0.0, 1.0).is_err());
        assert!(LorentzianTerm::new(0.0, 1.0, -1.0).is_err());
        assert!(SpectralDensity::new(vec![], true).is_err());
    }

    #[test]
    fn autocorrelation_requires_symmetrized() {
        let s = SpectralDensity::new(vec![term(10.0, 1.0, 1.0)], false).unwrap();
        assert!(matches!(autocorrelation_of(&s), Err(Error::Convention(_))));
    }

    #[test]
    fn unit_area_term_pairs_with_pure_exponential() {
        let lam = 3.0;
        let s = SpectralDensity::symmetric(vec![term(0.0, lam, 1.0 / PI)]).unwrap();
        let g = autocorrelation_of(&s).unwrap();
        for &t in &[0.0, 0.1, 0.5, 1.0, -2.0] {
            assert!((g.eval(t) - (-lam * t.abs()).exp()).abs() < 1e-14);
        }
        assert!((g.variance() - 1.0).abs() < 1e-15);
    }

    /// `integral S(w) cos(w t) dw` over the real line: composite Simpson on
    /// `|w - c| <= R` around every Lorentzian center, plus the asymptotic tail
    /// `2 lam cos(ct) integral_R^inf cos(dt)/d^2 dd`.
    fn cosine_transform_quadrature(s: &SpectralDensity, t: f64) -> f64 {
        let mut total = 0.0;
        for term in s.terms() {
            let lam = term.width;
            let centers: Vec<f64> = if s.is_symmetrized() {
                vec![term.center, -term.center]
            } else {
                vec![term.center]
            };
            let share = if s.is_symmetrized() { 0.5 } else { 1.0 };
            for &c in &centers {
                let r = 2000.0 * lam;
                let step = if t > 0.0 { lam.min(1.0 / t) / 40.0 } else { lam / 40.0 };
                let mut n = (2.0 * r / step).ceil() as usize;
                if n % 2 == 1 {
                    n += 1;
                }
                let h = 2.0 * r / n as f64;
                let f = |d: f64| lam / (d * d + lam * lam) * ((c + d) * t).cos();
                let mut acc = f(-r) + f(r);
                for i in 1..n {
                    let d = -r + i as f64 * h;
                    acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(d);
                }
                let body = acc * h / 3.0;
                let tail = if t == 0.0 {
                    2.0 * (PI / 2.0 - (r / lam).atan())
                } else {
                    let rt = r * t;
                    2.0 * lam * (c * t).cos() * (-rt.sin() / (r * r * t) + 2.0 * rt.cos() / (r * r * r * t * t))
                };
                total += share * term.weight * (body + tail);
            }
        }
        total
    }

    #[test]
    fn fourier_consistency_by_quadrature() {
        let s = SpectralDensity::symmetric(vec![term(0.0, 2.0, 0.7), term(15.0, 1.5, 0.4)]).unwrap();
        let g = autocorrelation_of(&s).unwrap();
        for &t in &[0.0, 0.05, 0.3, 1.0, 2.5] {
            let q = cosine_transform_quadrature(&s, t);
            let exact = g.eval(t);
            // relative to g(0) near zeros of the cosine envelope
            assert!(
                (q - exact).abs() < 1e-6 * g.variance(),
                "t={t}: quad {q} vs closed {exact}"
            );
        }
        // pure exponential decay out to lag * width = 10, relative to g itself
        let lam = 2.0;
        let s = SpectralDensity::symmetric(vec![term(0.0, lam, 0.3)]).unwrap();
        let g = autocorrelation_of(&s).unwrap();
        for &x in &[0.5, 2.0, 5.0, 10.0] {
            let t = x / lam;
            let q = cosine_transform_quadrature(&s, t);
            assert!(
                ((q - g.eval(t)) / g.eval(t)).abs() < 1e-6,
                "x={x}: {q} vs {}",
                g.eval(t)
            );
        }
    }

    #[test]
    fn shifted_center_oscillates() {
        let s = SpectralDensity::symmetric(vec![term(40.0, 2.0, 1.0 / PI)]).unwrap();
        let g = autocorrelation_of(&s).unwrap();
        let t = 0.1;
        assert!((g.eval(t) - (-0.2f64).exp() * (4.0f64).cos()).abs() < 1e-14);
        let q = cosine_transform_quadrature(&s, t);
        assert!((q - g.eval(t)).abs() < 1e-6);
    }

    #[test]
    fn tabulated_interpolates_in_log_frequency() {
        let t = TabulatedSpectrum::new(vec![(1.0, 2.0), (100.0, 4.0)]).unwrap();
        assert!((t.eval(10.0) - 3.0).abs() < 1e-12);
        assert_eq!(t.eval(0.1), 2.0);
        assert_eq!(t.eval(1e4), 4.0);
    }

    proptest! {
        #[test]
        fn positivity_and_evenness(
            c in 0.0f64..500.0, w in 0.01f64..200.0, a in 1e-3f64..1e3,
            c2 in -300.0f64..300.0, w2 in 0.01f64..50.0,
            omega in -2000.0f64..2000.0,
        ) {
            let s = SpectralDensity::symmetric(vec![term(c, w, a), term(c2, w2, a * 0.5)]).unwrap();
            let v = eval_spectrum(&s, omega);
            prop_assert!(v >= 0.0);
            prop_assert_eq!(v.to_bits(), eval_spectrum(&s, -omega).to_bits());
            let g = autocorrelation_of(&s).unwrap();
            prop_assert!(g.eval(omega * 1e-3).abs() <= g.variance() * (1.0 + 1e-12));
            prop_assert_eq!(g.eval(0.01), g.eval(-0.01));
        }
    }
}
