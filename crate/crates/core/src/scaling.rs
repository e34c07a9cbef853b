//! Lopsidedness of star-topology multiple-quantum states and the quadratic
//! growth of low-frequency noise with it.

use crate::error::{Error, Result};
use crate::inversion::{percentile, sampled_band, DecayMeasurement, FitResult};
use crate::spectral::eval_spectrum;

/// Gyromagnetic ratios relative to 1H (NMR frequency ratios).
pub const GYROMAGNETIC_RATIOS: [(&str, f64); 3] = [("1H", 1.0), ("13C", 0.251_450_20), ("31P", 0.404_807_42)];

/// Ratio `gamma / gamma_1H` for a tabulated nucleus (`1H`, `13C`, `31P`).
pub fn gyromagnetic_ratio(nucleus: &str) -> Result<f64> {
    let key = nucleus.trim();
    GYROMAGNETIC_RATIOS
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(key))
        .map(|&(_, g)| g)
        .ok_or_else(|| {
            Error::InvalidParameter(format!(
                "unknown nucleus '{nucleus}'; known: {}",
                GYROMAGNETIC_RATIOS.map(|(n, _)| n).join(", ")
            ))
        })
}

/// A central spin M coupled uniformly to `n_spins - 1` equivalent A spins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StarSystem {
    pub n_spins: usize,
    pub gamma_m: f64,
    pub gamma_a: f64,
}

impl StarSystem {
    pub fn new(n_spins: usize, gamma_m: f64, gamma_a: f64) -> Result<Self> {
        if n_spins < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 spins, got {n_spins}")));
        }
        if gamma_a == 0.0 || !gamma_a.is_finite() || !gamma_m.is_finite() {
            return Err(Error::InvalidParameter(
                "gyromagnetic ratios must be finite, gamma_a nonzero".into(),
            ));
        }
        Ok(Self {
            n_spins,
            gamma_m,
            gamma_a,
        })
    }

    /// Extreme lopsidedness values `((gamma_m -+ (N-1) gamma_a) / gamma_a)`.
    pub fn bounds(&self) -> (f64, f64) {
        let r = self.gamma_m / self.gamma_a;
        let m = (self.n_spins - 1) as f64;
        (r - m, r + m)
    }
}

/// `l(k) = gamma_m / gamma_a + N - 2k - 1` for `k = 0..N-1` flipped satellites.
pub fn lopsidedness(sys: &StarSystem, k: usize) -> Result<f64> {
    if k >= sys.n_spins {
        return Err(Error::InvalidParameter(format!(
            "k = {k} outside 0..={}",
            sys.n_spins - 1
        )));
    }
    Ok(sys.gamma_m / sys.gamma_a + sys.n_spins as f64 - 2.0 * k as f64 - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalingPoint {
    pub l: f64,
    pub s_low: f64,
    pub s_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFit {
    pub c2: f64,
    pub c0: f64,
    pub c2_err: f64,
    pub c0_err: f64,
    pub points: Vec<ScalingPoint>,
}

/// Weighted least squares of `s_low = c2 l^2 + c0`. Weights are `1/s_err^2`
/// when every error is positive; otherwise points are weighted equally and
/// the standard errors come from the residual scatter.
pub fn fit_quadratic_scaling(points: &[ScalingPoint]) -> Result<ScalingFit> {
    if points.len() < 3 {
        return Err(Error::RankDeficient(format!(
            "{} points; need at least 3",
            points.len()
        )));
    }
    let x: Vec<f64> = points.iter().map(|p| p.l * p.l).collect();
    let (xmin, xmax) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(xmax - xmin > 1e-12 * xmax.abs().max(1.0)) {
        return Err(Error::RankDeficient("all |l| are equal".into()));
    }
    let weighted = points.iter().all(|p| p.s_err > 0.0);
    let w: Vec<f64> = points
        .iter()
        .map(|p| if weighted { 1.0 / (p.s_err * p.s_err) } else { 1.0 })
        .collect();
    // centre the regressor for a well-conditioned solve
    let sw: f64 = w.iter().sum();
    let xbar = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ybar = w.iter().zip(points).map(|(a, p)| a * p.s_low).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&x).map(|(a, b)| a * (b - xbar).powi(2)).sum();
    let sxy: f64 = w
        .iter()
        .zip(x.iter().zip(points))
        .map(|(a, (b, p))| a * (b - xbar) * (p.s_low - ybar))
        .sum();
    let c2 = sxy / sxx;
    let c0 = ybar - c2 * xbar;
    // (X^T W X)^-1 in the (l^2, 1) basis
    let mut var_c2 = 1.0 / sxx;
    let mut var_c0 = 1.0 / sw + xbar * xbar / sxx;
    if !weighted {
        let dof = points.len() - 2;
        let rss: f64 = x.iter().zip(points).map(|(b, p)| (p.s_low - c2 * b - c0).powi(2)).sum();
        let s2 = rss / dof as f64;
        var_c2 *= s2;
        var_c0 *= s2;
    }
    Ok(ScalingFit {
        c2,
        c0,
        c2_err: var_c2.sqrt(),
        c0_err: var_c0.sqrt(),
        points: points.to_vec(),
    })
}

/// Fitted spectrum at `omega_ref` with half the bootstrap band width (16th to
/// 84th percentile) as its error. Frequencies outside the sampled band are
/// rejected.
pub fn low_frequency_noise(fit: &FitResult, data: &[DecayMeasurement], omega_ref: f64) -> Result<(f64, f64)> {
    let (lo, hi) = sampled_band(data)?;
    let tol = 1e-12;
    if omega_ref < lo * (1.0 - tol) || omega_ref > hi * (1.0 + tol) {
        return Err(Error::Extrapolation {
            omega: omega_ref,
            lo,
            hi,
        });
    }
    let value = eval_spectrum(&fit.spectrum, omega_ref);
    if fit.bootstrap_spectra.is_empty() {
        return Ok((value, 0.0));
    }
    let (plo, phi) = fit.band.as_ref().map(|b| b.percentiles).unwrap_or((16.0, 84.0));
    let mut v: Vec<f64> = fit
        .bootstrap_spectra
        .iter()
        .map(|s| eval_spectrum(s, omega_ref))
        .collect();
    v.sort_by(f64::total_cmp);
    Ok((value, 0.5 * (percentile(&v, phi) - percentile(&v, plo))))
}
