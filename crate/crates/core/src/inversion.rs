//! Spectrum recovery from measured `(tau, T2)` data.
//!
//! The model rate of a Lorentzian sum is linear in the term weights, so the
//! fit searches only over centers and widths and solves the weights by
//! non-negative least squares at every step. A final pass polishes all
//! parameters together.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::cpmg_unit_rate;
use crate::nelder_mead::{minimize, NmOptions};
use crate::rng::substream;
use crate::sequence::{harmonic_weights, HarmonicWeights, SequenceFamily};
use crate::spectral::{LorentzianTerm, SpectralDensity};

pub const MAX_TERMS: usize = 6;
pub const DEFAULT_MAX_AUTO_TERMS: usize = 4;
/// Relative `chi^2/dof` gain below which an extra term is not worth keeping.
pub const TERM_GAIN_THRESHOLD: f64 = 0.2;
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct DecayMeasurement {
    /// Inter-pulse half-spacing for CPMG, cycle duration for other families.
    pub tau: f64,
    pub t2: f64,
    pub t2_err: f64,
    pub label: String,
}

impl DecayMeasurement {
    pub fn new(tau: f64, t2: f64, t2_err: f64, label: impl Into<String>) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        if !(t2 > 0.0 && t2.is_finite()) {
            return Err(Error::InvalidParameter(format!("t2 must be positive, got {t2}")));
        }
        if !(t2_err >= 0.0 && t2_err.is_finite()) {
            return Err(Error::InvalidParameter(format!("t2_err must be >= 0, got {t2_err}")));
        }
        Ok(Self {
            tau,
            t2,
            t2_err,
            label: label.into(),
        })
    }

    pub fn rate(&self) -> f64 {
        1.0 / self.t2
    }

    /// Frequency probed by the first CPMG harmonic, `pi / (2 tau)`.
    pub fn sampled_omega(&self) -> f64 {
        PI / (2.0 * self.tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZerothOrderPoint {
    pub omega: f64,
    pub s: f64,
    pub s_err: f64,
}

/// `S(pi/(2 tau)) ~ pi^2 / (4 T2)` for every measurement, sorted by frequency.
pub fn zeroth_order_spectrum(data: &[DecayMeasurement]) -> Result<Vec<ZerothOrderPoint>> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("no measurements".into()));
    }
    let k = PI * PI / 4.0;
    let mut pts: Vec<ZerothOrderPoint> = data
        .iter()
        .map(|d| ZerothOrderPoint {
            omega: d.sampled_omega(),
            s: k / d.t2,
            s_err: k / (d.t2 * d.t2) * d.t2_err,
        })
        .collect();
    pts.sort_by(|a, b| a.omega.total_cmp(&b.omega));
    Ok(pts)
}

/// Sampled band `[pi/(2 tau_max), pi/(2 tau_min)]`.
pub fn sampled_band(data: &[DecayMeasurement]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidParameter("no measurements".into()));
    }
    let tmin = data.iter().map(|d| d.tau).fold(f64::INFINITY, f64::min);
    let tmax = data.iter().map(|d| d.tau).fold(0.0, f64::max);
    Ok((PI / (2.0 * tmax), PI / (2.0 * tmin)))
}

/// Flags grid frequencies outside the sampled band (boundaries count as
/// sampled).
pub fn extrapolation_mask(data: &[DecayMeasurement], grid: &[f64]) -> Result<Vec<bool>> {
    let (lo, hi) = sampled_band(data)?;
    let tol = 1e-12;
    Ok(grid
        .iter()
        .map(|&w| w > hi * (1.0 + tol) || w < lo * (1.0 - tol))
        .collect())
}

/// Log-spaced reporting grid from a quarter of the lowest to four times the
/// highest sampled frequency.
pub fn default_grid(data: &[DecayMeasurement], n: usize) -> Result<Vec<f64>> {
    let (lo, hi) = sampled_band(data)?;
    let (a, b) = ((lo / 4.0).ln(), (hi * 4.0).ln());
    let n = n.max(2);
    Ok((0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitBounds {
    /// Allowed term centers (rad/s).
    pub center: (f64, f64),
    /// Allowed term widths (rad/s).
    pub width: (f64, f64),
}

impl FitBounds {
    pub fn from_data(data: &[DecayMeasurement]) -> Result<Self> {
        let (lo, hi) = sampled_band(data)?;
        Ok(Self {
            center: (0.0, 2.0 * hi),
            width: (lo / 20.0, 20.0 * hi),
        })
    }

    fn validate(&self) -> Result<()> {
        let ok = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a < b;
        if !ok(self.center) || self.center.0 < 0.0 {
            return Err(Error::InvalidParameter(format!("bad center bounds {:?}", self.center)));
        }
        if !ok(self.width) || self.width.0 <= 0.0 {
            return Err(Error::InvalidParameter(format!("bad width bounds {:?}", self.width)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub restarts: usize,
    pub seed: u64,
    pub bounds: Option<FitBounds>,
    /// Sequence family the `tau` column refers to.
    pub family: SequenceFamily,
    /// Harmonic cutoff for families without a closed form.
    pub k_max: usize,
    pub max_evals: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            restarts: 24,
            seed: 0x5EED_0002,
            bounds: None,
            family: SequenceFamily::Cpmg,
            k_max: 501,
            max_evals: 3000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Band {
    pub omegas: Vec<f64>,
    pub fit: Vec<f64>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
    pub percentiles: (f64, f64),
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub spectrum: SpectralDensity,
    /// Weighted sum of squared rate residuals.
    pub residual: f64,
    pub dof: usize,
    pub converged: bool,
    pub bootstrap_spectra: Vec<SpectralDensity>,
    pub band: Option<Band>,
}

impl FitResult {
    pub fn reduced_chi2(&self) -> f64 {
        self.residual / self.dof.max(1) as f64
    }
}

/// Rate weights `1 / sigma_rate^2` with `sigma_rate = t2_err / t2^2`. Zero
/// errors are floored at the smallest positive error; without any positive
/// error all points weigh the same.
fn rate_weights(data: &[DecayMeasurement]) -> Vec<f64> {
    let floor = data
        .iter()
        .map(|d| d.t2_err)
        .filter(|&e| e > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !floor.is_finite() {
        let mean_rate = data.iter().map(|d| d.rate()).sum::<f64>() / data.len() as f64;
        return vec![1.0 / (mean_rate * mean_rate); data.len()];
    }
    data.iter()
        .map(|d| {
            let e = d.t2_err.max(floor);
            (d.t2 * d.t2 / e).powi(2)
        })
        .collect()
}

struct Problem {
    taus: Vec<f64>,
    rates: Vec<f64>,
    weights: Vec<f64>,
    /// Per-point harmonic weights for families without a closed form.
    harmonics: Option<Vec<HarmonicWeights>>,
    bounds: FitBounds,
}

impl Problem {
    fn new(data: &[DecayMeasurement], opts: &FitOptions) -> Result<Self> {
        let bounds = match opts.bounds {
            Some(b) => b,
            None => FitBounds::from_data(data)?,
        };
        bounds.validate()?;
        let harmonics = match opts.family {
            SequenceFamily::Cpmg => None,
            ref fam => Some(
                data.iter()
                    .map(|d| harmonic_weights(&fam.instantiate(d.tau)?, opts.k_max))
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        Ok(Self {
            taus: data.iter().map(|d| d.tau).collect(),
            rates: data.iter().map(|d| d.rate()).collect(),
            weights: rate_weights(data),
            harmonics,
            bounds,
        })
    }

    fn n(&self) -> usize {
        self.taus.len()
    }

    fn unit_rates(&self, center: f64, width: f64) -> Vec<f64> {
        let unit = |w: f64| {
            let a = w - center;
            let b = w + center;
            0.5 * (width / (a * a + width * width) + width / (b * b + width * width))
        };
        match &self.harmonics {
            None => self.taus.iter().map(|&t| cpmg_unit_rate(center, width, t)).collect(),
            Some(hs) => hs
                .iter()
                .map(|h| {
                    let mut r = 0.5 * h.get(0) * unit(0.0);
                    for k in 1..=h.k_max() {
                        let a2 = h.get(k);
                        if a2 > 0.0 {
                            r += a2 * unit(h.omega(k));
                        }
                    }
                    r
                })
                .collect(),
        }
    }

    fn chi2(&self, cols: &[Vec<f64>], amps: &[f64]) -> f64 {
        (0..self.n())
            .map(|i| {
                let m: f64 = cols.iter().zip(amps).map(|(c, a)| c[i] * a).sum();
                self.weights[i] * (m - self.rates[i]).powi(2)
            })
            .sum()
    }

    /// Non-negative weights minimizing `chi^2` for fixed term shapes, by
    /// trying every support set.
    fn project(&self, cols: &[Vec<f64>]) -> (Vec<f64>, f64) {
        let l = cols.len();
        let n = self.n();
        let norms: Vec<f64> = cols
            .iter()
            .map(|c| c.iter().zip(&self.weights).map(|(v, w)| w * v * v).sum::<f64>().sqrt())
            .collect();
        let mut best = (vec![0.0; l], self.chi2(cols, &vec![0.0; l]));
        for mask in 1u32..(1 << l) {
            let idx: Vec<usize> = (0..l).filter(|&j| mask & (1 << j) != 0).collect();
            if idx.iter().any(|&j| !(norms[j] > 0.0 && norms[j].is_finite())) {
                continue;
            }
            let m = idx.len();
            let g = DMatrix::from_fn(m, m, |a, b| {
                let (ja, jb) = (idx[a], idx[b]);
                (0..n).map(|i| self.weights[i] * cols[ja][i] * cols[jb][i]).sum::<f64>() / (norms[ja] * norms[jb])
            });
            let h = DVector::from_fn(m, |a, _| {
                let ja = idx[a];
                (0..n)
                    .map(|i| self.weights[i] * cols[ja][i] * self.rates[i])
                    .sum::<f64>()
                    / norms[ja]
            });
            let Some(chol) = g.cholesky() else { continue };
            let x = chol.solve(&h);
            if x.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
                continue;
            }
            let mut amps = vec![0.0; l];
            for (a, &j) in idx.iter().enumerate() {
                amps[j] = x[a] / norms[j];
            }
            let c2 = self.chi2(cols, &amps);
            if c2 < best.1 {
                best = (amps, c2);
            }
        }
        best
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

/// Unconstrained coordinates for a `(center, width)` pair inside the box.
fn encode(b: &FitBounds, center: f64, width: f64) -> (f64, f64) {
    let pc = (center - b.center.0) / (b.center.1 - b.center.0);
    let (lw0, lw1) = (b.width.0.ln(), b.width.1.ln());
    let pw = (width.ln() - lw0) / (lw1 - lw0);
    (logit(pc), logit(pw))
}

fn decode(b: &FitBounds, uc: f64, uw: f64) -> (f64, f64) {
    let c = b.center.0 + (b.center.1 - b.center.0) * sigmoid(uc);
    let (lw0, lw1) = (b.width.0.ln(), b.width.1.ln());
    (c, (lw0 + (lw1 - lw0) * sigmoid(uw)).exp())
}

#[derive(Debug, Clone)]
struct Candidate {
    shape: Vec<f64>,
    amps: Vec<f64>,
    chi2: f64,
    converged: bool,
}

impl Problem {
    fn shapes(&self, x: &[f64]) -> Vec<(f64, f64)> {
        x.chunks(2).map(|p| decode(&self.bounds, p[0], p[1])).collect()
    }

    fn columns(&self, shapes: &[(f64, f64)]) -> Vec<Vec<f64>> {
        shapes.iter().map(|&(c, w)| self.unit_rates(c, w)).collect()
    }

    fn profile_chi2(&self, x: &[f64]) -> f64 {
        let cols = self.columns(&self.shapes(x));
        self.project(&cols).1
    }

    /// Shape search from `x0` with one restart of the simplex at the optimum.
    fn local_search(&self, x0: &[f64], max_evals: usize) -> Candidate {
        let opts = NmOptions {
            max_evals,
            f_rel: 1e-11,
            f_abs: 1e-300,
            x_tol: 1e-7,
        };
        let step = vec![0.6; x0.len()];
        let first = minimize(|x| self.profile_chi2(x), x0, &step, &opts);
        let second = minimize(|x| self.profile_chi2(x), &first.x, &vec![0.1; x0.len()], &opts);
        let r = if second.f <= first.f { second } else { first };
        let cols = self.columns(&self.shapes(&r.x));
        let (amps, chi2) = self.project(&cols);
        Candidate {
            shape: r.x,
            amps,
            chi2,
            converged: r.converged,
        }
    }

    /// Joint refinement of shapes and log-weights.
    fn polish(&self, c: &Candidate, max_evals: usize) -> Candidate {
        let l = c.amps.len();
        let active: Vec<usize> = (0..l).filter(|&j| c.amps[j] > 0.0).collect();
        if active.is_empty() {
            return c.clone();
        }
        let mut x0 = Vec::with_capacity(3 * active.len());
        for &j in &active {
            x0.extend_from_slice(&[c.shape[2 * j], c.shape[2 * j + 1], c.amps[j].ln()]);
        }
        let f = |x: &[f64]| {
            let shapes: Vec<(f64, f64)> = x.chunks(3).map(|p| decode(&self.bounds, p[0], p[1])).collect();
            let amps: Vec<f64> = x.chunks(3).map(|p| p[2].exp()).collect();
            self.chi2(&self.columns(&shapes), &amps)
        };
        let r = minimize(
            f,
            &x0,
            &vec![0.05; x0.len()],
            &NmOptions {
                max_evals,
                f_rel: 1e-12,
                f_abs: 1e-300,
                x_tol: 1e-9,
            },
        );
        if r.f >= c.chi2 {
            return c.clone();
        }
        let mut shape = c.shape.clone();
        let mut amps = c.amps.clone();
        for (k, &j) in active.iter().enumerate() {
            shape[2 * j] = r.x[3 * k];
            shape[2 * j + 1] = r.x[3 * k + 1];
            amps[j] = r.x[3 * k + 2].exp();
        }
        Candidate {
            shape,
            amps,
            chi2: r.f,
            converged: c.converged && r.converged,
        }
    }

    fn spectrum(&self, c: &Candidate) -> Result<SpectralDensity> {
        let terms = self
            .shapes(&c.shape)
            .into_iter()
            .zip(&c.amps)
            .filter(|(_, &a)| a > 0.0)
            .map(|((cen, w), &a)| LorentzianTerm::new(cen, w, a))
            .collect::<Result<Vec<_>>>()?;
        if terms.is_empty() {
            return Err(Error::DecayFit("every fitted weight vanished".into()));
        }
        SpectralDensity::symmetric(terms)
    }

    fn encode_spectrum(&self, s: &SpectralDensity) -> Vec<f64> {
        s.terms()
            .iter()
            .flat_map(|t| {
                let (a, b) = encode(&self.bounds, t.center, t.width);
                [a, b]
            })
            .collect()
    }
}

/// Initial shapes from the zeroth-order estimate: a term at zero frequency
/// followed by terms at the strongest local maxima, each as wide as half the
/// gap to the neighbouring sample.
fn guided_start(p: &Problem, zeroth: &[ZerothOrderPoint], n_terms: usize) -> Vec<f64> {
    let om: Vec<f64> = zeroth.iter().map(|z| z.omega).collect();
    let s: Vec<f64> = zeroth.iter().map(|z| z.s).collect();
    let half_gap = |i: usize| {
        let right = if i + 1 < om.len() {
            om[i + 1] - om[i]
        } else {
            om[i] - om[i.saturating_sub(1)]
        };
        let left = if i > 0 { om[i] - om[i - 1] } else { right };
        0.5 * left.max(right).max(1e-12)
    };
    let mut shapes = vec![(0.0, om[0].max(half_gap(0)))];
    let mut peaks: Vec<usize> = (1..om.len().saturating_sub(1))
        .filter(|&i| s[i] > s[i - 1] && s[i] >= s[i + 1])
        .collect();
    peaks.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    for i in peaks {
        if shapes.len() == n_terms {
            break;
        }
        shapes.push((om[i], half_gap(i)));
    }
    let (lo, hi) = (om[0], *om.last().unwrap());
    let mut k = 0;
    while shapes.len() < n_terms {
        let f = (k as f64 + 1.0) / (n_terms as f64 + 1.0);
        let w = lo * (hi / lo).powf(f);
        shapes.push((w, 0.5 * w));
        k += 1;
    }
    shapes.truncate(n_terms);
    shapes
        .into_iter()
        .flat_map(|(c, w)| {
            let c = c.clamp(p.bounds.center.0, p.bounds.center.1);
            let w = w.clamp(p.bounds.width.0, p.bounds.width.1);
            let (a, b) = encode(&p.bounds, c, w);
            [a, b]
        })
        .collect()
}

fn random_start(p: &Problem, n_terms: usize, seed: u64, index: u64) -> Vec<f64> {
    let mut rng = substream(seed, index);
    let lo = p.bounds.width.0 * 20.0;
    let hi = (p.bounds.center.1 / 2.0).max(lo * 1.0001);
    let mut x = Vec::with_capacity(2 * n_terms);
    for _ in 0..n_terms {
        let c = if rng.gen_bool(0.3) {
            0.0
        } else {
            lo * (hi / lo).powf(rng.gen::<f64>())
        };
        let w = (lo / 4.0) * (4.0 * hi / lo).powf(rng.gen::<f64>());
        let c = c.clamp(p.bounds.center.0, p.bounds.center.1);
        let w = w.clamp(p.bounds.width.0, p.bounds.width.1);
        let (a, b) = encode(&p.bounds, c, w);
        x.extend_from_slice(&[a, b]);
    }
    x
}

fn check_identifiable(n: usize, n_terms: usize) -> Result<()> {
    if n_terms == 0 || n_terms > MAX_TERMS {
        return Err(Error::InvalidParameter(format!(
            "number of terms must be within 1..={MAX_TERMS}, got {n_terms}"
        )));
    }
    if n < 3 * n_terms {
        return Err(Error::Identifiability {
            points: n,
            terms: n_terms,
            required: 3 * n_terms,
        });
    }
    Ok(())
}

/// Weighted least-squares fit of an `n_terms` Lorentzian sum to the measured
/// rates, best of a guided start and `opts.restarts` seeded random starts.
pub fn fit_lorentzian_model(data: &[DecayMeasurement], n_terms: usize, opts: &FitOptions) -> Result<FitResult> {
    check_identifiable(data.len(), n_terms)?;
    let p = Problem::new(data, opts)?;
    let zeroth = zeroth_order_spectrum(data)?;
    let mut starts = vec![guided_start(&p, &zeroth, n_terms)];
    starts.extend((0..opts.restarts as u64).map(|i| random_start(&p, n_terms, opts.seed, i)));
    let found: Vec<Candidate> = starts.par_iter().map(|x0| p.local_search(x0, opts.max_evals)).collect();
    let best = found
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.chi2.total_cmp(&b.1.chi2).then(a.0.cmp(&b.0)))
        .map(|(_, c)| c.clone())
        .unwrap();
    let best = p.polish(&best, 4 * opts.max_evals);
    if !best.chi2.is_finite() {
        return Err(Error::DecayFit("objective is not finite at any start".into()));
    }
    let spectrum = p.spectrum(&best)?;
    let dof = data.len().saturating_sub(3 * spectrum.len());
    Ok(FitResult {
        spectrum,
        residual: best.chi2,
        dof,
        converged: best.converged,
        bootstrap_spectra: Vec::new(),
        band: None,
    })
}

/// `chi^2` of an arbitrary model rate function against the data, with the
/// fit's weighting.
pub fn weighted_chi2(data: &[DecayMeasurement], model_rate: impl Fn(&DecayMeasurement) -> f64) -> f64 {
    rate_weights(data)
        .iter()
        .zip(data)
        .map(|(w, d)| w * (model_rate(d) - d.rate()).powi(2))
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermSelection {
    pub n_terms: usize,
    pub reduced_chi2: f64,
}

/// Fits `L = 1, 2, ...` and keeps the last `L` before the reduced `chi^2`
/// stops improving by at least [`TERM_GAIN_THRESHOLD`].
pub fn fit_auto_terms(
    data: &[DecayMeasurement],
    max_terms: usize,
    opts: &FitOptions,
) -> Result<(FitResult, Vec<TermSelection>)> {
    check_identifiable(data.len(), 1)?;
    let cap = max_terms.min(MAX_TERMS).min(data.len() / 3).max(1);
    let mut table = Vec::new();
    let mut prev: Option<FitResult> = None;
    for l in 1..=cap {
        let fit = fit_lorentzian_model(data, l, opts)?;
        let q = fit.residual / data.len().saturating_sub(3 * l).max(1) as f64;
        table.push(TermSelection {
            n_terms: l,
            reduced_chi2: q,
        });
        if let Some(pf) = prev.take() {
            let pq = table[table.len() - 2].reduced_chi2;
            // an exact fit cannot be improved on
            let saturated = pq <= 1e-24 * data.iter().map(|d| d.rate()).sum::<f64>().powi(2);
            if saturated || (pq - q) < TERM_GAIN_THRESHOLD * pq {
                return Ok((pf, table));
            }
        }
        prev = Some(fit);
    }
    Ok((prev.unwrap(), table))
}

/// Percentile of sorted values with linear interpolation between order
/// statistics.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * (p / 100.0).clamp(0.0, 1.0);
    let i = h.floor() as usize;
    if i + 1 >= n {
        return sorted[n - 1];
    }
    sorted[i] + (h - i as f64) * (sorted[i + 1] - sorted[i])
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOutcome {
    pub spectra: Vec<SpectralDensity>,
    pub band: Band,
}

fn resample(data: &[DecayMeasurement], seed: u64, index: u64) -> Option<Vec<DecayMeasurement>> {
    let mut rng = substream(seed, index);
    let mut out = Vec::with_capacity(data.len());
    for d in data {
        let mut t2 = d.t2;
        if d.t2_err > 0.0 {
            let mut tries = 0;
            loop {
                let z: f64 = rng.sample(StandardNormal);
                t2 = d.t2 + d.t2_err * z;
                if t2 > 0.0 {
                    break;
                }
                tries += 1;
                if tries > 1000 {
                    return None;
                }
            }
        }
        out.push(DecayMeasurement { t2, ..d.clone() });
    }
    Some(out)
}

/// Parametric bootstrap: resample every `T2` from its truncated normal law,
/// refit from the incumbent, and take pointwise percentiles on `grid`.
pub fn bootstrap_band(
    data: &[DecayMeasurement],
    fit: &FitResult,
    n_boot: usize,
    percentiles: (f64, f64),
    seed: u64,
    grid: &[f64],
    opts: &FitOptions,
) -> Result<BootstrapOutcome> {
    if n_boot < 100 {
        return Err(Error::InvalidParameter(format!(
            "n_boot must be at least 100, got {n_boot}"
        )));
    }
    let (plo, phi) = percentiles;
    if !(0.0..=100.0).contains(&plo) || !(0.0..=100.0).contains(&phi) || plo > phi {
        return Err(Error::InvalidParameter(format!("bad percentiles {percentiles:?}")));
    }
    if grid.is_empty() {
        return Err(Error::InvalidParameter("empty reporting grid".into()));
    }
    let base = Problem::new(data, opts)?;
    let x0 = base.encode_spectrum(&fit.spectrum);
    let refit_evals = opts.max_evals;
    let results: Vec<Option<SpectralDensity>> = (0..n_boot as u64)
        .into_par_iter()
        .map(|b| {
            let sample = resample(data, seed, b)?;
            if sample.iter().zip(data).all(|(a, d)| a.t2 == d.t2) {
                return Some(fit.spectrum.clone());
            }
            let p = Problem::new(&sample, opts).ok()?;
            let c = p.local_search(&x0, refit_evals);
            if !c.chi2.is_finite() {
                return None;
            }
            p.spectrum(&c).ok()
        })
        .collect();
    let failures = results.iter().filter(|r| r.is_none()).count();
    if failures as f64 > MAX_FAILURE_FRACTION * n_boot as f64 {
        return Err(Error::BandUnreliable {
            failed: failures,
            total: n_boot,
        });
    }
    let spectra: Vec<SpectralDensity> = results.into_iter().flatten().collect();
    let mut low = Vec::with_capacity(grid.len());
    let mut high = Vec::with_capacity(grid.len());
    for &w in grid {
        let mut v: Vec<f64> = spectra.iter().map(|s| crate::spectral::eval_spectrum(s, w)).collect();
        v.sort_by(f64::total_cmp);
        low.push(percentile(&v, plo));
        high.push(percentile(&v, phi));
    }
    Ok(BootstrapOutcome {
        band: Band {
            omegas: grid.to_vec(),
            fit: grid
                .iter()
                .map(|&w| crate::spectral::eval_spectrum(&fit.spectrum, w))
                .collect(),
            low,
            high,
            percentiles,
            failures,
        },
        spectra,
    })
}

impl FitResult {
    pub fn with_bootstrap(mut self, b: BootstrapOutcome) -> Self {
        self.bootstrap_spectra = b.spectra;
        self.band = Some(b.band);
        self
    }
}
