//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use noisespec::forward::{
    decay_exponent_finite, decay_rate_asymptotic, decay_rate_cpmg_exact, predict_dd_performance, FiniteOptions,
};
use noisespec::inversion::{
    bootstrap_band, extrapolation_mask, fit_lorentzian_model, zeroth_order_spectrum, DecayMeasurement, FitOptions,
};
use noisespec::rng::substream;
use noisespec::scaling::{fit_quadratic_scaling, gyromagnetic_ratio, lopsidedness, ScalingPoint, StarSystem};
use noisespec::sequence::{harmonic_weights, make_cpmg, make_udd, SequenceFamily, DEFAULT_K_MAX};
use noisespec::simulator::{extract_t2, simulate_sequence, SimulationOptions};
use noisespec::spectral::{eval_spectrum, FlatSpectrum, FnSpectrum, LorentzianTerm, SpectralDensity};
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome, Duration);

fn lorentz(c: f64, w: f64, a: f64) -> SpectralDensity {
    SpectralDensity::symmetric(vec![LorentzianTerm::new(c, w, a).unwrap()]).unwrap()
}

fn log_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

fn rel(a: f64, b: f64) -> f64 {
    ((a - b) / b).abs()
}

/// CPMG data from `truth` with multiplicative Gaussian noise on the rate.
fn synth(truth: &SpectralDensity, taus: &[f64], rel_noise: f64, seed: u64) -> Vec<DecayMeasurement> {
    let mut rng = substream(seed, 0);
    taus.iter()
        .map(|&t| {
            let r = decay_rate_cpmg_exact(truth, t).unwrap().rate;
            let z: f64 = rng.sample(StandardNormal);
            let t2 = 1.0 / (r * (1.0 + rel_noise * z));
            DecayMeasurement::new(t, t2, rel_noise * t2, "synthetic").unwrap()
        })
        .collect()
}

fn c1_cpmg_closed_form() -> Outcome {
    let h = harmonic_weights(&make_cpmg(0.01).map_err(|e| e.to_string())?, 99).map_err(|e| e.to_string())?;
    let scale = h.get(1);
    let mut worst: f64 = 0.0;
    for k in 1..=99usize {
        let v = h.get(k);
        let err = if k % 2 == 1 {
            rel(v, 4.0 / (PI * PI * (k * k) as f64))
        } else {
            v.abs() / scale
        };
        worst = worst.max(err);
    }
    if worst <= 1e-12 {
        Ok(format!("max relative deviation {worst:.2e}"))
    } else {
        Err(format!("max relative deviation {worst:.2e} > 1e-12"))
    }
}

fn c2_flat_spectrum() -> Outcome {
    let s0 = 3.7;
    let mut worst: f64 = 0.0;
    for tau in [1e-4, 2e-3, 0.05, 1.0] {
        let seq = make_cpmg(tau).map_err(|e| e.to_string())?;
        let r = decay_rate_asymptotic(&FlatSpectrum { level: s0 }, &seq, DEFAULT_K_MAX)
            .map_err(|e| e.to_string())?
            .rate;
        worst = worst.max(rel(r, s0 / 2.0));
    }
    if worst <= 1e-4 {
        Ok(format!("max relative deviation from S0/2: {worst:.2e}"))
    } else {
        Err(format!("relative deviation {worst:.2e} > 1e-4"))
    }
}

const WIDTHS: [f64; 3] = [10.0, 50.0, 200.0];
const TAUS: [f64; 3] = [5e-3, 20e-3, 100e-3];

fn c3_oracle_equivalence() -> Outcome {
    let n_cycles = 64;
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for (i, &lam) in WIDTHS.iter().enumerate() {
        for (j, &tau) in TAUS.iter().enumerate() {
            let unit = lorentz(0.0, lam, 1.0);
            let seq = make_cpmg(tau).map_err(|e| e.to_string())?;
            let unit_rate = decay_rate_asymptotic(&unit, &seq, DEFAULT_K_MAX)
                .map_err(|e| e.to_string())?
                .rate;
            // scale the noise so the coherence falls to about e^-3 by the last cycle
            let duration = n_cycles as f64 * seq.cycle();
            let s = unit.scaled(3.0 / (unit_rate * duration)).map_err(|e| e.to_string())?;
            let predicted = 1.0
                / decay_rate_asymptotic(&s, &seq, DEFAULT_K_MAX)
                    .map_err(|e| e.to_string())?
                    .rate;
            let opts = SimulationOptions {
                n_trajectories: 10_000,
                master_seed: 1000 + (3 * i + j) as u64,
                ..Default::default()
            };
            let trace = simulate_sequence(&s, &seq, n_cycles, &opts).map_err(|e| e.to_string())?;
            let (t2, _) = extract_t2(&trace).map_err(|e| e.to_string())?;
            let d = rel(t2, predicted);
            worst = worst.max(d);
            lines.push(format!("lambda={lam} tau={}ms: {:.2}%", tau * 1e3, 100.0 * d));
        }
    }
    let msg = format!("worst {:.2}% [{}]", 100.0 * worst, lines.join("; "));
    if worst <= 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c4_finite_convergence() -> Outcome {
    let mut worst: f64 = 0.0;
    for &lam in &WIDTHS {
        for &tau in &TAUS {
            let s = lorentz(0.0, lam, 1.0);
            let seq = make_cpmg(tau).map_err(|e| e.to_string())?;
            let asym = decay_rate_asymptotic(&s, &seq, DEFAULT_K_MAX)
                .map_err(|e| e.to_string())?
                .rate;
            let fin = decay_exponent_finite(&s, &seq, 256, &FiniteOptions::default())
                .map_err(|e| e.to_string())?
                .rate();
            worst = worst.max(rel(fin, asym));
        }
    }
    let msg = format!("worst relative gap at n = 256: {:.3}%", 100.0 * worst);
    if worst <= 0.02 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn zeroth_order_errors<F: Fn(f64) -> f64 + Sync>(s: F, taus: &[f64]) -> Result<Vec<f64>, String> {
    let spec = FnSpectrum(&s);
    let data: Vec<DecayMeasurement> = taus
        .iter()
        .map(|&t| {
            let r = decay_rate_asymptotic(&spec, &make_cpmg(t).unwrap(), DEFAULT_K_MAX)
                .unwrap()
                .rate;
            DecayMeasurement::new(t, 1.0 / r, 0.0, "").unwrap()
        })
        .collect();
    let pts = zeroth_order_spectrum(&data).map_err(|e| e.to_string())?;
    Ok(pts.iter().map(|p| rel(p.s, s(p.omega))).collect())
}

fn c5_zeroth_order_bound() -> Outcome {
    let taus = log_grid(20, 2e-3, 2.0);
    // 1/f noise that stops abruptly at 150 Hz
    let wc = 2.0 * PI * 150.0;
    let cutoff = |w: f64| if w.abs() <= wc { 1.0 / w.abs().max(1e-9) } else { 0.0 };
    let e_cut = zeroth_order_errors(cutoff, &taus)?.into_iter().fold(0.0, f64::max);
    // a Lorentzian much wider than the sampled band decays slowly
    let broad = |w: f64| eval_spectrum(&lorentz(0.0, 2.0 * PI * 2000.0, 1.0), w);
    let e_broad = zeroth_order_errors(broad, &taus)?.into_iter().fold(0.0, f64::max);
    let msg = format!(
        "hard cutoff worst {:.2}% (<= 10%), broad Lorentzian worst {:.2}% (> 5%)",
        100.0 * e_cut,
        100.0 * e_broad
    );
    if e_cut <= 0.10 && e_broad > 0.05 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn three_term_truth() -> SpectralDensity {
    SpectralDensity::symmetric(vec![
        LorentzianTerm::from_hz(0.0, 0.4, 3.0).unwrap(),
        LorentzianTerm::from_hz(0.0, 12.0, 40.0).unwrap(),
        LorentzianTerm::from_hz(95.0, 10.0, 20.0).unwrap(),
    ])
    .unwrap()
}

fn c6_fit_round_trip() -> Outcome {
    let truth = three_term_truth();
    let taus = log_grid(30, 2e-3, 2.0);
    let data = synth(&truth, &taus, 0.02, 6);
    let opts = FitOptions::default();
    let fit = fit_lorentzian_model(&data, 3, &opts).map_err(|e| e.to_string())?;
    let omegas: Vec<f64> = taus.iter().map(|t| PI / (2.0 * t)).collect();
    let worst = omegas
        .iter()
        .map(|&w| rel(eval_spectrum(&fit.spectrum, w), eval_spectrum(&truth, w)))
        .fold(0.0, f64::max);
    let b = bootstrap_band(&data, &fit, 200, (16.0, 84.0), 6, &omegas, &opts).map_err(|e| e.to_string())?;
    let covered = omegas
        .iter()
        .enumerate()
        .filter(|&(i, &w)| {
            let s = eval_spectrum(&truth, w);
            b.band.low[i] <= s && s <= b.band.high[i]
        })
        .count();
    let coverage = covered as f64 / omegas.len() as f64;
    let msg = format!(
        "worst spectrum error {:.2}% (<= 15%), band coverage {:.0}% (>= 60%)",
        100.0 * worst,
        100.0 * coverage
    );
    if worst <= 0.15 && coverage >= 0.60 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c7_udd_consistency() -> Outcome {
    let shape = SpectralDensity::symmetric(vec![
        LorentzianTerm::from_hz(0.0, 40.0, 1.0).unwrap(),
        LorentzianTerm::from_hz(60.0, 10.0, 0.5).unwrap(),
    ])
    .unwrap();
    let grid = log_grid(5, 0.02, 0.16);
    // normalise so the slowest UDD-3 decay on the grid has T2 = 1 s
    let slowest = grid
        .iter()
        .map(|&tc| {
            decay_rate_asymptotic(&shape, &make_udd(3, tc).unwrap(), DEFAULT_K_MAX)
                .unwrap()
                .rate
        })
        .fold(f64::INFINITY, f64::min);
    let truth = shape.scaled(slowest.recip()).map_err(|e| e.to_string())?;
    let data = synth(&truth, &log_grid(30, 2e-3, 2.0), 0.02, 7);
    let fit = fit_lorentzian_model(&data, 2, &FitOptions::default()).map_err(|e| e.to_string())?;
    let pred = predict_dd_performance(&fit.spectrum, &SequenceFamily::Udd(3), &grid, DEFAULT_K_MAX)
        .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for (i, (tc, p)) in pred.iter().enumerate() {
        let seq = make_udd(3, *tc).map_err(|e| e.to_string())?;
        let truth_rate = decay_rate_asymptotic(&truth, &seq, DEFAULT_K_MAX)
            .map_err(|e| e.to_string())?
            .rate;
        let n_cycles = ((3.0 / truth_rate) / tc).ceil().max(16.0) as usize;
        let opts = SimulationOptions {
            n_trajectories: 10_000,
            master_seed: 7000 + i as u64,
            ..Default::default()
        };
        let trace = simulate_sequence(&truth, &seq, n_cycles, &opts).map_err(|e| e.to_string())?;
        let (t2, _) = extract_t2(&trace).map_err(|e| e.to_string())?;
        let d = rel(p.rate, 1.0 / t2);
        worst = worst.max(d);
        lines.push(format!("tc={:.1}ms: {:.2}%", tc * 1e3, 100.0 * d));
    }
    let mut identical = true;
    for &tc in &grid {
        let u1 = predict_dd_performance(&fit.spectrum, &SequenceFamily::Udd(1), &[tc], DEFAULT_K_MAX)
            .map_err(|e| e.to_string())?;
        let c = predict_dd_performance(&fit.spectrum, &SequenceFamily::Cpmg, &[tc / 2.0], DEFAULT_K_MAX)
            .map_err(|e| e.to_string())?;
        identical &= u1[0].1.rate == c[0].1.rate;
    }
    let msg = format!(
        "UDD-3 worst {:.2}% (<= 10%) [{}]; UDD-1 == CPMG: {identical}",
        100.0 * worst,
        lines.join("; ")
    );
    if worst <= 0.10 && identical {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c8_scaling() -> Outcome {
    let sys = StarSystem::new(
        10,
        gyromagnetic_ratio("31P").unwrap(),
        gyromagnetic_ratio("1H").unwrap(),
    )
    .map_err(|e| e.to_string())?;
    let ls: Vec<f64> = (0..10).map(|k| lopsidedness(&sys, k).unwrap()).collect();
    let pts: Vec<ScalingPoint> = ls
        .iter()
        .map(|&l| ScalingPoint {
            l,
            s_low: 0.06 * l * l + 3.37,
            s_err: 0.3,
        })
        .collect();
    let f = fit_quadratic_scaling(&pts).map_err(|e| e.to_string())?;
    let (lo, hi) = sys.bounds();
    let ratio = gyromagnetic_ratio("31P").unwrap() / gyromagnetic_ratio("1H").unwrap();
    let in_bounds = ls.iter().all(|&l| lo - 1e-12 <= l && l <= hi + 1e-12);
    let paired = (0..10).all(|k| (ls[k] + ls[9 - k] - 2.0 * ratio).abs() < 1e-12);
    let msg = format!(
        "c2 = {:.12}, c0 = {:.12}, 10 lopsidedness values in [{lo:.4}, {hi:.4}]: {in_bounds}, paired: {paired}",
        f.c2, f.c0
    );
    if (f.c2 - 0.06).abs() <= 1e-10 && (f.c0 - 3.37).abs() <= 1e-10 && ls.len() == 10 && in_bounds && paired {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn c9_frequency_window() -> Outcome {
    let f0 = 40.0;
    let s = lorentz(2.0 * PI * f0, 2.0 * PI * 0.5, 1.0);
    let taus = log_grid(2000, 1e-3, 50e-3);
    let rates: Vec<f64> = taus
        .iter()
        .map(|&t| decay_rate_cpmg_exact(&s, t).unwrap().rate)
        .collect();
    let peak = (0..taus.len()).max_by(|&a, &b| rates[a].total_cmp(&rates[b])).unwrap();
    let tau_peak = taus[peak];
    let target = 1.0 / (4.0 * f0);
    let data = vec![
        DecayMeasurement::new(2e-3, 1.0, 0.1, "").unwrap(),
        DecayMeasurement::new(2.0, 1.0, 0.1, "").unwrap(),
    ];
    let probe = [2.0 * PI * 124.9, 2.0 * PI * 125.1];
    let mask = extrapolation_mask(&data, &probe).map_err(|e| e.to_string())?;
    let msg = format!(
        "peak at tau = {:.3} ms (target {:.3} ms); mask at 124.9/125.1 Hz = {:?}",
        tau_peak * 1e3,
        target * 1e3,
        mask
    );
    if rel(tau_peak, target) <= 0.10 && mask == [false, true] {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn run_cli(args: &[&str], threads: usize, out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_noisespec"))
        .arg("--threads")
        .arg(threads.to_string())
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if status.status.code() != Some(0) {
        return Err(format!(
            "{args:?} exited with {:?}: {}",
            status.status.code(),
            String::from_utf8_lossy(&status.stderr)
        ));
    }
    Ok(())
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn c10_determinism() -> Outcome {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let truth = three_term_truth();
    let data = synth(&truth, &log_grid(20, 2e-3, 2.0), 0.02, 10);
    let mut csv = String::from("tau_s,t2_s,t2_err_s,label\n");
    for d in &data {
        csv.push_str(&format!("{:e},{:e},{:e},syn\n", d.tau, d.t2, d.t2_err));
    }
    let input = work.path().join("data.csv");
    fs::write(&input, csv).map_err(|e| e.to_string())?;
    let spectrum = work.path().join("truth.toml");
    fs::write(
        &spectrum,
        "[[term]]\ncenter_hz = 0\nwidth_hz = 8\nweight = 60\n\n[[term]]\ncenter_hz = 30\nwidth_hz = 5\nweight = 20\n",
    )
    .map_err(|e| e.to_string())?;
    let input = input.to_str().unwrap();
    let spectrum = spectrum.to_str().unwrap();
    let mut reference: Option<Vec<(String, Vec<u8>)>> = None;
    for threads in [1, 2, 8] {
        let out = work.path().join(format!("out{threads}"));
        run_cli(
            &["fit", input, "--terms", "3", "--n-boot", "100", "--seed", "11"],
            threads,
            &out,
        )?;
        run_cli(
            &[
                "simulate",
                spectrum,
                "--sequence",
                "cpmg:tau=10ms",
                "--cycles",
                "64",
                "--trace",
                "--seed",
                "11",
            ],
            threads,
            &out,
        )?;
        let snap = snapshot(&out);
        match &reference {
            None => reference = Some(snap),
            Some(r) if *r == snap => {}
            Some(_) => return Err(format!("outputs differ with {threads} threads")),
        }
    }
    let names: Vec<String> = reference.unwrap().into_iter().map(|f| f.0).collect();
    Ok(format!(
        "identical bytes under 1, 2, 8 threads for {}",
        names.join(", ")
    ))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 CPMG harmonic weights", c1_cpmg_closed_form, Duration::from_secs(1)),
        ("2 flat-spectrum rate", c2_flat_spectrum, Duration::from_secs(1)),
        (
            "3 Monte-Carlo oracle equivalence",
            c3_oracle_equivalence,
            Duration::from_secs(300),
        ),
        (
            "4 finite-to-asymptotic convergence",
            c4_finite_convergence,
            Duration::from_secs(60),
        ),
        (
            "5 zeroth-order error bound",
            c5_zeroth_order_bound,
            Duration::from_secs(10),
        ),
        ("6 fit round trip", c6_fit_round_trip, Duration::from_secs(120)),
        (
            "7 UDD prediction consistency",
            c7_udd_consistency,
            Duration::from_secs(300),
        ),
        ("8 scaling fit", c8_scaling, Duration::from_secs(1)),
        ("9 frequency window", c9_frequency_window, Duration::from_secs(10)),
        ("10 determinism", c10_determinism, Duration::from_secs(120)),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f, budget) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(&format!("{o} "))) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let (tag, msg) = match outcome {
            Ok(m) if took <= budget => ("PASS", m),
            Ok(m) => ("FAIL", format!("{m}; took {took:.1?}, budget {budget:?}")),
            Err(m) => ("FAIL", m),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} criterion {name}: {msg} ({took:.2?})");
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
