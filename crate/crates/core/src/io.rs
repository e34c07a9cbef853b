//! File formats: measurement and scaling CSV input, spectrum TOML, and the
//! CSV tables written by the command-line tool.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::inversion::DecayMeasurement;
use crate::scaling::ScalingPoint;
use crate::spectral::{LorentzianTerm, SpectralDensity};

pub const MEASUREMENT_HEADER: [&str; 4] = ["tau_s", "t2_s", "t2_err_s", "label"];
pub const SCALING_HEADER: [&str; 3] = ["l", "s_low", "s_err"];

/// Formats a float so that it parses back to the same value.
pub fn num(v: f64) -> String {
    format!("{v:.12e}")
}

fn csv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes())
}

fn row_err(path: &str, line: u64, message: impl Into<String>) -> Error {
    Error::InputRow {
        path: path.to_string(),
        line: line as usize,
        message: message.into(),
    }
}

fn check_header(path: &str, rdr: &mut csv::Reader<&[u8]>, expect: &[&str]) -> Result<()> {
    let h = rdr.headers().map_err(|e| Error::Parse(format!("{path}: {e}")))?.clone();
    let got: Vec<&str> = h.iter().collect();
    if got != expect {
        let line = h.position().map_or(1, |p| p.line());
        return Err(row_err(
            path,
            line,
            format!("header must be `{}`, found `{}`", expect.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn field(path: &str, line: u64, name: &str, raw: &str) -> Result<f64> {
    let v: f64 = raw
        .parse()
        .map_err(|_| row_err(path, line, format!("{name}: cannot parse '{raw}' as a number")))?;
    if !v.is_finite() {
        return Err(row_err(path, line, format!("{name}: value must be finite")));
    }
    Ok(v)
}

/// Parses measurement CSV text. `tau_scale` converts the `tau` column to
/// seconds (1 for s, 1e-3 for ms). Any malformed row aborts with its line.
pub fn parse_measurements(path: &str, text: &str, tau_scale: f64) -> Result<Vec<DecayMeasurement>> {
    let mut rdr = csv_reader(text);
    check_header(path, &mut rdr, &MEASUREMENT_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse(format!("{path}: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 {
            return Err(row_err(path, line, format!("expected 4 fields, found {}", rec.len())));
        }
        let tau = field(path, line, "tau", &rec[0])? * tau_scale;
        let t2 = field(path, line, "t2", &rec[1])?;
        let err = field(path, line, "t2_err", &rec[2])?;
        let m = DecayMeasurement::new(tau, t2, err, &rec[3]).map_err(|e| row_err(path, line, e.to_string()))?;
        out.push(m);
    }
    if out.is_empty() {
        return Err(Error::Parse(format!("{path}: no data rows")));
    }
    Ok(out)
}

pub fn read_measurements(path: &Path, tau_scale: f64) -> Result<Vec<DecayMeasurement>> {
    let text = fs::read_to_string(path)?;
    parse_measurements(&path.display().to_string(), &text, tau_scale)
}

pub fn parse_scaling_points(path: &str, text: &str) -> Result<Vec<ScalingPoint>> {
    let mut rdr = csv_reader(text);
    check_header(path, &mut rdr, &SCALING_HEADER)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse(format!("{path}: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(row_err(path, line, format!("expected 3 fields, found {}", rec.len())));
        }
        let s_err = field(path, line, "s_err", &rec[2])?;
        if s_err < 0.0 {
            return Err(row_err(path, line, "s_err must be >= 0"));
        }
        out.push(ScalingPoint {
            l: field(path, line, "l", &rec[0])?,
            s_low: field(path, line, "s_low", &rec[1])?,
            s_err,
        });
    }
    Ok(out)
}

pub fn read_scaling_points(path: &Path) -> Result<Vec<ScalingPoint>> {
    let text = fs::read_to_string(path)?;
    parse_scaling_points(&path.display().to_string(), &text)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TermHz {
    center_hz: f64,
    width_hz: f64,
    weight: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpectrumFile {
    #[serde(default = "default_true")]
    symmetrized: bool,
    #[serde(default)]
    term: Vec<TermHz>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BootstrapFile {
    #[serde(default)]
    sample: Vec<SpectrumFile>,
}

fn default_true() -> bool {
    true
}

fn to_density(path: &str, f: SpectrumFile) -> Result<Option<SpectralDensity>> {
    if f.term.is_empty() {
        return Ok(None);
    }
    let terms = f
        .term
        .iter()
        .map(|t| LorentzianTerm::from_hz(t.center_hz, t.width_hz, t.weight))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Parse(format!("{path}: {e}")))?;
    Ok(Some(SpectralDensity::new(terms, f.symmetrized)?))
}

/// Parses a spectrum file. A file without `[[term]]` blocks describes the
/// zero spectrum and yields `None`.
pub fn parse_spectrum(path: &str, text: &str) -> Result<Option<SpectralDensity>> {
    let f: SpectrumFile = toml::from_str(text).map_err(|e| Error::Parse(format!("{path}: {e}")))?;
    to_density(path, f)
}

pub fn read_spectrum(path: &Path) -> Result<Option<SpectralDensity>> {
    let text = fs::read_to_string(path)?;
    parse_spectrum(&path.display().to_string(), &text)
}

pub fn parse_bootstrap(path: &str, text: &str) -> Result<Vec<SpectralDensity>> {
    let f: BootstrapFile = toml::from_str(text).map_err(|e| Error::Parse(format!("{path}: {e}")))?;
    f.sample
        .into_iter()
        .map(|s| to_density(path, s)?.ok_or_else(|| Error::Parse(format!("{path}: empty bootstrap sample"))))
        .collect()
}

pub fn read_bootstrap(path: &Path) -> Result<Vec<SpectralDensity>> {
    let text = fs::read_to_string(path)?;
    parse_bootstrap(&path.display().to_string(), &text)
}

fn push_terms(out: &mut String, prefix: &str, s: &SpectralDensity) {
    for t in s.terms() {
        let _ = writeln!(out, "\n[[{prefix}term]]");
        let _ = writeln!(out, "center_hz = {}", num(t.center_hz()));
        let _ = writeln!(out, "width_hz = {}", num(t.width_hz()));
        let _ = writeln!(out, "weight = {}", num(t.weight));
    }
}

/// Spectrum file text; `header` lines are written as `#` comments.
pub fn format_spectrum(s: &SpectralDensity, header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
    let _ = writeln!(out, "symmetrized = {}", s.is_symmetrized());
    push_terms(&mut out, "", s);
    out
}

pub fn format_bootstrap(samples: &[SpectralDensity], header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
    for s in samples {
        let _ = writeln!(out, "\n[[sample]]");
        let _ = writeln!(out, "symmetrized = {}", s.is_symmetrized());
        push_terms(&mut out, "sample.", s);
    }
    out
}

/// CSV table with `#` header comments, a column row, and preformatted cells.
pub fn format_table(header: &[String], columns: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    for h in header {
        let _ = writeln!(out, "# {h}");
    }
    let _ = writeln!(out, "{}", columns.join(","));
    for r in rows {
        let _ = writeln!(out, "{}", r.join(","));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_measurements_with_comments() {
        let text = "# from run 7\ntau_s,t2_s,t2_err_s,label\n0.002,1.5,0.1,LLS\n# mid comment\n0.01, 2.0 ,0.2,LLS\n";
        let d = parse_measurements("x.csv", text, 1.0).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d[1].t2, 2.0);
        let ms = parse_measurements("x.csv", &text.replace("0.002", "2").replace("0.01,", "10,"), 1e-3).unwrap();
        assert_eq!(ms[0].tau, 0.002);
        assert_eq!(ms[1].tau, 0.01);
    }

    #[test]
    fn reports_bad_row_line() {
        let text = "tau_s,t2_s,t2_err_s,label\n0.002,1.5,0.1,a\n0.004,-1,0.1,b\n";
        match parse_measurements("d.csv", text, 1.0) {
            Err(Error::InputRow { line, path, message }) => {
                assert_eq!((line, path.as_str()), (3, "d.csv"));
                assert!(message.contains("t2"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let text = "tau_s,t2_s,t2_err_s,label\n0.002,abc,0.1,a\n";
        assert!(matches!(
            parse_measurements("d.csv", text, 1.0),
            Err(Error::InputRow { line: 2, .. })
        ));
        let text = "tau_s,t2_s,t2_err_s,label\n0.002,1,0.1\n";
        assert!(matches!(
            parse_measurements("d.csv", text, 1.0),
            Err(Error::InputRow { line: 2, .. })
        ));
        let text = "tau,t2,err,label\n0.002,1,0.1,a\n";
        assert!(matches!(
            parse_measurements("d.csv", text, 1.0),
            Err(Error::InputRow { line: 1, .. })
        ));
    }

    #[test]
    fn spectrum_round_trip() {
        let s = SpectralDensity::symmetric(vec![
            LorentzianTerm::from_hz(0.0, 0.37, 1.25).unwrap(),
            LorentzianTerm::from_hz(101.3, 9.1, 0.031).unwrap(),
        ])
        .unwrap();
        let text = format_spectrum(&s, &["generated".into()]);
        let back = parse_spectrum("s.toml", &text).unwrap().unwrap();
        for (a, b) in s.terms().iter().zip(back.terms()) {
            assert!(((a.center - b.center) / a.center.max(1.0)).abs() < 1e-11);
            assert!(((a.width - b.width) / a.width).abs() < 1e-11);
            assert!(((a.weight - b.weight) / a.weight).abs() < 1e-11);
        }
        let boot = format_bootstrap(&[s.clone(), s.scaled(2.0).unwrap()], &[]);
        assert_eq!(parse_bootstrap("b.toml", &boot).unwrap().len(), 2);
        assert!(parse_spectrum("z.toml", "symmetrized = true\n").unwrap().is_none());
        assert!(parse_spectrum("bad.toml", "[[term]]\ncenter_hz = 1\nwidth_hz = -1\nweight = 1\n").is_err());
        assert!(parse_spectrum("bad.toml", "[[term]]\ncentre_hz = 1\nwidth_hz = 1\nweight = 1\n").is_err());
    }

    #[test]
    fn scaling_points() {
        let p = parse_scaling_points("s.csv", "l,s_low,s_err\n9.4,8.7,0.3\n-8.6,7.8,0.3\n").unwrap();
        assert_eq!(p.len(), 2);
        assert!(parse_scaling_points("s.csv", "l,s_low,s_err\n1,2,-1\n").is_err());
    }
}
