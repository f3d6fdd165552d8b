//! Text formats for trial lists, score files, EER reports and DET points.
//!
//! - trial list: `<label> <enroll_id> <test_id>`, label 1 for target trials
//! - score file: `<enroll_id> <test_id> <score>`, score with 9 significant digits
//! - report: `key: value` lines

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{EerReport, OperatingPoint, ScoredTrial, Trial};
use crate::error::{Error, Result};

/// Formats like C's `%.{digits}g`.
pub fn format_sig(x: f64, digits: usize) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".to_string();
    }
    let digits = digits.max(1);
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (digits as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{:.*}", decimals, x)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn format_score(x: f64) -> String {
    format_sig(x, 9)
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn render_trials(trials: &[Trial]) -> String {
    let mut out = String::new();
    for t in trials {
        let _ = writeln!(out, "{} {} {}", u8::from(t.is_target), t.enroll, t.test);
    }
    out
}

pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = |msg: &str| Error::format("trial list", format!("line {}: {msg}: '{line}'", i + 1));
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [label, enroll, test] = fields[..] else {
                return Err(bad("expected 3 fields"));
            };
            let is_target = match label {
                "1" => true,
                "0" => false,
                _ => return Err(bad("label must be 0 or 1")),
            };
            Ok(Trial {
                enroll: enroll.to_string(),
                test: test.to_string(),
                is_target,
            })
        })
        .collect()
}

pub fn write_trials(path: &Path, trials: &[Trial]) -> Result<()> {
    write_text(path, &render_trials(trials))
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials(&read_text(path)?).map_err(|e| e.context(path.display().to_string()))
}

pub fn render_scores(scored: &[ScoredTrial]) -> String {
    let mut out = String::new();
    for s in scored {
        let _ = writeln!(out, "{} {} {}", s.trial.enroll, s.trial.test, format_score(s.score));
    }
    out
}

/// Parses a score file, taking target labels from the matching trial list.
pub fn parse_scores(text: &str, trials: &[Trial]) -> Result<Vec<ScoredTrial>> {
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.len() != trials.len() {
        return Err(Error::format(
            "score file",
            format!("{} scores for {} trials", lines.len(), trials.len()),
        ));
    }
    lines
        .iter()
        .zip(trials)
        .enumerate()
        .map(|(i, (line, trial))| {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [enroll, test, score] = fields[..] else {
                return Err(Error::format("score file", format!("line {}: expected 3 fields", i + 1)));
            };
            if enroll != trial.enroll || test != trial.test {
                return Err(Error::format(
                    "score file",
                    format!("line {}: ({enroll} {test}) does not match the trial list", i + 1),
                ));
            }
            let score = score
                .parse()
                .map_err(|_| Error::format("score file", format!("line {}: bad score '{score}'", i + 1)))?;
            Ok(ScoredTrial {
                trial: trial.clone(),
                score,
            })
        })
        .collect()
}

pub fn write_scores(path: &Path, scored: &[ScoredTrial]) -> Result<()> {
    write_text(path, &render_scores(scored))
}

pub fn render_report(report: &EerReport, top_n: Option<usize>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "eer: {}", format_score(report.eer));
    let _ = writeln!(out, "threshold: {}", format_score(report.threshold));
    let _ = writeln!(out, "ci_low: {}", format_score(report.ci_low));
    let _ = writeln!(out, "ci_high: {}", format_score(report.ci_high));
    let _ = writeln!(out, "n_bootstrap: {}", report.n_bootstrap);
    let _ = writeln!(out, "n_target: {}", report.n_target);
    let _ = writeln!(out, "n_nontarget: {}", report.n_nontarget);
    if let Some(n) = top_n {
        let _ = writeln!(out, "top_n: {n}");
    }
    out
}

/// Parsed `key: value` report; returns the report and `top_n` when present.
pub fn parse_report(text: &str) -> Result<(EerReport, Option<usize>)> {
    let mut fields = std::collections::BTreeMap::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| Error::format("report", format!("missing ':' in '{line}'")))?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| {
        fields
            .get(k)
            .ok_or_else(|| Error::format("report", format!("missing key '{k}'")))
    };
    let real = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::format("report", format!("bad value for '{k}'")))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format("report", format!("bad value for '{k}'")))
    };
    let report = EerReport {
        eer: real("eer")?,
        threshold: real("threshold")?,
        ci_low: real("ci_low")?,
        ci_high: real("ci_high")?,
        n_bootstrap: int("n_bootstrap")?,
        n_target: int("n_target")?,
        n_nontarget: int("n_nontarget")?,
    };
    let top_n = if fields.contains_key("top_n") { Some(int("top_n")?) } else { None };
    Ok((report, top_n))
}

pub fn render_det_csv(points: &[OperatingPoint]) -> String {
    let mut out = String::from("threshold,far,frr\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", format_score(p.threshold), format_score(p.far), format_score(p.frr));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn sig_formatting_matches_printf() {
        // reference values from printf("%.9g")
        let cases = [
            (0.8, "0.8"),
            (1.0, "1"),
            (-0.123456789012, "-0.123456789"),
            (123456789.4, "123456789"),
            (1234567890.0, "1.23456789e+09"),
            (1e-5, "1e-05"),
            (0.0001234, "0.0001234"),
            (2.0 / 3.0, "0.666666667"),
            (0.0, "0"),
            (-3.5e-7, "-3.5e-07"),
            (0.99999999999, "1"),
        ];
        for (x, want) in cases {
            assert_eq!(format_sig(x, 9), want, "{x}");
        }
    }

    #[test]
    fn trial_list_parsing() {
        let t = parse_trials("1 a b\n0 a c\n\n").unwrap();
        assert_eq!(t.len(), 2);
        assert!(t[0].is_target && !t[1].is_target);
        assert_eq!(render_trials(&t), "1 a b\n0 a c\n");
        assert!(parse_trials("2 a b").is_err());
        assert!(parse_trials("1 a").is_err());
    }

    #[test]
    fn score_file_round_trip() {
        let trials = parse_trials("1 a b\n0 a c\n").unwrap();
        let scored = vec![
            ScoredTrial { trial: trials[0].clone(), score: 0.812345678912 },
            ScoredTrial { trial: trials[1].clone(), score: -0.05 },
        ];
        let text = render_scores(&scored);
        assert_eq!(text, "a b 0.812345679\na c -0.05\n");
        let back = parse_scores(&text, &trials).unwrap();
        assert_eq!(back[1].score, -0.05);
        assert!(parse_scores("a c 0.1\na b 0.2\n", &trials).is_err());
        assert!(parse_scores("a b 0.1\n", &trials).is_err());
    }

    #[test]
    fn report_round_trip() {
        let r = EerReport {
            eer: 0.125,
            threshold: 0.4321,
            ci_low: 0.1,
            ci_high: 0.15,
            n_bootstrap: 1000,
            n_target: 100,
            n_nontarget: 100,
        };
        let text = render_report(&r, Some(5));
        assert!(text.starts_with("eer: 0.125\nthreshold: 0.4321\n"));
        let (back, top_n) = parse_report(&text).unwrap();
        assert_eq!(back, r);
        assert_eq!(top_n, Some(5));
        assert_eq!(parse_report(&render_report(&r, None)).unwrap().1, None);
    }

    proptest! {
        #[test]
        fn nine_digits_round_trip_closely(x in -1e6f64..1e6) {
            let back: f64 = format_score(x).parse().unwrap();
            prop_assert!((back - x).abs() <= 1e-8 * x.abs().max(1e-300) + 1e-300 || back == x);
        }
    }
}
