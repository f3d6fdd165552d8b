//! Equal error rate with a percentile bootstrap interval.
//!
//! At threshold `t` a trial is accepted when `score >= t`, so
//! `FAR(t) = #{non-target >= t} / N_non` and `FRR(t) = #{target < t} / N_target`.
//! Operating points are taken at every distinct score plus `+∞`; when the two
//! rates never coincide exactly the EER is read off the crossing of the
//! piecewise-linear curves joining adjacent operating points.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::ScoredTrial;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EerReport {
    pub eer: f64,
    pub threshold: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Zero when no bootstrap was run; the interval then collapses to `eer`.
    pub n_bootstrap: usize,
    pub n_target: usize,
    pub n_nontarget: usize,
}

/// One (threshold, FAR, FRR) operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub far: f64,
    pub frr: f64,
}

fn split(trials: &[ScoredTrial]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut targets = Vec::new();
    let mut nontargets = Vec::new();
    for t in trials {
        if !t.score.is_finite() {
            return Err(Error::domain(format!(
                "non-finite score for trial {} {}",
                t.trial.enroll, t.trial.test
            )));
        }
        if t.trial.is_target {
            targets.push(t.score);
        } else {
            nontargets.push(t.score);
        }
    }
    if targets.is_empty() || nontargets.is_empty() {
        return Err(Error::domain(format!(
            "EER needs both classes, got {} targets and {} non-targets",
            targets.len(),
            nontargets.len()
        )));
    }
    Ok((targets, nontargets))
}

/// Integer operating points over sorted inputs: (threshold, false accepts, false rejects).
fn sweep(targets: &[f64], nontargets: &[f64]) -> Vec<(f64, usize, usize)> {
    let mut thresholds: Vec<f64> = targets.iter().chain(nontargets).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut points = Vec::with_capacity(thresholds.len() + 1);
    let (mut ti, mut ni) = (0, 0);
    for &t in &thresholds {
        while ti < targets.len() && targets[ti] < t {
            ti += 1;
        }
        while ni < nontargets.len() && nontargets[ni] < t {
            ni += 1;
        }
        points.push((t, nontargets.len() - ni, ti));
    }
    points.push((f64::INFINITY, 0, targets.len()));
    points
}

fn eer_sorted(targets: &[f64], nontargets: &[f64]) -> (f64, f64) {
    let (nt, nn) = (targets.len(), nontargets.len());
    let points = sweep(targets, nontargets);
    let rate = |fa: usize, fr: usize| (fa as f64 / nn as f64, fr as f64 / nt as f64);
    let mut prev: Option<(f64, usize, usize)> = None;
    for &(t, fa, fr) in &points {
        // FAR - FRR is non-increasing; compare exactly via cross-multiplication
        let lhs = (fr as u128) * (nn as u128);
        let rhs = (fa as u128) * (nt as u128);
        if lhs == rhs {
            return (rate(fa, fr).0, t);
        }
        if lhs > rhs {
            let (t0, fa0, fr0) = prev.expect("first operating point has FRR = 0 < FAR = 1");
            let (far0, frr0) = rate(fa0, fr0);
            let (far1, frr1) = rate(fa, fr);
            let gap0 = far0 - frr0;
            let gap1 = far1 - frr1;
            let s = gap0 / (gap0 - gap1);
            let eer = far0 + s * (far1 - far0);
            let threshold = if t.is_finite() { t0 + s * (t - t0) } else { t0 };
            return (eer.clamp(0.0, 1.0), threshold);
        }
        prev = Some((t, fa, fr));
    }
    unreachable!("the +inf operating point always has FRR >= FAR")
}

/// Point estimate of the EER and its threshold.
pub fn eer(trials: &[ScoredTrial]) -> Result<EerReport> {
    let (mut targets, mut nontargets) = split(trials)?;
    targets.sort_by(f64::total_cmp);
    nontargets.sort_by(f64::total_cmp);
    let (eer, threshold) = eer_sorted(&targets, &nontargets);
    Ok(EerReport {
        eer,
        threshold,
        ci_low: eer,
        ci_high: eer,
        n_bootstrap: 0,
        n_target: targets.len(),
        n_nontarget: nontargets.len(),
    })
}

/// EER of one resample; targets and non-targets are drawn independently,
/// each keeping its original count.
fn resample_eer(targets: &[f64], nontargets: &[f64], seed: u64, index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let mut draw = |src: &[f64]| {
        let mut v: Vec<f64> = (0..src.len()).map(|_| src[rng.random_range(0..src.len())]).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let t = draw(targets);
    let n = draw(nontargets);
    eer_sorted(&t, &n).0
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bootstrap EERs, one per resample, in resample order.
pub fn bootstrap_eers(trials: &[ScoredTrial], n_bootstrap: usize, seed: u64) -> Result<Vec<f64>> {
    let (targets, nontargets) = split(trials)?;
    Ok((0..n_bootstrap as u64)
        .into_par_iter()
        .map(|b| resample_eer(&targets, &nontargets, seed, b))
        .collect())
}

/// EER with an empirical percentile interval at `confidence`.
pub fn eer_bootstrap_ci(trials: &[ScoredTrial], n_bootstrap: usize, confidence: f64, seed: u64) -> Result<EerReport> {
    if n_bootstrap < 100 {
        return Err(Error::domain(format!("n_bootstrap must be >= 100, got {n_bootstrap}")));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::domain(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    let mut report = eer(trials)?;
    let mut samples = bootstrap_eers(trials, n_bootstrap, seed)?;
    samples.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    report.ci_low = quantile(&samples, tail).clamp(0.0, 1.0);
    report.ci_high = quantile(&samples, 1.0 - tail).clamp(0.0, 1.0);
    report.n_bootstrap = n_bootstrap;
    Ok(report)
}

/// Every operating point of the sweep, for DET plotting.
pub fn det_points(trials: &[ScoredTrial]) -> Result<Vec<OperatingPoint>> {
    let (mut targets, mut nontargets) = split(trials)?;
    targets.sort_by(f64::total_cmp);
    nontargets.sort_by(f64::total_cmp);
    let (nt, nn) = (targets.len() as f64, nontargets.len() as f64);
    Ok(sweep(&targets, &nontargets)
        .into_iter()
        .map(|(threshold, fa, fr)| OperatingPoint {
            threshold,
            far: fa as f64 / nn,
            frr: fr as f64 / nt,
        })
        .collect())
}
