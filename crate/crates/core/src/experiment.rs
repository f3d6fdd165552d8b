//! End-to-end protocol: grid search on dev EER, retrain the winner, pick the
//! best epoch, score the test trials raw and with adaptive s-norm, and write
//! everything to a run directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::checkpoint::write_checkpoint;
use crate::config::ExperimentConfig;
use crate::dataset::{Dataset, Partition};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::scoring::formats::{format_score, render_det_csv, render_report, write_scores, write_text};
use crate::scoring::{
    det_points, eer, eer_bootstrap_ci, score_trials, Cohort, CohortCache, EerReport, ScoredTrial,
};
use crate::trainer::{embed_files, grid_search, select_best, train, GridEntry, TrainConfig};

pub const COMPARISON_HEADER: &str = "loss,eer_raw,ci_low,ci_high,eer_snorm,improvement_pct";

/// Test-set scores and reports of one frozen encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub raw_scores: Vec<ScoredTrial>,
    pub raw: EerReport,
    pub normalized_scores: Vec<ScoredTrial>,
    pub normalized: EerReport,
    /// Cohort size chosen on the dev trials.
    pub top_n: usize,
}

/// Scores the test trials with `encoder`, tunes the cohort size on the dev
/// trials and reports both EERs with bootstrap intervals seeded by `seed`.
pub fn evaluate_encoder(dataset: &Dataset, encoder: &EncoderParams, config: &ExperimentConfig, seed: u64) -> Result<Evaluation> {
    let ev = &config.eval;
    let test = dataset.eval_set(Partition::Test);
    let dev = dataset.eval_set(Partition::Dev);
    let test_table = test.embed(encoder).map_err(|e| e.context("embedding test files"))?;
    let dev_table = dev.embed(encoder).map_err(|e| e.context("embedding dev files"))?;
    let cohort_table = embed_files(&dataset.eval_set(Partition::Cohort).files, encoder)
        .map_err(|e| e.context("embedding cohort files"))?;
    let cohort_embeddings: Vec<_> = cohort_table.into_values().map(|f| f.mean().clone()).collect();
    let n_cohort = cohort_embeddings.len();
    let cohort = Cohort::new(cohort_embeddings, n_cohort.min(2))?;

    let raw_scores = score_trials(&test.trials, &test_table)?;
    let raw = eer_bootstrap_ci(&raw_scores, ev.n_bootstrap, ev.confidence, seed)?;
    let dev_scores = score_trials(&dev.trials, &dev_table)?;
    let candidates: Vec<usize> = ev.cohort_sizes.iter().copied().filter(|&n| n <= n_cohort).collect();
    if candidates.len() < ev.cohort_sizes.len() {
        log::warn!("cohort sizes above the {n_cohort} cohort files are skipped");
    }
    let candidates = if candidates.is_empty() { vec![n_cohort] } else { candidates };
    let top_n = crate::scoring::tune_cohort_size(&dev_scores, &dev_table, &cohort, &candidates, ev.std_formula)
        .map_err(|e| e.context("tuning cohort size on dev trials"))?;
    let normalized_scores = CohortCache::build(&test_table, &cohort)?.normalize(&raw_scores, top_n, ev.std_formula)?;
    let normalized = eer_bootstrap_ci(&normalized_scores, ev.n_bootstrap, ev.confidence, seed)?;
    Ok(Evaluation {
        raw_scores,
        raw,
        normalized_scores,
        normalized,
        top_n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub loss: LossKind,
    /// Winning grid config, with the full epoch budget.
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub best_dev_eer: f64,
    pub evaluation: Evaluation,
    /// Test EER of the freshly initialized encoder.
    pub untrained_eer: f64,
    pub checkpoint_path: PathBuf,
    pub grid: Vec<GridEntry>,
}

impl ExperimentResult {
    pub fn improvement_pct(&self) -> f64 {
        improvement_pct(self.evaluation.raw.eer, self.evaluation.normalized.eer)
    }

    pub fn comparison_row(&self) -> String {
        let (r, n) = (&self.evaluation.raw, &self.evaluation.normalized);
        format!(
            "{},{},{},{},{},{}",
            self.loss,
            format_score(r.eer),
            format_score(r.ci_low),
            format_score(r.ci_high),
            format_score(n.eer),
            format_score(self.improvement_pct())
        )
    }
}

/// `100 · (raw − normalized) / raw`; zero when both rates are zero.
pub fn improvement_pct(raw: f64, normalized: f64) -> f64 {
    if raw == normalized {
        0.0
    } else {
        100.0 * (raw - normalized) / raw
    }
}

fn grid_csv(entries: &[GridEntry]) -> String {
    let mut out = String::from("learning_rate,speakers_per_batch,chunks_per_speaker,alpha,margin,lambda,best_dev_eer\n");
    for e in entries {
        let c = &e.config;
        let outcome = match &e.outcome {
            Ok(v) => format_score(*v),
            Err(_) => "failed".to_string(),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{outcome}",
            c.learning_rate, c.speakers_per_batch, c.chunks_per_speaker, c.loss.alpha, c.loss.margin, c.loss.lambda
        );
    }
    out
}

fn summary(result: &ExperimentResult) -> String {
    let ev = &result.evaluation;
    let mut out = String::new();
    let _ = writeln!(out, "loss: {}", result.loss);
    let _ = writeln!(out, "best_epoch: {}", result.best_epoch);
    let _ = writeln!(out, "best_dev_eer: {}", format_score(result.best_dev_eer));
    let _ = writeln!(out, "untrained_test_eer: {}", format_score(result.untrained_eer));
    let _ = writeln!(out, "eer_raw: {}", format_score(ev.raw.eer));
    let _ = writeln!(out, "ci_low: {}", format_score(ev.raw.ci_low));
    let _ = writeln!(out, "ci_high: {}", format_score(ev.raw.ci_high));
    let _ = writeln!(out, "eer_snorm: {}", format_score(ev.normalized.eer));
    let _ = writeln!(out, "snorm_ci_low: {}", format_score(ev.normalized.ci_low));
    let _ = writeln!(out, "snorm_ci_high: {}", format_score(ev.normalized.ci_high));
    let _ = writeln!(out, "improvement_pct: {}", format_score(result.improvement_pct()));
    let _ = writeln!(out, "top_n: {}", ev.top_n);
    out
}

/// Runs the full protocol for one loss and writes its run directory under
/// `out/<loss>/`.
pub fn run_experiment(dataset: &Dataset, kind: LossKind, config: &ExperimentConfig, out: &Path) -> Result<ExperimentResult> {
    let ctx = |e: Error| e.context(format!("{kind} experiment"));
    let pool = dataset.train_pool().map_err(ctx)?;
    let dev = dataset.eval_set(Partition::Dev);
    let test = dataset.eval_set(Partition::Test);
    let grid = config.grid(kind);
    let (chosen, entries) = if grid.len() == 1 {
        (grid[0], Vec::new())
    } else {
        let outcome = grid_search(&pool, &grid, config.training.grid_epochs, &dev).map_err(ctx)?;
        log::info!("{kind}: grid search best dev EER {}", outcome.best_dev_eer);
        (outcome.best, outcome.entries)
    };
    let chosen = TrainConfig {
        epochs: config.training.epochs,
        ..chosen
    };
    let run = train(&pool, &chosen, &dev).map_err(ctx)?;
    let best = select_best(&run.checkpoints).map_err(ctx)?;
    let seed = config.training.seed;
    let evaluation = evaluate_encoder(dataset, &best.encoder, config, seed).map_err(ctx)?;
    let untrained_eer = test.eer(&run.checkpoints[0].encoder).map_err(ctx)?;

    let dir = out.join(kind.name());
    let checkpoint_path = dir.join("best.ckpt");
    write_checkpoint(&checkpoint_path, best, &chosen)?;
    let chosen_toml = toml::to_string(&chosen).map_err(|e| Error::format("train config", e.to_string()))?;
    write_text(&dir.join("config.toml"), &chosen_toml)?;
    if !entries.is_empty() {
        write_text(&dir.join("grid.csv"), &grid_csv(&entries))?;
    }
    let mut epochs = String::from("epoch,dev_eer,train_loss\n");
    for c in &run.checkpoints {
        let loss = c.train_loss.map_or(String::new(), format_score);
        let _ = writeln!(epochs, "{},{},{loss}", c.epoch, format_score(c.dev_eer));
    }
    write_text(&dir.join("epochs.csv"), &epochs)?;
    write_scores(&dir.join("test_scores_raw.txt"), &evaluation.raw_scores)?;
    write_scores(&dir.join("test_scores_snorm.txt"), &evaluation.normalized_scores)?;
    write_text(&dir.join("report_raw.txt"), &render_report(&evaluation.raw, None))?;
    write_text(
        &dir.join("report_snorm.txt"),
        &render_report(&evaluation.normalized, Some(evaluation.top_n)),
    )?;
    write_text(&dir.join("det_raw.csv"), &render_det_csv(&det_points(&evaluation.raw_scores)?))?;
    write_text(
        &dir.join("det_snorm.csv"),
        &render_det_csv(&det_points(&evaluation.normalized_scores)?),
    )?;
    let result = ExperimentResult {
        loss: kind,
        config: chosen,
        best_epoch: best.epoch,
        best_dev_eer: best.dev_eer,
        evaluation,
        untrained_eer,
        checkpoint_path,
        grid: entries,
    };
    write_text(&dir.join("report.txt"), &summary(&result))?;
    Ok(result)
}

#[derive(Debug)]
pub struct Comparison {
    pub rows: Vec<(LossKind, Result<ExperimentResult>)>,
    pub csv: String,
}

/// Runs one experiment per loss in parallel and writes `out/comparison.csv`.
/// A failing loss is logged and recorded as a `failed` row.
pub fn compare_losses(dataset: &Dataset, kinds: &[LossKind], config: &ExperimentConfig, out: &Path) -> Result<Comparison> {
    if kinds.is_empty() {
        return Err(Error::domain("compare needs at least one loss"));
    }
    let rows: Vec<(LossKind, Result<ExperimentResult>)> = kinds
        .par_iter()
        .map(|&kind| (kind, run_experiment(dataset, kind, config, out)))
        .collect();
    let mut csv = format!("{COMPARISON_HEADER}\n");
    for (kind, result) in &rows {
        match result {
            Ok(r) => {
                csv.push_str(&r.comparison_row());
                csv.push('\n');
            }
            Err(e) => {
                log::warn!("{kind} failed: {e}");
                let _ = writeln!(csv, "{kind},failed,,,,");
            }
        }
    }
    write_text(&out.join("comparison.csv"), &csv)?;
    Ok(Comparison { rows, csv })
}

/// Point EER of `encoder` on the test trials.
pub fn test_eer(dataset: &Dataset, encoder: &EncoderParams) -> Result<EerReport> {
    eer(&dataset.eval_set(Partition::Test).score(encoder)?)
}
