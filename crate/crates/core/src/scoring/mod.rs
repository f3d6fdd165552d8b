//! Verification back end: cosine trial scoring, adaptive s-norm against a
//! cohort, and EER estimation.

mod eer;
pub mod formats;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

pub use eer::{bootstrap_eers, det_points, eer, eer_bootstrap_ci, EerReport, OperatingPoint};

use crate::embedding::{cosine_similarity, Embedding, FileEmbedding};
use crate::error::{Error, Result};

/// Standard deviations below this make a cohort unusable.
pub const MIN_COHORT_STD: f64 = 1e-12;

/// One enrollment/test comparison.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub enroll: String,
    pub test: String,
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

/// File id → file embedding.
pub type EmbeddingTable = BTreeMap<String, FileEmbedding>;

fn lookup<'a>(table: &'a EmbeddingTable, id: &str, trial: &Trial) -> Result<&'a FileEmbedding> {
    table.get(id).ok_or_else(|| {
        Error::domain(format!(
            "trial ({} {}) references unknown file {id}",
            trial.enroll, trial.test
        ))
    })
}

/// Cosine similarity between the mean embeddings of each trial's files.
pub fn score_trials(trials: &[Trial], table: &EmbeddingTable) -> Result<Vec<ScoredTrial>> {
    trials
        .iter()
        .map(|trial| {
            let e = lookup(table, &trial.enroll, trial)?;
            let t = lookup(table, &trial.test, trial)?;
            let score = cosine_similarity(e.mean(), t.mean())
                .map_err(|err| err.context(format!("scoring trial ({} {})", trial.enroll, trial.test)))?;
            Ok(ScoredTrial {
                trial: trial.clone(),
                score,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdFormula {
    /// Divide by `n`.
    #[default]
    Population,
    /// Divide by `n − 1`.
    Sample,
}

/// File-level embeddings of held-out speakers used for score normalization.
#[derive(Debug, Clone)]
pub struct Cohort {
    embeddings: Vec<Embedding>,
    top_n: usize,
}

impl Cohort {
    pub fn new(embeddings: Vec<Embedding>, top_n: usize) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::domain("cohort is empty"));
        }
        if top_n < 2 || top_n > embeddings.len() {
            return Err(Error::domain(format!(
                "cohort top_n must lie in [2, {}], got {top_n}",
                embeddings.len()
            )));
        }
        Ok(Cohort { embeddings, top_n })
    }

    pub fn embeddings(&self) -> &[Embedding] {
        &self.embeddings
    }

    pub fn top_n(&self) -> usize {
        self.top_n
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn with_top_n(&self, top_n: usize) -> Result<Self> {
        Cohort::new(self.embeddings.clone(), top_n)
    }

    /// Cohort scores of `x`, sorted from most to least similar.
    fn ranked_scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut scores = self
            .embeddings
            .iter()
            .map(|c| cosine_similarity(x, c))
            .collect::<Result<Vec<_>>>()?;
        scores.sort_by(|a, b| b.total_cmp(a));
        Ok(scores)
    }
}

/// Mean and standard deviation of the `top_n` highest cohort scores of one side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CohortStats {
    pub mean: f64,
    pub std: f64,
}

impl CohortStats {
    fn from_ranked(ranked: &[f64], top_n: usize, formula: StdFormula) -> Self {
        let top = &ranked[..top_n];
        let n = top_n as f64;
        let mean = top.iter().sum::<f64>() / n;
        let ss: f64 = top.iter().map(|s| (s - mean) * (s - mean)).sum();
        let denom = match formula {
            StdFormula::Population => n,
            StdFormula::Sample => n - 1.0,
        };
        CohortStats {
            mean,
            std: (ss / denom).sqrt(),
        }
    }

    pub fn compute(x: &[f64], cohort: &Cohort, formula: StdFormula) -> Result<Self> {
        let ranked = cohort.ranked_scores(x)?;
        Ok(CohortStats::from_ranked(&ranked, cohort.top_n, formula))
    }
}

fn snorm_from_stats(raw: f64, e: CohortStats, t: CohortStats) -> Result<f64> {
    if e.std < MIN_COHORT_STD {
        return Err(Error::DegenerateCohort {
            side: "enrollment",
            sigma: e.std,
        });
    }
    if t.std < MIN_COHORT_STD {
        return Err(Error::DegenerateCohort {
            side: "test",
            sigma: t.std,
        });
    }
    Ok(0.5 * ((raw - e.mean) / e.std + (raw - t.mean) / t.std))
}

/// Adaptive symmetric normalization:
/// `½·((raw − μ_e)/σ_e + (raw − μ_t)/σ_t)` with each side's statistics taken
/// over its `top_n` most similar cohort members.
pub fn adaptive_snorm(raw: f64, enroll: &[f64], test: &[f64], cohort: &Cohort, formula: StdFormula) -> Result<f64> {
    let e = CohortStats::compute(enroll, cohort, formula)?;
    let t = CohortStats::compute(test, cohort, formula)?;
    snorm_from_stats(raw, e, t)
}

/// Ranked cohort scores of every file in `table`, computed once and reused for
/// any `top_n`.
pub struct CohortCache {
    ranked: HashMap<String, Vec<f64>>,
}

impl CohortCache {
    pub fn build(table: &EmbeddingTable, cohort: &Cohort) -> Result<Self> {
        let ranked = table
            .iter()
            .map(|(id, f)| Ok((id.clone(), cohort.ranked_scores(f.mean())?)))
            .collect::<Result<_>>()?;
        Ok(CohortCache { ranked })
    }

    fn stats(&self, id: &str, top_n: usize, formula: StdFormula) -> Result<CohortStats> {
        let ranked = self
            .ranked
            .get(id)
            .ok_or_else(|| Error::domain(format!("no cohort scores for file {id}")))?;
        if top_n < 2 || top_n > ranked.len() {
            return Err(Error::domain(format!(
                "cohort top_n must lie in [2, {}], got {top_n}",
                ranked.len()
            )));
        }
        Ok(CohortStats::from_ranked(ranked, top_n, formula))
    }

    /// Normalizes every trial's score with `top_n` cohort members per side.
    pub fn normalize(&self, trials: &[ScoredTrial], top_n: usize, formula: StdFormula) -> Result<Vec<ScoredTrial>> {
        trials
            .iter()
            .map(|st| {
                let e = self.stats(&st.trial.enroll, top_n, formula)?;
                let t = self.stats(&st.trial.test, top_n, formula)?;
                let score = snorm_from_stats(st.score, e, t)
                    .map_err(|err| err.context(format!("normalizing trial ({} {})", st.trial.enroll, st.trial.test)))?;
                Ok(ScoredTrial {
                    trial: st.trial.clone(),
                    score,
                })
            })
            .collect()
    }
}

/// Normalizes scored trials against `cohort` (using its own `top_n`).
pub fn normalize_trials(
    trials: &[ScoredTrial],
    table: &EmbeddingTable,
    cohort: &Cohort,
    formula: StdFormula,
) -> Result<Vec<ScoredTrial>> {
    CohortCache::build(table, cohort)?.normalize(trials, cohort.top_n, formula)
}

/// Picks the cohort size minimizing the normalized dev EER; ties go to the
/// smaller size. Sizes that fail (degenerate statistics, out of range) are
/// skipped with a warning.
pub fn tune_cohort_size(
    dev: &[ScoredTrial],
    table: &EmbeddingTable,
    cohort: &Cohort,
    candidates: &[usize],
    formula: StdFormula,
) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::domain("no candidate cohort sizes"));
    }
    let cache = CohortCache::build(table, cohort)?;
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best: Option<(f64, usize)> = None;
    for top_n in sorted {
        let eer = cache.normalize(dev, top_n, formula).and_then(|n| eer(&n));
        match eer {
            Ok(r) => {
                if best.is_none_or(|(b, _)| r.eer < b) {
                    best = Some((r.eer, top_n));
                }
            }
            Err(err) => log::warn!("cohort size {top_n} disqualified: {err}"),
        }
    }
    best.map(|(_, n)| n)
        .ok_or_else(|| Error::domain("every candidate cohort size was disqualified"))
}
