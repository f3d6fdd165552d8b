//! Experiment configuration: a TOML file with `[dataset]`, `[encoder]`,
//! `[loss]`, `[training]` and `[eval]` sections. Every key is optional and
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::SyntheticDatasetSpec;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::{CenterPenalty, HeadKind, LossConfig, LossFamily, LossKind};
use crate::sampling::SnrRange;
use crate::scoring::formats::read_text;
use crate::scoring::StdFormula;
use crate::trainer::TrainConfig;

/// Overrides applied on top of each loss kind's reference hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    /// Loss used by `train` and `grid-search`.
    pub kind: Option<LossKind>,
    pub alpha: Option<f64>,
    pub margin: Option<f64>,
    pub lambda: Option<f64>,
    pub center_penalty: Option<CenterPenalty>,
    pub center_head: Option<HeadKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub learning_rate: f64,
    /// Epochs of the final run.
    pub epochs: usize,
    /// Epochs per grid-search config.
    pub grid_epochs: usize,
    pub batches_per_epoch: Option<usize>,
    pub lr_grid: Vec<f64>,
    /// Speakers per batch tried for pair and triplet losses.
    pub speakers_grid: Vec<usize>,
    /// Chunks per speaker tried for pair and triplet losses.
    pub chunks_grid: Vec<usize>,
    /// Multipliers applied to each tunable loss hyper-parameter.
    pub param_scales: Vec<f64>,
    /// Use the single configured setting instead of searching the grid.
    pub skip_grid: bool,
    pub augment: bool,
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    pub seed: u64,
    /// Losses run by `compare`.
    pub losses: Vec<LossKind>,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            learning_rate: 0.01,
            epochs: 30,
            grid_epochs: 5,
            batches_per_epoch: None,
            lr_grid: vec![0.001, 0.01, 0.1],
            speakers_grid: vec![20, 40],
            chunks_grid: vec![2, 3],
            param_scales: vec![0.5, 1.0, 2.0],
            skip_grid: false,
            augment: false,
            snr_low_db: 10.0,
            snr_high_db: 20.0,
            seed: 0,
            losses: LossKind::ROSTER.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub n_bootstrap: usize,
    pub confidence: f64,
    pub std_formula: StdFormula,
    /// Candidate cohort top-N sizes tuned on the dev trials.
    pub cohort_sizes: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            n_bootstrap: 1000,
            confidence: 0.95,
            std_formula: StdFormula::Population,
            cohort_sizes: vec![5, 10, 20, 50, 100],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: SyntheticDatasetSpec,
    pub encoder: EncoderConfig,
    pub loss: LossSection,
    pub training: TrainingSection,
    pub eval: EvalSection,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl ExperimentConfig {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: path.to_string(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        config.validate().map_err(|e| Error::Config {
            path: path.to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ExperimentConfig::parse(&read_text(path)?, &path.display().to_string())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        let t = &self.training;
        if t.lr_grid.is_empty() || t.speakers_grid.is_empty() || t.chunks_grid.is_empty() || t.param_scales.is_empty() {
            return Err(Error::domain("training grids must be non-empty"));
        }
        if let Some(bad) = t.lr_grid.iter().find(|&&lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::domain(format!("lr_grid values must be > 0, got {bad}")));
        }
        if let Some(bad) = t.param_scales.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::domain(format!("param_scales values must be > 0, got {bad}")));
        }
        if t.losses.is_empty() {
            return Err(Error::domain("training.losses must name at least one loss"));
        }
        SnrRange::new(t.snr_low_db, t.snr_high_db)?;
        let e = &self.eval;
        if e.n_bootstrap < 100 {
            return Err(Error::domain(format!("n_bootstrap must be >= 100, got {}", e.n_bootstrap)));
        }
        if !(e.confidence > 0.0 && e.confidence < 1.0) {
            return Err(Error::domain(format!("confidence must lie in (0, 1), got {}", e.confidence)));
        }
        if e.cohort_sizes.iter().any(|&n| n < 2) || e.cohort_sizes.is_empty() {
            return Err(Error::domain("cohort_sizes must be non-empty and each >= 2"));
        }
        for &kind in t.losses.iter().chain(&self.loss.kind) {
            self.loss_config(kind).validate()?;
        }
        Ok(())
    }

    /// Reference hyper-parameters for `kind` with the `[loss]` overrides applied.
    pub fn loss_config(&self, kind: LossKind) -> LossConfig {
        let mut cfg = LossConfig::reference(kind);
        let o = &self.loss;
        if let Some(v) = o.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = o.margin {
            cfg.margin = v;
        }
        if let Some(v) = o.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = o.center_penalty {
            cfg.center_penalty = v;
        }
        if let Some(v) = o.center_head {
            cfg.center_head = v;
        }
        cfg
    }

    /// The single configured training setting for `kind`.
    pub fn train_config(&self, kind: LossKind) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            loss: self.loss_config(kind),
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batches_per_epoch: t.batches_per_epoch,
            encoder: self.encoder,
            augment: t.augment.then_some(SnrRange {
                low_db: t.snr_low_db,
                high_db: t.snr_high_db,
            }),
            seed: t.seed,
            ..TrainConfig::for_loss(kind)
        }
    }

    /// Search space for `kind`: learning rates × batch shapes (pair and triplet
    /// losses only) × scaled loss hyper-parameters, in that nesting order.
    pub fn grid(&self, kind: LossKind) -> Vec<TrainConfig> {
        let base = self.train_config(kind);
        if self.training.skip_grid {
            return vec![base];
        }
        let t = &self.training;
        let batches: Vec<(usize, usize)> = match kind.family() {
            LossFamily::Classification => vec![(base.speakers_per_batch, base.chunks_per_speaker)],
            LossFamily::Pairs | LossFamily::Triplets => t
                .speakers_grid
                .iter()
                .flat_map(|&s| t.chunks_grid.iter().map(move |&c| (s, c)))
                .collect(),
        };
        let mut losses = vec![base.loss];
        let scale = |losses: Vec<LossConfig>, set: fn(&mut LossConfig, f64), get: fn(&LossConfig) -> f64| {
            losses
                .iter()
                .flat_map(|l| {
                    t.param_scales.iter().map(move |&s| {
                        let mut v = *l;
                        set(&mut v, get(l) * s);
                        v
                    })
                })
                .collect::<Vec<_>>()
        };
        let alpha = (|l: &mut LossConfig, v| l.alpha = v) as fn(&mut LossConfig, f64);
        let margin = (|l: &mut LossConfig, v| l.margin = v) as fn(&mut LossConfig, f64);
        let lambda = (|l: &mut LossConfig, v| l.lambda = v) as fn(&mut LossConfig, f64);
        match kind {
            LossKind::Coco => losses = scale(losses, alpha, |l| l.alpha),
            LossKind::Aam => {
                losses = scale(losses, alpha, |l| l.alpha);
                losses = scale(losses, margin, |l| l.margin);
            }
            LossKind::Center => losses = scale(losses, lambda, |l| l.lambda),
            LossKind::Contrastive | LossKind::TripletHinge => losses = scale(losses, margin, |l| l.margin),
            LossKind::Ce | LossKind::CeNobias | LossKind::TripletSigmoid => {}
        }
        let mut grid = Vec::new();
        for &lr in &t.lr_grid {
            for &(speakers_per_batch, chunks_per_speaker) in &batches {
                for &loss in &losses {
                    let cfg = TrainConfig {
                        loss,
                        learning_rate: lr,
                        speakers_per_batch,
                        chunks_per_speaker,
                        ..base
                    };
                    if loss.validate().is_ok() && !grid.contains(&cfg) {
                        grid.push(cfg);
                    }
                }
            }
        }
        grid
    }
}
