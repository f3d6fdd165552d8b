//! SGD training loop, dev-set model selection and grid search.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{Embedding, FileEmbedding};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossFamily, LossKind, LossOutput, LossParams};
use crate::sampling::{
    augment_rows, form_pairs, form_triplets, BalancedSampler, BatchMode, BatchSpec, LabeledBatch, SnrRange,
    SpeakerPool, TupleIndex,
};
use crate::scoring::{eer, score_trials, EmbeddingTable, ScoredTrial, Trial};

/// Everything that determines one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Defaults to enough batches to visit every training chunk once.
    pub batches_per_epoch: Option<usize>,
    pub speakers_per_batch: usize,
    pub chunks_per_speaker: usize,
    pub encoder: EncoderConfig,
    /// On-the-fly noise added to every training batch.
    pub augment: Option<SnrRange>,
    pub seed: u64,
}

impl TrainConfig {
    /// Reference hyper-parameters for `kind`: lr 0.01, 30 epochs, 128 speakers
    /// × 1 chunk for classification losses and 40 × 3 for contrast losses.
    pub fn for_loss(kind: LossKind) -> Self {
        let (speakers_per_batch, chunks_per_speaker) = match kind.family() {
            LossFamily::Classification => (128, 1),
            LossFamily::Pairs | LossFamily::Triplets => (40, 3),
        };
        TrainConfig {
            loss: LossConfig::reference(kind),
            learning_rate: 0.01,
            epochs: 30,
            batches_per_epoch: None,
            speakers_per_batch,
            chunks_per_speaker,
            encoder: EncoderConfig::default(),
            augment: None,
            seed: 0,
        }
    }

    pub fn batch_spec(&self) -> BatchSpec {
        let mode = match self.loss.kind.family() {
            LossFamily::Classification => BatchMode::Classification,
            LossFamily::Pairs => BatchMode::Pairs,
            LossFamily::Triplets => BatchMode::Triplets,
        };
        BatchSpec {
            speakers_per_batch: self.speakers_per_batch,
            chunks_per_speaker: self.chunks_per_speaker,
            mode,
        }
    }

    /// `learning_rate = 0` is accepted so that a frozen run can serve as a baseline.
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::domain(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batches_per_epoch == Some(0) {
            return Err(Error::domain("batches_per_epoch must be positive"));
        }
        if self.encoder.hidden_dim == 0 || self.encoder.embedding_dim == 0 {
            return Err(Error::domain("encoder dimensions must be positive"));
        }
        self.batch_spec().validate()
    }
}

/// Files and trials of one evaluation partition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalSet {
    /// File id → chunk features, one row per chunk.
    pub files: BTreeMap<String, Array2<f64>>,
    pub trials: Vec<Trial>,
}

impl EvalSet {
    /// File-level embeddings: the mean over each file's chunk embeddings.
    pub fn embed(&self, encoder: &EncoderParams) -> Result<EmbeddingTable> {
        embed_files(&self.files, encoder)
    }

    pub fn score(&self, encoder: &EncoderParams) -> Result<Vec<ScoredTrial>> {
        score_trials(&self.trials, &self.embed(encoder)?)
    }

    pub fn eer(&self, encoder: &EncoderParams) -> Result<f64> {
        Ok(eer(&self.score(encoder)?)?.eer)
    }
}

pub fn embed_files(files: &BTreeMap<String, Array2<f64>>, encoder: &EncoderParams) -> Result<EmbeddingTable> {
    files
        .par_iter()
        .map(|(id, chunks)| {
            let rows = encoder.embed(chunks.view())?;
            let chunk_embeddings = rows
                .rows()
                .into_iter()
                .map(|r| Embedding::new(r.to_vec()))
                .collect::<Result<Vec<_>>>()?;
            let file = FileEmbedding::from_chunks(chunk_embeddings).map_err(|e| e.context(format!("file {id}")))?;
            Ok((id.clone(), file))
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().collect())
}

/// Model state at the end of an epoch; epoch 0 is the initialization.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub encoder: EncoderParams,
    pub heads: LossParams,
    pub dev_eer: f64,
    /// Mean batch loss over the epoch; absent for epoch 0.
    pub train_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub checkpoints: Vec<Checkpoint>,
    /// Loss of every SGD batch, in order.
    pub batch_losses: Vec<f64>,
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn tuples_for(family: LossFamily, batch: &LabeledBatch) -> Result<TupleIndex> {
    match family {
        LossFamily::Classification => Ok(TupleIndex::default()),
        LossFamily::Pairs => form_pairs(batch),
        LossFamily::Triplets => form_triplets(batch),
    }
}

fn check_output(out: &LossOutput, batch: usize) -> Result<()> {
    let non_finite = |what: &str| Error::NonFinite {
        batch,
        what: what.to_string(),
    };
    if !out.value.is_finite() {
        return Err(non_finite("loss value"));
    }
    if out.grad_embeddings.iter().any(|v| !v.is_finite()) {
        return Err(non_finite("embedding gradient"));
    }
    Ok(())
}

/// Trains from a fresh initialization, returning checkpoints for epochs
/// `0..=epochs`. Deterministic given `config.seed`.
pub fn train(pool: &SpeakerPool, config: &TrainConfig, dev: &EvalSet) -> Result<TrainRun> {
    config.validate()?;
    let mut spec = config.batch_spec();
    if spec.speakers_per_batch > pool.n_speakers() {
        log::info!(
            "speakers_per_batch {} exceeds the {} training speakers; using {}",
            spec.speakers_per_batch,
            pool.n_speakers(),
            pool.n_speakers()
        );
        spec.speakers_per_batch = pool.n_speakers();
    }
    spec.validate()?;
    let total_chunks: usize = (0..pool.n_speakers())
        .map(|k| pool.speaker_chunks(crate::SpeakerId(k)).nrows())
        .sum();
    let batches_per_epoch = config
        .batches_per_epoch
        .unwrap_or_else(|| total_chunks.div_ceil(spec.batch_size()));

    let mut init_rng = seeded(config.seed, 0);
    let mut encoder = EncoderParams::init(pool.dim(), &config.encoder, &mut init_rng)?;
    let mut heads = config
        .loss
        .init_params(pool.n_speakers(), config.encoder.embedding_dim, &mut init_rng);
    let mut rng = seeded(config.seed, 1);
    let mut sampler = BalancedSampler::new(pool, spec)?;
    let family = config.loss.kind.family();

    let dev_eer = |encoder: &EncoderParams, epoch: usize| {
        dev.eer(encoder)
            .map_err(|e| e.context(format!("dev evaluation after epoch {epoch}")))
    };
    let mut checkpoints = vec![Checkpoint {
        epoch: 0,
        dev_eer: dev_eer(&encoder, 0)?,
        encoder: encoder.clone(),
        heads: heads.clone(),
        train_loss: None,
    }];
    let mut batch_losses = Vec::with_capacity(config.epochs * batches_per_epoch);
    for epoch in 1..=config.epochs {
        let mut epoch_loss = 0.0;
        for b in 0..batches_per_epoch {
            let index = (epoch - 1) * batches_per_epoch + b;
            let with_batch = |e: Error| e.context(format!("batch {index}"));
            let (mut rows, labels) = sampler.next_batch(pool, &mut rng).into_parts();
            if let Some(range) = &config.augment {
                augment_rows(&mut rows, range, &mut rng).map_err(with_batch)?;
            }
            let (embeddings, cache) = encoder.forward(rows.view()).map_err(with_batch)?;
            let batch = LabeledBatch::new(embeddings, labels).map_err(with_batch)?;
            let tuples = tuples_for(family, &batch).map_err(with_batch)?;
            let out = config.loss.evaluate(&batch, &tuples, &heads).map_err(with_batch)?;
            check_output(&out, index)?;
            let grads = encoder.backward(&cache, out.grad_embeddings.view()).map_err(with_batch)?;
            encoder.sgd_step(&grads, config.learning_rate);
            heads.sgd_step(&out, config.learning_rate);
            if !encoder.is_finite() || !heads.is_finite() {
                return Err(Error::NonFinite {
                    batch: index,
                    what: "parameter after SGD step".into(),
                });
            }
            epoch_loss += out.value;
            batch_losses.push(out.value);
        }
        log::debug!("{} epoch {epoch}: mean loss {}", config.loss.kind, epoch_loss / batches_per_epoch as f64);
        checkpoints.push(Checkpoint {
            epoch,
            dev_eer: dev_eer(&encoder, epoch)?,
            encoder: encoder.clone(),
            heads: heads.clone(),
            train_loss: Some(epoch_loss / batches_per_epoch as f64),
        });
    }
    Ok(TrainRun {
        checkpoints,
        batch_losses,
    })
}

/// Lowest dev EER; ties go to the earliest epoch.
pub fn select_best(checkpoints: &[Checkpoint]) -> Result<&Checkpoint> {
    checkpoints
        .iter()
        .reduce(|best, c| if c.dev_eer < best.dev_eer { c } else { best })
        .ok_or_else(|| Error::domain("no checkpoints to select from"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridEntry {
    pub config: TrainConfig,
    /// Best dev EER reached, or the reason the config was disqualified.
    pub outcome: std::result::Result<f64, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub best: TrainConfig,
    pub best_dev_eer: f64,
    pub entries: Vec<GridEntry>,
}

/// Trains every config for `budget_epochs` and returns the one whose best dev
/// EER is lowest; ties go to the earliest config in grid order. Distinct
/// configs train in parallel. Failing configs are disqualified with a warning.
pub fn grid_search(pool: &SpeakerPool, grid: &[TrainConfig], budget_epochs: usize, dev: &EvalSet) -> Result<GridOutcome> {
    if grid.is_empty() {
        return Err(Error::domain("grid search needs at least one config"));
    }
    let entries: Vec<GridEntry> = grid
        .par_iter()
        .map(|config| {
            let budgeted = TrainConfig {
                epochs: budget_epochs,
                ..*config
            };
            let outcome = train(pool, &budgeted, dev)
                .and_then(|run| select_best(&run.checkpoints).map(|c| c.dev_eer))
                .map_err(|e| e.to_string());
            GridEntry {
                config: *config,
                outcome,
            }
        })
        .collect();
    let mut best: Option<(f64, TrainConfig)> = None;
    for entry in &entries {
        match &entry.outcome {
            Ok(e) => {
                if best.is_none_or(|(b, _)| *e < b) {
                    best = Some((*e, entry.config));
                }
            }
            Err(msg) => log::warn!(
                "{} config (lr {}) disqualified: {msg}",
                entry.config.loss.kind,
                entry.config.learning_rate
            ),
        }
    }
    let (best_dev_eer, best) = best.ok_or_else(|| Error::domain("every grid config was disqualified"))?;
    Ok(GridOutcome {
        best,
        best_dev_eer,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::SpeakerId;
    use rand::Rng;

    fn checkpoint(epoch: usize, dev_eer: f64) -> Checkpoint {
        let enc = EncoderParams::init(2, &EncoderConfig::default(), &mut seeded(0, 0)).unwrap();
        Checkpoint {
            epoch,
            encoder: enc,
            heads: LossParams::default(),
            dev_eer,
            train_loss: None,
        }
    }

    /// Four speakers around orthogonal-ish directions plus a matching dev set.
    fn fixture(spread: f64, seed: u64) -> (SpeakerPool, EvalSet) {
        let dim = 6;
        let mut rng = seeded(seed, 9);
        let centers: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let draw = |c: &[f64], n: usize, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((n, dim), |(_, d)| c[d] + spread * rng.random_range(-1.0..1.0))
        };
        let pool = SpeakerPool::new((0..4).map(|k| draw(&centers[k], 12, &mut rng)).collect()).unwrap();
        let mut dev = EvalSet::default();
        for k in 4..8 {
            for f in 0..3 {
                dev.files.insert(format!("s{k}-f{f}"), draw(&centers[k], 3, &mut rng));
            }
        }
        for k in 4..8 {
            for f in 1..3 {
                dev.trials.push(Trial {
                    enroll: format!("s{k}-f0"),
                    test: format!("s{k}-f{f}"),
                    is_target: true,
                });
                dev.trials.push(Trial {
                    enroll: format!("s{k}-f0"),
                    test: format!("s{}-f{f}", 4 + (k - 3) % 4),
                    is_target: false,
                });
            }
        }
        (pool, dev)
    }

    fn small(kind: LossKind) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            batches_per_epoch: Some(4),
            speakers_per_batch: 4,
            chunks_per_speaker: if kind.family() == LossFamily::Classification { 1 } else { 2 },
            encoder: EncoderConfig {
                hidden_dim: 8,
                embedding_dim: 4,
                ..EncoderConfig::default()
            },
            ..TrainConfig::for_loss(kind)
        }
    }

    #[test]
    fn select_best_examples() {
        let cps: Vec<_> = [0.3, 0.1, 0.2].iter().enumerate().map(|(i, &e)| checkpoint(i, e)).collect();
        assert_eq!(select_best(&cps).unwrap().epoch, 1);
        let tie = vec![checkpoint(0, 0.2), checkpoint(1, 0.2)];
        assert_eq!(select_best(&tie).unwrap().epoch, 0);
        assert_eq!(select_best(&cps[2..]).unwrap().epoch, 2);
        assert!(select_best(&[]).is_err());
    }

    #[test]
    fn zero_learning_rate_freezes_everything() {
        let (pool, dev) = fixture(0.3, 1);
        for kind in [LossKind::Aam, LossKind::Center, LossKind::Contrastive] {
            let cfg = TrainConfig {
                learning_rate: 0.0,
                ..small(kind)
            };
            let run = train(&pool, &cfg, &dev).unwrap();
            assert_eq!(run.checkpoints.len(), 4);
            let first = &run.checkpoints[0];
            for c in &run.checkpoints {
                assert_eq!(c.encoder, first.encoder);
                assert_eq!(c.heads, first.heads);
                assert_eq!(c.dev_eer, first.dev_eer);
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (pool, dev) = fixture(0.3, 2);
        let cfg = TrainConfig {
            augment: Some(SnrRange::default()),
            ..small(LossKind::TripletSigmoid)
        };
        let a = train(&pool, &cfg, &dev).unwrap();
        let b = train(&pool, &cfg, &dev).unwrap();
        assert_eq!(a, b);
        let c = train(&pool, &TrainConfig { seed: 1, ..cfg }, &dev).unwrap();
        assert_ne!(a.checkpoints[1].encoder, c.checkpoints[1].encoder);
    }

    #[test]
    fn aam_loss_decreases_on_separable_pair() {
        // two speakers whose chunks are all identical, so every batch is the
        // same two rows and each SGD step descends one fixed objective
        let dim = 4;
        let pool = SpeakerPool::new(vec![
            Array2::from_shape_fn((5, dim), |(_, d)| if d == 0 { 1.0 } else { 0.1 }),
            Array2::from_shape_fn((5, dim), |(_, d)| if d == 1 { 1.0 } else { -0.1 }),
        ])
        .unwrap();
        let mut dev = EvalSet::default();
        dev.files.insert("a".into(), pool.speaker_chunks(SpeakerId(0)).to_owned());
        dev.files.insert("b".into(), pool.speaker_chunks(SpeakerId(1)).to_owned());
        dev.files.insert("c".into(), pool.speaker_chunks(SpeakerId(0)).to_owned());
        dev.trials = vec![
            Trial { enroll: "a".into(), test: "c".into(), is_target: true },
            Trial { enroll: "a".into(), test: "b".into(), is_target: false },
        ];
        let cfg = TrainConfig {
            epochs: 1,
            batches_per_epoch: Some(20),
            ..small(LossKind::Aam)
        };
        assert_eq!((cfg.loss.alpha, cfg.loss.margin, cfg.learning_rate), (10.0, 0.05, 0.01));
        let run = train(&pool, &cfg, &dev).unwrap();
        assert_eq!(run.batch_losses.len(), 20);
        for w in run.batch_losses.windows(2) {
            assert!(w[1] < w[0], "{:?}", run.batch_losses);
        }
    }

    #[test]
    fn every_kind_trains_finitely() {
        let (pool, dev) = fixture(0.3, 3);
        for kind in LossKind::ALL {
            let run = train(&pool, &small(kind), &dev).unwrap();
            for c in &run.checkpoints {
                assert!((0.0..=1.0).contains(&c.dev_eer), "{kind}");
                assert!(c.encoder.is_finite() && c.heads.is_finite(), "{kind}");
            }
            assert!(run.batch_losses.iter().all(|l| l.is_finite()), "{kind}");
        }
    }

    #[test]
    fn exploding_run_names_the_batch() {
        let (pool, dev) = fixture(0.3, 4);
        let cfg = TrainConfig {
            learning_rate: 1e300,
            ..small(LossKind::Ce)
        };
        match train(&pool, &cfg, &dev) {
            Err(Error::NonFinite { batch, .. }) => assert!(batch < 12),
            Err(Error::Context { context, .. }) => assert!(context.starts_with("batch ") || context.contains("epoch")),
            other => panic!("expected a non-finite failure, got {other:?}"),
        }
    }

    /// Speaker identity lives in the first two dimensions; the rest carry a
    /// large per-file nuisance an untrained encoder mixes into its output.
    fn nuisance_fixture() -> (SpeakerPool, EvalSet) {
        let dim = 6;
        let mut rng = seeded(7, 9);
        let file = |rng: &mut ChaCha8Rng, angle: f64, n: usize| {
            let nuisance: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            Array2::from_shape_fn((n, dim), |(_, d)| match d {
                0 => angle.cos(),
                1 => angle.sin(),
                _ => nuisance[d],
            })
        };
        let angles: Vec<f64> = (0..18).map(|k| k as f64 * std::f64::consts::TAU / 18.0).collect();
        // train on every angle not used by a dev speaker
        let pool = SpeakerPool::new(
            (0..18)
                .filter(|k| k % 3 != 1)
                .map(|k| {
                    let views: Vec<Array2<f64>> = (0..8).map(|_| file(&mut rng, angles[k], 1)).collect();
                    ndarray::concatenate(ndarray::Axis(0), &views.iter().map(|v| v.view()).collect::<Vec<_>>()).unwrap()
                })
                .collect(),
        )
        .unwrap();
        let mut dev = EvalSet::default();
        let dev_speakers = [1usize, 4, 7, 10, 13, 16];
        for &k in &dev_speakers {
            for f in 0..4 {
                dev.files.insert(format!("s{k}-f{f}"), file(&mut rng, angles[k] + 0.1, 2));
            }
        }
        for (i, &k) in dev_speakers.iter().enumerate() {
            let other = dev_speakers[(i + 1) % dev_speakers.len()];
            for f in 0..4 {
                for g in f + 1..4 {
                    dev.trials.push(Trial {
                        enroll: format!("s{k}-f{f}"),
                        test: format!("s{k}-f{g}"),
                        is_target: true,
                    });
                    dev.trials.push(Trial {
                        enroll: format!("s{k}-f{f}"),
                        test: format!("s{other}-f{g}"),
                        is_target: false,
                    });
                }
            }
        }
        (pool, dev)
    }

    #[test]
    fn grid_search_examples() {
        let (pool, dev) = nuisance_fixture();
        let base = TrainConfig {
            learning_rate: 0.1,
            ..small(LossKind::Coco)
        };
        let single = grid_search(&pool, &[base], 2, &dev).unwrap();
        assert_eq!(single.best, base);

        let frozen = TrainConfig {
            learning_rate: 0.0,
            ..base
        };
        let out = grid_search(&pool, &[frozen, base], 20, &dev).unwrap();
        assert_eq!(out.entries.len(), 2);
        let eers: Vec<f64> = out.entries.iter().map(|e| *e.outcome.as_ref().unwrap()).collect();
        assert_eq!(out.best, base, "{eers:?}");
        assert!(eers[1] < eers[0], "{eers:?}");

        let broken = TrainConfig {
            learning_rate: f64::NAN,
            ..base
        };
        let out = grid_search(&pool, &[broken, base], 1, &dev).unwrap();
        assert_eq!(out.best, base);
        assert!(out.entries[0].outcome.is_err());
        assert!(grid_search(&pool, &[], 1, &dev).is_err());
    }
}
