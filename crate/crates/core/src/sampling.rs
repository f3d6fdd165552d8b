//! Speaker-balanced mini-batches, exhaustive in-batch tuple formation and
//! additive-noise augmentation.

use std::collections::VecDeque;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::SpeakerId;
use crate::error::{check_dim, Error, Result};

/// Rows (features or embeddings) with one speaker label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    rows: Array2<f64>,
    labels: Vec<SpeakerId>,
}

impl LabeledBatch {
    pub fn new(rows: Array2<f64>, labels: Vec<SpeakerId>) -> Result<Self> {
        check_dim("batch labels", rows.nrows(), labels.len())?;
        Ok(LabeledBatch { rows, labels })
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn labels(&self) -> &[SpeakerId] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> SpeakerId {
        self.labels[i]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Same labels, different rows (e.g. the encoder's output for this batch).
    pub fn with_rows(&self, rows: Array2<f64>) -> Result<Self> {
        LabeledBatch::new(rows, self.labels.clone())
    }

    pub fn into_parts(self) -> (Array2<f64>, Vec<SpeakerId>) {
        (self.rows, self.labels)
    }

    fn distinct_labels(&self) -> usize {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchMode {
    Classification,
    Pairs,
    Triplets,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub speakers_per_batch: usize,
    pub chunks_per_speaker: usize,
    pub mode: BatchMode,
}

impl BatchSpec {
    /// 128 chunks from 128 different speakers.
    pub fn classification() -> Self {
        BatchSpec {
            speakers_per_batch: 128,
            chunks_per_speaker: 1,
            mode: BatchMode::Classification,
        }
    }

    pub fn pairs(speakers: usize, chunks: usize) -> Self {
        BatchSpec {
            speakers_per_batch: speakers,
            chunks_per_speaker: chunks,
            mode: BatchMode::Pairs,
        }
    }

    pub fn triplets(speakers: usize, chunks: usize) -> Self {
        BatchSpec {
            speakers_per_batch: speakers,
            chunks_per_speaker: chunks,
            mode: BatchMode::Triplets,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.speakers_per_batch * self.chunks_per_speaker
    }

    pub fn validate(&self) -> Result<()> {
        if self.speakers_per_batch == 0 || self.chunks_per_speaker == 0 {
            return Err(Error::domain("batch spec needs at least one speaker and one chunk"));
        }
        match self.mode {
            BatchMode::Classification => Ok(()),
            BatchMode::Pairs | BatchMode::Triplets => {
                if self.chunks_per_speaker < 2 {
                    return Err(Error::domain("pair and triplet batches need >= 2 chunks per speaker"));
                }
                if self.speakers_per_batch < 2 {
                    return Err(Error::domain("pair and triplet batches need >= 2 speakers"));
                }
                Ok(())
            }
        }
    }
}

/// Training chunks grouped by speaker; speaker `k` owns `chunks[k]`, one row per chunk.
#[derive(Debug, Clone)]
pub struct SpeakerPool {
    dim: usize,
    chunks: Vec<Array2<f64>>,
}

impl SpeakerPool {
    pub fn new(chunks: Vec<Array2<f64>>) -> Result<Self> {
        let dim = chunks
            .first()
            .map(|c| c.ncols())
            .ok_or_else(|| Error::domain("speaker pool is empty"))?;
        for c in &chunks {
            check_dim("speaker pool feature dimension", dim, c.ncols())?;
        }
        Ok(SpeakerPool { dim, chunks })
    }

    pub fn n_speakers(&self) -> usize {
        self.chunks.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn speaker_chunks(&self, speaker: SpeakerId) -> ArrayView2<'_, f64> {
        self.chunks[speaker.index()].view()
    }

    fn check_capacity(&self, spec: &BatchSpec) -> Result<()> {
        spec.validate()?;
        if self.n_speakers() < spec.speakers_per_batch {
            return Err(Error::domain(format!(
                "batch needs {} speakers but the pool has {}",
                spec.speakers_per_batch,
                self.n_speakers()
            )));
        }
        if let Some((k, c)) = self
            .chunks
            .iter()
            .enumerate()
            .find(|(_, c)| c.nrows() < spec.chunks_per_speaker)
        {
            return Err(Error::domain(format!(
                "speaker {k} has {} chunks, batch needs {}",
                c.nrows(),
                spec.chunks_per_speaker
            )));
        }
        Ok(())
    }

    fn assemble<R: Rng + ?Sized>(&self, speakers: &[usize], per_speaker: usize, rng: &mut R) -> LabeledBatch {
        let mut rows = Array2::zeros((speakers.len() * per_speaker, self.dim));
        let mut labels = Vec::with_capacity(speakers.len() * per_speaker);
        let mut r = 0;
        for &k in speakers {
            let pool = &self.chunks[k];
            for c in index::sample(rng, pool.nrows(), per_speaker) {
                rows.row_mut(r).assign(&pool.row(c));
                labels.push(SpeakerId(k));
                r += 1;
            }
        }
        LabeledBatch { rows, labels }
    }
}

/// One balanced batch with speakers drawn uniformly without replacement.
pub fn balanced_batch<R: Rng + ?Sized>(pool: &SpeakerPool, spec: &BatchSpec, rng: &mut R) -> Result<LabeledBatch> {
    pool.check_capacity(spec)?;
    let speakers = index::sample(rng, pool.n_speakers(), spec.speakers_per_batch).into_vec();
    Ok(pool.assemble(&speakers, spec.chunks_per_speaker, rng))
}

/// Draws balanced batches while cycling through shuffled passes over all
/// speakers, so that every speaker is visited once per pass.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    spec: BatchSpec,
    queue: VecDeque<usize>,
}

impl BalancedSampler {
    pub fn new(pool: &SpeakerPool, spec: BatchSpec) -> Result<Self> {
        pool.check_capacity(&spec)?;
        Ok(BalancedSampler {
            spec,
            queue: VecDeque::new(),
        })
    }

    pub fn spec(&self) -> &BatchSpec {
        &self.spec
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, pool: &SpeakerPool, rng: &mut R) -> LabeledBatch {
        let need = self.spec.speakers_per_batch;
        if self.queue.len() < need {
            let mut pass: Vec<usize> = (0..pool.n_speakers()).collect();
            pass.shuffle(rng);
            self.queue.extend(pass);
        }
        let mut chosen = Vec::with_capacity(need);
        let mut deferred = Vec::new();
        while chosen.len() < need {
            let k = self.queue.pop_front().expect("a full pass holds enough distinct speakers");
            if chosen.contains(&k) {
                deferred.push(k);
            } else {
                chosen.push(k);
            }
        }
        for k in deferred.into_iter().rev() {
            self.queue.push_front(k);
        }
        pool.assemble(&chosen, self.spec.chunks_per_speaker, rng)
    }
}

/// Index lists of all positive pairs, negative pairs and triplets in a batch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TupleIndex {
    pub positives: Vec<(usize, usize)>,
    pub negatives: Vec<(usize, usize)>,
    pub triplets: Vec<(usize, usize, usize)>,
}

/// Every unordered pair `i < j`, split by label equality.
pub fn form_pairs(batch: &LabeledBatch) -> Result<TupleIndex> {
    if batch.len() < 2 {
        return Err(Error::domain("forming pairs needs at least 2 samples"));
    }
    let mut out = TupleIndex::default();
    let labels = batch.labels();
    for i in 0..labels.len() {
        for j in i + 1..labels.len() {
            if labels[i] == labels[j] {
                out.positives.push((i, j));
            } else {
                out.negatives.push((i, j));
            }
        }
    }
    Ok(out)
}

/// Every `(a, p, n)` with `y_a == y_p`, `a != p` (ordered) and `y_n != y_a`.
pub fn form_triplets(batch: &LabeledBatch) -> Result<TupleIndex> {
    if batch.len() < 2 {
        return Err(Error::domain("forming triplets needs at least 2 samples"));
    }
    let labels = batch.labels();
    if batch.distinct_labels() == 1 {
        return Ok(TupleIndex::default());
    }
    let mut triplets = Vec::new();
    for a in 0..labels.len() {
        for p in 0..labels.len() {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for n in 0..labels.len() {
                if labels[n] != labels[a] {
                    triplets.push((a, p, n));
                }
            }
        }
    }
    Ok(TupleIndex {
        triplets,
        ..TupleIndex::default()
    })
}

/// Closed interval of signal-to-noise ratios in dB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnrRange {
    pub low_db: f64,
    pub high_db: f64,
}

impl SnrRange {
    pub fn new(low_db: f64, high_db: f64) -> Result<Self> {
        if !(low_db.is_finite() && high_db.is_finite() && low_db <= high_db) {
            return Err(Error::domain(format!("invalid SNR range [{low_db}, {high_db}]")));
        }
        Ok(SnrRange { low_db, high_db })
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.low_db == self.high_db {
            self.low_db
        } else {
            rng.random_range(self.low_db..=self.high_db)
        }
    }
}

impl Default for SnrRange {
    fn default() -> Self {
        SnrRange {
            low_db: 10.0,
            high_db: 20.0,
        }
    }
}

pub fn mean_power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Adds white Gaussian noise at an SNR drawn uniformly from `range`.
///
/// The noise is rescaled so that its mean power is exactly
/// `signal_power / 10^(snr/10)`. Returns the noisy features and the drawn SNR.
pub fn augment_chunk<R: Rng + ?Sized>(features: &[f64], range: &SnrRange, rng: &mut R) -> Result<(Vec<f64>, f64)> {
    if features.is_empty() || features.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("augment_chunk needs a non-empty finite feature vector"));
    }
    let signal = mean_power(features);
    if signal == 0.0 {
        return Err(Error::domain("augment_chunk: SNR undefined for an all-zero feature vector"));
    }
    let range = SnrRange::new(range.low_db, range.high_db)?;
    let snr_db = range.draw(rng);
    let noise: Vec<f64> = (0..features.len()).map(|_| rng.sample(StandardNormal)).collect();
    let drawn = mean_power(&noise);
    let scale = if drawn > 0.0 {
        (signal / 10f64.powf(snr_db / 10.0) / drawn).sqrt()
    } else {
        0.0
    };
    let out = features.iter().zip(&noise).map(|(x, n)| x + scale * n).collect();
    Ok((out, snr_db))
}

/// Applies [`augment_chunk`] to every row of `rows`.
pub fn augment_rows<R: Rng + ?Sized>(rows: &mut Array2<f64>, range: &SnrRange, rng: &mut R) -> Result<()> {
    for mut row in rows.axis_iter_mut(Axis(0)) {
        let (noisy, _) = augment_chunk(row.as_slice().expect("row-major rows"), range, rng)?;
        row.assign(&ndarray::Array1::from(noisy));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    fn pool(speakers: usize, chunks: usize, dim: usize) -> SpeakerPool {
        SpeakerPool::new(
            (0..speakers)
                .map(|k| Array2::from_shape_fn((chunks, dim), |(c, d)| (k * 1000 + c * 10 + d) as f64))
                .collect(),
        )
        .unwrap()
    }

    fn label_counts(b: &LabeledBatch) -> HashMap<SpeakerId, usize> {
        let mut m = HashMap::new();
        for &l in b.labels() {
            *m.entry(l).or_default() += 1;
        }
        m
    }

    #[test]
    fn classification_batch_has_distinct_speakers() {
        let p = pool(150, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = balanced_batch(&p, &BatchSpec::classification(), &mut rng).unwrap();
        assert_eq!(b.len(), 128);
        assert_eq!(label_counts(&b).len(), 128);
    }

    #[test]
    fn pair_batch_is_balanced_without_replacement() {
        let p = pool(30, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = balanced_batch(&p, &BatchSpec::pairs(20, 3), &mut rng).unwrap();
        assert_eq!(b.len(), 60);
        let counts = label_counts(&b);
        assert_eq!(counts.len(), 20);
        assert!(counts.values().all(|&c| c == 3));
        // rows of one speaker are distinct chunks
        for k in counts.keys() {
            let mut firsts: Vec<f64> = (0..b.len()).filter(|&i| b.label(i) == *k).map(|i| b.rows()[[i, 0]]).collect();
            firsts.sort_by(f64::total_cmp);
            firsts.dedup();
            assert_eq!(firsts.len(), 3);
            assert!(firsts.iter().all(|v| (*v as usize) / 1000 == k.index()));
        }
    }

    #[test]
    fn insufficient_pool_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(balanced_batch(&pool(10, 5, 2), &BatchSpec::pairs(20, 3), &mut rng).is_err());
        assert!(balanced_batch(&pool(30, 2, 2), &BatchSpec::pairs(20, 3), &mut rng).is_err());
        assert!(BalancedSampler::new(&pool(10, 5, 2), BatchSpec::pairs(20, 3)).is_err());
        assert!(BatchSpec::pairs(20, 1).validate().is_err());
    }

    #[test]
    fn batches_are_deterministic() {
        let p = pool(25, 4, 2);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = BalancedSampler::new(&p, BatchSpec::triplets(10, 2)).unwrap();
            (0..5).map(|_| s.next_batch(&p, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn sampler_visits_every_speaker_per_pass() {
        let p = pool(25, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = BalancedSampler::new(&p, BatchSpec::pairs(5, 2)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..5 {
            let b = s.next_batch(&p, &mut rng);
            assert_eq!(label_counts(&b).len(), 5);
            seen.extend(b.labels().iter().copied());
        }
        assert_eq!(seen.len(), 25);
    }

    #[test]
    fn sampler_keeps_speakers_distinct_across_pass_boundary() {
        let p = pool(7, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = BalancedSampler::new(&p, BatchSpec::pairs(5, 2)).unwrap();
        for _ in 0..40 {
            let b = s.next_batch(&p, &mut rng);
            let counts = label_counts(&b);
            assert_eq!(counts.len(), 5);
            assert!(counts.values().all(|&c| c == 2));
        }
    }

    fn labelled(labels: &[usize]) -> LabeledBatch {
        LabeledBatch::new(
            Array2::zeros((labels.len(), 1)),
            labels.iter().map(|&l| SpeakerId(l)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn pair_counts() {
        let labels: Vec<usize> = (0..20).flat_map(|k| [k; 3]).collect();
        let t = form_pairs(&labelled(&labels)).unwrap();
        assert_eq!((t.positives.len(), t.negatives.len()), (60, 1710));
        let t = form_pairs(&labelled(&[4, 4])).unwrap();
        assert_eq!((t.positives.len(), t.negatives.len()), (1, 0));
        let t = form_pairs(&labelled(&[4, 5])).unwrap();
        assert_eq!((t.positives.len(), t.negatives.len()), (0, 1));
        assert!(form_pairs(&labelled(&[1])).is_err());
    }

    #[test]
    fn triplet_counts() {
        let labels: Vec<usize> = (0..40).flat_map(|k| [k; 3]).collect();
        assert_eq!(form_triplets(&labelled(&labels)).unwrap().triplets.len(), 28080);
        let t = form_triplets(&labelled(&[0, 0, 1, 1])).unwrap();
        assert_eq!(t.triplets.len(), 8);
        assert!(form_triplets(&labelled(&[2, 2, 2])).unwrap().triplets.is_empty());
    }

    #[test]
    fn high_snr_barely_changes_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin() + 0.1).collect();
        let range = SnrRange::new(60.0, 60.0).unwrap();
        let (y, snr) = augment_chunk(&x, &range, &mut rng).unwrap();
        assert_eq!(snr, 60.0);
        let diff: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let rel = diff / x.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(rel < 0.005, "{rel}");
    }

    #[test]
    fn measured_snr_matches_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..16).map(|i| i as f64 - 3.5).collect();
        for _ in 0..200 {
            let (y, snr) = augment_chunk(&x, &SnrRange::default(), &mut rng).unwrap();
            assert!((10.0..=20.0).contains(&snr));
            let noise: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
            let measured = 10.0 * (mean_power(&x) / mean_power(&noise)).log10();
            assert!((measured - snr).abs() < 1e-9, "{measured} vs {snr}");
        }
    }

    #[test]
    fn augmentation_errors_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(augment_chunk(&[0.0, 0.0], &SnrRange::default(), &mut rng).is_err());
        assert!(SnrRange::new(20.0, 10.0).is_err());
        let a = augment_chunk(&[1.0, 2.0], &SnrRange::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = augment_chunk(&[1.0, 2.0], &SnrRange::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }
}
