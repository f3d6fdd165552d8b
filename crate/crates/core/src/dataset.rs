//! Synthetic speakers standing in for a real corpus.
//!
//! Each speaker owns a latent direction drawn uniformly on the unit sphere;
//! every chunk is that direction plus isotropic Gaussian noise of scale
//! `intra_speaker_spread`. Speakers are split into four disjoint partitions
//! (train, dev, cohort, test), and dev/test get verification trial lists.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::normalize;
use crate::error::{Error, Result};
use crate::sampling::{augment_chunk, SnrRange, SpeakerPool};
use crate::scoring::formats::{read_text, read_trials, write_text, write_trials};
use crate::scoring::Trial;
use crate::trainer::EvalSet;

pub const MANIFEST_FILE: &str = "manifest.toml";
pub const FEATURES_FILE: &str = "features.txt";
pub const DEV_TRIALS_FILE: &str = "dev_trials.txt";
pub const TEST_TRIALS_FILE: &str = "test_trials.txt";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetSpec {
    pub n_speakers_train: usize,
    pub n_speakers_dev: usize,
    pub n_speakers_cohort: usize,
    pub n_speakers_test: usize,
    pub files_per_speaker: usize,
    pub chunks_per_file: usize,
    pub feature_dim: usize,
    pub intra_speaker_spread: f64,
    /// Trials per dev/test speaker: half target, half non-target.
    pub trials_per_speaker: usize,
    /// Add noise at a random SNR to every generated chunk.
    pub augment: bool,
    pub snr_low_db: f64,
    pub snr_high_db: f64,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            n_speakers_train: 50,
            n_speakers_dev: 10,
            n_speakers_cohort: 20,
            n_speakers_test: 10,
            files_per_speaker: 10,
            chunks_per_file: 5,
            feature_dim: 32,
            intra_speaker_spread: 0.25,
            trials_per_speaker: 20,
            augment: false,
            snr_low_db: 10.0,
            snr_high_db: 20.0,
            seed: 0,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn n_speakers(&self) -> usize {
        self.n_speakers_train + self.n_speakers_dev + self.n_speakers_cohort + self.n_speakers_test
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_speakers_train", self.n_speakers_train),
            ("n_speakers_dev", self.n_speakers_dev),
            ("n_speakers_cohort", self.n_speakers_cohort),
            ("n_speakers_test", self.n_speakers_test),
            ("files_per_speaker", self.files_per_speaker),
            ("chunks_per_file", self.chunks_per_file),
            ("feature_dim", self.feature_dim),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::domain(format!("dataset {name} must be positive")));
        }
        if self.n_speakers_dev < 2 || self.n_speakers_test < 2 {
            return Err(Error::domain("dev and test partitions need >= 2 speakers for non-target trials"));
        }
        if self.files_per_speaker < 2 {
            return Err(Error::domain("files_per_speaker must be >= 2 to form target trials"));
        }
        if self.trials_per_speaker < 2 {
            return Err(Error::domain("trials_per_speaker must be >= 2"));
        }
        if !(self.intra_speaker_spread > 0.0 && self.intra_speaker_spread.is_finite()) {
            return Err(Error::domain(format!(
                "intra_speaker_spread must be > 0, got {}",
                self.intra_speaker_spread
            )));
        }
        SnrRange::new(self.snr_low_db, self.snr_high_db)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Train,
    Dev,
    Cohort,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 4] = [Partition::Train, Partition::Dev, Partition::Cohort, Partition::Test];
}

#[derive(Debug, Clone, PartialEq)]
pub struct FileRecord {
    pub id: String,
    /// One row per chunk.
    pub chunks: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerRecord {
    pub id: String,
    pub partition: Partition,
    pub files: Vec<FileRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticDatasetSpec,
    pub speakers: Vec<SpeakerRecord>,
    pub dev_trials: Vec<Trial>,
    pub test_trials: Vec<Trial>,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Dataset {
    /// One latent direction per speaker, train speakers first, then dev, cohort, test.
    pub fn draw_latents(spec: &SyntheticDatasetSpec) -> Result<Vec<Vec<f64>>> {
        spec.validate()?;
        let mut rng = rng_stream(spec.seed, 0);
        (0..spec.n_speakers())
            .map(|_| loop {
                let v: Vec<f64> = (0..spec.feature_dim).map(|_| rng.sample(StandardNormal)).collect();
                if let Ok(u) = normalize(&v) {
                    break Ok(u.into_inner());
                }
            })
            .collect()
    }

    pub fn generate(spec: &SyntheticDatasetSpec) -> Result<Self> {
        let latents = Dataset::draw_latents(spec)?;
        Dataset::from_latents(spec, &latents)
    }

    /// Builds chunks and trial lists around caller-provided latent directions.
    pub fn from_latents(spec: &SyntheticDatasetSpec, latents: &[Vec<f64>]) -> Result<Self> {
        spec.validate()?;
        if latents.len() != spec.n_speakers() || latents.iter().any(|l| l.len() != spec.feature_dim) {
            return Err(Error::domain("latent directions do not match the dataset spec"));
        }
        let snr = SnrRange::new(spec.snr_low_db, spec.snr_high_db)?;
        let mut rng = rng_stream(spec.seed, 1);
        let partition_of = |k: usize| {
            let mut bound = spec.n_speakers_train;
            if k < bound {
                return Partition::Train;
            }
            bound += spec.n_speakers_dev;
            if k < bound {
                return Partition::Dev;
            }
            bound += spec.n_speakers_cohort;
            if k < bound {
                Partition::Cohort
            } else {
                Partition::Test
            }
        };
        let mut speakers = Vec::with_capacity(latents.len());
        for (k, latent) in latents.iter().enumerate() {
            let id = format!("spk{k:04}");
            let mut files = Vec::with_capacity(spec.files_per_speaker);
            for f in 0..spec.files_per_speaker {
                let mut chunks = Array2::from_shape_fn((spec.chunks_per_file, spec.feature_dim), |(_, d)| {
                    latent[d] + spec.intra_speaker_spread * rng.sample::<f64, _>(StandardNormal)
                });
                if spec.augment {
                    for mut row in chunks.axis_iter_mut(Axis(0)) {
                        let (noisy, _) = augment_chunk(row.as_slice().expect("contiguous"), &snr, &mut rng)?;
                        row.assign(&ndarray::Array1::from(noisy));
                    }
                }
                files.push(FileRecord {
                    id: format!("{id}-f{f:02}"),
                    chunks,
                });
            }
            speakers.push(SpeakerRecord {
                id,
                partition: partition_of(k),
                files,
            });
        }
        let mut trial_rng = rng_stream(spec.seed, 2);
        let mut dataset = Dataset {
            spec: *spec,
            speakers,
            dev_trials: Vec::new(),
            test_trials: Vec::new(),
        };
        dataset.dev_trials = dataset.make_trials(Partition::Dev, &mut trial_rng);
        dataset.test_trials = dataset.make_trials(Partition::Test, &mut trial_rng);
        Ok(dataset)
    }

    /// All target pairs among each speaker's files (subsampled to half of
    /// `trials_per_speaker` when there are more), plus as many non-target pairs
    /// against random files of other speakers in the same partition.
    fn make_trials<R: Rng>(&self, partition: Partition, rng: &mut R) -> Vec<Trial> {
        let members: Vec<&SpeakerRecord> = self.speakers_in(partition).collect();
        let cap = (self.spec.trials_per_speaker / 2).max(1);
        let mut trials = Vec::new();
        for (s, speaker) in members.iter().enumerate() {
            let nf = speaker.files.len();
            let mut targets: Vec<(usize, usize)> = (0..nf).flat_map(|i| (i + 1..nf).map(move |j| (i, j))).collect();
            if targets.len() > cap {
                let mut keep = index::sample(rng, targets.len(), cap).into_vec();
                keep.sort_unstable();
                targets = keep.into_iter().map(|i| targets[i]).collect();
            }
            for &(i, j) in &targets {
                trials.push(Trial {
                    enroll: speaker.files[i].id.clone(),
                    test: speaker.files[j].id.clone(),
                    is_target: true,
                });
            }
            let mut seen = BTreeSet::new();
            let mut added = 0;
            let mut attempts = 0;
            while added < targets.len() {
                let e = rng.random_range(0..nf);
                let mut o = rng.random_range(0..members.len() - 1);
                if o >= s {
                    o += 1;
                }
                let other = members[o];
                let t = rng.random_range(0..other.files.len());
                attempts += 1;
                if !seen.insert((e, o, t)) && attempts < 100 * cap {
                    continue;
                }
                trials.push(Trial {
                    enroll: speaker.files[e].id.clone(),
                    test: other.files[t].id.clone(),
                    is_target: false,
                });
                added += 1;
            }
        }
        trials
    }

    pub fn speakers_in(&self, partition: Partition) -> impl Iterator<Item = &SpeakerRecord> {
        self.speakers.iter().filter(move |s| s.partition == partition)
    }

    pub fn files_in(&self, partition: Partition) -> impl Iterator<Item = &FileRecord> {
        self.speakers_in(partition).flat_map(|s| s.files.iter())
    }

    /// Training chunks grouped by speaker; the label of speaker `k` is its
    /// position among the train speakers.
    pub fn train_pool(&self) -> Result<SpeakerPool> {
        let chunks = self
            .speakers_in(Partition::Train)
            .map(|s| {
                let views: Vec<_> = s.files.iter().map(|f| f.chunks.view()).collect();
                ndarray::concatenate(Axis(0), &views).expect("uniform feature dimension")
            })
            .collect();
        SpeakerPool::new(chunks)
    }

    /// Chunk features of every file in `partition`, with the partition's
    /// trial list (empty for train and cohort).
    pub fn eval_set(&self, partition: Partition) -> EvalSet {
        let trials = match partition {
            Partition::Dev => self.dev_trials.clone(),
            Partition::Test => self.test_trials.clone(),
            Partition::Train | Partition::Cohort => Vec::new(),
        };
        EvalSet {
            files: self.files_in(partition).map(|f| (f.id.clone(), f.chunks.clone())).collect(),
            trials,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dataset: self.spec,
            speakers: self
                .speakers
                .iter()
                .map(|s| ManifestSpeaker {
                    id: s.id.clone(),
                    partition: s.partition,
                    files: s.files.iter().map(|f| f.id.clone()).collect(),
                })
                .collect(),
        };
        let toml = toml::to_string(&manifest).map_err(|e| Error::format("dataset manifest", e.to_string()))?;
        write_text(&dir.join(MANIFEST_FILE), &toml)?;
        let mut features = String::new();
        for file in self.speakers.iter().flat_map(|s| &s.files) {
            for (c, row) in file.chunks.axis_iter(Axis(0)).enumerate() {
                let _ = write!(features, "{} {c}", file.id);
                for v in row {
                    let _ = write!(features, " {v}");
                }
                features.push('\n');
            }
        }
        write_text(&dir.join(FEATURES_FILE), &features)?;
        write_trials(&dir.join(DEV_TRIALS_FILE), &self.dev_trials)?;
        write_trials(&dir.join(TEST_TRIALS_FILE), &self.test_trials)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = toml::from_str(&read_text(&dir.join(MANIFEST_FILE))?)
            .map_err(|e| Error::format("dataset manifest", e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(
                "dataset manifest",
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let spec = manifest.dataset;
        let mut rows: std::collections::HashMap<String, Vec<Vec<f64>>> = std::collections::HashMap::new();
        for (n, line) in read_text(&dir.join(FEATURES_FILE))?.lines().enumerate() {
            let bad = |m: &str| Error::format("features file", format!("line {}: {m}", n + 1));
            let mut fields = line.split_whitespace();
            let id = fields.next().ok_or_else(|| bad("empty line"))?;
            let chunk: usize = fields
                .next()
                .and_then(|c| c.parse().ok())
                .ok_or_else(|| bad("bad chunk index"))?;
            let values = fields
                .map(|v| v.parse::<f64>().map_err(|_| bad("bad value")))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != spec.feature_dim {
                return Err(bad("wrong feature dimension"));
            }
            let entry = rows.entry(id.to_string()).or_default();
            if chunk != entry.len() {
                return Err(bad("chunks out of order"));
            }
            entry.push(values);
        }
        let speakers = manifest
            .speakers
            .into_iter()
            .map(|s| {
                let files = s
                    .files
                    .into_iter()
                    .map(|id| {
                        let chunk_rows = rows
                            .remove(&id)
                            .ok_or_else(|| Error::format("features file", format!("no chunks for file {id}")))?;
                        let flat: Vec<f64> = chunk_rows.iter().flatten().copied().collect();
                        let chunks = Array2::from_shape_vec((chunk_rows.len(), spec.feature_dim), flat)
                            .map_err(|e| Error::format("features file", e.to_string()))?;
                        Ok(FileRecord { id, chunks })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(SpeakerRecord {
                    id: s.id,
                    partition: s.partition,
                    files,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            spec,
            speakers,
            dev_trials: read_trials(&dir.join(DEV_TRIALS_FILE))?,
            test_trials: read_trials(&dir.join(TEST_TRIALS_FILE))?,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dataset: SyntheticDatasetSpec,
    speakers: Vec<ManifestSpeaker>,
}

#[derive(Serialize, Deserialize)]
struct ManifestSpeaker {
    id: String,
    partition: Partition,
    files: Vec<String>,
}
